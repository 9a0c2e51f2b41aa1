//! Hierarchical mixture-of-experts token mixer.
//!
//! Forward pipeline for `N` input tokens of width `D`, `e` experts with `h`
//! heads each and expert rank `r`:
//!
//! 1. `x_pre = pre(x_in)`, a `D -> r -> D` low-rank projection.
//! 2. Split every token into `h` contiguous sub-tokens: `(N*h) x (D/h)`.
//! 3. `logits = x_split * phi`, `(N*h) x (e*h)`. A softmax over the sub-token
//!    axis gives column-stochastic mixing weights; `x_mix = gate^T x_split`.
//! 4. Head `(i, j)` goes through expert `i`'s low-rank map. The `h` heads of an
//!    expert are concatenated back to width `D` and passed through `post`,
//!    giving `y_expert`, `e x D`.
//! 5. The same logits are pooled over `h x h` blocks into an `N x e` token to
//!    expert affinity, row-softmaxed, and `y_out = affinity * y_expert`.
//!
//! Every output token is a convex combination of the `e` expert tokens and
//! every expert token sees all input sub-tokens, so the mixer has a global
//! receptive field at a cost linear in `N`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::softmax_rows_backward;
use crate::error::{Error, Result};
use crate::rng::{xavier_init, Rng};
use crate::tensor::{Scalar, Tensor};

/// How an `h x h` block of logits is reduced to one token-expert affinity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchAgg {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmoeConfig {
    pub d_model: usize,
    pub heads_per_expert: usize,
    pub n_experts: usize,
    pub expert_rank: usize,
    #[serde(default)]
    pub patch_agg: PatchAgg,
}

impl HmoeConfig {
    pub fn new(d_model: usize, heads_per_expert: usize, n_experts: usize, expert_rank: usize) -> Self {
        Self {
            d_model,
            heads_per_expert,
            n_experts,
            expert_rank,
            patch_agg: PatchAgg::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, e, r) = (self.d_model, self.heads_per_expert, self.n_experts, self.expert_rank);
        if d == 0 || h == 0 || e == 0 || r == 0 {
            return Err(Error::Config("HMoE dimensions must be positive".into()));
        }
        if d % h != 0 {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by heads_per_expert {h}"
            )));
        }
        if r >= d / h {
            return Err(Error::Config(format!(
                "expert rank {r} must be below the sub-token width {}",
                d / h
            )));
        }
        Ok(())
    }

    pub fn sub_dim(&self) -> usize {
        self.d_model / self.heads_per_expert
    }

    pub fn total_heads(&self) -> usize {
        self.n_experts * self.heads_per_expert
    }

    pub fn gate_param_count(&self) -> usize {
        self.sub_dim() * self.total_heads()
    }

    pub fn expert_param_count(&self) -> usize {
        self.n_experts * 2 * self.sub_dim() * self.expert_rank
    }

    pub fn projection_param_count(&self) -> usize {
        2 * 2 * self.d_model * self.expert_rank
    }

    /// Learnable parameters of one block: gate, experts, pre and post pairs.
    pub fn param_count(&self) -> usize {
        self.gate_param_count() + self.expert_param_count() + self.projection_param_count()
    }

    /// Multiply-accumulates of one forward over `n_tokens` tokens.
    ///
    /// Matrix products count one MAC per multiply-add; each softmax element
    /// and each pooled logit counts one.
    pub fn mac_count(&self, n_tokens: usize) -> u64 {
        let (n, d, e, h, r) = (
            n_tokens as u64,
            self.d_model as u64,
            self.n_experts as u64,
            self.heads_per_expert as u64,
            self.expert_rank as u64,
        );
        let pre = 2 * n * d * r;
        let logits = n * d * e * h;
        let gate_softmax = n * h * e * h;
        let mixing = n * d * e * h;
        let experts = 2 * e * d * r;
        let post = 2 * e * d * r;
        let patchify = n * e * h * h;
        let affinity_softmax = n * e;
        let combine = n * e * d;
        pre + logits + gate_softmax + mixing + experts + post + patchify + affinity_softmax + combine
    }
}

/// `x -> (x a) b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank<T: Scalar = f64> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LowRank<T> {
    fn xavier(rng: &mut Rng, d_in: usize, r: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            a: xavier_init(rng, &[d_in, r])?,
            b: xavier_init(rng, &[r, d_out])?,
        })
    }

    fn zeros(d_in: usize, r: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            a: Tensor::zeros(&[d_in, r])?,
            b: Tensor::zeros(&[r, d_out])?,
        })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.a)?.matmul(&self.b)
    }

    fn check(&self, name: &str, d_in: usize, r: usize, d_out: usize) -> Result<()> {
        if self.a.shape() != [d_in, r] || self.b.shape() != [r, d_out] {
            return Err(Error::Config(format!(
                "{name} factors have shapes {:?}, {:?}; expected [{d_in}, {r}], [{r}, {d_out}]",
                self.a.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmoeLayer<T: Scalar = f64> {
    config: HmoeConfig,
    /// Gating matrix, `(D/h) x (e*h)`.
    pub phi: Tensor<T>,
    pub experts: Vec<LowRank<T>>,
    pub pre: LowRank<T>,
    pub post: LowRank<T>,
}

/// Intermediates of [`HmoeLayer::forward`].
#[derive(Debug, Clone)]
pub struct HmoeCache<T: Scalar = f64> {
    config: HmoeConfig,
    x_in: Tensor<T>,
    u_pre: Tensor<T>,
    pub x_split: Tensor<T>,
    pub logits: Tensor<T>,
    /// Column-stochastic mixing weights, `(N*h) x (e*h)`.
    pub gate: Tensor<T>,
    pub x_mix: Tensor<T>,
    expert_hidden: Vec<Tensor<T>>,
    y_cat: Tensor<T>,
    u_post: Tensor<T>,
    pub y_expert: Tensor<T>,
    /// Row-stochastic token-to-expert weights, `N x e`.
    pub affinity: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct HmoeOutput<T: Scalar = f64> {
    pub y_out: Tensor<T>,
    pub cache: HmoeCache<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmoeGrads<T: Scalar = f64> {
    pub phi: Tensor<T>,
    pub experts: Vec<LowRank<T>>,
    pub pre: LowRank<T>,
    pub post: LowRank<T>,
    pub x_in: Tensor<T>,
}

impl<T: Scalar> HmoeGrads<T> {
    pub fn param(&self, name: &str) -> Result<Tensor<T>> {
        lookup(name, &self.phi, &self.experts, &self.pre, &self.post).cloned()
    }
}

/// Archive names of every learnable tensor for `n_experts` experts.
pub fn param_names(n_experts: usize) -> Vec<String> {
    let mut names = vec!["phi".to_string()];
    for i in 0..n_experts {
        names.push(format!("expert{i}.a"));
        names.push(format!("expert{i}.b"));
    }
    names.extend(["pre.a", "pre.b", "post.a", "post.b"].map(String::from));
    names
}

fn lookup<'a, T: Scalar>(
    name: &str,
    phi: &'a Tensor<T>,
    experts: &'a [LowRank<T>],
    pre: &'a LowRank<T>,
    post: &'a LowRank<T>,
) -> Result<&'a Tensor<T>> {
    let unknown = || Error::Config(format!("unknown HMoE parameter `{name}`"));
    match name {
        "phi" => Ok(phi),
        "pre.a" => Ok(&pre.a),
        "pre.b" => Ok(&pre.b),
        "post.a" => Ok(&post.a),
        "post.b" => Ok(&post.b),
        _ => {
            let rest = name.strip_prefix("expert").ok_or_else(unknown)?;
            let (idx, factor) = rest.split_once('.').ok_or_else(unknown)?;
            let expert = idx
                .parse::<usize>()
                .ok()
                .and_then(|i| experts.get(i))
                .ok_or_else(unknown)?;
            match factor {
                "a" => Ok(&expert.a),
                "b" => Ok(&expert.b),
                _ => Err(unknown()),
            }
        }
    }
}

impl<T: Scalar> HmoeLayer<T> {
    pub fn new(
        config: HmoeConfig,
        phi: Tensor<T>,
        experts: Vec<LowRank<T>>,
        pre: LowRank<T>,
        post: LowRank<T>,
    ) -> Result<Self> {
        config.validate()?;
        let (d, s, r) = (config.d_model, config.sub_dim(), config.expert_rank);
        if phi.shape() != [s, config.total_heads()] {
            return Err(Error::dim("phi", phi.shape(), &[s, config.total_heads()]));
        }
        if experts.len() != config.n_experts {
            return Err(Error::Config(format!(
                "expected {} experts, got {}",
                config.n_experts,
                experts.len()
            )));
        }
        for (i, ex) in experts.iter().enumerate() {
            ex.check(&format!("expert{i}"), s, r, s)?;
        }
        pre.check("pre", d, r, d)?;
        post.check("post", d, r, d)?;
        let layer = Self {
            config,
            phi,
            experts,
            pre,
            post,
        };
        if !layer.all_finite() {
            return Err(Error::Numeric("HMoE weights must be finite".into()));
        }
        Ok(layer)
    }

    /// Xavier everywhere except the second post-projection factor, which is
    /// zero so the block initially outputs exactly zero.
    pub fn init(config: HmoeConfig, rng: &mut Rng) -> Result<Self> {
        let mut layer = Self::random(config, rng)?;
        layer.post.b = Tensor::zeros(layer.post.b.shape())?;
        Ok(layer)
    }

    /// Xavier initialization of every factor.
    pub fn random(config: HmoeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, s, r) = (config.d_model, config.sub_dim(), config.expert_rank);
        let phi = xavier_init(rng, &[s, config.total_heads()])?;
        let experts = (0..config.n_experts)
            .map(|_| LowRank::xavier(rng, s, r, s))
            .collect::<Result<Vec<_>>>()?;
        let pre = LowRank::xavier(rng, d, r, d)?;
        let post = LowRank::xavier(rng, d, r, d)?;
        Self::new(config, phi, experts, pre, post)
    }

    pub fn zeros(config: HmoeConfig) -> Result<Self> {
        config.validate()?;
        let (d, s, r) = (config.d_model, config.sub_dim(), config.expert_rank);
        let experts = (0..config.n_experts)
            .map(|_| LowRank::zeros(s, r, s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            config.clone(),
            Tensor::zeros(&[s, config.total_heads()])?,
            experts,
            LowRank::zeros(d, r, d)?,
            LowRank::zeros(d, r, d)?,
        )
    }

    pub fn config(&self) -> &HmoeConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    fn all_finite(&self) -> bool {
        self.phi.all_finite()
            && self.experts.iter().all(|e| e.a.all_finite() && e.b.all_finite())
            && [&self.pre, &self.post].iter().all(|p| p.a.all_finite() && p.b.all_finite())
    }

    pub fn param(&self, name: &str) -> Result<Tensor<T>> {
        lookup(name, &self.phi, &self.experts, &self.pre, &self.post).cloned()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let current = self.param(name)?;
        if current.shape() != value.shape() {
            return Err(Error::dim("set_param", current.shape(), value.shape()));
        }
        let slot = match name {
            "phi" => &mut self.phi,
            "pre.a" => &mut self.pre.a,
            "pre.b" => &mut self.pre.b,
            "post.a" => &mut self.post.a,
            "post.b" => &mut self.post.b,
            _ => {
                let (idx, factor) = name["expert".len()..].split_once('.').expect("validated by param()");
                let ex = &mut self.experts[idx.parse::<usize>().expect("validated by param()")];
                if factor == "a" {
                    &mut ex.a
                } else {
                    &mut ex.b
                }
            }
        };
        *slot = value;
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        param_names(self.config.n_experts)
    }

    pub fn entries(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.param_names()
            .into_iter()
            .map(|n| {
                let t = self.param(&n).expect("known name");
                (format!("{prefix}{n}"), t)
            })
            .collect()
    }

    pub fn from_entries(config: HmoeConfig, entries: &mut BTreeMap<String, Tensor<T>>, prefix: &str) -> Result<Self> {
        let mut layer = Self::zeros(config)?;
        for name in layer.param_names() {
            let t = crate::archive::take_entry(entries, &format!("{prefix}{name}"))?;
            layer.set_param(&name, t)?;
        }
        if !layer.all_finite() {
            return Err(Error::Numeric("HMoE weights must be finite".into()));
        }
        Ok(layer)
    }

    /// Contiguous channel split: sub-token `i*h + j` is chunk `j` of token `i`.
    pub fn split_subtokens(&self, x_pre: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = x_pre.dims2()?;
        if d != self.config.d_model {
            return Err(Error::dim("split_subtokens", x_pre.shape(), &[n, self.config.d_model]));
        }
        let h = self.config.heads_per_expert;
        x_pre.reshape(&[n * h, d / h])
    }

    pub fn unsplit_subtokens(&self, x_split: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, s) = x_split.dims2()?;
        let h = self.config.heads_per_expert;
        if s != self.config.sub_dim() || rows % h != 0 {
            return Err(Error::dim("unsplit_subtokens", x_split.shape(), &[rows, self.config.sub_dim()]));
        }
        x_split.reshape(&[rows / h, self.config.d_model])
    }

    /// Sub-token mixing into head-level inputs. Returns `(x_mix, logits)`.
    pub fn mix_subtokens(&self, x_split: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (x_mix, logits, _) = self.mix_with_gate(x_split)?;
        Ok((x_mix, logits))
    }

    fn mix_with_gate(&self, x_split: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (_, s) = x_split.dims2()?;
        if s != self.config.sub_dim() {
            return Err(Error::dim("mix_subtokens", x_split.shape(), self.phi.shape()));
        }
        let logits = x_split.matmul(&self.phi)?;
        let gate = logits.softmax(0)?;
        let x_mix = gate.transpose()?.matmul(x_split)?;
        Ok((x_mix, logits, gate))
    }

    /// Expert transform of every head, head merge and post-projection.
    pub fn expert_transform(&self, x_mix: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.expert_transform_cached(x_mix)?.3)
    }

    #[allow(clippy::type_complexity)]
    fn expert_transform_cached(&self, x_mix: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (rows, s) = x_mix.dims2()?;
        let (e, h) = (self.config.n_experts, self.config.heads_per_expert);
        if rows != e * h || s != self.config.sub_dim() {
            return Err(Error::dim("expert_transform", x_mix.shape(), &[e * h, self.config.sub_dim()]));
        }
        let mut hidden = Vec::with_capacity(e);
        let mut heads_out = Vec::with_capacity(e);
        for (i, expert) in self.experts.iter().enumerate() {
            let z = x_mix.narrow(0, i * h, h)?.matmul(&expert.a)?;
            heads_out.push(z.matmul(&expert.b)?);
            hidden.push(z);
        }
        let y_head = Tensor::concat(&heads_out.iter().collect::<Vec<_>>(), 0)?;
        // Consecutive head rows of one expert concatenate channel-wise.
        let y_cat = y_head.reshape(&[e, self.config.d_model])?;
        let u_post = y_cat.matmul(&self.post.a)?;
        let y_expert = u_post.matmul(&self.post.b)?;
        Ok((hidden, y_cat, u_post, y_expert))
    }

    /// `h x h` block pooling of the logits followed by a softmax over experts.
    pub fn token_affinity(&self, logits: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, cols) = logits.dims2()?;
        let h = self.config.heads_per_expert;
        if rows % h != 0 || cols != self.config.total_heads() {
            return Err(Error::Config(format!(
                "logits {:?} cannot be tiled into {h}x{h} blocks over {} experts",
                logits.shape(),
                self.config.n_experts
            )));
        }
        let (n, e) = (rows / h, cols / h);
        let data = logits.data();
        let mut pooled = vec![T::zero(); n * e];
        for (i, row) in data.chunks_exact(cols).enumerate() {
            let token = i / h;
            for (c, &v) in row.iter().enumerate() {
                let slot = &mut pooled[token * e + c / h];
                *slot = *slot + v;
            }
        }
        let mut pooled = Tensor::new(&[n, e], pooled)?;
        if self.config.patch_agg == PatchAgg::Mean {
            pooled = pooled.scale(T::from_f64_lossy(1.0 / (h * h) as f64));
        }
        pooled.softmax(1)
    }

    pub fn forward(&self, x_in: &Tensor<T>) -> Result<HmoeOutput<T>> {
        let (_, d) = x_in.dims2()?;
        if d != self.config.d_model {
            return Err(Error::dim("hmoe input", x_in.shape(), &[x_in.shape()[0], self.config.d_model]));
        }
        let u_pre = x_in.matmul(&self.pre.a)?;
        let x_pre = u_pre.matmul(&self.pre.b)?;
        let x_split = self.split_subtokens(&x_pre)?;
        let (x_mix, logits, gate) = self.mix_with_gate(&x_split)?;
        let (expert_hidden, y_cat, u_post, y_expert) = self.expert_transform_cached(&x_mix)?;
        let affinity = self.token_affinity(&logits)?;
        let y_out = affinity.matmul(&y_expert)?;
        Ok(HmoeOutput {
            y_out,
            cache: HmoeCache {
                config: self.config.clone(),
                x_in: x_in.clone(),
                u_pre,
                x_split,
                logits,
                gate,
                x_mix,
                expert_hidden,
                y_cat,
                u_post,
                y_expert,
                affinity,
            },
        })
    }

    pub fn backward(&self, cache: &HmoeCache<T>, grad_y: &Tensor<T>) -> Result<HmoeGrads<T>> {
        if cache.config != self.config {
            return Err(Error::State("HMoE cache was produced by a different layer config".into()));
        }
        if grad_y.shape() != cache.x_in.shape() {
            return Err(Error::dim("hmoe backward", grad_y.shape(), cache.x_in.shape()));
        }
        let (e, h) = (self.config.n_experts, self.config.heads_per_expert);

        // y_out = affinity * y_expert
        let d_aff = grad_y.matmul(&cache.y_expert.transpose()?)?;
        let d_yexp = cache.affinity.transpose()?.matmul(grad_y)?;

        // Row softmax, then un-pooling back onto the logits.
        let mut d_pooled = softmax_rows_backward(&cache.affinity, &d_aff)?;
        if self.config.patch_agg == PatchAgg::Mean {
            d_pooled = d_pooled.scale(T::from_f64_lossy(1.0 / (h * h) as f64));
        }
        let (rows, cols) = cache.logits.dims2()?;
        let d_logits_aff = Tensor::from_fn(&[rows, cols], |idx| d_pooled.at(idx[0] / h, idx[1] / h))?;

        // post projection
        let post = LowRank {
            a: cache.y_cat.transpose()?.matmul(&d_yexp.matmul(&self.post.b.transpose()?)?)?,
            b: cache.u_post.transpose()?.matmul(&d_yexp)?,
        };
        let d_ycat = d_yexp.matmul(&self.post.b.transpose()?)?.matmul(&self.post.a.transpose()?)?;
        let d_yhead = d_ycat.reshape(&[e * h, self.config.sub_dim()])?;

        // experts
        let mut experts = Vec::with_capacity(e);
        let mut d_mix_parts = Vec::with_capacity(e);
        for (i, expert) in self.experts.iter().enumerate() {
            let g = d_yhead.narrow(0, i * h, h)?;
            let x = cache.x_mix.narrow(0, i * h, h)?;
            let d_z = g.matmul(&expert.b.transpose()?)?;
            experts.push(LowRank {
                a: x.transpose()?.matmul(&d_z)?,
                b: cache.expert_hidden[i].transpose()?.matmul(&g)?,
            });
            d_mix_parts.push(d_z.matmul(&expert.a.transpose()?)?);
        }
        let d_mix = Tensor::concat(&d_mix_parts.iter().collect::<Vec<_>>(), 0)?;

        // x_mix = gate^T x_split
        let d_gate = cache.x_split.matmul(&d_mix.transpose()?)?;
        let mut d_split = cache.gate.matmul(&d_mix)?;
        // Column softmax: transpose into rows and reuse the row Jacobian.
        let d_logits_mix =
            softmax_rows_backward(&cache.gate.transpose()?, &d_gate.transpose()?)?.transpose()?;
        let d_logits = d_logits_mix.add(&d_logits_aff)?;

        let phi = cache.x_split.transpose()?.matmul(&d_logits)?;
        d_split = d_split.add(&d_logits.matmul(&self.phi.transpose()?)?)?;
        let d_pre_out = self.unsplit_subtokens(&d_split)?;

        let d_u_pre = d_pre_out.matmul(&self.pre.b.transpose()?)?;
        let pre = LowRank {
            a: cache.x_in.transpose()?.matmul(&d_u_pre)?,
            b: cache.u_pre.transpose()?.matmul(&d_pre_out)?,
        };
        let x_in = d_u_pre.matmul(&self.pre.a.transpose()?)?;
        Ok(HmoeGrads {
            phi,
            experts,
            pre,
            post,
            x_in,
        })
    }
}
