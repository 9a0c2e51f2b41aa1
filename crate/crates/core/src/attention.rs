//! Dual-stream attention with a shared LoRA bypass and adaptive mutual
//! guidance between the two modalities' pre-softmax maps.
//!
//! Both streams are projected by the same frozen `W_q, W_k, W_v`. Keys and
//! values additionally pass through one low-rank bypass (`H A B`) shared by
//! the two modalities. Each stream's unnormalized map is then pulled towards
//! the other one by a learnable scalar before the row softmax:
//!
//! ```text
//! attn_rgb = raw_rgb + w_x   * (raw_x   - raw_rgb)
//! attn_x   = raw_x   + w_rgb * (raw_rgb - raw_x)
//! ```
//!
//! Maps are laid out `heads x N x N`; the two scalars are shared by all heads
//! and positions of a layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{xavier_init, Rng};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

/// Denominator used for the dot-product scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `1 / sqrt(D / heads)`, the usual multi-head scaling.
    #[default]
    PerHead,
    /// `1 / sqrt(D)`, as the single-map formula is literally written.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub rank: usize,
    #[serde(default = "default_w_init")]
    pub w_init: f64,
    #[serde(default)]
    pub scale_mode: ScaleMode,
}

fn default_w_init() -> f64 {
    1.0
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, rank: usize) -> Self {
        Self {
            d_model,
            n_heads,
            rank,
            w_init: default_w_init(),
            scale_mode: ScaleMode::default(),
        }
    }

    /// ViT-Base geometry with rank-8 adaptation and cross-guidance init.
    pub fn vit_base() -> Self {
        Self::new(768, 12, 8)
    }

    pub fn with_w_init(mut self, w: f64) -> Self {
        self.w_init = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rank == 0 || self.rank >= self.d_model {
            return Err(Error::Config(format!(
                "LoRA rank must satisfy 1 <= r < d_model, got r={} with d_model={}",
                self.rank, self.d_model
            )));
        }
        if !self.w_init.is_finite() {
            return Err(Error::Config("w_init must be finite".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn scale(&self) -> f64 {
        let denom = match self.scale_mode {
            ScaleMode::PerHead => self.d_head(),
            ScaleMode::Model => self.d_model,
        };
        1.0 / (denom as f64).sqrt()
    }

    /// Learnable parameters of one layer: two LoRA pairs plus two scalars.
    pub fn trainable_param_count(&self) -> usize {
        2 * (self.d_model * self.rank + self.rank * self.d_model) + 2
    }

    pub fn frozen_param_count(&self) -> usize {
        3 * self.d_model * self.d_model
    }
}

/// Concatenated `[template; candidate]` tokens of both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStream<T: Scalar = f64> {
    pub h_rgb: Tensor<T>,
    pub h_x: Tensor<T>,
    pub n_z: usize,
    pub n_c: usize,
}

impl<T: Scalar> DualStream<T> {
    pub fn new(h_rgb: Tensor<T>, h_x: Tensor<T>, n_z: usize, n_c: usize) -> Result<Self> {
        if h_rgb.shape() != h_x.shape() {
            return Err(Error::dim("dual stream", h_rgb.shape(), h_x.shape()));
        }
        let (rows, _) = h_rgb.dims2()?;
        if rows != n_z + n_c {
            return Err(Error::shape(
                h_rgb.shape(),
                format!("rows must equal n_z + n_c = {}", n_z + n_c),
            ));
        }
        Ok(Self { h_rgb, h_x, n_z, n_c })
    }

    pub fn tokens(&self) -> usize {
        self.n_z + self.n_c
    }

    pub fn d_model(&self) -> usize {
        self.h_rgb.shape()[1]
    }
}

/// Frozen query/key/value projections, each `D x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenAttention<T: Scalar = f64> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

impl<T: Scalar> FrozenAttention<T> {
    pub fn random(rng: &mut Rng, d_model: usize) -> Result<Self> {
        Ok(Self {
            wq: xavier_init(rng, &[d_model, d_model])?,
            wk: xavier_init(rng, &[d_model, d_model])?,
            wv: xavier_init(rng, &[d_model, d_model])?,
        })
    }

    fn check(&self, d_model: usize) -> Result<()> {
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.shape() != [d_model, d_model] {
                return Err(Error::dim("frozen projection", w.shape(), &[d_model, d_model]));
            }
        }
        Ok(())
    }

    /// Plain multi-head self-attention of a single stream.
    pub fn forward_single(&self, h: &Tensor<T>, n_heads: usize, scale: f64) -> Result<SingleStreamPass<T>> {
        let q = h.matmul(&self.wq)?;
        let k = h.matmul(&self.wk)?;
        let v = h.matmul(&self.wv)?;
        let maps = head_maps(&q, &k, n_heads, T::from_f64_lossy(scale))?;
        let probs = maps.softmax(2)?;
        let out = attend(&probs, &v, n_heads)?;
        Ok(SingleStreamPass { maps, out })
    }

    pub fn entries(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}wq"), self.wq.clone()),
            (format!("{prefix}wk"), self.wk.clone()),
            (format!("{prefix}wv"), self.wv.clone()),
        ]
    }

    pub fn from_entries(entries: &mut BTreeMap<String, Tensor<T>>, prefix: &str) -> Result<Self> {
        use crate::archive::take_entry;
        Ok(Self {
            wq: take_entry(entries, &format!("{prefix}wq"))?,
            wk: take_entry(entries, &format!("{prefix}wk"))?,
            wv: take_entry(entries, &format!("{prefix}wv"))?,
        })
    }
}

/// Output of [`FrozenAttention::forward_single`].
#[derive(Debug, Clone)]
pub struct SingleStreamPass<T: Scalar> {
    /// Pre-softmax maps, `heads x N x N`.
    pub maps: Tensor<T>,
    pub out: Tensor<T>,
}

/// Names of the trainable tensors, in archive-key form.
pub const TRAINABLE_PARAMS: [&str; 6] = ["ak", "bk", "av", "bv", "w_x", "w_rgb"];

/// The trainable part of one layer: LoRA factors on `W_k`, `W_v` and the two
/// guidance scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar = f64> {
    pub ak: Tensor<T>,
    pub bk: Tensor<T>,
    pub av: Tensor<T>,
    pub bv: Tensor<T>,
    pub w_x: T,
    pub w_rgb: T,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A` Xavier, `B` zero: the bypass starts as an exact no-op.
    pub fn init(rng: &mut Rng, config: &AttentionConfig) -> Result<Self> {
        let (d, r) = (config.d_model, config.rank);
        let w = T::from_f64_lossy(config.w_init);
        Ok(Self {
            ak: xavier_init(rng, &[d, r])?,
            bk: Tensor::zeros(&[r, d])?,
            av: xavier_init(rng, &[d, r])?,
            bv: Tensor::zeros(&[r, d])?,
            w_x: w,
            w_rgb: w,
        })
    }

    /// Every factor Xavier-initialized, so all gradients are non-trivial.
    pub fn random(rng: &mut Rng, config: &AttentionConfig) -> Result<Self> {
        let (d, r) = (config.d_model, config.rank);
        let w = T::from_f64_lossy(config.w_init);
        Ok(Self {
            ak: xavier_init(rng, &[d, r])?,
            bk: xavier_init(rng, &[r, d])?,
            av: xavier_init(rng, &[d, r])?,
            bv: xavier_init(rng, &[r, d])?,
            w_x: w,
            w_rgb: w,
        })
    }

    fn check(&self, config: &AttentionConfig) -> Result<()> {
        let (d, r) = (config.d_model, config.rank);
        for (a, b) in [(&self.ak, &self.bk), (&self.av, &self.bv)] {
            if a.shape() != [d, r] {
                return Err(Error::dim("lora A", a.shape(), &[d, r]));
            }
            if b.shape() != [r, d] {
                return Err(Error::dim("lora B", b.shape(), &[r, d]));
            }
        }
        Ok(())
    }

    /// Parameter by archive name; scalars come back as one-element tensors.
    pub fn param(&self, name: &str) -> Result<Tensor<T>> {
        Ok(match name {
            "ak" => self.ak.clone(),
            "bk" => self.bk.clone(),
            "av" => self.av.clone(),
            "bv" => self.bv.clone(),
            "w_x" => Tensor::scalar(self.w_x),
            "w_rgb" => Tensor::scalar(self.w_rgb),
            other => return Err(Error::Config(format!("unknown attention parameter `{other}`"))),
        })
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let current = self.param(name)?;
        if current.shape() != value.shape() {
            return Err(Error::dim("set_param", current.shape(), value.shape()));
        }
        match name {
            "ak" => self.ak = value,
            "bk" => self.bk = value,
            "av" => self.av = value,
            "bv" => self.bv = value,
            "w_x" => self.w_x = value.item()?,
            _ => self.w_rgb = value.item()?,
        }
        Ok(())
    }

    pub fn entries(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        TRAINABLE_PARAMS
            .iter()
            .map(|n| (format!("{prefix}{n}"), self.param(n).expect("known name")))
            .collect()
    }

    pub fn from_entries(entries: &mut BTreeMap<String, Tensor<T>>, prefix: &str) -> Result<Self> {
        use crate::archive::take_entry;
        let mut take = |n: &str| take_entry(entries, &format!("{prefix}{n}"));
        Ok(Self {
            ak: take("ak")?,
            bk: take("bk")?,
            av: take("av")?,
            bv: take("bv")?,
            w_x: take("w_x")?.item()?,
            w_rgb: take("w_rgb")?.item()?,
        })
    }
}

/// Adaptive mutual guidance. Both outputs are computed from the original
/// inputs.
pub fn amg_align<T: Scalar>(
    w_x: T,
    w_rgb: T,
    raw_rgb: &Tensor<T>,
    raw_x: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let attn_rgb = raw_rgb.zip_with(raw_x, "amg_align", |own, other| guide(own, other, w_x))?;
    let attn_x = raw_x.zip_with(raw_rgb, "amg_align", |own, other| guide(own, other, w_rgb))?;
    Ok((attn_rgb, attn_x))
}

/// `own + w (other - own)` evaluated so that `w = 0`, `w = 1`, `w = 1/2` and
/// `own == other` are exact, and `w` in `[0, 1]` never leaves the interval
/// spanned by the inputs.
#[inline]
fn guide<T: Scalar>(own: T, other: T, w: T) -> T {
    if own == other {
        return own;
    }
    let v = (T::one() - w) * own + w * other;
    if w >= T::zero() && w <= T::one() {
        v.max(own.min(other)).min(own.max(other))
    } else {
        v
    }
}

/// Per-head scaled `Q K^T`, stacked into `heads x N x N`.
fn head_maps<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, n_heads: usize, scale: T) -> Result<Tensor<T>> {
    let (n, d) = q.dims2()?;
    let dh = d / n_heads;
    let mut data = Vec::with_capacity(n_heads * n * n);
    for h in 0..n_heads {
        let qh = q.narrow(1, h * dh, dh)?;
        let kh_t = k.narrow(1, h * dh, dh)?.transpose()?;
        data.extend(qh.matmul(&kh_t)?.into_data().into_iter().map(|v| v * scale));
    }
    Tensor::new(&[n_heads, n, n], data)
}

fn head<T: Scalar>(maps: &Tensor<T>, h: usize) -> Result<Tensor<T>> {
    let n = maps.shape()[1];
    maps.narrow(0, h, 1)?.reshape(&[n, n])
}

/// Per-head `P_h V_h`, heads re-concatenated along the channel axis.
fn attend<T: Scalar>(probs: &Tensor<T>, v: &Tensor<T>, n_heads: usize) -> Result<Tensor<T>> {
    let d = v.shape()[1];
    let dh = d / n_heads;
    let outs = (0..n_heads)
        .map(|h| head(probs, h)?.matmul(&v.narrow(1, h * dh, dh)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&outs.iter().collect::<Vec<_>>(), 1)
}

struct Projected<T: Scalar> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
}

struct PairPass<T: Scalar> {
    raw: [Tensor<T>; 2],
    aligned: [Tensor<T>; 2],
    probs: [Tensor<T>; 2],
    out: [Tensor<T>; 2],
}

fn run_pair<T: Scalar>(config: &AttentionConfig, w_x: T, w_rgb: T, streams: [&Projected<T>; 2]) -> Result<PairPass<T>> {
    let scale = T::from_f64_lossy(config.scale());
    let raw_rgb = head_maps(&streams[0].q, &streams[0].k, config.n_heads, scale)?;
    let raw_x = head_maps(&streams[1].q, &streams[1].k, config.n_heads, scale)?;
    let (al_rgb, al_x) = amg_align(w_x, w_rgb, &raw_rgb, &raw_x)?;
    let p_rgb = al_rgb.softmax(2)?;
    let p_x = al_x.softmax(2)?;
    let o_rgb = attend(&p_rgb, &streams[0].v, config.n_heads)?;
    let o_x = attend(&p_x, &streams[1].v, config.n_heads)?;
    Ok(PairPass {
        raw: [raw_rgb, raw_x],
        aligned: [al_rgb, al_x],
        probs: [p_rgb, p_x],
        out: [o_rgb, o_x],
    })
}

/// One dual-stream attention layer with the shared LoRA bypass and AMG.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedAttentionLayer<T: Scalar = f64> {
    config: AttentionConfig,
    pub frozen: FrozenAttention<T>,
    pub lora: LoraAdapter<T>,
}

/// Intermediates of one stream kept for the backward pass.
#[derive(Debug, Clone)]
struct StreamCache<T: Scalar> {
    h: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    u_k: Tensor<T>,
    u_v: Tensor<T>,
}

/// Everything [`AlignedAttentionLayer::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<T: Scalar = f64> {
    config: AttentionConfig,
    streams: [StreamCache<T>; 2],
    /// Pre-softmax maps before guidance, `[rgb, x]`.
    pub raw: [Tensor<T>; 2],
    /// Pre-softmax maps after guidance, `[rgb, x]`.
    pub aligned: [Tensor<T>; 2],
    /// Row-softmaxed aligned maps, `[rgb, x]`.
    pub probs: [Tensor<T>; 2],
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<T: Scalar = f64> {
    pub out_rgb: Tensor<T>,
    pub out_x: Tensor<T>,
    pub cache: AttentionCache<T>,
}

/// Gradients of the trainable parameters and of the input tokens. There are
/// no fields for the frozen projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T: Scalar = f64> {
    pub ak: Tensor<T>,
    pub bk: Tensor<T>,
    pub av: Tensor<T>,
    pub bv: Tensor<T>,
    pub w_x: T,
    pub w_rgb: T,
    pub h_rgb: Tensor<T>,
    pub h_x: Tensor<T>,
}

impl<T: Scalar> AttentionGrads<T> {
    /// Gradient of a trainable parameter by archive name.
    pub fn param(&self, name: &str) -> Result<Tensor<T>> {
        Ok(match name {
            "ak" => self.ak.clone(),
            "bk" => self.bk.clone(),
            "av" => self.av.clone(),
            "bv" => self.bv.clone(),
            "w_x" => Tensor::scalar(self.w_x),
            "w_rgb" => Tensor::scalar(self.w_rgb),
            other => return Err(Error::Config(format!("no gradient for `{other}`"))),
        })
    }

    pub fn names(&self) -> &'static [&'static str] {
        &TRAINABLE_PARAMS
    }
}

impl<T: Scalar> AlignedAttentionLayer<T> {
    pub fn new(config: AttentionConfig, frozen: FrozenAttention<T>, lora: LoraAdapter<T>) -> Result<Self> {
        config.validate()?;
        frozen.check(config.d_model)?;
        lora.check(&config)?;
        Ok(Self { config, frozen, lora })
    }

    /// Random frozen weights with a fresh (function-preserving) adapter.
    pub fn init(config: AttentionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let frozen = FrozenAttention::random(rng, config.d_model)?;
        let lora = LoraAdapter::init(rng, &config)?;
        Self::new(config, frozen, lora)
    }

    /// Random frozen weights and a fully random adapter.
    pub fn random(config: AttentionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let frozen = FrozenAttention::random(rng, config.d_model)?;
        let lora = LoraAdapter::random(rng, &config)?;
        Self::new(config, frozen, lora)
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn trainable_param_count(&self) -> usize {
        self.config.trainable_param_count()
    }

    fn check_stream(&self, stream: &DualStream<T>) -> Result<()> {
        if stream.d_model() != self.config.d_model {
            return Err(Error::dim(
                "attention input",
                stream.h_rgb.shape(),
                &[stream.tokens(), self.config.d_model],
            ));
        }
        Ok(())
    }

    fn project(&self, h: &Tensor<T>) -> Result<(Projected<T>, Tensor<T>, Tensor<T>)> {
        let q = h.matmul(&self.frozen.wq)?;
        let u_k = h.matmul(&self.lora.ak)?;
        let k = h.matmul(&self.frozen.wk)?.add(&u_k.matmul(&self.lora.bk)?)?;
        let u_v = h.matmul(&self.lora.av)?;
        let v = h.matmul(&self.frozen.wv)?.add(&u_v.matmul(&self.lora.bv)?)?;
        Ok((Projected { q, k, v }, u_k, u_v))
    }

    /// Unnormalized per-head maps of both streams, before guidance.
    pub fn raw_attention_maps(&self, stream: &DualStream<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_stream(stream)?;
        let scale = T::from_f64_lossy(self.config.scale());
        let (p_rgb, _, _) = self.project(&stream.h_rgb)?;
        let (p_x, _, _) = self.project(&stream.h_x)?;
        Ok((
            head_maps(&p_rgb.q, &p_rgb.k, self.config.n_heads, scale)?,
            head_maps(&p_x.q, &p_x.k, self.config.n_heads, scale)?,
        ))
    }

    pub fn amg_align(&self, raw_rgb: &Tensor<T>, raw_x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        amg_align(self.lora.w_x, self.lora.w_rgb, raw_rgb, raw_x)
    }

    pub fn forward(&self, stream: &DualStream<T>) -> Result<AttentionOutput<T>> {
        self.check_stream(stream)?;
        let (p_rgb, uk_rgb, uv_rgb) = self.project(&stream.h_rgb)?;
        let (p_x, uk_x, uv_x) = self.project(&stream.h_x)?;
        let pass = run_pair(&self.config, self.lora.w_x, self.lora.w_rgb, [&p_rgb, &p_x])?;
        let PairPass {
            raw,
            aligned,
            probs,
            out: [out_rgb, out_x],
        } = pass;
        let cache = |h: &Tensor<T>, p: Projected<T>, u_k, u_v| StreamCache {
            h: h.clone(),
            q: p.q,
            k: p.k,
            v: p.v,
            u_k,
            u_v,
        };
        Ok(AttentionOutput {
            out_rgb,
            out_x,
            cache: AttentionCache {
                config: self.config.clone(),
                streams: [
                    cache(&stream.h_rgb, p_rgb, uk_rgb, uv_rgb),
                    cache(&stream.h_x, p_x, uk_x, uv_x),
                ],
                raw,
                aligned,
                probs,
            },
        })
    }

    /// Exact gradients of the forward map given upstream output gradients.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        grad_rgb: &Tensor<T>,
        grad_x: &Tensor<T>,
    ) -> Result<AttentionGrads<T>> {
        if cache.config != self.config {
            return Err(Error::State("attention cache was produced by a different layer config".into()));
        }
        let out_shape = cache.streams[0].h.shape();
        for g in [grad_rgb, grad_x] {
            if g.shape() != out_shape {
                return Err(Error::dim("attention backward", g.shape(), out_shape));
            }
        }
        let heads = self.config.n_heads;
        let dh = self.config.d_head();
        let scale = T::from_f64_lossy(self.config.scale());
        let (w_x, w_rgb) = (self.lora.w_x, self.lora.w_rgb);

        // d(loss)/d(aligned map) and d(loss)/dV per stream.
        let mut d_aligned = Vec::with_capacity(2);
        let mut d_v = Vec::with_capacity(2);
        for (s, g) in [grad_rgb, grad_x].into_iter().enumerate() {
            let probs = &cache.probs[s];
            let v = &cache.streams[s].v;
            let mut d_map = Vec::with_capacity(probs.len());
            let mut dv_heads = Vec::with_capacity(heads);
            for h in 0..heads {
                let p = head(probs, h)?;
                let g_h = g.narrow(1, h * dh, dh)?;
                let d_p = g_h.matmul(&v.narrow(1, h * dh, dh)?.transpose()?)?;
                dv_heads.push(p.transpose()?.matmul(&g_h)?);
                d_map.extend(softmax_rows_backward(&p, &d_p)?.into_data());
            }
            d_aligned.push(Tensor::new(probs.shape(), d_map)?);
            d_v.push(Tensor::concat(&dv_heads.iter().collect::<Vec<_>>(), 1)?);
        }

        let one = T::one();
        let [raw_rgb, raw_x] = &cache.raw;
        let grad_w_x = d_aligned[0].dot(&raw_x.sub(raw_rgb)?)?;
        let grad_w_rgb = d_aligned[1].dot(&raw_rgb.sub(raw_x)?)?;
        let d_raw = [
            d_aligned[0].scale(one - w_x).add(&d_aligned[1].scale(w_rgb))?,
            d_aligned[0].scale(w_x).add(&d_aligned[1].scale(one - w_rgb))?,
        ];

        let (d, r) = (self.config.d_model, self.config.rank);
        let mut g_ak = Tensor::zeros(&[d, r])?;
        let mut g_bk = Tensor::zeros(&[r, d])?;
        let mut g_av = Tensor::zeros(&[d, r])?;
        let mut g_bv = Tensor::zeros(&[r, d])?;
        let mut d_h = Vec::with_capacity(2);
        for s in 0..2 {
            let c = &cache.streams[s];
            let mut dq_heads = Vec::with_capacity(heads);
            let mut dk_heads = Vec::with_capacity(heads);
            for h in 0..heads {
                let dm = head(&d_raw[s], h)?.scale(scale);
                dq_heads.push(dm.matmul(&c.k.narrow(1, h * dh, dh)?)?);
                dk_heads.push(dm.transpose()?.matmul(&c.q.narrow(1, h * dh, dh)?)?);
            }
            let d_q = Tensor::concat(&dq_heads.iter().collect::<Vec<_>>(), 1)?;
            let d_k = Tensor::concat(&dk_heads.iter().collect::<Vec<_>>(), 1)?;
            let h_t = c.h.transpose()?;

            let d_uk = d_k.matmul(&self.lora.bk.transpose()?)?;
            g_bk = g_bk.add(&c.u_k.transpose()?.matmul(&d_k)?)?;
            g_ak = g_ak.add(&h_t.matmul(&d_uk)?)?;
            let d_uv = d_v[s].matmul(&self.lora.bv.transpose()?)?;
            g_bv = g_bv.add(&c.u_v.transpose()?.matmul(&d_v[s])?)?;
            g_av = g_av.add(&h_t.matmul(&d_uv)?)?;

            let dh_s = d_q
                .matmul(&self.frozen.wq.transpose()?)?
                .add(&d_k.matmul(&self.frozen.wk.transpose()?)?)?
                .add(&d_uk.matmul(&self.lora.ak.transpose()?)?)?
                .add(&d_v[s].matmul(&self.frozen.wv.transpose()?)?)?
                .add(&d_uv.matmul(&self.lora.av.transpose()?)?)?;
            d_h.push(dh_s);
        }
        let h_x = d_h.pop().expect("two streams");
        let h_rgb = d_h.pop().expect("two streams");
        Ok(AttentionGrads {
            ak: g_ak,
            bk: g_bk,
            av: g_av,
            bv: g_bv,
            w_x: grad_w_x,
            w_rgb: grad_w_rgb,
            h_rgb,
            h_x,
        })
    }

    /// Folds the LoRA factors into the frozen weights.
    pub fn merge(&self) -> Result<MergedAttentionLayer<T>> {
        Ok(MergedAttentionLayer {
            config: self.config.clone(),
            wq: self.frozen.wq.clone(),
            wk: self.frozen.wk.add(&self.lora.ak.matmul(&self.lora.bk)?)?,
            wv: self.frozen.wv.add(&self.lora.av.matmul(&self.lora.bv)?)?,
            w_x: self.lora.w_x,
            w_rgb: self.lora.w_rgb,
        })
    }
}

/// Row-wise softmax Jacobian-vector product: `P * (dP - rowsum(dP * P))`.
pub(crate) fn softmax_rows_backward<T: Scalar>(p: &Tensor<T>, d_p: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = p.dims2()?;
    if d_p.shape() != p.shape() {
        return Err(Error::dim("softmax backward", d_p.shape(), p.shape()));
    }
    let mut out = Vec::with_capacity(n * m);
    for (pr, dr) in p.data().chunks_exact(m).zip(d_p.data().chunks_exact(m)) {
        let inner = pr.iter().zip(dr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        out.extend(pr.iter().zip(dr).map(|(&a, &b)| a * (b - inner)));
    }
    Tensor::new(&[n, m], out)
}

/// Inference form of [`AlignedAttentionLayer`] with `W_k`, `W_v` absorbing the
/// low-rank updates. Only the two guidance scalars remain learnable.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedAttentionLayer<T: Scalar = f64> {
    config: AttentionConfig,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub w_x: T,
    pub w_rgb: T,
}

impl<T: Scalar> MergedAttentionLayer<T> {
    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn lora_param_count(&self) -> usize {
        0
    }

    pub fn learnable_param_count(&self) -> usize {
        2
    }

    pub fn frozen_param_count(&self) -> usize {
        self.wq.len() + self.wk.len() + self.wv.len()
    }

    pub fn forward(&self, stream: &DualStream<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if stream.d_model() != self.config.d_model {
            return Err(Error::dim("merged attention input", stream.h_rgb.shape(), self.wq.shape()));
        }
        let project = |h: &Tensor<T>| -> Result<Projected<T>> {
            Ok(Projected {
                q: h.matmul(&self.wq)?,
                k: h.matmul(&self.wk)?,
                v: h.matmul(&self.wv)?,
            })
        };
        let (p_rgb, p_x) = (project(&stream.h_rgb)?, project(&stream.h_x)?);
        let [o_rgb, o_x] = run_pair(&self.config, self.w_x, self.w_rgb, [&p_rgb, &p_x])?.out;
        Ok((o_rgb, o_x))
    }
}
