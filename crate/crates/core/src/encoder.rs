//! Two-stream ViT-style encoder with fusion modules inserted every few layers.
//!
//! Both modality streams run through the same stack of frozen pre-norm blocks.
//! An inserted block replaces its plain attention with the aligned dual-stream
//! attention (same frozen weights plus the shared LoRA bypass) and adds two
//! HMoE mixers, one after the attention residual and one after the FFN
//! residual. Each mixer runs on `[z_rgb; z_x]` and, separately, on
//! `[c_rgb; c_x]`; its output is split back per modality and added to the
//! stream. The encoder output sums the two streams' candidate tokens.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, take_entry, write_archive};
use crate::attention::{
    AlignedAttentionLayer, AttentionConfig, DualStream, FrozenAttention, LoraAdapter, ScaleMode,
};
use crate::error::{Error, Result};
use crate::hmoe::{HmoeConfig, HmoeLayer, PatchAgg};
use crate::rng::{xavier_init, Rng};
use crate::tensor::{Scalar, Tensor};

/// HMoE hyper-parameters without the model width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmoeSpec {
    pub heads_per_expert: usize,
    pub n_experts: usize,
    pub expert_rank: usize,
    #[serde(default)]
    pub patch_agg: PatchAgg,
}

impl HmoeSpec {
    pub fn new(heads_per_expert: usize, n_experts: usize, expert_rank: usize) -> Self {
        Self {
            heads_per_expert,
            n_experts,
            expert_rank,
            patch_agg: PatchAgg::Sum,
        }
    }

    pub fn with_width(&self, d_model: usize) -> HmoeConfig {
        HmoeConfig {
            d_model,
            heads_per_expert: self.heads_per_expert,
            n_experts: self.n_experts,
            expert_rank: self.expert_rank,
            patch_agg: self.patch_agg,
        }
    }
}

fn default_ln_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub insert_every: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub lora_rank: usize,
    pub hmoe_attn: HmoeSpec,
    pub hmoe_ffn: HmoeSpec,
    pub n_z: usize,
    pub n_c: usize,
    pub w_init: f64,
    #[serde(default)]
    pub scale_mode: ScaleMode,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    /// Count parameters as after folding LoRA into the frozen weights.
    #[serde(default)]
    pub merged_lora: bool,
}

impl EncoderConfig {
    /// ViT-Base tracker geometry: 12 layers, fusion every 2, D = 768,
    /// 128px template and 256px search region at patch 16.
    pub fn vit_base() -> Self {
        Self {
            n_layers: 12,
            insert_every: 2,
            d_model: 768,
            n_heads: 12,
            ffn_hidden: 4 * 768,
            lora_rank: 8,
            hmoe_attn: HmoeSpec::new(2, 4, 4),
            hmoe_ffn: HmoeSpec::new(2, 8, 4),
            n_z: (128 / 16) * (128 / 16),
            n_c: (256 / 16) * (256 / 16),
            w_init: 1.0,
            scale_mode: ScaleMode::PerHead,
            ln_eps: default_ln_eps(),
            merged_lora: false,
        }
    }

    /// Small geometry for `f64` verification.
    pub fn tiny(n_layers: usize, insert_every: usize, d_model: usize, n_z: usize, n_c: usize) -> Self {
        Self {
            n_layers,
            insert_every,
            d_model,
            n_heads: 2,
            ffn_hidden: 2 * d_model,
            lora_rank: 2,
            hmoe_attn: HmoeSpec::new(2, 2, 1),
            hmoe_ffn: HmoeSpec::new(2, 3, 1),
            n_z,
            n_c,
            w_init: 1.0,
            scale_mode: ScaleMode::PerHead,
            ln_eps: default_ln_eps(),
            merged_lora: false,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            rank: self.lora_rank,
            w_init: self.w_init,
            scale_mode: self.scale_mode,
        }
    }

    pub fn hmoe_attn_config(&self) -> HmoeConfig {
        self.hmoe_attn.with_width(self.d_model)
    }

    pub fn hmoe_ffn_config(&self) -> HmoeConfig {
        self.hmoe_ffn.with_width(self.d_model)
    }

    pub fn tokens_per_stream(&self) -> usize {
        self.n_z + self.n_c
    }

    /// Layers (0-based) that carry fusion modules: every `insert_every`-th.
    pub fn insertion_layers(&self) -> Vec<usize> {
        (0..self.n_layers)
            .filter(|l| (l + 1) % self.insert_every == 0)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.insert_every == 0 {
            return Err(Error::Config("n_layers and insert_every must be positive".into()));
        }
        if self.n_z == 0 || self.n_c == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("n_z, n_c and ffn_hidden must be positive".into()));
        }
        self.attention().validate()?;
        self.hmoe_attn_config().validate()?;
        self.hmoe_ffn_config().validate()?;
        Ok(())
    }

    pub fn param_report(&self) -> ParamReport {
        let inserted = self.insertion_layers();
        let k = inserted.len();
        let attn = self.attention();
        let amg_per_layer = if self.merged_lora { 2 } else { attn.trainable_param_count() };
        let hmoe_attn = self.hmoe_attn_config().param_count();
        let hmoe_ffn = self.hmoe_ffn_config().param_count();
        let (d, f) = (self.d_model, self.ffn_hidden);
        let frozen_per_layer = attn.frozen_param_count() + 2 * d * f + f + d + 2 * 2 * d;
        let mut trainable = Vec::new();
        if k > 0 {
            if self.merged_lora {
                trainable.extend(["w_x", "w_rgb"]);
            } else {
                trainable.extend(["ak", "bk", "av", "bv", "w_x", "w_rgb"]);
            }
            trainable.extend(["hmoe.phi", "hmoe.expert*.a", "hmoe.expert*.b", "hmoe.pre.a", "hmoe.pre.b", "hmoe.post.a", "hmoe.post.b"]);
        }
        ParamReport {
            insertion_layers: inserted,
            amg_lora_per_layer: amg_per_layer,
            hmoe_attn_block: hmoe_attn,
            hmoe_ffn_block: hmoe_ffn,
            amg_lora: k * amg_per_layer,
            hmoe: k * (hmoe_attn + hmoe_ffn),
            learnable_total: k * (amg_per_layer + hmoe_attn + hmoe_ffn),
            frozen_total: self.n_layers * frozen_per_layer,
            trainable: trainable.into_iter().map(String::from).collect(),
        }
    }

    /// Analytic multiply-accumulates of one forward over both streams.
    pub fn mac_report(&self) -> MacReport {
        let n = self.tokens_per_stream() as u64;
        let (d, f, heads, r) = (
            self.d_model as u64,
            self.ffn_hidden as u64,
            self.n_heads as u64,
            self.lora_rank as u64,
        );
        let layers = self.n_layers as u64;
        let per_stream_layer = 3 * n * d * d + 2 * n * n * d + heads * n * n + 2 * n * d * f;
        let frozen = 2 * layers * per_stream_layer;

        let k = self.insertion_layers().len() as u64;
        let lora = k * 2 * 4 * n * d * r;
        let amg = k * 2 * heads * n * n;
        let (z, c) = (2 * self.n_z, 2 * self.n_c);
        let per_layer_hmoe: u64 = [self.hmoe_attn_config(), self.hmoe_ffn_config()]
            .iter()
            .map(|h| h.mac_count(z) + h.mac_count(c))
            .sum();
        let hmoe = k * per_layer_hmoe;
        MacReport {
            frozen,
            lora,
            amg,
            hmoe,
            total: frozen + lora + amg + hmoe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub insertion_layers: Vec<usize>,
    pub amg_lora_per_layer: usize,
    pub hmoe_attn_block: usize,
    pub hmoe_ffn_block: usize,
    pub amg_lora: usize,
    pub hmoe: usize,
    pub learnable_total: usize,
    pub frozen_total: usize,
    pub trainable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MacReport {
    pub frozen: u64,
    pub lora: u64,
    pub amg: u64,
    pub hmoe: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Scalar = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(d: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[d], T::one())?,
            beta: Tensor::zeros(&[d])?,
        })
    }

    fn random(rng: &mut Rng, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: rng.uniform_tensor(&[d], 0.8, 1.2)?,
            beta: rng.uniform_tensor(&[d], -0.1, 0.1)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (n, d) = x.dims2()?;
        if self.gamma.shape() != [d] {
            return Err(Error::dim("layer norm", x.shape(), self.gamma.shape()));
        }
        let eps = T::from_f64_lossy(eps);
        let width = T::from_usize(d).expect("width fits");
        let mut out = Vec::with_capacity(n * d);
        for row in x.data().chunks_exact(d) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / width;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / width;
            let inv = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv * self.gamma.data()[j] + self.beta.data()[j]);
            }
        }
        Tensor::new(&[n, d], out)
    }
}

/// `tanh` approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if bias.shape() != [d] {
        return Err(Error::dim("bias", x.shape(), bias.shape()));
    }
    let data = x
        .data()
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(bias.data()).map(|(&a, &b)| a + b))
        .collect();
    Tensor::new(&[n, d], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ffn<T: Scalar = f64> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> Ffn<T> {
    fn random(rng: &mut Rng, d: usize, f: usize) -> Result<Self> {
        Ok(Self {
            w1: xavier_init(rng, &[d, f])?,
            b1: rng.uniform_tensor(&[f], -0.05, 0.05)?,
            w2: xavier_init(rng, &[f, d])?,
            b2: rng.uniform_tensor(&[d], -0.05, 0.05)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let hidden = add_bias(&x.matmul(&self.w1)?, &self.b1)?.map(gelu);
        add_bias(&hidden.matmul(&self.w2)?, &self.b2)
    }
}

/// Adapter and mixers of one inserted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModules<T: Scalar = f64> {
    pub attention: AlignedAttentionLayer<T>,
    pub hmoe_attn: HmoeLayer<T>,
    pub hmoe_ffn: HmoeLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockAttention<T: Scalar = f64> {
    Frozen(FrozenAttention<T>),
    Fused(Box<FusionModules<T>>),
}

impl<T: Scalar> BlockAttention<T> {
    pub fn frozen(&self) -> &FrozenAttention<T> {
        match self {
            BlockAttention::Frozen(f) => f,
            BlockAttention::Fused(m) => &m.attention.frozen,
        }
    }

    pub fn fusion(&self) -> Option<&FusionModules<T>> {
        match self {
            BlockAttention::Frozen(_) => None,
            BlockAttention::Fused(m) => Some(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T: Scalar = f64> {
    pub ln1: LayerNorm<T>,
    pub attention: BlockAttention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: Ffn<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<T: Scalar = f64> {
    /// `c_rgb + c_x`, `n_c x D`.
    pub fused_candidate: Tensor<T>,
    /// Pre-softmax attention maps per layer, `[rgb, x]`, each `heads x N x N`.
    /// Inserted layers report the maps after guidance.
    pub maps: Vec<[Tensor<T>; 2]>,
    pub final_rgb: Tensor<T>,
    pub final_x: Tensor<T>,
}

/// Runs `hmoe` on `[z_rgb; z_x]` and on `[c_rgb; c_x]` and returns the
/// per-modality outputs (without residual).
pub fn hmoe_fuse_streams<T: Scalar>(
    hmoe: &HmoeLayer<T>,
    x_rgb: &Tensor<T>,
    x_x: &Tensor<T>,
    n_z: usize,
    n_c: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let split = |t: &Tensor<T>| t.split(0, &[n_z, n_c]);
    let (rgb, x) = (split(x_rgb)?, split(x_x)?);
    let y_z = hmoe.forward(&Tensor::concat(&[&rgb[0], &x[0]], 0)?)?.y_out;
    let y_c = hmoe.forward(&Tensor::concat(&[&rgb[1], &x[1]], 0)?)?.y_out;
    let z = y_z.split(0, &[n_z, n_z])?;
    let c = y_c.split(0, &[n_c, n_c])?;
    Ok((
        Tensor::concat(&[&z[0], &c[0]], 0)?,
        Tensor::concat(&[&z[1], &c[1]], 0)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T: Scalar = f64> {
    config: EncoderConfig,
    pub blocks: Vec<EncoderBlock<T>>,
}

impl<T: Scalar> Encoder<T> {
    fn build(config: EncoderConfig, rng: &mut Rng, random_fusion: bool) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.ffn_hidden);
        let inserted = config.insertion_layers();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ln1 = LayerNorm::random(rng, d)?;
            let frozen = FrozenAttention::random(rng, d)?;
            let ln2 = LayerNorm::random(rng, d)?;
            let ffn = Ffn::random(rng, d, f)?;
            let attention = if inserted.contains(&l) {
                let attn_cfg = config.attention();
                let (lora, hmoe_attn, hmoe_ffn) = if random_fusion {
                    (
                        LoraAdapter::random(rng, &attn_cfg)?,
                        HmoeLayer::random(config.hmoe_attn_config(), rng)?,
                        HmoeLayer::random(config.hmoe_ffn_config(), rng)?,
                    )
                } else {
                    (
                        LoraAdapter::init(rng, &attn_cfg)?,
                        HmoeLayer::init(config.hmoe_attn_config(), rng)?,
                        HmoeLayer::init(config.hmoe_ffn_config(), rng)?,
                    )
                };
                BlockAttention::Fused(Box::new(FusionModules {
                    attention: AlignedAttentionLayer::new(attn_cfg, frozen, lora)?,
                    hmoe_attn,
                    hmoe_ffn,
                }))
            } else {
                BlockAttention::Frozen(frozen)
            };
            blocks.push(EncoderBlock { ln1, attention, ln2, ffn });
        }
        Ok(Self { config, blocks })
    }

    /// Random frozen backbone with function-preserving fusion modules
    /// (zero LoRA `B`, zero-output HMoE).
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, rng, false)
    }

    /// Random frozen backbone and fully random fusion modules.
    pub fn random(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, rng, true)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_stream(&self, stream: &DualStream<T>) -> Result<()> {
        if stream.d_model() != self.config.d_model
            || stream.n_z != self.config.n_z
            || stream.n_c != self.config.n_c
        {
            return Err(Error::Config(format!(
                "stream ({} + {} tokens, width {}) does not match encoder ({} + {}, width {})",
                stream.n_z,
                stream.n_c,
                stream.d_model(),
                self.config.n_z,
                self.config.n_c,
                self.config.d_model
            )));
        }
        Ok(())
    }

    fn frozen_attention(&self, block: &EncoderBlock<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let normed = block.ln1.forward(x, self.config.ln_eps)?;
        let pass = block
            .attention
            .frozen()
            .forward_single(&normed, self.config.n_heads, self.config.attention().scale())?;
        Ok((x.add(&pass.out)?, pass.maps))
    }

    fn ffn_residual(&self, block: &EncoderBlock<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.add(&block.ffn.forward(&block.ln2.forward(x, self.config.ln_eps)?)?)
    }

    pub fn forward(&self, stream: &DualStream<T>) -> Result<EncoderOutput<T>> {
        self.check_stream(stream)?;
        let (n_z, n_c) = (self.config.n_z, self.config.n_c);
        let mut x_rgb = stream.h_rgb.clone();
        let mut x_x = stream.h_x.clone();
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            match &block.attention {
                BlockAttention::Frozen(_) => {
                    let (r, m_rgb) = self.frozen_attention(block, &x_rgb)?;
                    let (x, m_x) = self.frozen_attention(block, &x_x)?;
                    x_rgb = self.ffn_residual(block, &r)?;
                    x_x = self.ffn_residual(block, &x)?;
                    maps.push([m_rgb, m_x]);
                }
                BlockAttention::Fused(fusion) => {
                    let normed = DualStream::new(
                        block.ln1.forward(&x_rgb, self.config.ln_eps)?,
                        block.ln1.forward(&x_x, self.config.ln_eps)?,
                        n_z,
                        n_c,
                    )?;
                    let out = fusion.attention.forward(&normed)?;
                    x_rgb = x_rgb.add(&out.out_rgb)?;
                    x_x = x_x.add(&out.out_x)?;
                    let [al_rgb, al_x] = out.cache.aligned;
                    maps.push([al_rgb, al_x]);

                    let (d_rgb, d_x) = hmoe_fuse_streams(&fusion.hmoe_attn, &x_rgb, &x_x, n_z, n_c)?;
                    x_rgb = x_rgb.add(&d_rgb)?;
                    x_x = x_x.add(&d_x)?;

                    x_rgb = self.ffn_residual(block, &x_rgb)?;
                    x_x = self.ffn_residual(block, &x_x)?;

                    let (d_rgb, d_x) = hmoe_fuse_streams(&fusion.hmoe_ffn, &x_rgb, &x_x, n_z, n_c)?;
                    x_rgb = x_rgb.add(&d_rgb)?;
                    x_x = x_x.add(&d_x)?;
                }
            }
        }
        let c_rgb = x_rgb.narrow(0, n_z, n_c)?;
        let c_x = x_x.narrow(0, n_z, n_c)?;
        Ok(EncoderOutput {
            fused_candidate: c_rgb.add(&c_x)?,
            maps,
            final_rgb: x_rgb,
            final_x: x_x,
        })
    }

    /// One stream through the frozen backbone only, ignoring every fusion
    /// module.
    pub fn forward_frozen_single(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = h.clone();
        for block in &self.blocks {
            let (a, _) = self.frozen_attention(block, &x)?;
            x = self.ffn_residual(block, &a)?;
        }
        Ok(x)
    }

    /// Names of every tensor that receives gradients during fine-tuning.
    pub fn trainable_parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            if let Some(f) = block.attention.fusion() {
                names.extend(f.attention.lora.entries(&format!("layer{l}.")).into_iter().map(|(n, _)| n));
                names.extend(f.hmoe_attn.entries(&format!("layer{l}.hmoe_attn.")).into_iter().map(|(n, _)| n));
                names.extend(f.hmoe_ffn.entries(&format!("layer{l}.hmoe_ffn.")).into_iter().map(|(n, _)| n));
            }
        }
        names
    }

    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("layer{l}.");
            out.push((format!("{p}ln1.gamma"), b.ln1.gamma.clone()));
            out.push((format!("{p}ln1.beta"), b.ln1.beta.clone()));
            out.push((format!("{p}ln2.gamma"), b.ln2.gamma.clone()));
            out.push((format!("{p}ln2.beta"), b.ln2.beta.clone()));
            out.push((format!("{p}ffn.w1"), b.ffn.w1.clone()));
            out.push((format!("{p}ffn.b1"), b.ffn.b1.clone()));
            out.push((format!("{p}ffn.w2"), b.ffn.w2.clone()));
            out.push((format!("{p}ffn.b2"), b.ffn.b2.clone()));
            out.extend(b.attention.frozen().entries(&p));
            if let Some(f) = b.attention.fusion() {
                out.extend(f.attention.lora.entries(&p));
                out.extend(f.hmoe_attn.entries(&format!("{p}hmoe_attn.")));
                out.extend(f.hmoe_ffn.entries(&format!("{p}hmoe_ffn.")));
            }
        }
        out
    }

    pub fn from_entries(config: EncoderConfig, mut entries: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let inserted = config.insertion_layers();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layer{l}.");
            let e = &mut entries;
            let ln1 = LayerNorm {
                gamma: take_entry(e, &format!("{p}ln1.gamma"))?,
                beta: take_entry(e, &format!("{p}ln1.beta"))?,
            };
            let ln2 = LayerNorm {
                gamma: take_entry(e, &format!("{p}ln2.gamma"))?,
                beta: take_entry(e, &format!("{p}ln2.beta"))?,
            };
            let ffn = Ffn {
                w1: take_entry(e, &format!("{p}ffn.w1"))?,
                b1: take_entry(e, &format!("{p}ffn.b1"))?,
                w2: take_entry(e, &format!("{p}ffn.w2"))?,
                b2: take_entry(e, &format!("{p}ffn.b2"))?,
            };
            let frozen = FrozenAttention::from_entries(e, &p)?;
            let attention = if inserted.contains(&l) {
                let lora = LoraAdapter::from_entries(e, &p)?;
                BlockAttention::Fused(Box::new(FusionModules {
                    attention: AlignedAttentionLayer::new(config.attention(), frozen, lora)?,
                    hmoe_attn: HmoeLayer::from_entries(config.hmoe_attn_config(), e, &format!("{p}hmoe_attn."))?,
                    hmoe_ffn: HmoeLayer::from_entries(config.hmoe_ffn_config(), e, &format!("{p}hmoe_ffn."))?,
                }))
            } else {
                BlockAttention::Frozen(frozen)
            };
            blocks.push(EncoderBlock { ln1, attention, ln2, ffn });
        }
        if let Some(extra) = entries.keys().next() {
            return Err(Error::Format(format!("unexpected checkpoint entry `{extra}`")));
        }
        Ok(Self { config, blocks })
    }

    /// Writes `config.json` and the `weights.bin` archive into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        let entries = self.entries();
        let refs: Vec<(String, &Tensor<T>)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_archive(dir.join("weights.bin"), &refs)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: EncoderConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        Self::from_entries(config, read_archive(dir.join("weights.bin"))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(rng: &mut Rng, cfg: &EncoderConfig) -> DualStream {
        let n = cfg.tokens_per_stream();
        DualStream::new(
            rng.uniform_tensor(&[n, cfg.d_model], -1.0, 1.0).unwrap(),
            rng.uniform_tensor(&[n, cfg.d_model], -1.0, 1.0).unwrap(),
            cfg.n_z,
            cfg.n_c,
        )
        .unwrap()
    }

    #[test]
    fn insertion_schedule() {
        let cfg = EncoderConfig::vit_base();
        assert_eq!(cfg.insertion_layers(), vec![1, 3, 5, 7, 9, 11]);
        let mut none = cfg.clone();
        none.insert_every = 13;
        assert!(none.insertion_layers().is_empty());
        assert_eq!(none.param_report().learnable_total, 0);
        assert_eq!((cfg.n_z, cfg.n_c), (64, 256));
    }

    #[test]
    fn vit_base_geometry_budget() {
        let r = EncoderConfig::vit_base().param_report();
        assert_eq!(r.amg_lora, 147_468);
        assert_eq!(r.hmoe, 423_936);
        assert_eq!(r.learnable_total, 571_404);
        assert!(r.trainable.iter().all(|n| !n.starts_with('w') || n.starts_with("w_")));
        let mut merged = EncoderConfig::vit_base();
        merged.merged_lora = true;
        assert_eq!(merged.param_report().amg_lora, 12);
    }

    #[test]
    fn function_preserving_init_is_two_towers() {
        let mut cfg = EncoderConfig::tiny(4, 2, 8, 2, 4);
        cfg.w_init = 0.0;
        let mut rng = Rng::new(1);
        let enc = Encoder::<f64>::init(cfg.clone(), &mut rng).unwrap();
        let s = stream(&mut rng, &cfg);
        let out = enc.forward(&s).unwrap();
        let rgb = enc.forward_frozen_single(&s.h_rgb).unwrap();
        let x = enc.forward_frozen_single(&s.h_x).unwrap();
        assert_eq!(out.final_rgb, rgb);
        assert_eq!(out.final_x, x);
        let expect = rgb.narrow(0, 2, 4).unwrap().add(&x.narrow(0, 2, 4).unwrap()).unwrap();
        assert_eq!(out.fused_candidate, expect);
    }

    #[test]
    fn identical_streams_stay_identical() {
        let cfg = EncoderConfig::tiny(4, 2, 8, 2, 4);
        let mut rng = Rng::new(2);
        let enc = Encoder::<f64>::random(cfg.clone(), &mut rng).unwrap();
        let h: Tensor = rng.uniform_tensor(&[6, 8], -1.0, 1.0).unwrap();
        let out = enc.forward(&DualStream::new(h.clone(), h, 2, 4).unwrap()).unwrap();
        assert_eq!(out.final_rgb, out.final_x);
        for [a, b] in &out.maps {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn template_mixing_ignores_candidates() {
        let mut rng = Rng::new(3);
        let hmoe = HmoeLayer::<f64>::random(HmoeConfig::new(8, 2, 3, 2), &mut rng).unwrap();
        let a: Tensor = rng.uniform_tensor(&[6, 8], -1.0, 1.0).unwrap();
        let b: Tensor = rng.uniform_tensor(&[6, 8], -1.0, 1.0).unwrap();
        let (ra, rb) = hmoe_fuse_streams(&hmoe, &a, &b, 2, 4).unwrap();
        let zero_c = |t: &Tensor| {
            Tensor::concat(&[&t.narrow(0, 0, 2).unwrap(), &Tensor::zeros(&[4, 8]).unwrap()], 0).unwrap()
        };
        let (za, zb) = hmoe_fuse_streams(&hmoe, &zero_c(&a), &zero_c(&b), 2, 4).unwrap();
        assert_eq!(ra.narrow(0, 0, 2).unwrap(), za.narrow(0, 0, 2).unwrap());
        assert_eq!(rb.narrow(0, 0, 2).unwrap(), zb.narrow(0, 0, 2).unwrap());
        assert_ne!(ra.narrow(0, 2, 4).unwrap(), za.narrow(0, 2, 4).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig::tiny(4, 2, 8, 2, 4);
        let enc = Encoder::<f64>::random(cfg, &mut Rng::new(4)).unwrap();
        enc.save(dir.path()).unwrap();
        assert_eq!(Encoder::<f64>::load(dir.path()).unwrap(), enc);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let cfg = EncoderConfig::tiny(2, 2, 8, 2, 4);
        let mut rng = Rng::new(5);
        let enc = Encoder::<f64>::init(cfg, &mut rng).unwrap();
        let other = EncoderConfig::tiny(2, 2, 8, 3, 3);
        assert!(matches!(enc.forward(&stream(&mut rng, &other)), Err(Error::Config(_))));
        let mut bad = EncoderConfig::tiny(2, 2, 8, 2, 4);
        bad.insert_every = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trainable_names_exclude_frozen() {
        let enc = Encoder::<f64>::init(EncoderConfig::tiny(4, 2, 8, 2, 4), &mut Rng::new(6)).unwrap();
        let names = enc.trainable_parameter_names();
        assert!(names.iter().any(|n| n == "layer1.ak"));
        assert!(names.iter().any(|n| n == "layer3.hmoe_ffn.expert2.b"));
        for n in &names {
            assert!(!n.contains(".wq") && !n.contains(".wk") && !n.contains(".wv") && !n.contains("ffn.w"), "{n}");
            assert!(!n.contains("ln"), "{n}");
        }
    }

    #[test]
    fn mac_model_matches_geometry() {
        let r = EncoderConfig::vit_base().mac_report();
        assert_eq!(r.total, r.frozen + r.lora + r.amg + r.hmoe);
        // the frozen backbone dominates
        assert!(r.frozen as f64 / r.total as f64 > 0.98);
    }
}
