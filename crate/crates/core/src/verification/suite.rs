//! Seeded batteries of oracle and gradient checks over random small configs.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::{AlignedAttentionLayer, AttentionConfig, DualStream, ScaleMode};
use crate::encoder::{Encoder, EncoderConfig, HmoeSpec};
use crate::error::{Error, Result};
use crate::hmoe::{HmoeConfig, HmoeLayer, PatchAgg};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::verification::gradcheck::{gradcheck_attention, gradcheck_hmoe, GradCheckReport};
use crate::verification::oracle::{
    max_abs_diff_cube, max_abs_diff_mat, oracle_attention_forward, oracle_encoder_forward, oracle_hmoe_forward,
};

/// Fast path versus loop oracle, `f64`.
pub const ORACLE_TOLERANCE: f64 = 1e-11;

/// One line of a check report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub config: String,
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRecord {
    pub fn new(name: impl Into<String>, config: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            config: config.into(),
            error,
            tolerance,
            pass: error < tolerance,
        }
    }
}

impl From<GradCheckReport> for CheckRecord {
    fn from(r: GradCheckReport) -> Self {
        Self {
            name: r.name,
            config: r.config,
            error: r.max_rel_error,
            tolerance: r.tolerance,
            pass: r.pass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    All,
    Attention,
    Hmoe,
    Encoder,
}

impl CheckModule {
    fn covers(self, m: CheckModule) -> bool {
        self == CheckModule::All || self == m
    }
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => CheckModule::All,
            "attention" | "attention-align" | "amg" => CheckModule::Attention,
            "hmoe" | "hmoe-mixer" => CheckModule::Hmoe,
            "encoder" => CheckModule::Encoder,
            other => return Err(Error::Config(format!("unknown module `{other}`"))),
        })
    }
}

impl fmt::Display for CheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckModule::All => "all",
            CheckModule::Attention => "attention",
            CheckModule::Hmoe => "hmoe",
            CheckModule::Encoder => "encoder",
        })
    }
}

fn pick<T: Copy>(rng: &mut Rng, options: &[T]) -> T {
    options[rng.below(options.len())]
}

pub fn random_attention_config(rng: &mut Rng) -> AttentionConfig {
    let heads = 1 + rng.below(4);
    let d_head = 1 + rng.below(4);
    let d = (heads * d_head).max(2);
    let heads = if d.is_multiple_of(heads) { heads } else { 1 };
    let mut cfg = AttentionConfig::new(d, heads, 1 + rng.below(d - 1));
    cfg.scale_mode = pick(rng, &[ScaleMode::PerHead, ScaleMode::Model]);
    cfg
}

pub fn random_hmoe_config(rng: &mut Rng) -> HmoeConfig {
    let h = 1 + rng.below(3);
    let sub = 2 + rng.below(4);
    let rank = 1 + rng.below((sub - 1).min(3));
    let mut cfg = HmoeConfig::new(h * sub, h, 1 + rng.below(4), rank);
    cfg.patch_agg = pick(rng, &[PatchAgg::Sum, PatchAgg::Mean]);
    cfg
}

fn attention_oracle_check(rng: &mut Rng, index: usize) -> Result<CheckRecord> {
    let cfg = random_attention_config(rng);
    let n = 2 + rng.below(6);
    let n_z = 1 + rng.below(n - 1);
    let mut layer = AlignedAttentionLayer::random(cfg.clone(), rng)?;
    layer.lora.w_x = rng.uniform(-0.5, 1.5);
    layer.lora.w_rgb = rng.uniform(-0.5, 1.5);
    let stream = DualStream::new(
        rng.uniform_tensor(&[n, cfg.d_model], -2.0, 2.0)?,
        rng.uniform_tensor(&[n, cfg.d_model], -2.0, 2.0)?,
        n_z,
        n - n_z,
    )?;
    let fast = layer.forward(&stream)?;
    let slow = oracle_attention_forward(&layer, &stream)?;
    let mut err = max_abs_diff_mat(&fast.out_rgb, &slow.out[0])?.max(max_abs_diff_mat(&fast.out_x, &slow.out[1])?);
    for s in 0..2 {
        err = err
            .max(max_abs_diff_cube(&fast.cache.raw[s], &slow.raw[s])?)
            .max(max_abs_diff_cube(&fast.cache.aligned[s], &slow.aligned[s])?);
    }
    let desc = format!(
        "#{index} d={} heads={} r={} scale={:?} n={n} w=({:.3},{:.3})",
        cfg.d_model, cfg.n_heads, cfg.rank, cfg.scale_mode, layer.lora.w_x, layer.lora.w_rgb
    );
    Ok(CheckRecord::new("attention_oracle", desc, err, ORACLE_TOLERANCE))
}

fn hmoe_oracle_check(rng: &mut Rng, index: usize) -> Result<CheckRecord> {
    let cfg = random_hmoe_config(rng);
    let n = 1 + rng.below(7);
    let layer = HmoeLayer::random(cfg.clone(), rng)?;
    let x: Tensor = rng.uniform_tensor(&[n, cfg.d_model], -2.0, 2.0)?;
    let fast = layer.forward(&x)?;
    let slow = oracle_hmoe_forward(&layer, &x)?;
    let c = &fast.cache;
    let err = [
        max_abs_diff_mat(&c.x_split, &slow.x_split)?,
        max_abs_diff_mat(&c.logits, &slow.logits)?,
        max_abs_diff_mat(&c.gate, &slow.gate)?,
        max_abs_diff_mat(&c.x_mix, &slow.x_mix)?,
        max_abs_diff_mat(&c.y_expert, &slow.y_expert)?,
        max_abs_diff_mat(&c.affinity, &slow.affinity)?,
        max_abs_diff_mat(&fast.y_out, &slow.y_out)?,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let desc = format!(
        "#{index} d={} h={} e={} r={} agg={:?} n={n}",
        cfg.d_model, cfg.heads_per_expert, cfg.n_experts, cfg.expert_rank, cfg.patch_agg
    );
    Ok(CheckRecord::new("hmoe_oracle", desc, err, ORACLE_TOLERANCE))
}

fn encoder_oracle_check(rng: &mut Rng, index: usize) -> Result<CheckRecord> {
    let mut cfg = EncoderConfig::tiny(4, 2, 8, 2, 4);
    cfg.hmoe_attn = HmoeSpec::new(2, 1 + rng.below(3), 1 + rng.below(2));
    cfg.hmoe_ffn = HmoeSpec::new(2, 1 + rng.below(4), 1 + rng.below(2));
    cfg.w_init = rng.uniform(0.0, 1.0);
    let enc = Encoder::random(cfg.clone(), rng)?;
    let stream = DualStream::new(
        rng.uniform_tensor(&[6, 8], -1.0, 1.0)?,
        rng.uniform_tensor(&[6, 8], -1.0, 1.0)?,
        2,
        4,
    )?;
    let fast = enc.forward(&stream)?;
    let slow = oracle_encoder_forward(&enc, &stream)?;
    let mut err = max_abs_diff_mat(&fast.fused_candidate, &slow.fused_candidate)?
        .max(max_abs_diff_mat(&fast.final_rgb, &slow.final_rgb)?)
        .max(max_abs_diff_mat(&fast.final_x, &slow.final_x)?);
    for (f, o) in fast.maps.iter().zip(&slow.maps) {
        err = err.max(max_abs_diff_cube(&f[0], &o[0])?).max(max_abs_diff_cube(&f[1], &o[1])?);
    }
    let desc = format!(
        "#{index} layers=4 every=2 d=8 n=6 e=({},{}) w={:.3}",
        cfg.hmoe_attn.n_experts, cfg.hmoe_ffn.n_experts, cfg.w_init
    );
    Ok(CheckRecord::new("encoder_oracle", desc, err, ORACLE_TOLERANCE))
}

/// `n_configs` random configurations per covered module.
pub fn oracle_suite(module: CheckModule, n_configs: usize, seed: u64) -> Result<Vec<CheckRecord>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for i in 0..n_configs {
        if module.covers(CheckModule::Attention) {
            out.push(attention_oracle_check(&mut rng, i)?);
        }
        if module.covers(CheckModule::Hmoe) {
            out.push(hmoe_oracle_check(&mut rng, i)?);
        }
        if module.covers(CheckModule::Encoder) {
            out.push(encoder_oracle_check(&mut rng, i)?);
        }
    }
    Ok(out)
}

/// Gradient checks of every parameter class on `n_configs` random configs
/// per module.
pub fn gradcheck_suite(module: CheckModule, n_configs: usize, seed: u64) -> Result<Vec<CheckRecord>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for _ in 0..n_configs {
        if module.covers(CheckModule::Attention) {
            let cfg = random_attention_config(&mut rng);
            let n = 2 + rng.below(4);
            let s = rng.below(u32::MAX as usize) as u64;
            out.extend(gradcheck_attention(&cfg, n, s)?.into_iter().map(CheckRecord::from));
        }
        if module.covers(CheckModule::Hmoe) {
            let cfg = random_hmoe_config(&mut rng);
            let n = 1 + rng.below(5);
            let s = rng.below(u32::MAX as usize) as u64;
            out.extend(gradcheck_hmoe(&cfg, n, s)?.into_iter().map(CheckRecord::from));
        }
    }
    Ok(out)
}
