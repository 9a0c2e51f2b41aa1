//! One-axis configuration sweeps reporting budget, cost and module timings.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::bench::{measure, text_table, TimingProtocol};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::hmoe::HmoeLayer;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Heads per expert, applied to both HMoE sides.
    Heads,
    /// `attn:ffn` expert counts.
    Experts,
    LoraRank,
    /// Expert and projection rank, both HMoE sides.
    HmoeRank,
    WInit,
    /// Which frozen projections carry the LoRA bypass, e.g. `kv` or `q`.
    WeightType,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Heads => "heads",
            SweepAxis::Experts => "experts",
            SweepAxis::LoraRank => "lora_rank",
            SweepAxis::HmoeRank => "hmoe_rank",
            SweepAxis::WInit => "w_init",
            SweepAxis::WeightType => "weight_type",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "heads" => SweepAxis::Heads,
            "experts" => SweepAxis::Experts,
            "lora_rank" | "lora-rank" => SweepAxis::LoraRank,
            "hmoe_rank" | "hmoe-rank" => SweepAxis::HmoeRank,
            "w_init" | "w-init" => SweepAxis::WInit,
            "weight_type" | "weight-type" => SweepAxis::WeightType,
            other => return Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub learnable_params: Option<usize>,
    pub amg_lora_params: Option<usize>,
    pub hmoe_params: Option<usize>,
    pub macs: Option<u64>,
    /// Median f32 time of one inserted layer's HMoE pair over both token groups.
    pub hmoe_time_s: Option<f64>,
    pub descriptor: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub base: EncoderConfig,
    pub rows: Vec<SweepRow>,
    pub footer: String,
}

pub const SWEEP_FOOTER: &str = "Tracking-quality columns (PR, SR, F-score) need trained models and are not \
reproduced here; params and MACs are analytic, times are module-level f32 measurements.";

fn parse<T: FromStr>(value: &str, what: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{value}` is not a valid {what}")))
}

fn parse_weight_type(value: &str) -> Result<String> {
    let mut set = String::new();
    for p in ['q', 'k', 'v'] {
        if value.contains(p) {
            set.push(p);
        }
    }
    if set.is_empty() || set.len() != value.len() {
        return Err(Error::Config(format!(
            "weight type `{value}` must be a non-repeating subset of q, k, v"
        )));
    }
    Ok(set)
}

fn w_init_descriptor(w: f64) -> String {
    match w {
        0.0 => "no guidance: each stream keeps its own map".into(),
        1.0 => "full swap: each stream uses the other stream's map".into(),
        0.5 => "both streams use the mean map".into(),
        w if (0.0..=1.0).contains(&w) => format!("convex mix: {:.3} own + {:.3} other", 1.0 - w, w),
        _ => "extrapolation outside [0, 1]".into(),
    }
}

fn weight_type_descriptor(set: &str) -> String {
    let names: Vec<String> = set.chars().map(|c| format!("W_{c}")).collect();
    format!(
        "LoRA on {}; attention maps adapted: {}; value path adapted: {}; {}",
        names.join(", "),
        if set.contains('q') || set.contains('k') { "yes" } else { "no" },
        if set.contains('v') { "yes" } else { "no" },
        if set == "kv" { "implemented" } else { "analytic only" }
    )
}

fn time_hmoe_pair(cfg: &EncoderConfig, protocol: &TimingProtocol, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let attn = HmoeLayer::<f32>::random(cfg.hmoe_attn_config(), &mut rng)?;
    let ffn = HmoeLayer::<f32>::random(cfg.hmoe_ffn_config(), &mut rng)?;
    let z: Tensor<f32> = rng.uniform_tensor(&[2 * cfg.n_z, cfg.d_model], -1.0, 1.0)?;
    let c: Tensor<f32> = rng.uniform_tensor(&[2 * cfg.n_c, cfg.d_model], -1.0, 1.0)?;
    let stats = measure(protocol, || {
        for layer in [&attn, &ffn] {
            layer.forward(&z)?;
            layer.forward(&c)?;
        }
        Ok(())
    })?;
    Ok(stats.median_s)
}

fn sweep_row(
    axis: SweepAxis,
    value: &str,
    base: &EncoderConfig,
    timing: Option<&TimingProtocol>,
    seed: u64,
) -> Result<SweepRow> {
    let mut cfg = base.clone();
    let mut descriptor = None;
    let mut lora_projections = 2;
    match axis {
        SweepAxis::Heads => {
            let h: usize = parse(value, "head count")?;
            cfg.hmoe_attn.heads_per_expert = h;
            cfg.hmoe_ffn.heads_per_expert = h;
        }
        SweepAxis::Experts => {
            let (a, f) = value
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("experts value `{value}` must look like attn:ffn")))?;
            cfg.hmoe_attn.n_experts = parse(a, "expert count")?;
            cfg.hmoe_ffn.n_experts = parse(f, "expert count")?;
        }
        SweepAxis::LoraRank => cfg.lora_rank = parse(value, "rank")?,
        SweepAxis::HmoeRank => {
            let r: usize = parse(value, "rank")?;
            cfg.hmoe_attn.expert_rank = r;
            cfg.hmoe_ffn.expert_rank = r;
        }
        SweepAxis::WInit => {
            cfg.w_init = parse(value, "guidance weight")?;
            descriptor = Some(w_init_descriptor(cfg.w_init));
        }
        SweepAxis::WeightType => {
            let set = parse_weight_type(value)?;
            lora_projections = set.len();
            descriptor = Some(weight_type_descriptor(&set));
        }
    }
    cfg.validate()?;

    let params = cfg.param_report();
    let k = params.insertion_layers.len();
    let (d, r) = (cfg.d_model, cfg.lora_rank);
    let amg = if cfg.merged_lora {
        params.amg_lora
    } else {
        k * (lora_projections * 2 * d * r + 2)
    };
    let macs = cfg.mac_report();
    let lora_macs = macs.lora / 2 * lora_projections as u64;
    let hmoe_time_s = timing.map(|p| time_hmoe_pair(&cfg, p, seed)).transpose()?;
    Ok(SweepRow {
        axis,
        value: value.to_string(),
        learnable_params: Some(amg + params.hmoe),
        amg_lora_params: Some(amg),
        hmoe_params: Some(params.hmoe),
        macs: Some(macs.total - macs.lora + lora_macs),
        hmoe_time_s,
        descriptor,
        error: None,
    })
}

/// Evaluates every value on `axis` against `base`. A value that yields an
/// invalid configuration produces a row with `error` set; the sweep goes on.
pub fn sweep(
    axis: SweepAxis,
    values: &[String],
    base: &EncoderConfig,
    timing: Option<&TimingProtocol>,
    seed: u64,
) -> SweepTable {
    let rows = values
        .iter()
        .map(|v| {
            sweep_row(axis, v, base, timing, seed).unwrap_or_else(|e| SweepRow {
                axis,
                value: v.clone(),
                learnable_params: None,
                amg_lora_params: None,
                hmoe_params: None,
                macs: None,
                hmoe_time_s: None,
                descriptor: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    SweepTable {
        axis,
        base: base.clone(),
        rows,
        footer: SWEEP_FOOTER.to_string(),
    }
}

const SWEEP_COLUMNS: [&str; 8] = ["value", "learnable", "amg_lora", "hmoe", "macs", "hmoe_ms", "descriptor", "error"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl SweepRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.value.clone(),
            opt(self.learnable_params),
            opt(self.amg_lora_params),
            opt(self.hmoe_params),
            opt(self.macs),
            self.hmoe_time_s.map(|t| format!("{:.4}", t * 1e3)).unwrap_or_default(),
            opt(self.descriptor.clone()),
            opt(self.error.clone()),
        ]
    }
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> = self.rows.iter().map(SweepRow::cells).collect();
        format!("sweep over {}\n{}{}\n", self.axis, text_table(&SWEEP_COLUMNS, &rows), self.footer)
    }

    pub fn to_csv(&self) -> String {
        let mut out = SWEEP_COLUMNS.join(",");
        for row in &self.rows {
            out.push('\n');
            let cells: Vec<String> = row
                .cells()
                .into_iter()
                .map(|c| if c.contains(',') || c.contains('"') { format!("\"{}\"", c.replace('"', "\"\"")) } else { c })
                .collect();
            out.push_str(&cells.join(","));
        }
        out.push('\n');
        out
    }

    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn learnable(t: &SweepTable) -> Vec<usize> {
        t.rows.iter().map(|r| r.learnable_params.unwrap()).collect()
    }

    #[test]
    fn heads_axis() {
        let t = sweep(SweepAxis::Heads, &values(&["1", "2", "4", "8"]), &EncoderConfig::vit_base(), None, 42);
        let p = learnable(&t);
        assert!(p.windows(2).all(|w| w[0] > w[1]), "{p:?}");
        assert_eq!(p[1], 571_404);
        let macs: Vec<u64> = t.rows.iter().map(|r| r.macs.unwrap()).collect();
        let (lo, hi) = (*macs.iter().min().unwrap() as f64, *macs.iter().max().unwrap() as f64);
        assert!((hi - lo) / lo < 0.01);
    }

    #[test]
    fn experts_axis_ordering() {
        let t = sweep(
            SweepAxis::Experts,
            &values(&["4:4", "8:4", "4:8", "8:16"]),
            &EncoderConfig::vit_base(),
            None,
            42,
        );
        assert_eq!(learnable(&t), vec![479_244, 571_404, 571_404, 847_884]);
    }

    #[test]
    fn lora_rank_axis_doubles() {
        let t = sweep(SweepAxis::LoraRank, &values(&["4", "8", "16"]), &EncoderConfig::vit_base(), None, 42);
        let amg: Vec<usize> = t.rows.iter().map(|r| r.amg_lora_params.unwrap()).collect();
        assert_eq!(amg, vec![73_740, 147_468, 294_924]);
    }

    #[test]
    fn invalid_values_do_not_stop_the_sweep() {
        let t = sweep(SweepAxis::Heads, &values(&["2", "5", "x", "4"]), &EncoderConfig::vit_base(), None, 42);
        assert_eq!(t.rows.len(), 4);
        assert!(t.rows[1].error.is_some() && t.rows[2].error.is_some());
        assert!(t.rows[3].error.is_none());
        assert!(t.has_errors());
        let bad = sweep(SweepAxis::Experts, &values(&["4"]), &EncoderConfig::vit_base(), None, 42);
        assert!(bad.rows[0].error.is_some());
    }

    #[test]
    fn descriptors() {
        let t = sweep(SweepAxis::WInit, &values(&["0", "0.5", "1", "0.25"]), &EncoderConfig::vit_base(), None, 42);
        assert!(t.rows[0].descriptor.as_ref().unwrap().contains("no guidance"));
        assert!(t.rows[1].descriptor.as_ref().unwrap().contains("mean"));
        assert!(t.rows[2].descriptor.as_ref().unwrap().contains("swap"));
        let w = sweep(SweepAxis::WeightType, &values(&["kv", "q", "qq", "kvq"]), &EncoderConfig::vit_base(), None, 42);
        assert_eq!(w.rows[0].amg_lora_params, Some(147_468));
        assert_eq!(w.rows[1].amg_lora_params, Some(6 * (2 * 768 * 8 + 2)));
        assert!(w.rows[1].descriptor.as_ref().unwrap().contains("value path adapted: no"));
        assert!(w.rows[2].error.is_some());
        assert_eq!(w.rows[3].value, "kvq");
        assert!(w.to_text().contains("not reproduced"));
        assert_eq!(w.to_csv().lines().count(), 5);
    }

    #[test]
    fn timed_rows() {
        let base = EncoderConfig::tiny(2, 2, 8, 2, 4);
        let t = sweep(SweepAxis::HmoeRank, &values(&["1", "2"]), &base, Some(&TimingProtocol::default()), 1);
        assert!(t.rows.iter().all(|r| r.hmoe_time_s.unwrap() > 0.0));
    }
}
