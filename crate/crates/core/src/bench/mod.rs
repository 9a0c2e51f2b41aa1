//! Benchmarks, budget audits and configuration sweeps.
//!
//! All timings run in `f32` on the calling thread. Absolute numbers depend on
//! the machine; the scaling slopes and operator ratios are what carry over.

pub mod audit;
pub mod comparators;
pub mod sweep;
pub mod timing;

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use audit::{audit, AuditReport, ReferenceCheck};
pub use comparators::{
    build_comparator, locality_check, permutation_check, ComparatorConfig, CrossAttention, FusionComparator,
    HmoeFusion, McpLocal, Variant,
};
pub use sweep::{sweep, SweepAxis, SweepRow, SweepTable};
pub use timing::{fit_loglog_slope, measure, pin_current_thread, TimingProtocol, TimingStats};

/// One timed operator at one geometry.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub operator: String,
    pub n_tokens: usize,
    pub d_model: usize,
    pub n_experts: usize,
    pub heads_per_expert: usize,
    pub expert_rank: usize,
    pub macs: u64,
    pub params: usize,
    #[serde(flatten)]
    pub timing: TimingStats,
    pub dtype: &'static str,
    pub pinned: bool,
    pub timestamp: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingResult {
    pub variant: Variant,
    pub reports: Vec<BenchReport>,
    /// Least-squares slope of log median time against log N.
    pub slope: f64,
}

pub fn unix_timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Times one comparator over increasing token counts. `n_list` holds the total
/// fused token count per call (half per modality), so every value must be even.
pub fn bench_scaling(
    variant: Variant,
    n_list: &[usize],
    config: &ComparatorConfig,
    protocol: &TimingProtocol,
    seed: u64,
) -> Result<ScalingResult> {
    if n_list.len() < 3 || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("token counts must be strictly increasing with at least 3 points".into()));
    }
    if n_list.iter().any(|n| n % 2 != 0 || *n == 0) {
        return Err(Error::Config("token counts must be positive and even".into()));
    }
    protocol.validate()?;
    let pinned = pin_current_thread();
    let mut rng = Rng::new(seed);
    let comparator = build_comparator::<f32>(variant, config, &mut rng)?;
    let mut reports = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let rgb = rng.uniform_tensor::<f32>(&[n / 2, config.d_model], -1.0, 1.0)?;
        let x = rng.uniform_tensor::<f32>(&[n / 2, config.d_model], -1.0, 1.0)?;
        let timing = measure(protocol, || comparator.fuse(&rgb, &x))?;
        reports.push(BenchReport {
            operator: variant.name().to_string(),
            n_tokens: n,
            d_model: config.d_model,
            n_experts: config.n_experts,
            heads_per_expert: config.heads_per_expert,
            expert_rank: config.expert_rank,
            macs: comparator.mac_count(n),
            params: comparator.param_count(),
            timing,
            dtype: "f32",
            pinned,
            timestamp: unix_timestamp(),
            seed,
        });
    }
    let xs: Vec<f64> = n_list.iter().map(|&n| n as f64).collect();
    let ys: Vec<f64> = reports.iter().map(|r| r.timing.median_s).collect();
    Ok(ScalingResult {
        variant,
        slope: fit_loglog_slope(&xs, &ys)?,
        reports,
    })
}

/// Writes one JSON object per line.
pub fn write_jsonl<S: Serialize>(items: &[S], mut out: impl Write) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

const BENCH_COLUMNS: [&str; 8] = ["operator", "n", "d", "macs", "params", "median_ms", "iqr_ms", "unreliable"];

fn bench_cells(r: &BenchReport) -> [String; 8] {
    [
        r.operator.clone(),
        r.n_tokens.to_string(),
        r.d_model.to_string(),
        r.macs.to_string(),
        r.params.to_string(),
        format!("{:.4}", r.timing.median_s * 1e3),
        format!("{:.4}", r.timing.iqr_s * 1e3),
        r.timing.unreliable.to_string(),
    ]
}

/// Right-aligned text table.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for row in rows {
        out.push('\n');
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out.push('\n');
    out
}

pub fn bench_text_table(reports: &[BenchReport]) -> String {
    let rows: Vec<Vec<String>> = reports.iter().map(|r| bench_cells(r).to_vec()).collect();
    text_table(&BENCH_COLUMNS, &rows)
}

pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut out = BENCH_COLUMNS.join(",");
    for r in reports {
        out.push('\n');
        out.push_str(&bench_cells(r).join(","));
    }
    out.push('\n');
    out
}

/// Footer attached to every timing table.
pub const TIMING_FOOTER: &str = "Module-level f32 timings on one pinned CPU thread. Full-tracker FPS also \
includes the backbone, prediction head and I/O, so only the direction of these ratios is comparable to it.";

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ComparatorConfig {
        ComparatorConfig {
            d_model: 16,
            n_experts: 2,
            heads_per_expert: 2,
            expert_rank: 2,
            mcp_hidden: 4,
        }
    }

    #[test]
    fn scaling_preconditions() {
        let p = TimingProtocol::default();
        assert!(bench_scaling(Variant::Hmoe, &[8, 16], &small(), &p, 1).is_err());
        assert!(bench_scaling(Variant::Hmoe, &[8, 16, 16], &small(), &p, 1).is_err());
        assert!(bench_scaling(Variant::Hmoe, &[8, 15, 32], &small(), &p, 1).is_err());
    }

    #[test]
    fn scaling_report_fields() {
        let r = bench_scaling(Variant::McpLocal, &[8, 16, 32], &small(), &TimingProtocol::default(), 3).unwrap();
        assert_eq!(r.reports.len(), 3);
        for rep in &r.reports {
            assert!(rep.timing.iterations >= 30 && rep.macs > 0);
            assert!(rep.timing.min_s <= rep.timing.median_s && rep.timing.median_s <= rep.timing.max_s);
        }
        assert!(r.slope.is_finite());

        let mut buf = Vec::new();
        write_jsonl(&r.reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["operator"], "mcp_local");
        assert!(v["median_s"].as_f64().unwrap() > 0.0);

        assert_eq!(bench_csv(&r.reports).lines().count(), 4);
        assert!(bench_text_table(&r.reports).contains("mcp_local"));
    }

    #[test]
    fn analytic_costs_are_deterministic() {
        let cfg = ComparatorConfig::default();
        for v in Variant::ALL {
            let a = build_comparator::<f32>(v, &cfg, &mut Rng::new(1)).unwrap();
            let b = build_comparator::<f32>(v, &cfg, &mut Rng::new(2)).unwrap();
            assert_eq!(a.mac_count(512), b.mac_count(512));
            assert_eq!(a.param_count(), b.param_count());
        }
    }
}
