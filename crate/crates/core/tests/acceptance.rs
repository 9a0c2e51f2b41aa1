//! Acceptance battery. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mmfuse_core::attention::{amg_align, AlignedAttentionLayer, AttentionConfig, DualStream};
use mmfuse_core::bench::comparators::{build_comparator, locality_check, ComparatorConfig, Variant};
use mmfuse_core::bench::{bench_scaling, TimingProtocol};
use mmfuse_core::encoder::{Encoder, EncoderConfig, HmoeSpec};
use mmfuse_core::hmoe::HmoeLayer;
use mmfuse_core::verification::gradcheck::{FD_EPSILON, GRAD_TOLERANCE};
use mmfuse_core::verification::metrics::{alignment_stats, cosine_similarity, symmetric_kl};
use mmfuse_core::verification::suite::random_hmoe_config;
use mmfuse_core::verification::{gradcheck_suite, oracle_suite, CheckModule, ORACLE_TOLERANCE};
use mmfuse_core::{Result, Rng, Tensor};

const SEED: u64 = 20_240_917;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn oracle_equivalence() -> Result<Outcome> {
    let start = Instant::now();
    let records = oracle_suite(CheckModule::All, 100, SEED)?;
    let elapsed = start.elapsed();
    let mut worst: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for r in &records {
        let e = worst.entry(r.name.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 = e.1.max(r.error);
    }
    let enough = ["attention_oracle", "hmoe_oracle"]
        .iter()
        .all(|name| worst.get(name).is_some_and(|(n, _)| *n >= 100));
    let all_pass = records.iter().all(|r| r.pass && r.tolerance <= 1e-11);
    let detail = worst
        .iter()
        .map(|(name, (n, e))| format!("{name}: {n} configs, max diff {e:.2e}"))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(Outcome::new(
        enough && all_pass && elapsed < Duration::from_secs(60),
        format!("{detail}; tolerance {ORACLE_TOLERANCE:.0e}; {:.2} s", elapsed.as_secs_f64()),
    ))
}

fn gradient_correctness() -> Result<Outcome> {
    let start = Instant::now();
    let records = gradcheck_suite(CheckModule::All, 10, SEED)?;
    let elapsed = start.elapsed();
    let class = |name: &str| -> String {
        if name.starts_with("expert") {
            "expert factors".into()
        } else {
            name.to_string()
        }
    };
    let mut configs: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for r in &records {
        configs.entry(class(&r.name)).or_default().insert(r.config.as_str());
    }
    let required = [
        "ak", "bk", "av", "bv", "w_x", "w_rgb", "phi", "expert factors", "pre.a", "pre.b", "post.a", "post.b",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|c| configs.get(*c).map_or(0, |s| s.len()) < 10)
        .collect();
    let worst = records.iter().map(|r| r.error).fold(0.0, f64::max);
    let failed = records.iter().filter(|r| !r.pass).count();
    let pass = missing.is_empty()
        && failed == 0
        && GRAD_TOLERANCE <= 1e-6
        && FD_EPSILON == 1e-5
        && elapsed < Duration::from_secs(300);
    Ok(Outcome::new(
        pass,
        format!(
            "{} checks over {} classes, {failed} failed, max rel err {worst:.2e} (eps {FD_EPSILON:.0e}, tol {GRAD_TOLERANCE:.0e}); \
             under-covered classes {missing:?}; {:.2} s",
            records.len(),
            configs.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn amg_identities() -> Result<Outcome> {
    let mut rng = Rng::new(SEED);
    let mut failures = Vec::new();
    let mut cases = 0;
    let shapes: Vec<Vec<usize>> = (0..200)
        .map(|i| if i == 0 { vec![12, 320, 320] } else { vec![1 + i % 4, 1 + i % 9, 1 + i % 9] })
        .collect();
    for shape in shapes {
        cases += 1;
        let spread = rng.uniform(1e-3, 50.0);
        let a: Tensor = rng.uniform_tensor(&shape, -spread, spread)?;
        let b: Tensor = rng.uniform_tensor(&shape, -spread, spread)?;
        if amg_align(0.0, 0.0, &a, &b)? != (a.clone(), b.clone()) {
            failures.push("w=0 identity");
        }
        if amg_align(1.0, 1.0, &a, &b)? != (b.clone(), a.clone()) {
            failures.push("w=1 swap");
        }
        let mean = a.add(&b)?.scale(0.5);
        if amg_align(0.5, 0.5, &a, &b)? != (mean.clone(), mean) {
            failures.push("w=0.5 mean");
        }
        let (w_x, w_rgb) = (rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0));
        if amg_align(w_x, w_rgb, &a, &a)? != (a.clone(), a.clone()) {
            failures.push("equal inputs");
        }
        let (w_x, w_rgb) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
        let (r, x) = amg_align(w_x, w_rgb, &a, &b)?;
        let convex = a.data().iter().zip(b.data()).enumerate().all(|(i, (&p, &q))| {
            let (lo, hi) = (p.min(q), p.max(q));
            (lo..=hi).contains(&r.data()[i]) && (lo..=hi).contains(&x.data()[i])
        });
        if !convex {
            failures.push("convexity");
        }
    }
    failures.dedup();
    Ok(Outcome::new(
        failures.is_empty(),
        format!("{cases} random map pairs incl. 12x320x320, bitwise comparisons; violations {failures:?}"),
    ))
}

fn stochastic_error(layer: &HmoeLayer, x: &Tensor) -> Result<f64> {
    let c = layer.forward(x)?.cache;
    let (rows, cols) = (c.gate.shape()[0], c.gate.shape()[1]);
    let mut worst: f64 = 0.0;
    for j in 0..cols {
        let s: f64 = (0..rows).map(|i| c.gate.data()[i * cols + j]).sum();
        worst = worst.max((s - 1.0).abs());
    }
    for row in c.affinity.data().chunks_exact(c.affinity.shape()[1]) {
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    let negative = c.gate.data().iter().chain(c.affinity.data()).any(|&v| v < 0.0);
    Ok(if negative { f64::INFINITY } else { worst })
}

fn stochasticity() -> Result<Outcome> {
    let mut rng = Rng::new(SEED);
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for _ in 0..200 {
        let cfg = random_hmoe_config(&mut rng);
        let n = 1 + rng.below(12);
        let layer = HmoeLayer::random(cfg.clone(), &mut rng)?;
        let x = rng.uniform_tensor(&[n, cfg.d_model], -5.0, 5.0)?;
        worst = worst.max(stochastic_error(&layer, &x)?);
        configs += 1;
    }
    let base = EncoderConfig::vit_base();
    for (spec, n) in [(&base.hmoe_attn, 2 * base.n_z), (&base.hmoe_ffn, 2 * base.n_c), (&base.hmoe_ffn, 1024)] {
        let layer = HmoeLayer::random(spec.with_width(base.d_model), &mut rng)?;
        let x = rng.uniform_tensor(&[n, base.d_model], -3.0, 3.0)?;
        worst = worst.max(stochastic_error(&layer, &x)?);
        configs += 1;
    }
    Ok(Outcome::new(
        worst < 1e-12,
        format!("{configs} configs incl. D=768 e=4/8 at up to 1024 tokens; max |sum - 1| {worst:.2e}"),
    ))
}

fn merge_equivalence() -> Result<Outcome> {
    let mut rng = Rng::new(SEED);
    let mut worst: f64 = 0.0;
    let mut zero_lora = true;
    for _ in 0..3 {
        let mut layer = AlignedAttentionLayer::random(AttentionConfig::vit_base(), &mut rng)?;
        layer.lora.w_x = rng.uniform(-0.5, 1.5);
        layer.lora.w_rgb = rng.uniform(-0.5, 1.5);
        let (n_z, n_c) = (16, 48);
        let stream = DualStream::new(
            rng.uniform_tensor(&[n_z + n_c, 768], -1.0, 1.0)?,
            rng.uniform_tensor(&[n_z + n_c, 768], -1.0, 1.0)?,
            n_z,
            n_c,
        )?;
        let bypass = layer.forward(&stream)?;
        let merged = layer.merge()?;
        let (r, x) = merged.forward(&stream)?;
        worst = worst.max(r.max_abs_diff(&bypass.out_rgb)?).max(x.max_abs_diff(&bypass.out_x)?);
        zero_lora &= merged.lora_param_count() == 0 && merged.learnable_param_count() == 2;
    }
    Ok(Outcome::new(
        worst < 1e-12 && zero_lora,
        format!("3 layers D=768 r=8, 64 tokens; max abs diff {worst:.2e}; merged LoRA params 0: {zero_lora}"),
    ))
}

/// Leading two significant figures of `v` in millions, truncated and rounded.
fn two_sig_figs_millions(v: usize) -> (f64, f64) {
    let m = v as f64 / 1e6;
    let scale = 10f64.powi(1 - m.log10().floor() as i32);
    ((m * scale).floor() / scale, (m * scale).round() / scale)
}

fn parameter_budget() -> Result<Outcome> {
    let report = EncoderConfig::vit_base().param_report();
    let (trunc, round) = two_sig_figs_millions(report.amg_lora);
    let amg_ok = report.amg_lora == 147_468 && (trunc - 0.14).abs() < 1e-12;
    let hmoe_ref = 460_000.0;
    let delta = report.hmoe as f64 - hmoe_ref;
    let hmoe_ok = report.hmoe == 423_936 && (delta / hmoe_ref).abs() <= 0.15;
    Ok(Outcome::new(
        amg_ok && hmoe_ok,
        format!(
            "AMG-LoRA {} (2 s.f. truncated {trunc}M, rounded {round}M; reference 0.14M); \
             HMoE {} vs 0.46M: delta {delta:+.0} ({:+.1}%)",
            report.amg_lora,
            report.hmoe,
            100.0 * delta / hmoe_ref
        ),
    ))
}

fn complexity_scaling() -> Result<Outcome> {
    let start = Instant::now();
    let n_list = [128, 256, 512, 1024];
    let config = ComparatorConfig::default();
    let protocol = TimingProtocol {
        iterations: 60,
        ..TimingProtocol::default()
    };
    let hmoe = bench_scaling(Variant::Hmoe, &n_list, &config, &protocol, SEED)?;
    let xattn = bench_scaling(Variant::CrossAttention, &n_list, &config, &protocol, SEED)?;
    let at = |r: &mmfuse_core::bench::ScalingResult, n: usize| {
        r.reports.iter().find(|b| b.n_tokens == n).map(|b| b.timing.median_s).unwrap_or(f64::NAN)
    };
    let speedup = at(&xattn, 512) / at(&hmoe, 512);
    let elapsed = start.elapsed();
    let medians = |r: &mmfuse_core::bench::ScalingResult| {
        r.reports
            .iter()
            .map(|b| format!("{:.2}ms", b.timing.median_s * 1e3))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let pass = (0.8..=1.3).contains(&hmoe.slope)
        && (1.7..=2.3).contains(&xattn.slope)
        && speedup >= 1.2
        && elapsed < Duration::from_secs(600);
    Ok(Outcome::new(
        pass,
        format!(
            "D=768 e=8 h=2 f32 pinned={}: HMoE slope {:.3} [{}], cross-attention slope {:.3} [{}], \
             speed-up at N=512 {speedup:.2}x; {:.1} s",
            hmoe.reports[0].pinned,
            hmoe.slope,
            medians(&hmoe),
            xattn.slope,
            medians(&xattn),
            elapsed.as_secs_f64()
        ),
    ))
}

fn mac_insensitivity() -> Result<Outcome> {
    let mut totals = Vec::new();
    for h in [1, 2, 4, 8] {
        let mut cfg = EncoderConfig::vit_base();
        cfg.hmoe_attn.heads_per_expert = h;
        cfg.hmoe_ffn.heads_per_expert = h;
        cfg.validate()?;
        totals.push(cfg.mac_report().total);
    }
    let (lo, hi) = (*totals.iter().min().unwrap(), *totals.iter().max().unwrap());
    let spread = (hi - lo) as f64 / lo as f64;
    Ok(Outcome::new(
        spread < 0.01,
        format!("encoder MACs for h=1,2,4,8: {totals:?}; spread {:.3}%", 100.0 * spread),
    ))
}

fn function_preserving_init() -> Result<Outcome> {
    let mut rng = Rng::new(SEED);
    let mut geometries = vec![(4, 2, 8, 2, 4), (6, 3, 12, 3, 5), (5, 1, 16, 4, 9)];
    geometries.push((12, 2, 32, 4, 16));
    let mut mismatches = 0;
    for &(layers, every, d, n_z, n_c) in &geometries {
        let mut cfg = EncoderConfig::tiny(layers, every, d, n_z, n_c);
        cfg.w_init = 0.0;
        cfg.hmoe_ffn = HmoeSpec::new(2, 4, 1);
        let enc = Encoder::init(cfg, &mut rng)?;
        for _ in 0..5 {
            let h_rgb: Tensor = rng.uniform_tensor(&[n_z + n_c, d], -2.0, 2.0)?;
            let h_x: Tensor = rng.uniform_tensor(&[n_z + n_c, d], -2.0, 2.0)?;
            let out = enc.forward(&DualStream::new(h_rgb.clone(), h_x.clone(), n_z, n_c)?)?;
            let base_rgb = enc.forward_frozen_single(&h_rgb)?;
            let base_x = enc.forward_frozen_single(&h_x)?;
            let fused = base_rgb.narrow(0, n_z, n_c)?.add(&base_x.narrow(0, n_z, n_c)?)?;
            if out.final_rgb != base_rgb || out.final_x != base_x || out.fused_candidate != fused {
                mismatches += 1;
            }
        }
    }
    Ok(Outcome::new(
        mismatches == 0,
        format!("{} encoders x 5 inputs, up to 12 layers; bitwise mismatches {mismatches}", geometries.len()),
    ))
}

fn metric_correctness() -> Result<Outcome> {
    let mut rng = Rng::new(SEED);
    let mut failures = Vec::new();
    let mut worst_scale: f64 = 0.0;
    for i in 0..500 {
        let len = 1 + i % 64;
        let a: Tensor = rng.uniform_tensor(&[len], -10.0, 10.0)?;
        let b: Tensor = rng.uniform_tensor(&[len], -10.0, 10.0)?;
        if cosine_similarity(a.data(), a.data()) != 1.0 {
            failures.push("cos(a,a)");
        }
        let k = 10f64.powf(rng.uniform(-6.0, 6.0));
        let scaled = b.scale(k);
        worst_scale = worst_scale.max((cosine_similarity(a.data(), scaled.data()) - cosine_similarity(a.data(), b.data())).abs());
        let (p, q) = (a.softmax(0)?, b.softmax(0)?);
        if symmetric_kl(p.data(), p.data()) != 0.0 {
            failures.push("skl(a,a)");
        }
        if symmetric_kl(p.data(), q.data()) != symmetric_kl(q.data(), p.data()) {
            failures.push("skl symmetry");
        }
    }
    let maps: Tensor = rng.uniform_tensor(&[12, 64, 64], -3.0, 3.0)?;
    let stats = alignment_stats(std::slice::from_ref(&maps), std::slice::from_ref(&maps))?;
    if stats.mean_cosine != 1.0 || stats.mean_skl != 0.0 {
        failures.push("layer stats on identical maps");
    }
    failures.dedup();
    Ok(Outcome::new(
        failures.is_empty() && worst_scale < 1e-12,
        format!("500 vector pairs + 12x64x64 maps; scale invariance max diff {worst_scale:.2e}; violations {failures:?}"),
    ))
}

fn locality_discrimination() -> Result<Outcome> {
    let mut rng = Rng::new(SEED);
    let mut local = BTreeMap::new();
    for _ in 0..20 {
        let h = 1 + rng.below(3);
        let cfg = ComparatorConfig {
            d_model: h * (2 + rng.below(4)),
            n_experts: 1 + rng.below(4),
            heads_per_expert: h,
            expert_rank: 1,
            mcp_hidden: 1 + rng.below(8),
        };
        let n = 2 + rng.below(7);
        let rgb: Tensor = rng.uniform_tensor(&[n, cfg.d_model], -1.0, 1.0)?;
        let x: Tensor = rng.uniform_tensor(&[n, cfg.d_model], -1.0, 1.0)?;
        for variant in Variant::ALL {
            let c = build_comparator::<f64>(variant, &cfg, &mut rng)?;
            let is_local = locality_check(c.as_ref(), &rgb, &x)?;
            *local.entry(variant.name()).or_insert(0) += usize::from(is_local);
        }
    }
    let get = |v: Variant| local.get(v.name()).copied().unwrap_or(0);
    let pass = get(Variant::McpLocal) == 20 && get(Variant::Hmoe) == 0 && get(Variant::CrossAttention) == 0;
    Ok(Outcome::new(
        pass,
        format!(
            "20 configs: local verdicts mcp {}/20, hmoe {}/20, cross-attention {}/20",
            get(Variant::McpLocal),
            get(Variant::Hmoe),
            get(Variant::CrossAttention)
        ),
    ))
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient correctness", gradient_correctness),
        ("AMG algebraic identities", amg_identities),
        ("stochasticity invariants", stochasticity),
        ("LoRA merge equivalence", merge_equivalence),
        ("parameter budget", parameter_budget),
        ("complexity scaling", complexity_scaling),
        ("MAC insensitivity to heads", mac_insensitivity),
        ("function-preserving init", function_preserving_init),
        ("alignment metrics", metric_correctness),
        ("locality discrimination", locality_discrimination),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
