//! Wall-clock harness: warmups, batched samples, robust summary statistics.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};

pub const MIN_WARMUPS: usize = 5;
pub const MIN_ITERATIONS: usize = 30;
/// Upper bound on calls folded into one sample for very fast operators.
pub const MAX_BATCH: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingProtocol {
    pub warmups: usize,
    pub iterations: usize,
    /// Samples shorter than this are batched over several calls.
    pub min_sample: Duration,
}

impl Default for TimingProtocol {
    fn default() -> Self {
        Self {
            warmups: MIN_WARMUPS,
            iterations: MIN_ITERATIONS,
            min_sample: Duration::from_micros(200),
        }
    }
}

impl TimingProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.warmups < MIN_WARMUPS || self.iterations < MIN_ITERATIONS {
            return Err(Error::Config(format!(
                "timing needs at least {MIN_WARMUPS} warmups and {MIN_ITERATIONS} iterations, got {} and {}",
                self.warmups, self.iterations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingStats {
    pub median_s: f64,
    pub q1_s: f64,
    pub q3_s: f64,
    pub iqr_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub iterations: usize,
    pub warmups: usize,
    /// Calls averaged into each sample.
    pub batch: usize,
    /// Set when even the largest batch could not reach the sample floor.
    pub unreliable: bool,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(samples: &[f64], warmups: usize, batch: usize, unreliable: bool) -> TimingStats {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.75));
    TimingStats {
        median_s: quantile(&sorted, 0.5),
        q1_s: q1,
        q3_s: q3,
        iqr_s: q3 - q1,
        min_s: sorted.first().copied().unwrap_or(f64::NAN),
        max_s: sorted.last().copied().unwrap_or(f64::NAN),
        iterations: samples.len(),
        warmups,
        batch,
        unreliable,
    }
}

/// Times `f` under `protocol`. The closure's output is passed through
/// `black_box` so the work cannot be optimized away.
pub fn measure<R>(protocol: &TimingProtocol, mut f: impl FnMut() -> Result<R>) -> Result<TimingStats> {
    protocol.validate()?;
    for _ in 0..protocol.warmups {
        black_box(f()?);
    }
    let start = Instant::now();
    black_box(f()?);
    let single = start.elapsed();

    let mut batch = 1;
    let mut unreliable = false;
    if single < protocol.min_sample {
        let want = (protocol.min_sample.as_secs_f64() / single.as_secs_f64().max(1e-9)).ceil() as usize;
        batch = want.clamp(1, MAX_BATCH);
        unreliable = want > MAX_BATCH;
    }

    let mut samples = Vec::with_capacity(protocol.iterations);
    for _ in 0..protocol.iterations {
        let t = Instant::now();
        for _ in 0..batch {
            black_box(f()?);
        }
        samples.push(t.elapsed().as_secs_f64() / batch as f64);
    }
    unreliable |= samples.iter().any(|&s| s <= 0.0);
    Ok(summarize(&samples, protocol.warmups, batch, unreliable))
}

/// Pins the calling thread to the CPU it is currently running on.
/// Returns whether pinning succeeded.
#[cfg(target_os = "linux")]
pub fn pin_current_thread() -> bool {
    // SAFETY: cpu_set_t is plain data; both calls only read/write the local set.
    unsafe {
        let cpu = libc::sched_getcpu();
        if cpu < 0 {
            return false;
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu as usize, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread() -> bool {
    false
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("slope fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !v.is_finite() || v <= 0.0) {
        return Err(Error::Numeric("slope fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in lx.iter().zip(&ly) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        return Err(Error::Config("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_power_law() {
        let xs = [128.0, 256.0, 512.0, 1024.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((fit_loglog_slope(&xs, &ys).unwrap() - 1.7).abs() < 1e-12);
        assert!(fit_loglog_slope(&xs[..1], &ys[..1]).is_err());
        assert!(fit_loglog_slope(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(fit_loglog_slope(&[1.0, 2.0], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn protocol_minimums() {
        let mut p = TimingProtocol::default();
        assert!(p.validate().is_ok());
        p.iterations = 29;
        assert!(measure(&p, || Ok(())).is_err());
    }

    #[test]
    fn measure_reports_consistent_stats() {
        let stats = measure(&TimingProtocol::default(), || Ok((0..100u64).sum::<u64>())).unwrap();
        assert_eq!(stats.iterations, MIN_ITERATIONS);
        assert!(stats.batch > 1);
        assert!(stats.min_s <= stats.median_s && stats.median_s <= stats.max_s);
        assert!(stats.iqr_s >= 0.0);
    }

    proptest! {
        #[test]
        fn median_is_bracketed(samples in prop::collection::vec(1e-6f64..1.0, 1..50)) {
            let s = summarize(&samples, 5, 1, false);
            prop_assert!(s.min_s <= s.q1_s && s.q1_s <= s.median_s);
            prop_assert!(s.median_s <= s.q3_s && s.q3_s <= s.max_s);
        }
    }
}
