//! Central finite differences and the per-module gradient checks.

use serde::Serialize;

use crate::attention::{AlignedAttentionLayer, AttentionConfig, DualStream, TRAINABLE_PARAMS};
use crate::error::{Error, Result};
use crate::hmoe::{HmoeConfig, HmoeLayer};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_EPSILON: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-6;

/// Outcome of one analytic-versus-numeric comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub config: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn new(name: impl Into<String>, config: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            config: config.into(),
            max_rel_error,
            tolerance,
            pass: max_rel_error < tolerance,
        }
    }
}

/// `(f(θ + ε e_i) - f(θ - ε e_i)) / 2ε` for every coordinate of `theta`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, theta: &Tensor, eps: f64) -> Result<Tensor> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.data().to_vec();
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&Tensor::new(theta.shape(), probe.clone())?)?;
        probe[i] = orig - eps;
        let down = f(&Tensor::new(theta.shape(), probe.clone())?)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(theta.shape(), grad)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` with Euclidean norms over the whole tensor.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let diff = analytic.sub(numeric)?;
    let norm = |t: &Tensor| t.dot(t).map(f64::sqrt);
    let denom = norm(analytic)?.max(norm(numeric)?).max(1e-8);
    Ok(norm(&diff)? / denom)
}

fn sum_sq(t: &Tensor) -> f64 {
    0.5 * t.data().iter().map(|v| v * v).sum::<f64>()
}

fn attention_loss(layer: &AlignedAttentionLayer, stream: &DualStream) -> Result<f64> {
    let out = layer.forward(stream)?;
    Ok(sum_sq(&out.out_rgb) + sum_sq(&out.out_x))
}

/// Random attention layer and stream for checking; the guidance scalars are
/// drawn away from 0 and 1 so neither branch degenerates.
pub fn random_attention_case(config: &AttentionConfig, n_tokens: usize, seed: u64) -> Result<(AlignedAttentionLayer, DualStream)> {
    let mut rng = Rng::new(seed);
    let mut layer = AlignedAttentionLayer::random(config.clone(), &mut rng)?;
    layer.lora.w_x = rng.uniform(0.1, 0.9);
    layer.lora.w_rgb = rng.uniform(0.1, 0.9);
    let n_z = (n_tokens / 3).max(1);
    let h_rgb = rng.uniform_tensor(&[n_tokens, config.d_model], -1.0, 1.0)?;
    let h_x = rng.uniform_tensor(&[n_tokens, config.d_model], -1.0, 1.0)?;
    let stream = DualStream::new(h_rgb, h_x, n_z, n_tokens - n_z)?;
    Ok((layer, stream))
}

/// Gradient check of every trainable attention parameter and both input
/// token tensors under the loss `½‖out_rgb‖² + ½‖out_x‖²`.
pub fn gradcheck_attention(config: &AttentionConfig, n_tokens: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let (layer, stream) = random_attention_case(config, n_tokens, seed)?;
    let fwd = layer.forward(&stream)?;
    let grads = layer.backward(&fwd.cache, &fwd.out_rgb, &fwd.out_x)?;
    let fingerprint = format!(
        "attention d={} heads={} r={} n={} seed={}",
        config.d_model, config.n_heads, config.rank, n_tokens, seed
    );

    let mut reports = Vec::new();
    for name in TRAINABLE_PARAMS {
        let theta = layer.lora.param(name)?;
        let numeric = finite_diff_grad(
            |p| {
                let mut probe = layer.clone();
                probe.lora.set_param(name, p.clone())?;
                attention_loss(&probe, &stream)
            },
            &theta,
            FD_EPSILON,
        )?;
        let err = relative_error(&grads.param(name)?, &numeric)?;
        reports.push(GradCheckReport::new(name, &fingerprint, err, GRAD_TOLERANCE));
    }
    for (name, analytic, which) in [("h_rgb", &grads.h_rgb, 0), ("h_x", &grads.h_x, 1)] {
        let theta = if which == 0 { &stream.h_rgb } else { &stream.h_x };
        let numeric = finite_diff_grad(
            |p| {
                let mut probe = stream.clone();
                if which == 0 {
                    probe.h_rgb = p.clone();
                } else {
                    probe.h_x = p.clone();
                }
                attention_loss(&layer, &probe)
            },
            theta,
            FD_EPSILON,
        )?;
        reports.push(GradCheckReport::new(name, &fingerprint, relative_error(analytic, &numeric)?, GRAD_TOLERANCE));
    }
    Ok(reports)
}

/// Gradient check of every HMoE parameter and the input under `½‖y_out‖²`.
pub fn gradcheck_hmoe(config: &HmoeConfig, n_tokens: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(seed);
    let layer = HmoeLayer::random(config.clone(), &mut rng)?;
    let x: Tensor = rng.uniform_tensor(&[n_tokens, config.d_model], -1.0, 1.0)?;
    let fwd = layer.forward(&x)?;
    let grads = layer.backward(&fwd.cache, &fwd.y_out)?;
    let fingerprint = format!(
        "hmoe d={} h={} e={} r={} agg={:?} n={} seed={}",
        config.d_model, config.heads_per_expert, config.n_experts, config.expert_rank, config.patch_agg, n_tokens, seed
    );

    let mut reports = Vec::new();
    for name in layer.param_names() {
        let theta = layer.param(&name)?;
        let numeric = finite_diff_grad(
            |p| {
                let mut probe = layer.clone();
                probe.set_param(&name, p.clone())?;
                Ok(sum_sq(&probe.forward(&x)?.y_out))
            },
            &theta,
            FD_EPSILON,
        )?;
        let err = relative_error(&grads.param(&name)?, &numeric)?;
        reports.push(GradCheckReport::new(name, &fingerprint, err, GRAD_TOLERANCE));
    }
    let numeric = finite_diff_grad(|p| Ok(sum_sq(&layer.forward(p)?.y_out)), &x, FD_EPSILON)?;
    reports.push(GradCheckReport::new(
        "x_in",
        &fingerprint,
        relative_error(&grads.x_in, &numeric)?,
        GRAD_TOLERANCE,
    ));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let theta: Tensor = Rng::new(1).uniform_tensor(&[3, 4], -2.0, 2.0).unwrap();
        let g = finite_diff_grad(|p| p.dot(p), &theta, 1e-5).unwrap();
        assert!(relative_error(&theta.scale(2.0), &g).unwrap() < 1e-9);
        for (a, n) in theta.scale(2.0).data().iter().zip(g.data()) {
            assert!((a - n).abs() / a.abs().max(1e-8) < 1e-9);
        }
    }

    #[test]
    fn linear_gradient_is_step_independent() {
        let w: Tensor = Rng::new(2).uniform_tensor(&[5], -1.0, 1.0).unwrap();
        let theta: Tensor = Rng::new(3).uniform_tensor(&[5], -1.0, 1.0).unwrap();
        for eps in [1e-2, 1e-4, 1.0] {
            let g = finite_diff_grad(|p| p.dot(&w), &theta, eps).unwrap();
            assert!(g.max_abs_diff(&w).unwrap() < 1e-12, "eps={eps}");
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let theta = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|_| Ok(0.0), &theta, 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &theta, 1e-3),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn report_pass_flag() {
        assert!(GradCheckReport::new("a", "c", 1e-7, 1e-6).pass);
        assert!(!GradCheckReport::new("a", "c", 1e-6, 1e-6).pass);
    }

    #[test]
    fn small_attention_gradcheck() {
        let reports = gradcheck_attention(&AttentionConfig::new(8, 2, 2), 4, 5).unwrap();
        assert_eq!(reports.len(), 8);
        for r in reports {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn small_hmoe_gradcheck() {
        for r in gradcheck_hmoe(&HmoeConfig::new(8, 2, 2, 2), 4, 6).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }
}
