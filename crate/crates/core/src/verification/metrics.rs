//! Attention alignment statistics between the two streams.
//!
//! Cosine similarity is taken on flattened pre-softmax maps, one value per
//! head, averaged over heads. The symmetric KL divergence is taken on the
//! row-softmaxed maps, one value per attention row, averaged over rows and
//! then heads. Values are reported unscaled.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking logs.
pub const SKL_EPSILON: f64 = 1e-12;

/// Cosine similarity, clamped to `[-1, 1]`. Two zero vectors count as
/// identical (1); a zero vector against a non-zero one gives 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 && bb == 0.0 {
        return 1.0;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// `½ [KL(p‖q) + KL(q‖p)] = ½ Σ (p − q)(ln p − ln q)` with both sides
/// clamped at [`SKL_EPSILON`]. Exactly symmetric in its arguments.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a.max(SKL_EPSILON), b.max(SKL_EPSILON));
        acc += (a - b) * (a.ln() - b.ln());
    }
    0.5 * acc
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAlignment {
    pub cosine: f64,
    pub skl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentStats {
    pub layers: Vec<LayerAlignment>,
    pub mean_cosine: f64,
    pub mean_skl: f64,
    /// How `skl` values are expressed.
    pub skl_units: &'static str,
}

fn layer_alignment(a: &Tensor, b: &Tensor) -> Result<LayerAlignment> {
    if a.shape() != b.shape() {
        return Err(Error::dim("alignment_stats", a.shape(), b.shape()));
    }
    let &[heads, n, m] = a.shape() else {
        return Err(Error::shape(a.shape(), "attention maps must be heads x N x N"));
    };
    let block = n * m;
    let (mut cos, mut skl) = (0.0, 0.0);
    let pa = a.softmax(2)?;
    let pb = b.softmax(2)?;
    for h in 0..heads {
        let range = h * block..(h + 1) * block;
        cos += cosine_similarity(&a.data()[range.clone()], &b.data()[range.clone()]);
        let mut rows = 0.0;
        for (ra, rb) in pa.data()[range.clone()]
            .chunks_exact(m)
            .zip(pb.data()[range].chunks_exact(m))
        {
            rows += symmetric_kl(ra, rb);
        }
        skl += rows / n as f64;
    }
    Ok(LayerAlignment {
        cosine: cos / heads as f64,
        skl: skl / heads as f64,
    })
}

/// Per-layer and mean alignment between paired pre-softmax maps.
pub fn alignment_stats(maps_rgb: &[Tensor], maps_x: &[Tensor]) -> Result<AlignmentStats> {
    if maps_rgb.len() != maps_x.len() || maps_rgb.is_empty() {
        return Err(Error::Dim {
            op: "alignment_stats",
            lhs: vec![maps_rgb.len()],
            rhs: vec![maps_x.len()],
        });
    }
    let layers = maps_rgb
        .iter()
        .zip(maps_x)
        .map(|(a, b)| layer_alignment(a, b))
        .collect::<Result<Vec<_>>>()?;
    let count = layers.len() as f64;
    Ok(AlignmentStats {
        mean_cosine: layers.iter().map(|l| l.cosine).sum::<f64>() / count,
        mean_skl: layers.iter().map(|l| l.skl).sum::<f64>() / count,
        layers,
        skl_units: "nats, unscaled",
    })
}

/// Splits a `layers x heads x N x N` tensor (or a single `heads x N x N`
/// map) into per-layer maps.
pub fn per_layer_maps(t: &Tensor) -> Result<Vec<Tensor>> {
    match t.rank() {
        3 => Ok(vec![t.clone()]),
        4 => {
            let s = t.shape();
            (0..s[0])
                .map(|l| t.narrow(0, l, 1)?.reshape(&s[1..]))
                .collect()
        }
        _ => Err(Error::shape(t.shape(), "expected rank 3 or 4 attention maps")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::amg_align;
    use crate::rng::Rng;

    fn maps(seed: u64) -> Vec<Tensor> {
        let mut rng = Rng::new(seed);
        (0..3).map(|_| rng.uniform_tensor(&[2, 5, 5], -3.0, 3.0).unwrap()).collect()
    }

    #[test]
    fn identical_maps() {
        let a = maps(1);
        let s = alignment_stats(&a, &a).unwrap();
        assert_eq!(s.mean_cosine, 1.0);
        assert_eq!(s.mean_skl, 0.0);
        for l in &s.layers {
            assert_eq!((l.cosine, l.skl), (1.0, 0.0));
        }
    }

    #[test]
    fn disjoint_support_is_large_but_finite() {
        let v = symmetric_kl(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(v.is_finite());
        assert!((v - (1.0 / SKL_EPSILON).ln()).abs() < 1e-6, "{v}");
    }

    #[test]
    fn symmetric_and_scale_invariant() {
        let (a, b) = (maps(2), maps(3));
        assert_eq!(alignment_stats(&a, &b).unwrap(), alignment_stats(&b, &a).unwrap());
        let a2: Vec<_> = a.iter().map(|t| t.scale(7.5)).collect();
        let b2: Vec<_> = b.iter().map(|t| t.scale(7.5)).collect();
        let (s1, s2) = (alignment_stats(&a, &b).unwrap(), alignment_stats(&a2, &b2).unwrap());
        assert!((s1.mean_cosine - s2.mean_cosine).abs() < 1e-12);
    }

    #[test]
    fn full_guidance_swap_keeps_stats() {
        let (a, b) = (maps(4), maps(5));
        let (sa, sb): (Vec<_>, Vec<_>) = a
            .iter()
            .zip(&b)
            .map(|(x, y)| amg_align(1.0, 1.0, x, y).unwrap())
            .unzip();
        let before = alignment_stats(&a, &b).unwrap();
        let after = alignment_stats(&sa, &sb).unwrap();
        assert!((before.mean_cosine - after.mean_cosine).abs() < 1e-12);
        assert!((before.mean_skl - after.mean_skl).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = maps(6);
        assert!(alignment_stats(&a, &a[..2]).is_err());
        let flat = vec![Tensor::zeros(&[5, 5]).unwrap()];
        assert!(alignment_stats(&flat, &flat).is_err());
        let other = vec![Tensor::zeros(&[2, 4, 4]).unwrap(); 3];
        assert!(alignment_stats(&a, &other).is_err());
    }

    #[test]
    fn cosine_zero_vectors() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]), -1.0);
    }

    #[test]
    fn stacked_maps_split_per_layer() {
        let t: Tensor = Rng::new(8).uniform_tensor(&[3, 2, 4, 4], -1.0, 1.0).unwrap();
        let layers = per_layer_maps(&t).unwrap();
        assert_eq!(layers.len(), 3);
        assert_eq!(layers[2].get(&[1, 3, 0]).unwrap(), t.get(&[2, 1, 3, 0]).unwrap());
    }
}
