//! Fusion operators compared at matched geometry.
//!
//! Every comparator takes the two modality token sets (`N/2 x D` each, so `N`
//! tokens are fused in total) and returns one update per modality.
//!
//! * `hmoe`: the HMoE mixer on the row-concatenated tokens.
//! * `cross_attention`: projection-free, single-head, bidirectional:
//!   `softmax(a bᵀ/√D) b` and `softmax(b aᵀ/√D) a`.
//! * `mcp_local`: a per-token bottleneck over channel-concatenated features,
//!   `relu([a_i, b_i] W1 + b1) W2 + b2`, with no token-axis mixing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::add_bias;
use crate::error::{Error, Result};
use crate::hmoe::{HmoeConfig, HmoeLayer};
use crate::rng::{xavier_init, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Hmoe,
    CrossAttention,
    McpLocal,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Hmoe, Variant::CrossAttention, Variant::McpLocal];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hmoe => "hmoe",
            Variant::CrossAttention => "cross_attention",
            Variant::McpLocal => "mcp_local",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmoe" => Ok(Variant::Hmoe),
            "xattn" | "cross_attention" | "cross-attention" => Ok(Variant::CrossAttention),
            "mcp" | "mcp_local" | "mcp-local" => Ok(Variant::McpLocal),
            other => Err(Error::Config(format!("unknown fusion variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorConfig {
    pub d_model: usize,
    pub n_experts: usize,
    pub heads_per_expert: usize,
    pub expert_rank: usize,
    pub mcp_hidden: usize,
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            n_experts: 8,
            heads_per_expert: 2,
            expert_rank: 4,
            mcp_hidden: 8,
        }
    }
}

impl ComparatorConfig {
    pub fn hmoe(&self) -> HmoeConfig {
        HmoeConfig::new(self.d_model, self.heads_per_expert, self.n_experts, self.expert_rank)
    }
}

pub trait FusionComparator<T: Scalar> {
    fn variant(&self) -> Variant;
    /// Fuses `rgb` and `x` (same shape, `n x D`) into per-modality outputs.
    fn fuse(&self, rgb: &Tensor<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)>;
    /// Analytic MACs when `n_total` tokens are fused (`n_total / 2` per modality).
    fn mac_count(&self, n_total: usize) -> u64;
    fn param_count(&self) -> usize;
}

fn check_pair<T: Scalar>(rgb: &Tensor<T>, x: &Tensor<T>, d: usize) -> Result<()> {
    let (_, w) = rgb.dims2()?;
    if rgb.shape() != x.shape() || w != d {
        return Err(Error::dim("fuse", rgb.shape(), x.shape()));
    }
    Ok(())
}

pub struct HmoeFusion<T: Scalar> {
    pub layer: HmoeLayer<T>,
}

impl<T: Scalar> FusionComparator<T> for HmoeFusion<T> {
    fn variant(&self) -> Variant {
        Variant::Hmoe
    }

    fn fuse(&self, rgb: &Tensor<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        check_pair(rgb, x, self.layer.config().d_model)?;
        let n = rgb.shape()[0];
        let y = self.layer.forward(&Tensor::concat(&[rgb, x], 0)?)?.y_out;
        let mut parts = y.split(0, &[n, n])?.into_iter();
        let a = parts.next().expect("two parts");
        let b = parts.next().expect("two parts");
        Ok((a, b))
    }

    fn mac_count(&self, n_total: usize) -> u64 {
        self.layer.config().mac_count(n_total)
    }

    fn param_count(&self) -> usize {
        self.layer.config().param_count()
    }
}

pub struct CrossAttention {
    pub d_model: usize,
}

impl CrossAttention {
    fn attend<T: Scalar>(&self, q: &Tensor<T>, kv: &Tensor<T>) -> Result<Tensor<T>> {
        let scale = T::from_f64_lossy(1.0 / (self.d_model as f64).sqrt());
        q.matmul(&kv.transpose()?)?.scale(scale).softmax(1)?.matmul(kv)
    }
}

impl<T: Scalar> FusionComparator<T> for CrossAttention {
    fn variant(&self) -> Variant {
        Variant::CrossAttention
    }

    fn fuse(&self, rgb: &Tensor<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        check_pair(rgb, x, self.d_model)?;
        Ok((self.attend(rgb, x)?, self.attend(x, rgb)?))
    }

    /// Two passes, each `(N/2)² D` for the scores and again for the values.
    fn mac_count(&self, n_total: usize) -> u64 {
        let half = (n_total / 2) as u64;
        2 * 2 * half * half * self.d_model as u64
    }

    fn param_count(&self) -> usize {
        0
    }
}

pub struct McpLocal<T: Scalar> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> McpLocal<T> {
    pub fn random(rng: &mut Rng, d_model: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("mcp hidden width must be positive".into()));
        }
        Ok(Self {
            w1: xavier_init(rng, &[2 * d_model, hidden])?,
            b1: rng.uniform_tensor(&[hidden], -0.1, 0.1)?,
            w2: xavier_init(rng, &[hidden, 2 * d_model])?,
            b2: rng.uniform_tensor(&[2 * d_model], -0.1, 0.1)?,
        })
    }

    fn d_model(&self) -> usize {
        self.w1.shape()[0] / 2
    }

    fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }
}

impl<T: Scalar> FusionComparator<T> for McpLocal<T> {
    fn variant(&self) -> Variant {
        Variant::McpLocal
    }

    fn fuse(&self, rgb: &Tensor<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let d = self.d_model();
        check_pair(rgb, x, d)?;
        let cat = Tensor::concat(&[rgb, x], 1)?;
        let hidden = add_bias(&cat.matmul(&self.w1)?, &self.b1)?.map(|v| v.max(T::zero()));
        let y = add_bias(&hidden.matmul(&self.w2)?, &self.b2)?;
        let mut parts = y.split(1, &[d, d])?.into_iter();
        let a = parts.next().expect("two parts");
        let b = parts.next().expect("two parts");
        Ok((a, b))
    }

    /// `N/2` concatenated tokens through `2D -> hidden -> 2D`.
    fn mac_count(&self, n_total: usize) -> u64 {
        let half = (n_total / 2) as u64;
        half * 2 * (2 * self.d_model() as u64 * self.hidden() as u64)
    }

    fn param_count(&self) -> usize {
        let (d, h) = (self.d_model(), self.hidden());
        2 * d * h + h + h * 2 * d + 2 * d
    }
}

pub fn build_comparator<T: Scalar>(
    variant: Variant,
    config: &ComparatorConfig,
    rng: &mut Rng,
) -> Result<Box<dyn FusionComparator<T>>> {
    Ok(match variant {
        Variant::Hmoe => Box::new(HmoeFusion {
            layer: HmoeLayer::random(config.hmoe(), rng)?,
        }),
        Variant::CrossAttention => {
            if config.d_model == 0 {
                return Err(Error::Config("d_model must be positive".into()));
            }
            Box::new(CrossAttention { d_model: config.d_model })
        }
        Variant::McpLocal => Box::new(McpLocal::random(rng, config.d_model, config.mcp_hidden)?),
    })
}

fn rows_equal<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, row: usize) -> bool {
    let d = a.shape()[1];
    a.data()[row * d..(row + 1) * d] == b.data()[row * d..(row + 1) * d]
}

fn zero_row<T: Scalar>(t: &Tensor<T>, row: usize) -> Result<Tensor<T>> {
    let d = t.shape()[1];
    let mut data = t.data().to_vec();
    data[row * d..(row + 1) * d].fill(T::zero());
    Tensor::new(t.shape(), data)
}

/// True when zeroing token `j` (in both modalities) leaves every other output
/// token bit-identical, for every `j`.
pub fn locality_check<T: Scalar>(c: &dyn FusionComparator<T>, rgb: &Tensor<T>, x: &Tensor<T>) -> Result<bool> {
    let (base_a, base_b) = c.fuse(rgb, x)?;
    let n = rgb.shape()[0];
    for j in 0..n {
        let (a, b) = c.fuse(&zero_row(rgb, j)?, &zero_row(x, j)?)?;
        for i in (0..n).filter(|&i| i != j) {
            if !rows_equal(&a, &base_a, i) || !rows_equal(&b, &base_b, i) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn permute_rows<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let d = t.shape()[1];
    let data = perm
        .iter()
        .flat_map(|&p| t.data()[p * d..(p + 1) * d].iter().copied())
        .collect();
    Tensor::new(t.shape(), data)
}

/// True when permuting the input tokens permutes the outputs identically.
pub fn permutation_check<T: Scalar>(
    c: &dyn FusionComparator<T>,
    rgb: &Tensor<T>,
    x: &Tensor<T>,
    perm: &[usize],
) -> Result<bool> {
    let (a, b) = c.fuse(rgb, x)?;
    let (pa, pb) = c.fuse(&permute_rows(rgb, perm)?, &permute_rows(x, perm)?)?;
    Ok(pa == permute_rows(&a, perm)? && pb == permute_rows(&b, perm)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ComparatorConfig {
        ComparatorConfig {
            d_model: 8,
            n_experts: 3,
            heads_per_expert: 2,
            expert_rank: 2,
            mcp_hidden: 4,
        }
    }

    fn inputs(rng: &mut Rng, n: usize) -> (Tensor, Tensor) {
        (
            rng.uniform_tensor(&[n, 8], -1.0, 1.0).unwrap(),
            rng.uniform_tensor(&[n, 8], -1.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn locality_separates_variants() {
        let mut rng = Rng::new(1);
        for v in Variant::ALL {
            let c = build_comparator::<f64>(v, &small(), &mut rng).unwrap();
            let (a, b) = inputs(&mut rng, 5);
            assert_eq!(locality_check(c.as_ref(), &a, &b).unwrap(), v == Variant::McpLocal, "{v}");
        }
    }

    #[test]
    fn mcp_is_permutation_equivariant() {
        let mut rng = Rng::new(2);
        let c = build_comparator::<f64>(Variant::McpLocal, &small(), &mut rng).unwrap();
        let (a, b) = inputs(&mut rng, 6);
        let perm = rng.permutation(6);
        assert!(permutation_check(c.as_ref(), &a, &b, &perm).unwrap());
    }

    #[test]
    fn shapes_and_costs() {
        let mut rng = Rng::new(3);
        let cfg = small();
        for v in Variant::ALL {
            let c = build_comparator::<f64>(v, &cfg, &mut rng).unwrap();
            let (a, b) = inputs(&mut rng, 4);
            let (ya, yb) = c.fuse(&a, &b).unwrap();
            assert_eq!((ya.shape(), yb.shape()), (a.shape(), b.shape()));
            assert!(c.mac_count(8) > 0);
        }
        let x = CrossAttention { d_model: 768 };
        let m = |n| FusionComparator::<f32>::mac_count(&x, n);
        assert_eq!(m(512), 512 * 512 * 768);
        assert_eq!(m(1024), 4 * m(512));
        let mcp = McpLocal::<f64>::random(&mut rng, 8, 4).unwrap();
        assert_eq!(mcp.param_count(), 16 * 4 + 4 + 4 * 16 + 16);
        assert_eq!(mcp.mac_count(10), 5 * 2 * 16 * 4);
    }

    #[test]
    fn cross_attention_rows_are_convex_combinations() {
        let mut rng = Rng::new(4);
        let (a, b) = inputs(&mut rng, 5);
        let (ya, _) = CrossAttention { d_model: 8 }.fuse(&a, &b).unwrap();
        for c in 0..8 {
            let lo = (0..5).map(|j| b.at(j, c)).fold(f64::INFINITY, f64::min);
            let hi = (0..5).map(|j| b.at(j, c)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..5 {
                let v = ya.at(i, c);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn parse_variants() {
        assert_eq!("xattn".parse::<Variant>().unwrap(), Variant::CrossAttention);
        assert_eq!("mcp".parse::<Variant>().unwrap(), Variant::McpLocal);
        assert!("conv".parse::<Variant>().is_err());
        let (a, b) = inputs(&mut Rng::new(5), 3);
        assert!(CrossAttention { d_model: 8 }.fuse(&a, &b.narrow(0, 0, 2).unwrap()).is_err());
    }
}
