//! Scalar-loop reference implementations.
//!
//! These read raw weights out of the layers and recompute every equation with
//! explicit index loops over `Vec<Vec<f64>>`. None of them call a `Tensor`
//! operation, so a bug in the vectorized path cannot hide in both.

#![allow(clippy::needless_range_loop)]

use crate::attention::{AlignedAttentionLayer, DualStream, FrozenAttention, ScaleMode};
use crate::encoder::{BlockAttention, Encoder, Ffn};
use crate::error::{Error, Result};
use crate::hmoe::{HmoeLayer, PatchAgg};
use crate::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Result<Mat> {
    let (r, c) = t.dims2()?;
    Ok((0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect())
}

pub fn from_mat(m: &Mat) -> Result<Tensor> {
    let cols = m.first().map_or(0, Vec::len);
    let data: Vec<f64> = m.iter().flat_map(|row| row.iter().copied()).collect();
    Tensor::new(&[m.len(), cols], data)
}

pub fn cube_to_tensor(c: &[Mat]) -> Result<Tensor> {
    let (h, n, m) = (c.len(), c[0].len(), c[0][0].len());
    let data: Vec<f64> = c.iter().flatten().flatten().copied().collect();
    Tensor::new(&[h, n, m], data)
}

pub fn oracle_matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn softmax_vec(xs: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    let mut z = 0.0;
    for &x in xs {
        z += (x - max).exp();
    }
    xs.iter().map(|&x| (x - max).exp() / z).collect()
}

/// Row-wise softmax.
pub fn oracle_softmax_rows(m: &Mat) -> Mat {
    m.iter().map(|row| softmax_vec(row)).collect()
}

/// Column-wise softmax.
pub fn oracle_softmax_cols(m: &Mat) -> Mat {
    let (r, c) = (m.len(), m[0].len());
    let mut out = vec![vec![0.0; c]; r];
    for j in 0..c {
        let col: Vec<f64> = (0..r).map(|i| m[i][j]).collect();
        for (i, v) in softmax_vec(&col).into_iter().enumerate() {
            out[i][j] = v;
        }
    }
    out
}

/// `x W + (x A) B`, written out per output element.
fn oracle_bypass(x: &Mat, w: Option<&Mat>, a: &Mat, b: &Mat) -> Mat {
    let (n, d_in, r, d_out) = (x.len(), a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; d_out]; n];
    for i in 0..n {
        let mut hidden = vec![0.0; r];
        for t in 0..r {
            for k in 0..d_in {
                hidden[t] += x[i][k] * a[k][t];
            }
        }
        for c in 0..d_out {
            let mut acc = 0.0;
            if let Some(w) = w {
                for k in 0..d_in {
                    acc += x[i][k] * w[k][c];
                }
            }
            for t in 0..r {
                acc += hidden[t] * b[t][c];
            }
            out[i][c] = acc;
        }
    }
    out
}

/// Every intermediate of the attention-alignment forward, per stream.
#[derive(Debug, Clone)]
pub struct OracleAttention {
    /// `[rgb, x]`, each `heads x N x N`.
    pub raw: [Vec<Mat>; 2],
    pub aligned: [Vec<Mat>; 2],
    pub out: [Mat; 2],
}

pub fn oracle_attention_forward(layer: &AlignedAttentionLayer, stream: &DualStream) -> Result<OracleAttention> {
    let cfg = layer.config();
    let (d, heads) = (cfg.d_model, cfg.n_heads);
    if stream.d_model() != d || d % heads != 0 {
        return Err(Error::Config("oracle: stream does not match layer".into()));
    }
    let dh = d / heads;
    let scale = match cfg.scale_mode {
        ScaleMode::PerHead => 1.0 / (dh as f64).sqrt(),
        ScaleMode::Model => 1.0 / (d as f64).sqrt(),
    };
    let wq = to_mat(&layer.frozen.wq)?;
    let wk = to_mat(&layer.frozen.wk)?;
    let wv = to_mat(&layer.frozen.wv)?;
    let (ak, bk) = (to_mat(&layer.lora.ak)?, to_mat(&layer.lora.bk)?);
    let (av, bv) = (to_mat(&layer.lora.av)?, to_mat(&layer.lora.bv)?);
    let (w_x, w_rgb) = (layer.lora.w_x, layer.lora.w_rgb);
    let n = stream.tokens();

    let mut raw: Vec<Vec<Mat>> = Vec::new();
    let mut values: Vec<Mat> = Vec::new();
    for h in [&stream.h_rgb, &stream.h_x] {
        let h = to_mat(h)?;
        let q = oracle_matmul(&h, &wq);
        let k = oracle_bypass(&h, Some(&wk), &ak, &bk);
        values.push(oracle_bypass(&h, Some(&wv), &av, &bv));
        let mut maps = vec![vec![vec![0.0; n]; n]; heads];
        for (hd, map) in maps.iter_mut().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for c in hd * dh..(hd + 1) * dh {
                        acc += q[i][c] * k[j][c];
                    }
                    map[i][j] = acc * scale;
                }
            }
        }
        raw.push(maps);
    }

    let mut aligned = [raw[0].clone(), raw[1].clone()];
    for hd in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let (r, x) = (raw[0][hd][i][j], raw[1][hd][i][j]);
                aligned[0][hd][i][j] = r + w_x * (x - r);
                aligned[1][hd][i][j] = x + w_rgb * (r - x);
            }
        }
    }

    let mut out = [vec![vec![0.0; d]; n], vec![vec![0.0; d]; n]];
    for s in 0..2 {
        for hd in 0..heads {
            let p = oracle_softmax_rows(&aligned[s][hd]);
            for i in 0..n {
                for c in hd * dh..(hd + 1) * dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += p[i][j] * values[s][j][c];
                    }
                    out[s][i][c] = acc;
                }
            }
        }
    }
    let raw_x = raw.pop().expect("two streams");
    let raw_rgb = raw.pop().expect("two streams");
    Ok(OracleAttention {
        raw: [raw_rgb, raw_x],
        aligned,
        out,
    })
}

#[derive(Debug, Clone)]
pub struct OracleHmoe {
    pub x_split: Mat,
    pub logits: Mat,
    pub gate: Mat,
    pub x_mix: Mat,
    pub y_expert: Mat,
    pub affinity: Mat,
    pub y_out: Mat,
}

pub fn oracle_hmoe_forward(layer: &HmoeLayer, x_in: &Tensor) -> Result<OracleHmoe> {
    let cfg = layer.config();
    let (d, h, e) = (cfg.d_model, cfg.heads_per_expert, cfg.n_experts);
    let s = d / h;
    let x = to_mat(x_in)?;
    if x[0].len() != d {
        return Err(Error::Config("oracle: input width does not match layer".into()));
    }
    let n = x.len();
    let phi = to_mat(&layer.phi)?;

    let x_pre = oracle_bypass(&x, None, &to_mat(&layer.pre.a)?, &to_mat(&layer.pre.b)?);

    let mut x_split = vec![vec![0.0; s]; n * h];
    for i in 0..n {
        for j in 0..h {
            for c in 0..s {
                x_split[i * h + j][c] = x_pre[i][j * s + c];
            }
        }
    }

    let mut logits = vec![vec![0.0; e * h]; n * h];
    for m in 0..n * h {
        for k in 0..e * h {
            let mut acc = 0.0;
            for c in 0..s {
                acc += x_split[m][c] * phi[c][k];
            }
            logits[m][k] = acc;
        }
    }
    let gate = oracle_softmax_cols(&logits);

    let mut x_mix = vec![vec![0.0; s]; e * h];
    for k in 0..e * h {
        for c in 0..s {
            let mut acc = 0.0;
            for m in 0..n * h {
                acc += gate[m][k] * x_split[m][c];
            }
            x_mix[k][c] = acc;
        }
    }

    let mut y_cat = vec![vec![0.0; d]; e];
    for i in 0..e {
        let ea = to_mat(&layer.experts[i].a)?;
        let eb = to_mat(&layer.experts[i].b)?;
        for j in 0..h {
            let head_out = oracle_bypass(&vec![x_mix[i * h + j].clone()], None, &ea, &eb);
            for c in 0..s {
                y_cat[i][j * s + c] = head_out[0][c];
            }
        }
    }
    let y_expert = oracle_bypass(&y_cat, None, &to_mat(&layer.post.a)?, &to_mat(&layer.post.b)?);

    let mut pooled = vec![vec![0.0; e]; n];
    for t in 0..n {
        for i in 0..e {
            let mut acc = 0.0;
            for j in 0..h {
                for l in 0..h {
                    acc += logits[t * h + j][i * h + l];
                }
            }
            pooled[t][i] = match cfg.patch_agg {
                PatchAgg::Sum => acc,
                PatchAgg::Mean => acc / (h * h) as f64,
            };
        }
    }
    let affinity = oracle_softmax_rows(&pooled);

    let mut y_out = vec![vec![0.0; d]; n];
    for t in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            for i in 0..e {
                acc += affinity[t][i] * y_expert[i][c];
            }
            y_out[t][c] = acc;
        }
    }
    Ok(OracleHmoe {
        x_split,
        logits,
        gate,
        x_mix,
        y_expert,
        affinity,
        y_out,
    })
}

/// Largest absolute element difference between a tensor and a loop result.
pub fn max_abs_diff_mat(t: &Tensor, m: &Mat) -> Result<f64> {
    let (r, c) = t.dims2()?;
    if m.len() != r || m.iter().any(|row| row.len() != c) {
        return Err(Error::Dim {
            op: "oracle compare",
            lhs: t.shape().to_vec(),
            rhs: vec![m.len(), m.first().map_or(0, Vec::len)],
        });
    }
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in 0..c {
            worst = worst.max((t.data()[i * c + j] - m[i][j]).abs());
        }
    }
    Ok(worst)
}

pub fn max_abs_diff_cube(t: &Tensor, c: &[Mat]) -> Result<f64> {
    let flat = cube_to_tensor(c)?;
    t.max_abs_diff(&flat)
}

fn oracle_layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let d = gamma.len();
    x.iter()
        .map(|row| {
            let mut mean = 0.0;
            for &v in row {
                mean += v;
            }
            mean /= d as f64;
            let mut var = 0.0;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            (0..d).map(|j| (row[j] - mean) * inv * gamma[j] + beta[j]).collect()
        })
        .collect()
}

fn oracle_ffn(x: &Mat, ffn: &Ffn) -> Result<Mat> {
    let (b1, b2) = (ffn.b1.data(), ffn.b2.data());
    let mut hidden = oracle_matmul(x, &to_mat(&ffn.w1)?);
    for row in &mut hidden {
        for (j, v) in row.iter_mut().enumerate() {
            let u = *v + b1[j];
            *v = 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u * u * u)).tanh());
        }
    }
    let mut out = oracle_matmul(&hidden, &to_mat(&ffn.w2)?);
    for row in &mut out {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b2[j];
        }
    }
    Ok(out)
}

/// Plain multi-head attention of one stream; returns `(maps, out)`.
fn oracle_self_attention(h: &Mat, frozen: &FrozenAttention, heads: usize, scale: f64) -> Result<(Vec<Mat>, Mat)> {
    let (n, d) = (h.len(), h[0].len());
    let dh = d / heads;
    let q = oracle_matmul(h, &to_mat(&frozen.wq)?);
    let k = oracle_matmul(h, &to_mat(&frozen.wk)?);
    let v = oracle_matmul(h, &to_mat(&frozen.wv)?);
    let mut maps = vec![vec![vec![0.0; n]; n]; heads];
    let mut out = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for c in hd * dh..(hd + 1) * dh {
                    acc += q[i][c] * k[j][c];
                }
                maps[hd][i][j] = acc * scale;
            }
        }
        let p = oracle_softmax_rows(&maps[hd]);
        for i in 0..n {
            for c in hd * dh..(hd + 1) * dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += p[i][j] * v[j][c];
                }
                out[i][c] = acc;
            }
        }
    }
    Ok((maps, out))
}

fn add_mat(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

/// Mixer on `[z_rgb; z_x]` and `[c_rgb; c_x]` followed by the residual.
fn oracle_fuse(hmoe: &HmoeLayer, rgb: &Mat, x: &Mat, n_z: usize) -> Result<(Mat, Mat)> {
    let mut z: Mat = rgb[..n_z].to_vec();
    z.extend_from_slice(&x[..n_z]);
    let mut c: Mat = rgb[n_z..].to_vec();
    c.extend_from_slice(&x[n_z..]);
    let yz = oracle_hmoe_forward(hmoe, &from_mat(&z)?)?.y_out;
    let yc = oracle_hmoe_forward(hmoe, &from_mat(&c)?)?.y_out;
    let n_c = rgb.len() - n_z;
    let mut d_rgb: Mat = yz[..n_z].to_vec();
    d_rgb.extend_from_slice(&yc[..n_c]);
    let mut d_x: Mat = yz[n_z..].to_vec();
    d_x.extend_from_slice(&yc[n_c..]);
    Ok((add_mat(rgb, &d_rgb), add_mat(x, &d_x)))
}

#[derive(Debug, Clone)]
pub struct OracleEncoder {
    pub fused_candidate: Mat,
    pub final_rgb: Mat,
    pub final_x: Mat,
    /// Per layer, `[rgb, x]` pre-softmax maps.
    pub maps: Vec<[Vec<Mat>; 2]>,
}

/// Whole-encoder reference built from the loop primitives above.
pub fn oracle_encoder_forward(encoder: &Encoder, stream: &DualStream) -> Result<OracleEncoder> {
    let cfg = encoder.config();
    let (n_z, eps, heads) = (cfg.n_z, cfg.ln_eps, cfg.n_heads);
    let scale = match cfg.scale_mode {
        ScaleMode::PerHead => 1.0 / ((cfg.d_model / heads) as f64).sqrt(),
        ScaleMode::Model => 1.0 / (cfg.d_model as f64).sqrt(),
    };
    let mut rgb = to_mat(&stream.h_rgb)?;
    let mut x = to_mat(&stream.h_x)?;
    let mut maps = Vec::new();
    for block in &encoder.blocks {
        let ln = |m: &Mat, l: &crate::encoder::LayerNorm| oracle_layer_norm(m, l.gamma.data(), l.beta.data(), eps);
        match &block.attention {
            BlockAttention::Frozen(frozen) => {
                let (m_rgb, a_rgb) = oracle_self_attention(&ln(&rgb, &block.ln1), frozen, heads, scale)?;
                let (m_x, a_x) = oracle_self_attention(&ln(&x, &block.ln1), frozen, heads, scale)?;
                rgb = add_mat(&rgb, &a_rgb);
                x = add_mat(&x, &a_x);
                maps.push([m_rgb, m_x]);
            }
            BlockAttention::Fused(fusion) => {
                let normed = DualStream::new(
                    from_mat(&ln(&rgb, &block.ln1))?,
                    from_mat(&ln(&x, &block.ln1))?,
                    n_z,
                    cfg.n_c,
                )?;
                let att = oracle_attention_forward(&fusion.attention, &normed)?;
                rgb = add_mat(&rgb, &att.out[0]);
                x = add_mat(&x, &att.out[1]);
                let [al_rgb, al_x] = att.aligned;
                maps.push([al_rgb, al_x]);
                (rgb, x) = oracle_fuse(&fusion.hmoe_attn, &rgb, &x, n_z)?;
            }
        }
        rgb = add_mat(&rgb, &oracle_ffn(&ln(&rgb, &block.ln2), &block.ffn)?);
        x = add_mat(&x, &oracle_ffn(&ln(&x, &block.ln2), &block.ffn)?);
        if let Some(fusion) = block.attention.fusion() {
            (rgb, x) = oracle_fuse(&fusion.hmoe_ffn, &rgb, &x, n_z)?;
        }
    }
    let fused_candidate = add_mat(&rgb[n_z..].to_vec(), &x[n_z..].to_vec());
    Ok(OracleEncoder {
        fused_candidate,
        final_rgb: rgb,
        final_x: x,
        maps,
    })
}
