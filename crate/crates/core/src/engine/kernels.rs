//! Float reference kernels. Every reduction runs in a fixed left-to-right
//! order so results are reproducible bit for bit.

use crate::ir::shape::conv_out_extent;
use crate::purity;
use crate::tensor::numel;

/// Geometry of a grouped 2-D convolution over NCHW input and OIHW weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    /// Input channels per group.
    pub cg: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        wt: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Option<Self> {
        if x.len() != 4 || wt.len() != 4 || groups == 0 {
            return None;
        }
        if x[1] != wt[1] * groups || !wt[0].is_multiple_of(groups) {
            return None;
        }
        let oh = conv_out_extent(x[2], wt[2], stride.0, pad.0)?;
        let ow = conv_out_extent(x[3], wt[3], stride.1, pad.1)?;
        Some(ConvGeom {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: wt[0],
            cg: wt[1],
            kh: wt[2],
            kw: wt[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            oh,
            ow,
            groups,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    /// Taps per output element.
    pub fn taps(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    /// Input offsets of every tap of output position `(oy, ox)` for input
    /// channel group starting at `c0`, `None` for padding.
    pub fn patch(&self, b: usize, c0: usize, oy: usize, ox: usize, out: &mut Vec<Option<usize>>) {
        out.clear();
        for ci in 0..self.cg {
            let base = (b * self.c + c0 + ci) * self.h;
            for ky in 0..self.kh {
                let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                for kx in 0..self.kw {
                    let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                    if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                        out.push(None);
                    } else {
                        out.push(Some((base + iy as usize) * self.w + ix as usize));
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f32], g: &ConvGeom, w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let og = g.o / g.groups;
    let taps = g.taps();
    let mut out = vec![0f32; g.n * g.o * g.oh * g.ow];
    let mut patch = Vec::with_capacity(taps);
    for b in 0..g.n {
        for grp in 0..g.groups {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    g.patch(b, grp * g.cg, oy, ox, &mut patch);
                    for oc in grp * og..(grp + 1) * og {
                        let wrow = &w[oc * taps..(oc + 1) * taps];
                        let mut acc = bias.map_or(0.0, |b| b[oc]);
                        for (t, p) in patch.iter().enumerate() {
                            if let Some(i) = p {
                                acc += wrow[t] * x[*i];
                            }
                        }
                        out[((b * g.o + oc) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
    }
    purity::record(out.len() * taps);
    out
}

/// Rows of the input each linear output is computed from, and the output
/// shape. Rank 2/3 inputs contract the last axis, rank 4 inputs are
/// flattened per sample.
pub fn linear_layout(x: &[usize], out_features: usize) -> (usize, Vec<usize>) {
    match x.len() {
        4 => (x[0], vec![x[0], out_features]),
        _ => {
            let rows = numel(&x[..x.len().saturating_sub(1)]);
            let mut s = x.to_vec();
            if let Some(l) = s.last_mut() {
                *l = out_features;
            }
            (rows, s)
        }
    }
}

/// `y = x · Wᵀ + b` with `W` as `(out, in)`.
pub fn linear(x: &[f32], rows: usize, w: &[f32], out_f: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let in_f = w.len() / out_f.max(1);
    let mut out = vec![0f32; rows * out_f];
    for r in 0..rows {
        let xr = &x[r * in_f..(r + 1) * in_f];
        for o in 0..out_f {
            let wr = &w[o * in_f..(o + 1) * in_f];
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for k in 0..in_f {
                acc += wr[k] * xr[k];
            }
            out[r * out_f + o] = acc;
        }
    }
    purity::record(out.len() * in_f);
    out
}

/// Inference batch normalisation over axis 1.
pub fn batchnorm(
    x: &[f32],
    shape: &[usize],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Vec<f32> {
    let c = shape[1];
    let inner = numel(&shape[2..]);
    purity::record(x.len());
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / inner) % c;
            gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
        })
        .collect()
}

/// Layer normalisation over the last axis. With `stats`, the given mean and
/// variance replace the per-row statistics.
pub fn layernorm(
    x: &[f32],
    features: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    stats: Option<(f32, f32)>,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(features) {
        let (mu, var) = match stats {
            Some(s) => s,
            None => {
                let mu = row.iter().map(|&v| v as f64).sum::<f64>() / features as f64;
                let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / features as f64;
                (mu as f32, var as f32)
            }
        };
        let inv = 1.0 / (var + eps).sqrt();
        for (i, &v) in row.iter().enumerate() {
            out.push(gamma[i] * (v - mu) * inv + beta[i]);
        }
    }
    purity::record(x.len() * 3);
    out
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    purity::record(x.len());
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu(x: &[f32]) -> Vec<f32> {
    purity::record(x.len());
    x.iter().map(|&v| gelu_scalar(v as f64) as f32).collect()
}

/// Softmax over `axis`, subtracting the row maximum first.
pub fn softmax(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let extent = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let outer = numel(&shape[..axis]);
    let mut out = vec![0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let m = (0..extent).fold(f32::NEG_INFINITY, |a, k| a.max(x[idx(k)]));
            let mut sum = 0f64;
            for k in 0..extent {
                let e = ((x[idx(k)] - m) as f64).exp();
                out[idx(k)] = e as f32;
                sum += e;
            }
            for k in 0..extent {
                out[idx(k)] = (out[idx(k)] as f64 / sum) as f32;
            }
        }
    }
    purity::record(x.len() * 3);
    out
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    purity::record(a.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Window geometry of a pooling node over NCHW input.
pub fn pool_geom(x: &[usize], kernel: (usize, usize), stride: (usize, usize)) -> Option<(usize, usize)> {
    Some((
        conv_out_extent(x[2], kernel.0, stride.0, 0)?,
        conv_out_extent(x[3], kernel.1, stride.1, 0)?,
    ))
}

/// Visits each pooling window, handing the input offsets of its elements.
pub fn for_each_window(
    x: &[usize],
    kernel: (usize, usize),
    stride: (usize, usize),
    mut f: impl FnMut(usize, &[usize]),
) -> Option<Vec<usize>> {
    let (oh, ow) = pool_geom(x, kernel, stride)?;
    let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
    let mut idx = Vec::with_capacity(kernel.0 * kernel.1);
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                idx.clear();
                for ky in 0..kernel.0 {
                    for kx in 0..kernel.1 {
                        idx.push((nc * h + oy * stride.0 + ky) * w + ox * stride.1 + kx);
                    }
                }
                f((nc * oh + oy) * ow + ox, &idx);
            }
        }
    }
    Some(vec![n, c, oh, ow])
}

pub fn maxpool(x: &[f32], shape: &[usize], kernel: (usize, usize), stride: (usize, usize)) -> Option<(Vec<f32>, Vec<usize>)> {
    let mut out = Vec::new();
    let s = for_each_window(shape, kernel, stride, |_, idx| {
        out.push(idx.iter().fold(f32::NEG_INFINITY, |a, &i| a.max(x[i])));
    })?;
    purity::record(out.len() * kernel.0 * kernel.1);
    Some((out, s))
}

pub fn avgpool(x: &[f32], shape: &[usize], kernel: (usize, usize), stride: (usize, usize)) -> Option<(Vec<f32>, Vec<usize>)> {
    let k = (kernel.0 * kernel.1) as f32;
    let mut out = Vec::new();
    let s = for_each_window(shape, kernel, stride, |_, idx| {
        out.push(idx.iter().fold(0f32, |a, &i| a + x[i]) / k);
    })?;
    purity::record(out.len() * kernel.0 * kernel.1);
    Some((out, s))
}

/// Internal stages of an attention block, in evaluation order.
pub const ATTENTION_STAGES: [&str; 6] = ["q", "k", "v", "scores", "probs", "ctx"];

/// Projection weights and optional biases of an attention block.
pub struct AttentionWeights<'a> {
    pub wq: &'a [f32],
    pub wk: &'a [f32],
    pub wv: &'a [f32],
    pub wo: &'a [f32],
    pub bq: Option<&'a [f32]>,
    pub bk: Option<&'a [f32]>,
    pub bv: Option<&'a [f32]>,
    pub bo: Option<&'a [f32]>,
}

/// Callback receiving each attention stage's name, shape and values.
pub type StageHook<'h, E> = dyn FnMut(&str, &[usize], &mut Vec<f32>) -> Result<(), E> + 'h;

/// Multi-head self-attention over `[B, T, E]`. `hook` sees every stage in
/// [`ATTENTION_STAGES`] and may rewrite it in place (fake quantization,
/// statistics collection).
pub fn attention<E>(
    x: &[f32],
    shape: &[usize],
    heads: usize,
    w: &AttentionWeights<'_>,
    hook: &mut StageHook<'_, E>,
) -> Result<Vec<f32>, E> {
    let (b, t, e) = (shape[0], shape[1], shape[2]);
    let dh = e / heads;
    let rows = b * t;
    let mut q = linear(x, rows, w.wq, e, w.bq);
    hook("q", shape, &mut q)?;
    let mut k = linear(x, rows, w.wk, e, w.bk);
    hook("k", shape, &mut k)?;
    let mut v = linear(x, rows, w.wv, e, w.bv);
    hook("v", shape, &mut v)?;

    let score_shape = [b, heads, t, t];
    let scale = 1.0 / (dh as f32).sqrt();
    let mut scores = vec![0f32; b * heads * t * t];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..t {
                let qi = &q[(bi * t + i) * e + h * dh..][..dh];
                for j in 0..t {
                    let kj = &k[(bi * t + j) * e + h * dh..][..dh];
                    let mut acc = 0f32;
                    for d in 0..dh {
                        acc += qi[d] * kj[d];
                    }
                    scores[((bi * heads + h) * t + i) * t + j] = acc * scale;
                }
            }
        }
    }
    purity::record(scores.len() * dh);
    hook("scores", &score_shape, &mut scores)?;
    let mut probs = softmax(&scores, &score_shape, 3);
    hook("probs", &score_shape, &mut probs)?;

    let mut ctx = vec![0f32; rows * e];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..t {
                let prow = &probs[((bi * heads + h) * t + i) * t..][..t];
                for d in 0..dh {
                    let mut acc = 0f32;
                    for j in 0..t {
                        acc += prow[j] * v[(bi * t + j) * e + h * dh + d];
                    }
                    ctx[(bi * t + i) * e + h * dh + d] = acc;
                }
            }
        }
    }
    purity::record(ctx.len() * t);
    hook("ctx", shape, &mut ctx)?;
    Ok(linear(&ctx, rows, w.wo, e, w.bo))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_conv() {
        let g = ConvGeom::new(&[1, 1, 1, 1], &[1, 1, 1, 1], (1, 1), (0, 0), 1).unwrap();
        assert_eq!(conv2d(&[3.0], &g, &[2.0], None), vec![6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0], &[2, 3], 1);
        assert!((p[0] + p[1] + p[2] - 1.0).abs() < 1e-6);
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_344_746).abs() < 1e-8);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn pooling() {
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let (m, s) = maxpool(&x, &[1, 1, 4, 4], (2, 2), (2, 2)).unwrap();
        assert_eq!(s, vec![1, 1, 2, 2]);
        assert_eq!(m, vec![5.0, 7.0, 13.0, 15.0]);
        let (a, _) = avgpool(&x, &[1, 1, 4, 4], (2, 2), (2, 2)).unwrap();
        assert_eq!(a, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
