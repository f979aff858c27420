//! Table-driven integer nonlinearities.

use serde::{Deserialize, Serialize};

use super::kernels::gelu_scalar;
use super::EngineError;
use crate::fixed::{round_shift, FixedPointCode, FixedPointSpec};
use crate::fuse::MulQuantParams;
use crate::ir::{Attr, Graph, Node};
use crate::qparams::QuantParams;
use crate::tensor::{numel, Tensor};

pub const DEFAULT_ENTRIES: usize = 256;
pub const DEFAULT_FRAC: u8 = 12;
/// Fraction bits of the fixed-point input-to-index map.
pub const INDEX_FRAC: u32 = 16;
/// Fraction bits of reciprocal table entries.
pub const RECIP_FRAC: u8 = 16;
/// Fraction bits of the normalised mantissa fed to the reciprocal table.
const MANTISSA_FRAC: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LutFn {
    Exp,
    Gelu,
    Reciprocal,
    InvSqrt,
}

impl LutFn {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            LutFn::Exp => x.exp(),
            LutFn::Gelu => gelu_scalar(x),
            LutFn::Reciprocal => 1.0 / x,
            LutFn::InvSqrt => 1.0 / x.sqrt(),
        }
    }

    /// `Some(true)` for increasing, `Some(false)` for decreasing functions
    /// on their usual domain.
    pub fn monotone(self) -> Option<bool> {
        match self {
            LutFn::Exp => Some(true),
            LutFn::Reciprocal | LutFn::InvSqrt => Some(false),
            LutFn::Gelu => None,
        }
    }
}

/// Where an integer input lands relative to the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LutPos {
    Below,
    At(usize),
    Above,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutTable {
    pub fn_kind: LutFn,
    pub entries: Vec<i64>,
    /// Quantization of the integer inputs indexing the table.
    pub in_qp: Option<QuantParams>,
    pub out_fp: FixedPointSpec,
    pub clip: (f64, f64),
    /// `index = round((x − Z) · mult / 2^16 + offset / 2^16)`.
    pub index_mult: i64,
    pub index_offset: i64,
}

impl LutTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> f64 {
        (self.clip.1 - self.clip.0) / (self.entries.len() - 1) as f64
    }

    /// True when every table sample sits on the input grid, so lookups
    /// are exact.
    pub fn is_aligned(&self) -> bool {
        self.index_mult == 1 << INDEX_FRAC && self.index_offset % (1 << INDEX_FRAC) == 0
    }

    pub fn position(&self, x: i64) -> LutPos {
        let zero = self.in_qp.as_ref().map_or(0, |q| q.zero());
        let fx = (x - zero) as i128 * self.index_mult as i128 + self.index_offset as i128;
        let idx = round_shift(fx, INDEX_FRAC);
        if idx < 0 {
            LutPos::Below
        } else if idx >= self.entries.len() as i128 {
            LutPos::Above
        } else {
            LutPos::At(idx as usize)
        }
    }

    /// Entry for `x`, saturating to the end entries outside the clip.
    pub fn lookup(&self, x: i64) -> i64 {
        match self.position(x) {
            LutPos::Below => self.entries[0],
            LutPos::At(i) => self.entries[i],
            LutPos::Above => self.entries[self.entries.len() - 1],
        }
    }

    /// Entries as an `int32` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_int(vec![self.entries.len()], 32, true, self.entries.clone())
            .expect("entries fit 32 bits")
    }

    /// Stores the table on `node`: parameter `<prefix>lut` plus attributes
    /// `<prefix>fn`, `<prefix>mult`, `<prefix>offset`, `<prefix>int_bits`,
    /// `<prefix>frac` and `<prefix>clip`.
    pub fn write(&self, g: &mut Graph, node: &mut Node, prefix: &str) {
        let name = g.add_tensor(format!("{}.{prefix}lut", node.id), self.to_tensor());
        node.params.insert(format!("{prefix}lut"), name);
        let kind = serde_json::to_value(self.fn_kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        node.set_attr(&format!("{prefix}fn"), kind.as_str());
        node.set_attr(&format!("{prefix}mult"), self.index_mult);
        node.set_attr(&format!("{prefix}offset"), self.index_offset);
        node.set_attr(&format!("{prefix}int_bits"), self.out_fp.int_bits as i64);
        node.set_attr(&format!("{prefix}frac"), self.out_fp.frac_bits as i64);
        node.set_attr(&format!("{prefix}clip"), Attr::Floats(vec![self.clip.0, self.clip.1]));
    }

    /// Inverse of [`LutTable::write`]; `in_qp` is the quantization of the
    /// values indexing the table.
    pub fn read(g: &Graph, node: &Node, prefix: &str, in_qp: Option<QuantParams>) -> Result<Self, EngineError> {
        let bad = |what: &str| EngineError::Lut(format!("node '{}': missing or invalid {prefix}{what}", node.id));
        let entries = g
            .param_opt(node, &format!("{prefix}lut"))
            .and_then(|t| t.as_int().ok())
            .ok_or_else(|| bad("lut"))?
            .to_vec();
        let fn_kind: LutFn = node
            .attr_str(&format!("{prefix}fn"))
            .and_then(|s| serde_json::from_value(serde_json::Value::String(s.into())).ok())
            .ok_or_else(|| bad("fn"))?;
        let int = |k: &str| node.attr_int(&format!("{prefix}{k}")).ok_or_else(|| bad(k));
        let clip = match node.attrs.get(&format!("{prefix}clip")) {
            Some(Attr::Floats(v)) if v.len() == 2 => (v[0], v[1]),
            _ => return Err(bad("clip")),
        };
        let out_fp = FixedPointSpec::new(int("int_bits")? as u8, int("frac")? as u8).map_err(|_| bad("frac"))?;
        if entries.len() < 2 {
            return Err(bad("lut"));
        }
        Ok(LutTable {
            fn_kind,
            entries,
            in_qp,
            out_fp,
            clip,
            index_mult: int("mult")?,
            index_offset: int("offset")?,
        })
    }
}

/// Samples `fn_kind` at `clip.lo + k · (clip.hi − clip.lo) / (entries − 1)`
/// and encodes each sample in `out_fp`. Exponential tables floor their
/// entries at one code so sums of them are never zero.
pub fn lut_build(
    fn_kind: LutFn,
    clip: (f64, f64),
    entries: usize,
    in_qp: Option<&QuantParams>,
    out_fp: FixedPointSpec,
) -> Result<LutTable, EngineError> {
    if entries < 2 || !entries.is_power_of_two() {
        return Err(EngineError::Lut(format!("entry count {entries} is not a power of two ≥ 2")));
    }
    if !(clip.0 < clip.1) || !clip.0.is_finite() || !clip.1.is_finite() {
        return Err(EngineError::Lut(format!("clip {clip:?} is empty")));
    }
    let step = (clip.1 - clip.0) / (entries - 1) as f64;
    let mut codes = Vec::with_capacity(entries);
    for k in 0..entries {
        let x = clip.0 + k as f64 * step;
        let c = FixedPointCode::encode(fn_kind.eval(x), out_fp)
            .map_err(|e| EngineError::Lut(format!("{fn_kind:?} entry {k} at {x}: {e}")))?;
        let code = if fn_kind == LutFn::Exp { c.code.max(1) } else { c.code };
        codes.push(code);
    }
    let (index_mult, index_offset) = match in_qp {
        Some(qp) => {
            let s = qp.scale0() as f64;
            let one = (1u64 << INDEX_FRAC) as f64;
            ((s / step * one).round() as i64, (-clip.0 / step * one).round() as i64)
        }
        None => (0, 0),
    };
    Ok(LutTable {
        fn_kind,
        entries: codes,
        in_qp: in_qp.cloned(),
        out_fp,
        clip,
        index_mult,
        index_offset,
    })
}

/// Clip range whose samples coincide with the codes of `qp`, starting at
/// its lowest code, if the table is long enough to cover every code.
pub fn aligned_clip(qp: &QuantParams, entries: usize) -> Option<(f64, f64)> {
    let (qmin, qmax) = qp.qrange();
    if ((qmax - qmin) as usize) >= entries {
        return None;
    }
    let s = qp.scale0() as f64;
    let lo = (qmin - qp.zero()) as f64 * s;
    Some((lo, lo + (entries - 1) as f64 * s))
}

/// Smallest signed integer part that holds `fn` over the clip.
fn int_bits_for(fn_kind: LutFn, clip: (f64, f64), entries: usize) -> u8 {
    let step = (clip.1 - clip.0) / (entries - 1) as f64;
    let peak = (0..entries)
        .map(|k| fn_kind.eval(clip.0 + k as f64 * step).abs())
        .fold(0f64, f64::max);
    (peak + 1.0).log2().ceil() as u8 + 1
}

/// Exponential table over score differences `d = s − max(s) ≤ 0`. Aligned
/// to the score grid when `entries` covers every difference, otherwise
/// sampled over `fallback_clip`.
pub fn exp_lut_for_scores(
    score_qp: &QuantParams,
    entries: usize,
    frac: u8,
    fallback_clip: (f64, f64),
) -> Result<LutTable, EngineError> {
    let s = score_qp.scale0() as f64;
    let (qmin, qmax) = score_qp.qrange();
    let diff_qp = QuantParams::per_tensor(score_qp.scale0(), 0, (score_qp.bits + 1).min(16), true, false);
    let clip = if ((qmax - qmin) as usize) < entries {
        (-((entries - 1) as f64) * s, 0.0)
    } else {
        fallback_clip
    };
    let fp = FixedPointSpec::new(2, frac).map_err(|e| EngineError::Lut(e.to_string()))?;
    lut_build(LutFn::Exp, clip, entries, Some(&diff_qp), fp)
}

/// Reciprocal table over the normalised mantissa `m ∈ [1, 2]`.
pub fn recip_lut(entries: usize) -> Result<LutTable, EngineError> {
    let fp = FixedPointSpec::new(2, RECIP_FRAC).map_err(|e| EngineError::Lut(e.to_string()))?;
    lut_build(LutFn::Reciprocal, (1.0, 2.0), entries, None, fp)
}

/// GELU table over `in_qp`'s codes, aligned to its grid when possible.
pub fn gelu_lut(in_qp: &QuantParams, entries: usize, frac: u8, fallback_clip: (f64, f64)) -> Result<LutTable, EngineError> {
    let clip = aligned_clip(in_qp, entries).unwrap_or(fallback_clip);
    let int_bits = int_bits_for(LutFn::Gelu, clip, entries);
    if int_bits as u32 + frac as u32 > 32 {
        return Err(EngineError::Lut(format!("gelu over {clip:?} needs {int_bits} integer bits")));
    }
    let fp = FixedPointSpec::new(int_bits, frac).map_err(|e| EngineError::Lut(e.to_string()))?;
    lut_build(LutFn::Gelu, clip, entries, Some(in_qp), fp)
}

/// `(R, p)` with `R · 2^(−frac − p) ≈ 1 / sum`, interpolating linearly
/// between reciprocal table entries.
pub fn reciprocal(sum: u64, recip: &LutTable) -> (i64, u32) {
    debug_assert!(sum > 0);
    let p = 63 - sum.leading_zeros();
    let m = if p >= MANTISSA_FRAC {
        sum >> (p - MANTISSA_FRAC)
    } else {
        sum << (MANTISSA_FRAC - p)
    } as i128;
    let last = recip.entries.len() - 1;
    let pos = (m - (1i128 << MANTISSA_FRAC)) * last as i128;
    let j = ((pos >> MANTISSA_FRAC) as usize).min(last);
    let rem = pos & ((1i128 << MANTISSA_FRAC) - 1);
    let lo = recip.entries[j] as i128;
    let hi = recip.entries[(j + 1).min(last)] as i128;
    let r = lo + round_shift((hi - lo) * rem, MANTISSA_FRAC);
    (r as i64, p)
}

/// Integer softmax over `axis`: subtract the row maximum, look up
/// exponentials, sum, and scale by the table reciprocal of the sum.
/// Outputs are unsigned probabilities with `out_frac` fraction bits.
pub fn int_softmax(
    logits_q: &Tensor,
    axis: usize,
    exp_lut: &LutTable,
    recip_lut: &LutTable,
    out_frac: u8,
) -> Result<Tensor, EngineError> {
    let x = logits_q.as_int()?;
    let shape = logits_q.shape();
    if axis >= shape.len() {
        return Err(EngineError::Shape {
            node: "softmax".into(),
            message: format!("axis {axis} beyond rank {}", shape.len()),
        });
    }
    let out = softmax_codes(x, shape, axis, exp_lut, recip_lut, out_frac);
    Ok(Tensor::from_int(shape.to_vec(), out_frac + 1, false, out)?)
}

pub(crate) fn softmax_codes(
    x: &[i64],
    shape: &[usize],
    axis: usize,
    exp_lut: &LutTable,
    recip_lut: &LutTable,
    out_frac: u8,
) -> Vec<i64> {
    let extent = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let outer = numel(&shape[..axis]);
    let mut out = vec![0i64; x.len()];
    let mut e = vec![0i64; extent];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let m = (0..extent).map(|k| x[idx(k)]).max().unwrap_or(0);
            let mut sum = 0u64;
            for k in 0..extent {
                e[k] = exp_lut.lookup(x[idx(k)] - m);
                sum += e[k] as u64;
            }
            let (r, p) = reciprocal(sum, recip_lut);
            let shift = recip_lut.out_fp.frac_bits as i64 + p as i64 - out_frac as i64;
            for k in 0..extent {
                let prod = e[k] as i128 * r as i128;
                out[idx(k)] = if shift >= 0 {
                    round_shift(prod, shift as u32)
                } else {
                    prod << (-shift) as u32
                } as i64;
            }
        }
    }
    out
}

/// Elementwise GELU through `lut`, requantized by `rq`. Inputs below the
/// table map to zero and inputs above it pass through `identity` when given.
pub fn int_gelu(
    x_q: &Tensor,
    lut: &LutTable,
    rq: &MulQuantParams,
    identity: Option<&MulQuantParams>,
) -> Result<Tensor, EngineError> {
    let out = gelu_codes(x_q.as_int()?, lut, rq, identity);
    let qp = &rq.out_qp;
    Ok(Tensor::from_int(x_q.shape().to_vec(), qp.bits, qp.signed, out)?)
}

pub(crate) fn gelu_codes(x: &[i64], lut: &LutTable, rq: &MulQuantParams, identity: Option<&MulQuantParams>) -> Vec<i64> {
    x.iter()
        .map(|&v| match lut.position(v) {
            LutPos::At(i) => rq.apply(lut.entries[i], 0),
            LutPos::Below => rq.apply(0, 0),
            LutPos::Above => match identity {
                Some(id) => id.apply(v, 0),
                None => rq.apply(lut.entries[lut.len() - 1], 0),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_table_endpoints() {
        let fp = FixedPointSpec::new(2, 12).unwrap();
        let t = lut_build(LutFn::Exp, (-8.0, 0.0), 256, None, fp).unwrap();
        assert_eq!(*t.entries.last().unwrap(), 4096);
        assert!(t.entries.windows(2).all(|w| w[0] <= w[1]));
        assert!(t.entries[0] >= 1);
    }

    #[test]
    fn gelu_zero_entry() {
        let qp = QuantParams::per_tensor(0.05, 0, 8, true, true);
        let t = gelu_lut(&qp, 256, 12, (-4.0, 4.0)).unwrap();
        assert!(t.is_aligned());
        match t.position(0) {
            LutPos::At(i) => assert_eq!(t.entries[i], 0),
            p => panic!("{p:?}"),
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let fp = FixedPointSpec::new(2, 12).unwrap();
        assert!(lut_build(LutFn::Exp, (-8.0, 0.0), 100, None, fp).is_err());
        assert!(lut_build(LutFn::Exp, (0.0, 0.0), 256, None, fp).is_err());
        let tiny = FixedPointSpec::new(1, 12).unwrap();
        assert!(lut_build(LutFn::Gelu, (-4.0, 4.0), 256, None, tiny).is_err());
    }

    #[test]
    fn reciprocal_accuracy() {
        let t = recip_lut(256).unwrap();
        for sum in [1u64, 3, 4096, 5000, 12345, 65535, 1 << 20, 987_654_321] {
            let (r, p) = reciprocal(sum, &t);
            let approx = r as f64 / 2f64.powi(RECIP_FRAC as i32 + p as i32);
            let rel = (approx * sum as f64 - 1.0).abs();
            assert!(rel < 1e-4, "sum {sum}: rel {rel}");
        }
    }

    #[test]
    fn uniform_softmax() {
        let qp = QuantParams::per_tensor(0.1, 0, 8, true, true);
        let exp = exp_lut_for_scores(&qp, 256, 12, (-8.0, 0.0)).unwrap();
        let rc = recip_lut(256).unwrap();
        let x = Tensor::from_int(vec![1, 4], 8, true, vec![5, 5, 5, 5]).unwrap();
        let p = int_softmax(&x, 1, &exp, &rc, 12).unwrap();
        for &v in p.as_int().unwrap() {
            assert!((v - 1024).abs() <= 1, "{v}");
        }
    }
}
