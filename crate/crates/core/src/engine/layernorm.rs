//! Integer layer normalisation with statistics computed per row.

use super::EngineError;
use crate::fixed::{round_div, round_shift, FixedPointCode};
use crate::ir::{Attr, Graph, Node};
use crate::tensor::Tensor;

/// Fraction bits of the row mean and centred values.
pub const STAT_FRAC: u32 = 8;
/// Fraction bits of the variance (`2 · STAT_FRAC`).
pub const VAR_FRAC: u32 = 2 * STAT_FRAC;
const Q: u32 = 30;
/// Target magnitude of the adaptive inverse-square-root result.
const INV_SQRT_BITS: i32 = 15;

/// `2^out_frac / √(v / 2^in_frac)` in integer arithmetic: a bit-scan gives
/// the exponent, a linear fit of the mantissa seeds two Newton steps.
/// `v = 0` saturates.
pub fn inv_sqrt(v: u64, in_frac: u32, out_frac: u32) -> i64 {
    if v == 0 {
        return i64::MAX;
    }
    let p = 63 - v.leading_zeros();
    let mut e = p as i32 - in_frac as i32;
    let mut m: i128 = if p >= Q {
        (v >> (p - Q)) as i128
    } else {
        (v as i128) << (Q - p)
    };
    if e.rem_euclid(2) == 1 {
        m <<= 1;
        e -= 1;
    }
    let one = 1i128 << Q;
    // 1/√m ≈ 1.27398 − 0.29289·m on [1, 2]; [2, 4) reuses it at m/2
    let a = 1_367_929_855i128; // 1.27398 · 2^30
    let b = 314_489_037i128; // 0.29289 · 2^30
    let upper = m >= 2 * one;
    let mm = if upper { m >> 1 } else { m };
    let mut z = a - ((b * mm) >> Q);
    if upper {
        z = (z * 759_250_125i128) >> Q; // 1/√2 · 2^30
    }
    for _ in 0..2 {
        let t = (((m * z) >> Q) * z) >> Q;
        z = (z * (3 * one - t)) >> (Q + 1);
    }
    let shift = Q as i32 + e / 2 - out_frac as i32;
    let r = if shift >= 0 {
        round_shift(z, shift as u32)
    } else {
        z << (-shift) as u32
    };
    r.min(i64::MAX as i128) as i64
}

/// Fraction bits that give [`inv_sqrt`] about 15 significant bits for a
/// variance code at [`VAR_FRAC`].
pub fn adaptive_frac(var: u64) -> u32 {
    let p = 63 - var.max(1).leading_zeros() as i32;
    (INV_SQRT_BITS + (p - VAR_FRAC as i32) / 2).clamp(0, 40) as u32
}

/// Per-feature fixed-point affine stage of an integer layernorm.
#[derive(Debug, Clone, PartialEq)]
pub struct IntLayerNorm {
    /// `γ[i] / S_out`.
    pub gamma: Vec<FixedPointCode>,
    /// `β[i] / S_out + Z_out`.
    pub beta: Vec<FixedPointCode>,
    /// `ε / S_in²` at [`VAR_FRAC`], at least 1.
    pub eps_code: i64,
    pub in_zero: i64,
    pub clamp: (i64, i64),
}

impl IntLayerNorm {
    /// Stores the affine stage on `node` as parameters `gamma_code` /
    /// `beta_code` and `ln.*` attributes.
    pub fn write(&self, g: &mut Graph, node: &mut Node) {
        let int_bits = self.gamma.first().map_or(1, |c| c.int_bits);
        let width = self
            .gamma
            .iter()
            .map(|c| 65 - c.code.unsigned_abs().leading_zeros() as u8)
            .max()
            .unwrap_or(2)
            .clamp(2, 32);
        let gname = g.add_tensor(
            format!("{}.gamma_code", node.id),
            Tensor::from_int(vec![self.gamma.len()], width, true, self.gamma.iter().map(|c| c.code).collect())
                .expect("codes fit their width"),
        );
        let bname = g.add_tensor(
            format!("{}.beta_code", node.id),
            Tensor::from_int(vec![self.beta.len()], 32, true, self.beta.iter().map(|c| c.code).collect())
                .expect("bias codes fit 32 bits"),
        );
        node.params.insert("gamma_code".into(), gname);
        node.params.insert("beta_code".into(), bname);
        node.set_attr("ln.gamma_frac", Attr::Ints(self.gamma.iter().map(|c| c.frac_bits as i64).collect()));
        node.set_attr("ln.int_bits", int_bits as i64);
        node.set_attr("ln.beta_frac", self.beta.first().map_or(0, |c| c.frac_bits) as i64);
        node.set_attr("ln.eps_code", self.eps_code);
        node.set_attr("ln.in_zero", self.in_zero);
        node.set_attr("ln.clamp", vec![self.clamp.0, self.clamp.1]);
    }

    /// Inverse of [`IntLayerNorm::write`].
    pub fn read(g: &Graph, node: &Node) -> Result<Self, EngineError> {
        let missing = |what: &str| EngineError::Missing {
            node: node.id.clone(),
            what: what.to_string(),
        };
        let gamma = g.param(node, "gamma_code")?.as_int()?;
        let beta = g.param(node, "beta_code")?.as_int()?;
        let fracs = node.attr_ints("ln.gamma_frac").ok_or_else(|| missing("ln.gamma_frac"))?;
        let int_bits = node.attr_int("ln.int_bits").ok_or_else(|| missing("ln.int_bits"))? as u8;
        let beta_frac = node.attr_int("ln.beta_frac").ok_or_else(|| missing("ln.beta_frac"))? as u8;
        let clamp = node.attr_ints("ln.clamp").filter(|c| c.len() == 2).ok_or_else(|| missing("ln.clamp"))?;
        if fracs.len() != gamma.len() {
            return Err(missing("one fraction width per gamma code"));
        }
        Ok(IntLayerNorm {
            gamma: gamma
                .iter()
                .zip(&fracs)
                .map(|(&code, &f)| FixedPointCode {
                    code,
                    int_bits,
                    frac_bits: f as u8,
                })
                .collect(),
            beta: beta
                .iter()
                .map(|&code| FixedPointCode {
                    code,
                    int_bits: 32 - beta_frac,
                    frac_bits: beta_frac,
                })
                .collect(),
            eps_code: node.attr_int("ln.eps_code").unwrap_or(1),
            in_zero: node.attr_int("ln.in_zero").unwrap_or(0),
            clamp: (clamp[0], clamp[1]),
        })
    }
}

/// Normalises each row of `features` codes: integer mean, integer variance,
/// integer inverse square root, then the fixed-point affine stage.
pub fn int_layernorm_instant(x_q: &[i64], features: usize, ln: &IntLayerNorm) -> Vec<i64> {
    let mut out = Vec::with_capacity(x_q.len());
    let mut centred = vec![0i64; features];
    for row in x_q.chunks(features) {
        let sum: i64 = row.iter().map(|&v| v - ln.in_zero).sum();
        let mean = round_div((sum as i128) << STAT_FRAC, features as i128) as i64;
        let mut sq: i128 = 0;
        for (c, &v) in centred.iter_mut().zip(row) {
            *c = ((v - ln.in_zero) << STAT_FRAC) - mean;
            sq += *c as i128 * *c as i128;
        }
        let var = round_div(sq, features as i128) as u64 + ln.eps_code.max(1) as u64;
        let rf = adaptive_frac(var);
        let r = inv_sqrt(var, VAR_FRAC, rf) as i128;
        for (i, &c) in centred.iter().enumerate() {
            let g = &ln.gamma[if ln.gamma.len() == 1 { 0 } else { i }];
            let b = &ln.beta[if ln.beta.len() == 1 { 0 } else { i }];
            let n = c as i128 * r;
            let shift = STAT_FRAC + rf + g.frac_bits as u32;
            let bias = if shift >= b.frac_bits as u32 {
                (b.code as i128) << (shift - b.frac_bits as u32)
            } else {
                round_shift(b.code as i128, b.frac_bits as u32 - shift)
            };
            let y = round_shift(n * g.code as i128 + bias, shift);
            out.push(y.clamp(ln.clamp.0 as i128, ln.clamp.1 as i128) as i64);
        }
    }
    out
}
