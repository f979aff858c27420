use super::FuseError;
use crate::engine::requant::requantize_codes;
use crate::fixed::{FixedPointCode, FixedPointSpec};
use crate::ir::{Attr, Graph, Node};
use crate::qparams::QuantParams;
use crate::tensor::Tensor;

/// Bias codes live in a 32-bit word aligned with the accumulator.
pub const BIAS_CONTAINER_BITS: u8 = 32;

/// Fixed-point rescaler applied to an integer accumulator:
/// `clamp(round((acc − in_zero) · M + b), lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MulQuantParams {
    /// One code, or one per channel along `axis`.
    pub multiplier: Vec<FixedPointCode>,
    /// One code per channel; the output zero point is folded in.
    pub bias: Vec<FixedPointCode>,
    pub out_qp: QuantParams,
    pub clamp: (i64, i64),
    pub relu_folded: bool,
    pub in_zero: i64,
    /// Channel axis of the accumulator; negative counts from the end.
    pub axis: i64,
}

impl MulQuantParams {
    pub fn channels(&self) -> usize {
        self.multiplier.len().max(self.bias.len())
    }

    pub fn multiplier_at(&self, c: usize) -> &FixedPointCode {
        &self.multiplier[if self.multiplier.len() == 1 { 0 } else { c }]
    }

    pub fn bias_at(&self, c: usize) -> &FixedPointCode {
        &self.bias[if self.bias.len() == 1 { 0 } else { c }]
    }

    pub fn is_scalar(&self) -> bool {
        self.multiplier.len() == 1
    }

    /// Requantizes one accumulator value of channel `c`.
    #[inline]
    pub fn apply(&self, acc: i64, c: usize) -> i64 {
        requantize_codes(
            acc - self.in_zero,
            self.multiplier_at(c),
            self.bias_at(c),
            self.clamp,
        )
    }

    /// Resolves the channel axis against a tensor rank.
    pub fn axis_for_rank(&self, rank: usize) -> usize {
        if self.axis < 0 {
            (rank as i64 + self.axis).max(0) as usize
        } else {
            self.axis as usize
        }
    }

    /// Stores the rescaler on `node` under `prefix`: attributes
    /// `<prefix>mult_frac`, `<prefix>clamp`, … and parameter tensors
    /// `<prefix>multiplier` / `<prefix>bias` named after the node.
    pub fn write(&self, g: &mut Graph, node: &mut Node, prefix: &str) {
        let int_bits = self.multiplier[0].int_bits;
        let fracs: Vec<i64> = self.multiplier.iter().map(|m| m.frac_bits as i64).collect();
        let base_width = self
            .multiplier
            .iter()
            .map(|m| {
                let bits = 64 - (m.code.unsigned_abs()).leading_zeros() as u8 + 1;
                bits.max(int_bits + self.base_frac())
            })
            .max()
            .unwrap_or(16)
            .clamp(2, 32);
        let m_codes: Vec<i64> = self.multiplier.iter().map(|m| m.code).collect();
        let b_codes: Vec<i64> = self.bias.iter().map(|b| b.code).collect();
        let mname = g.add_tensor(
            format!("{}.{prefix}multiplier", node.id),
            Tensor::from_int(vec![m_codes.len()], base_width, true, m_codes).expect("codes fit their word"),
        );
        let bname = g.add_tensor(
            format!("{}.{prefix}bias", node.id),
            Tensor::from_int(vec![b_codes.len()], BIAS_CONTAINER_BITS, true, b_codes).expect("bias fits 32 bits"),
        );
        node.params.insert(format!("{prefix}multiplier"), mname);
        node.params.insert(format!("{prefix}bias"), bname);
        node.set_attr(&format!("{prefix}mult_frac"), Attr::Ints(fracs));
        node.set_attr(&format!("{prefix}int_bits"), int_bits as i64);
        node.set_attr(&format!("{prefix}bias_frac"), self.bias[0].frac_bits as i64);
        node.set_attr(&format!("{prefix}clamp"), vec![self.clamp.0, self.clamp.1]);
        node.set_attr(&format!("{prefix}relu_folded"), self.relu_folded);
        node.set_attr(&format!("{prefix}in_zero"), self.in_zero);
        node.set_attr(&format!("{prefix}axis"), self.axis);
    }

    fn base_frac(&self) -> u8 {
        self.bias[0].frac_bits
    }

    /// Inverse of [`MulQuantParams::write`].
    pub fn read(g: &Graph, node: &Node, prefix: &str, out_qp: QuantParams) -> Result<Self, FuseError> {
        let missing = |what: String| FuseError::Malformed {
            node: node.id.clone(),
            message: format!("missing {what}"),
        };
        let codes = |role: &str| -> Result<Vec<i64>, FuseError> {
            let key = format!("{prefix}{role}");
            let t = g.param_opt(node, &key).ok_or_else(|| missing(format!("parameter '{key}'")))?;
            t.as_int().map(|v| v.to_vec()).map_err(|_| FuseError::Malformed {
                node: node.id.clone(),
                message: format!("parameter '{key}' is not integer"),
            })
        };
        let m_codes = codes("multiplier")?;
        let b_codes = codes("bias")?;
        let attr = |k: &str| format!("{prefix}{k}");
        let fracs = node
            .attr_ints(&attr("mult_frac"))
            .ok_or_else(|| missing(attr("mult_frac")))?;
        let int_bits = node.attr_int(&attr("int_bits")).ok_or_else(|| missing(attr("int_bits")))? as u8;
        let bias_frac = node.attr_int(&attr("bias_frac")).ok_or_else(|| missing(attr("bias_frac")))? as u8;
        let clamp = node.attr_ints(&attr("clamp")).ok_or_else(|| missing(attr("clamp")))?;
        if fracs.len() != m_codes.len() || clamp.len() != 2 || m_codes.is_empty() || b_codes.is_empty() {
            return Err(FuseError::Malformed {
                node: node.id.clone(),
                message: format!("inconsistent rescaler '{prefix}'"),
            });
        }
        Ok(MulQuantParams {
            multiplier: m_codes
                .iter()
                .zip(&fracs)
                .map(|(&code, &f)| FixedPointCode {
                    code,
                    int_bits,
                    frac_bits: f as u8,
                })
                .collect(),
            bias: b_codes
                .iter()
                .map(|&code| FixedPointCode {
                    code,
                    int_bits: BIAS_CONTAINER_BITS - bias_frac,
                    frac_bits: bias_frac,
                })
                .collect(),
            out_qp,
            clamp: (clamp[0], clamp[1]),
            relu_folded: node.attr_bool(&attr("relu_folded")).unwrap_or(false),
            in_zero: node.attr_int(&attr("in_zero")).unwrap_or(0),
            axis: node.attr_int(&attr("axis")).unwrap_or(1),
        })
    }
}

/// Fixed-point encoding options for multipliers and biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MulQuantEncoding {
    pub fp: FixedPointSpec,
    /// Normalise each multiplier by a power of two before encoding.
    pub align: bool,
}

impl MulQuantEncoding {
    pub fn encode_multiplier(&self, m: f64) -> Result<FixedPointCode, crate::fixed::FixedPointError> {
        if self.align {
            FixedPointCode::encode_aligned(m, self.fp)
        } else {
            FixedPointCode::encode(m, self.fp)
        }
    }

    pub fn encode_bias(&self, b: f64) -> Result<FixedPointCode, crate::fixed::FixedPointError> {
        FixedPointCode::encode_raw(b, BIAS_CONTAINER_BITS - self.fp.frac_bits, self.fp.frac_bits)
    }
}

/// Builds the rescaler of a linear op followed by optional normalisation:
/// `M[o] = γ*[o] · S_w[o] · S_x / S_out`, `b[o] = β*[o] / S_out + Z_out`.
/// `gamma_star = None` means 1 everywhere; with per-tensor `S_w` the
/// multiplier is then a single scalar.
pub fn build_mulquant(
    s_w: &[f32],
    s_x: f32,
    gamma_star: Option<&[f64]>,
    beta_star: &[f64],
    enc: MulQuantEncoding,
    out_qp: &QuantParams,
    relu_next: bool,
) -> Result<MulQuantParams, FuseError> {
    let s_out = out_qp.scale0() as f64;
    let z_out = out_qp.zero();
    if !(s_x > 0.0) || !(s_out > 0.0) || s_w.iter().any(|s| !(*s > 0.0)) {
        return Err(FuseError::Scale(format!(
            "scales must be positive (S_x = {s_x}, S_out = {s_out}, S_w = {s_w:?})"
        )));
    }
    let per_channel = s_w.len() > 1 || gamma_star.is_some_and(|g| g.len() > 1);
    let channels = s_w
        .len()
        .max(gamma_star.map_or(1, |g| g.len()))
        .max(beta_star.len());
    let lens_ok = [s_w.len(), gamma_star.map_or(1, |g| g.len()), beta_star.len()]
        .iter()
        .all(|&l| l == 1 || l == channels);
    if !lens_ok {
        return Err(FuseError::ChannelMismatch(format!(
            "S_w has {}, γ* has {:?}, β* has {} entries",
            s_w.len(),
            gamma_star.map(|g| g.len()),
            beta_star.len()
        )));
    }
    let pick = |v: &[f32], c: usize| v[if v.len() == 1 { 0 } else { c }] as f64;
    let n_mult = if per_channel { channels } else { 1 };
    let mut multiplier = Vec::with_capacity(n_mult);
    for c in 0..n_mult {
        let g = gamma_star.map_or(1.0, |g| g[if g.len() == 1 { 0 } else { c }]);
        let m = g * pick(s_w, c) * s_x as f64 / s_out;
        multiplier.push(
            enc.encode_multiplier(m)
                .map_err(|e| FuseError::MultiplierOverflow { channel: c, source: e })?,
        );
    }
    let mut bias = Vec::with_capacity(channels);
    for c in 0..beta_star.len().max(1) {
        let b = beta_star.get(c).copied().unwrap_or(0.0) / s_out + z_out as f64;
        bias.push(
            enc.encode_bias(b)
                .map_err(|e| FuseError::BiasOverflow { channel: c, source: e })?,
        );
    }
    let (qmin, qmax) = out_qp.qrange();
    let lo = if relu_next { qmin.max(z_out) } else { qmin };
    Ok(MulQuantParams {
        multiplier,
        bias,
        out_qp: out_qp.clone(),
        clamp: (lo, qmax),
        relu_folded: relu_next,
        in_zero: 0,
        axis: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(int_bits: u8, frac_bits: u8, align: bool) -> MulQuantEncoding {
        MulQuantEncoding {
            fp: FixedPointSpec::new(int_bits, frac_bits).unwrap(),
            align,
        }
    }

    #[test]
    fn multiplier_codes() {
        let out = QuantParams::per_tensor(1.0, 0, 8, true, true);
        let mq = build_mulquant(&[0.05], 1.0, None, &[0.0], enc(8, 8, false), &out, false).unwrap();
        assert_eq!(mq.multiplier[0].code, 13);
        let mq = build_mulquant(&[1.0], 1.0, None, &[0.0], enc(12, 4, false), &out, false).unwrap();
        assert_eq!(mq.multiplier[0].code, 16);
        assert!(mq.is_scalar());
    }

    #[test]
    fn overflow_names_channel() {
        let out = QuantParams::per_tensor(1.0, 0, 8, true, true);
        let err = build_mulquant(&[0.1, 900.0], 1.0, None, &[0.0, 0.0], enc(4, 12, true), &out, false)
            .unwrap_err();
        match err {
            FuseError::MultiplierOverflow { channel, .. } => assert_eq!(channel, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn relu_folds_into_clamp() {
        let out = QuantParams::per_tensor(0.1, 20, 8, false, false);
        let mq = build_mulquant(&[0.1], 1.0, Some(&[1.0, 2.0]), &[0.0, 0.0], enc(4, 12, true), &out, true)
            .unwrap();
        assert_eq!(mq.clamp, (20, 255));
        assert_eq!(mq.multiplier.len(), 2);
        assert_eq!(mq.bias[0].code, 20 << 12);
    }
}
