use serde::{Deserialize, Serialize};

use crate::tensor::int_range;

/// Scale, zero point and integer format of a quantized value.
///
/// Per-tensor parameters carry one scale and one zero point; per-channel
/// parameters carry one entry per index along `axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f32>,
    pub zero_point: Vec<i64>,
    pub bits: u8,
    pub signed: bool,
    pub symmetric: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i64, bits: u8, signed: bool, symmetric: bool) -> Self {
        QuantParams {
            scale: vec![scale],
            zero_point: vec![zero_point],
            bits,
            signed,
            symmetric,
            axis: None,
        }
    }

    /// Symmetric signed parameters with one scale per channel along `axis`.
    pub fn per_channel_symmetric(scales: Vec<f32>, bits: u8, axis: usize) -> Self {
        let n = scales.len();
        QuantParams {
            scale: scales,
            zero_point: vec![0; n],
            bits,
            signed: true,
            symmetric: true,
            axis: Some(axis),
        }
    }

    pub fn is_per_channel(&self) -> bool {
        self.axis.is_some()
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn scale_at(&self, c: usize) -> f32 {
        if self.scale.len() == 1 {
            self.scale[0]
        } else {
            self.scale[c]
        }
    }

    pub fn zero_at(&self, c: usize) -> i64 {
        if self.zero_point.len() == 1 {
            self.zero_point[0]
        } else {
            self.zero_point[c]
        }
    }

    /// Zero point of a per-tensor parameter set (first entry otherwise).
    pub fn zero(&self) -> i64 {
        self.zero_point[0]
    }

    pub fn scale0(&self) -> f32 {
        self.scale[0]
    }

    /// Clamp range of quantized codes. Symmetric signed formats give up the
    /// most negative code so the range is `±(2^(n−1) − 1)`.
    pub fn qrange(&self) -> (i64, i64) {
        let (lo, hi) = int_range(self.bits, self.signed);
        if self.symmetric && self.signed {
            (-hi, hi)
        } else {
            (lo, hi)
        }
    }

    /// Storage range of the declared integer type.
    pub fn storage_range(&self) -> (i64, i64) {
        int_range(self.bits, self.signed)
    }

    /// Every invariant violation, as human-readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(2..=16).contains(&self.bits) {
            out.push(format!("bits {} outside 2..=16", self.bits));
            return out;
        }
        if self.scale.is_empty() {
            out.push("empty scale".into());
        }
        if self.scale.len() != self.zero_point.len() {
            out.push(format!(
                "scale has {} entries but zero_point has {}",
                self.scale.len(),
                self.zero_point.len()
            ));
        }
        if let Some((i, s)) = self
            .scale
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            out.push(format!("scale[{i}] = {s} is not positive"));
        }
        let (lo, hi) = self.storage_range();
        if let Some((i, z)) = self
            .zero_point
            .iter()
            .enumerate()
            .find(|(_, z)| **z < lo || **z > hi)
        {
            out.push(format!("zero_point[{i}] = {z} outside [{lo}, {hi}]"));
        }
        if self.symmetric && self.zero_point.iter().any(|z| *z != 0) {
            out.push("symmetric parameters need zero_point = 0".into());
        }
        if self.axis.is_none() && self.scale.len() > 1 {
            out.push("per-channel scale without an axis".into());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_range_reserves_min() {
        let qp = QuantParams::per_tensor(0.1, 0, 8, true, true);
        assert_eq!(qp.qrange(), (-127, 127));
        let qp = QuantParams::per_tensor(0.1, 0, 8, true, false);
        assert_eq!(qp.qrange(), (-128, 127));
    }

    #[test]
    fn violations_reported() {
        let mut qp = QuantParams::per_tensor(0.0, 300, 8, false, false);
        let v = qp.violations();
        assert_eq!(v.len(), 2, "{v:?}");
        qp.scale = vec![0.1];
        qp.zero_point = vec![3];
        assert!(qp.violations().is_empty());
    }
}
