//! Quantize, dequantize and fake-quantize. These are the two halves of the
//! dual-path contract: the integer path keeps `quantize` outputs, the
//! training path keeps `fake_quant = dequantize ∘ quantize`.

use super::QuantError;
use crate::purity;
use crate::qparams::QuantParams;
use crate::tensor::{strides, Tensor, TensorData};

/// `clamp(round_half_away(x / scale + zero), qmin, qmax)`. NaN maps to the
/// zero point.
#[inline]
pub fn quantize_value(x: f32, scale: f32, zero: i64, qmin: i64, qmax: i64) -> i64 {
    if x.is_nan() {
        return zero.clamp(qmin, qmax);
    }
    let v = (x as f64 / scale as f64 + zero as f64).round();
    if v <= qmin as f64 {
        qmin
    } else if v >= qmax as f64 {
        qmax
    } else {
        v as i64
    }
}

/// `(q − zero) · scale`, evaluated in double precision.
#[inline]
pub fn dequantize_value_f64(q: i64, scale: f32, zero: i64) -> f64 {
    (q - zero) as f64 * scale as f64
}

#[inline]
pub fn dequantize_value(q: i64, scale: f32, zero: i64) -> f32 {
    dequantize_value_f64(q, scale, zero) as f32
}

#[inline]
pub fn fake_quant_value(x: f32, scale: f32, zero: i64, qmin: i64, qmax: i64) -> f32 {
    dequantize_value(quantize_value(x, scale, zero, qmin, qmax), scale, zero)
}

fn check(qp: &QuantParams, shape: &[usize]) -> Result<(), QuantError> {
    let v = qp.violations();
    if !v.is_empty() {
        return Err(QuantError::InvalidParams(v));
    }
    if let Some(axis) = qp.axis {
        match shape.get(axis) {
            Some(&c) if c == qp.channels() || qp.channels() == 1 => {}
            other => {
                return Err(QuantError::ChannelMismatch {
                    channels: qp.channels(),
                    axis,
                    extent: other.copied(),
                })
            }
        }
    }
    Ok(())
}

/// Channel index of every element for per-channel parameters.
fn channel_of(qp: &QuantParams, shape: &[usize]) -> impl Fn(usize) -> usize {
    let (stride, extent) = match qp.axis {
        Some(a) if qp.channels() > 1 => (strides(shape)[a], shape[a]),
        _ => (1, 1),
    };
    move |i| (i / stride) % extent
}

pub fn quantize(x: &Tensor, qp: &QuantParams) -> Result<Tensor, QuantError> {
    check(qp, x.shape())?;
    purity::record(x.numel());
    let data = x.as_f32()?;
    let (qmin, qmax) = qp.qrange();
    let ch = channel_of(qp, x.shape());
    let values = data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = ch(i);
            quantize_value(v, qp.scale_at(c), qp.zero_at(c), qmin, qmax)
        })
        .collect();
    Ok(Tensor::from_int(x.shape().to_vec(), qp.bits, qp.signed, values)?)
}

pub fn dequantize(xq: &Tensor, qp: &QuantParams) -> Result<Tensor, QuantError> {
    check(qp, xq.shape())?;
    purity::record(xq.numel());
    let data = xq.as_int()?;
    let ch = channel_of(qp, xq.shape());
    let values = data
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let c = ch(i);
            dequantize_value(q, qp.scale_at(c), qp.zero_at(c))
        })
        .collect();
    Ok(Tensor::from_f32(xq.shape().to_vec(), values)?)
}

/// `dequantize(quantize(x))`, computed element-wise without materialising
/// the integer tensor.
pub fn fake_quant(x: &Tensor, qp: &QuantParams) -> Result<Tensor, QuantError> {
    check(qp, x.shape())?;
    purity::record(x.numel());
    let data = x.as_f32()?;
    let (qmin, qmax) = qp.qrange();
    let ch = channel_of(qp, x.shape());
    let values = data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = ch(i);
            fake_quant_value(v, qp.scale_at(c), qp.zero_at(c), qmin, qmax)
        })
        .collect();
    Ok(Tensor::from_f32(x.shape().to_vec(), values)?)
}

/// Quantizes the values of an integer-or-float tensor already known to lie
/// on `qp`'s grid, returning the integer codes.
pub fn codes_of(x: &Tensor, qp: &QuantParams) -> Result<Vec<i64>, QuantError> {
    match x.data() {
        TensorData::Int { values, .. } => Ok(values.clone()),
        TensorData::Float(_) => Ok(quantize(x, qp)?.as_int()?.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: Vec<f32>) -> Tensor {
        let n = v.len();
        Tensor::from_f32(vec![n], v).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let qp = QuantParams::per_tensor(0.1, 0, 8, true, false);
        assert_eq!(quantize(&t(vec![0.34]), &qp).unwrap().as_int().unwrap(), &[3]);
        let qp = QuantParams::per_tensor(0.1, 0, 8, true, true);
        assert_eq!(quantize(&t(vec![20.0]), &qp).unwrap().as_int().unwrap(), &[127]);
        assert_eq!(quantize(&t(vec![-20.0]), &qp).unwrap().as_int().unwrap(), &[-127]);
    }

    #[test]
    fn dequantize_examples() {
        let qp = QuantParams::per_tensor(0.1, 0, 8, true, false);
        let xq = Tensor::from_int(vec![1], 8, true, vec![3]).unwrap();
        assert!((dequantize(&xq, &qp).unwrap().as_f32().unwrap()[0] - 0.3).abs() < 1e-7);
        let qp = QuantParams::per_tensor(0.37, 11, 8, false, false);
        let xq = Tensor::from_int(vec![1], 8, false, vec![11]).unwrap();
        assert_eq!(dequantize(&xq, &qp).unwrap().as_f32().unwrap()[0], 0.0);
    }

    #[test]
    fn fake_quant_examples() {
        let qp = QuantParams::per_tensor(0.25, 0, 8, true, true);
        assert_eq!(fake_quant(&t(vec![0.3]), &qp).unwrap().as_f32().unwrap(), &[0.25]);
        // points on the grid are fixed
        let on_grid: Vec<f32> = (-5..5).map(|k| k as f32 * 0.25).collect();
        assert_eq!(fake_quant(&t(on_grid.clone()), &qp).unwrap().as_f32().unwrap(), &on_grid[..]);
    }

    #[test]
    fn half_away_ties() {
        let qp = QuantParams::per_tensor(1.0, 0, 8, true, false);
        let q = quantize(&t(vec![0.5, -0.5, 2.5, -2.5]), &qp).unwrap();
        assert_eq!(q.as_int().unwrap(), &[1, -1, 3, -3]);
    }

    #[test]
    fn per_channel_uses_axis() {
        let qp = QuantParams::per_channel_symmetric(vec![1.0, 0.5], 8, 0);
        let x = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(quantize(&x, &qp).unwrap().as_int().unwrap(), &[1, 2, 2, 4]);
        let bad = QuantParams::per_channel_symmetric(vec![1.0; 3], 8, 0);
        assert!(matches!(quantize(&x, &bad), Err(QuantError::ChannelMismatch { .. })));
    }

    #[test]
    fn rejects_nonpositive_scale() {
        let qp = QuantParams::per_tensor(0.0, 0, 8, true, true);
        assert!(matches!(quantize(&t(vec![1.0]), &qp), Err(QuantError::InvalidParams(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_within_half_step(
            xs in prop::collection::vec(-10.0f32..10.0, 1..64),
            scale in 0.01f32..0.5,
            bits in prop::sample::select(vec![2u8, 4, 8]),
            zero_frac in 0.0f64..1.0,
        ) {
            let qp = QuantParams::per_tensor(scale, 0, bits, false, false);
            let (lo, hi) = qp.qrange();
            let z = lo + ((hi - lo) as f64 * zero_frac).round() as i64;
            let qp = QuantParams { zero_point: vec![z], ..qp };
            let x = t(xs.clone());
            let q = quantize(&x, &qp).unwrap();
            let fq = fake_quant(&x, &qp).unwrap();
            let dq = dequantize(&q, &qp).unwrap();
            prop_assert_eq!(dq.as_f32().unwrap(), fq.as_f32().unwrap());
            for (i, &v) in xs.iter().enumerate() {
                let qi = q.as_int().unwrap()[i];
                prop_assert!(qi >= lo && qi <= hi);
                let real_lo = dequantize_value_f64(lo, scale, z);
                let real_hi = dequantize_value_f64(hi, scale, z);
                if (v as f64) >= real_lo && (v as f64) <= real_hi {
                    let err = (dequantize_value_f64(qi, scale, z) - v as f64).abs();
                    prop_assert!(err <= scale as f64 / 2.0 + 1e-9, "err {err} scale {scale}");
                }
            }
        }
    }
}
