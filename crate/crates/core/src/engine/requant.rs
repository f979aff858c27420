//! Integer kernels of the deployment path. Nothing here touches floats.

use super::kernels::ConvGeom;
use crate::fixed::{round_shift, FixedPointCode};
use crate::fuse::MulQuantParams;
use crate::tensor::strides;

/// `clamp(round_half_away((acc · M + b · 2^(frac_M − frac_b)) / 2^frac_M), lo, hi)`,
/// evaluated in 128-bit so there is a single rounding site.
#[inline]
pub fn requantize_codes(acc: i64, m: &FixedPointCode, b: &FixedPointCode, clamp: (i64, i64)) -> i64 {
    let fm = m.frac_bits as u32;
    let fb = b.frac_bits as u32;
    let prod = acc as i128 * m.code as i128;
    let bias = if fm >= fb {
        (b.code as i128) << (fm - fb)
    } else {
        round_shift(b.code as i128, fb - fm)
    };
    let v = round_shift(prod + bias, fm);
    v.clamp(clamp.0 as i128, clamp.1 as i128) as i64
}

/// Requantizes an accumulator of output channel `channel`.
pub fn requantize(acc: i64, mq: &MulQuantParams, channel: usize) -> i64 {
    mq.apply(acc, channel)
}

/// Applies `mq` along its channel axis of an accumulator tensor.
pub fn apply_mulquant(acc: &[i64], shape: &[usize], mq: &MulQuantParams) -> Vec<i64> {
    if mq.channels() <= 1 {
        return acc.iter().map(|&a| mq.apply(a, 0)).collect();
    }
    let axis = mq.axis_for_rank(shape.len()).min(shape.len().saturating_sub(1));
    let stride = strides(shape)[axis];
    let extent = shape[axis];
    acc.iter()
        .enumerate()
        .map(|(i, &a)| mq.apply(a, (i / stride) % extent))
        .collect()
}

/// Largest magnitude in a slice.
fn max_abs(v: &[i64]) -> u128 {
    v.iter().map(|x| x.unsigned_abs() as u128).max().unwrap_or(0)
}

/// Bound below which no sum of `terms` products can leave `i64`.
fn fits(wmax: u128, xmax: u128, terms: usize) -> bool {
    wmax.saturating_mul(xmax).saturating_mul(terms as u128) < (1u128 << 62)
}

/// Integer convolution with the input zero point removed on the fly, so
/// padding contributes exactly zero. `Err` carries the first overflowing
/// partial sum.
pub fn conv2d_int(x: &[i64], zx: i64, g: &ConvGeom, w: &[i64]) -> Result<Vec<i64>, i128> {
    let og = g.o / g.groups;
    let taps = g.taps();
    let xmax = x.iter().map(|v| (v - zx).unsigned_abs() as u128).max().unwrap_or(0);
    let safe = fits(max_abs(w), xmax, taps);
    let mut out = vec![0i64; g.n * g.o * g.oh * g.ow];
    let mut patch = Vec::with_capacity(taps);
    for b in 0..g.n {
        for grp in 0..g.groups {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    g.patch(b, grp * g.cg, oy, ox, &mut patch);
                    for oc in grp * og..(grp + 1) * og {
                        let wrow = &w[oc * taps..(oc + 1) * taps];
                        let acc = if safe {
                            let mut acc = 0i64;
                            for (t, p) in patch.iter().enumerate() {
                                if let Some(i) = p {
                                    acc += wrow[t] * (x[*i] - zx);
                                }
                            }
                            acc
                        } else {
                            let mut acc = 0i128;
                            for (t, p) in patch.iter().enumerate() {
                                if let Some(i) = p {
                                    acc += wrow[t] as i128 * (x[*i] - zx) as i128;
                                }
                            }
                            i64::try_from(acc).map_err(|_| acc)?
                        };
                        out[((b * g.o + oc) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `acc[r, o] = Σ_k W[o, k] · (x[r, k] − zx)`.
pub fn linear_int(x: &[i64], rows: usize, zx: i64, w: &[i64], out_f: usize) -> Result<Vec<i64>, i128> {
    let in_f = w.len() / out_f.max(1);
    let xmax = x.iter().map(|v| (v - zx).unsigned_abs() as u128).max().unwrap_or(0);
    let safe = fits(max_abs(w), xmax, in_f);
    let mut out = vec![0i64; rows * out_f];
    for r in 0..rows {
        let xr = &x[r * in_f..(r + 1) * in_f];
        for o in 0..out_f {
            let wr = &w[o * in_f..(o + 1) * in_f];
            out[r * out_f + o] = if safe {
                let mut acc = 0i64;
                for k in 0..in_f {
                    acc += wr[k] * (xr[k] - zx);
                }
                acc
            } else {
                let mut acc = 0i128;
                for k in 0..in_f {
                    acc += wr[k] as i128 * (xr[k] - zx) as i128;
                }
                i64::try_from(acc).map_err(|_| acc)?
            };
        }
    }
    Ok(out)
}

/// Narrows accumulators into a 32-bit edge, reporting the first value that
/// does not fit.
pub fn check_i32(v: &[i64]) -> Result<(), i64> {
    match v.iter().find(|x| **x < i32::MIN as i64 || **x > i32::MAX as i64) {
        Some(&bad) => Err(bad),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::FixedPointCode;

    fn code(code: i64, frac: u8) -> FixedPointCode {
        FixedPointCode {
            code,
            int_bits: 16,
            frac_bits: frac,
        }
    }

    #[test]
    fn requant_examples() {
        let wide = (i64::MIN, i64::MAX);
        assert_eq!(requantize_codes(1000, &code(3, 8), &code(0, 8), wide), 12);
        assert_eq!(requantize_codes(6, &code(16, 4), &code(0, 4), wide), 6);
        assert_eq!(requantize_codes(0, &code(77, 9), &code(0, 4), (-127, 127)), 0);
        for a in [1i64, 7, 100, 12345] {
            let m = code(1234, 14);
            let p = requantize_codes(a, &m, &code(0, 4), (-127, 127));
            let n = requantize_codes(-a, &m, &code(0, 4), (-127, 127));
            assert_eq!(p, -n);
        }
    }

    #[test]
    fn conv_int_unit() {
        let g = ConvGeom::new(&[1, 1, 1, 1], &[1, 1, 1, 1], (1, 1), (0, 0), 1).unwrap();
        assert_eq!(conv2d_int(&[3], 0, &g, &[2]).unwrap(), vec![6]);
        // padding contributes the zero point, i.e. nothing
        let g = ConvGeom::new(&[1, 1, 1, 1], &[1, 1, 3, 3], (1, 1), (1, 1), 1).unwrap();
        assert_eq!(conv2d_int(&[13], 10, &g, &[1; 9]).unwrap(), vec![3]);
    }
}
