use serde::{Deserialize, Serialize};

use super::ops::fake_quant_value;
use super::QuantError;
use crate::qparams::QuantParams;
use crate::tensor::{int_range, strides, Tensor};

pub const HISTOGRAM_BINS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObserverMode {
    MinMax,
    /// Clip both tails at the given percentile, e.g. `99.9`.
    Percentile { p: f64 },
    Mse,
}

/// Fixed-count histogram over `[lo, hi]` whose span only grows by doubling,
/// so widened bins always cover whole old bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn new(lo: f64, hi: f64) -> Self {
        let hi = if hi > lo { hi } else { lo + (lo.abs().max(1.0) * 1e-6) };
        Histogram {
            lo,
            hi,
            counts: vec![0; HISTOGRAM_BINS],
        }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    fn bin_of(&self, v: f64) -> usize {
        let b = ((v - self.lo) / self.width()).floor();
        (b.max(0.0) as usize).min(self.counts.len() - 1)
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    /// Doubles the span towards whichever side `v` lies on until it fits.
    fn grow_to(&mut self, v: f64) {
        let n = self.counts.len();
        while v < self.lo || v > self.hi {
            let span = self.hi - self.lo;
            let mut merged = vec![0u64; n];
            if v < self.lo {
                for (j, c) in self.counts.iter().enumerate() {
                    merged[n / 2 + j / 2] += c;
                }
                self.lo = self.hi - 2.0 * span;
            } else {
                for (j, c) in self.counts.iter().enumerate() {
                    merged[j / 2] += c;
                }
                self.hi = self.lo + 2.0 * span;
            }
            self.counts = merged;
        }
    }

    fn add(&mut self, v: f64) {
        self.grow_to(v);
        let b = self.bin_of(v);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Value below which `q ∈ [0, 1]` of the mass lies, interpolating
    /// linearly inside the bin.
    pub fn quantile(&self, q: f64) -> f64 {
        let total = self.total() as f64;
        let target = q.clamp(0.0, 1.0) * total;
        let mut acc = 0.0;
        for (i, &c) in self.counts.iter().enumerate() {
            let next = acc + c as f64;
            if next >= target && c > 0 {
                let frac = ((target - acc) / c as f64).clamp(0.0, 1.0);
                return self.lo + (i as f64 + frac) * self.width();
            }
            acc = next;
        }
        self.hi
    }

    /// Re-bins `other` onto this histogram by bin centre.
    fn absorb(&mut self, other: &Histogram) {
        for (i, &c) in other.counts.iter().enumerate() {
            if c > 0 {
                let v = other.center(i);
                self.grow_to(v);
                let b = self.bin_of(v);
                self.counts[b] += c;
            }
        }
    }
}

/// Running range statistics of one edge or weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Observer {
    pub name: String,
    pub mode: ObserverMode,
    /// Channel axis for per-channel statistics (minmax only).
    pub axis: Option<usize>,
    pub running_min: Vec<f32>,
    pub running_max: Vec<f32>,
    pub sample_count: u64,
    pub histogram: Option<Histogram>,
}

/// Computed parameters plus the degenerate-range warning flag.
#[derive(Debug, Clone, PartialEq)]
pub struct QParamsResult {
    pub qp: QuantParams,
    /// Set when some channel saw a zero-width range and fell back to `S = 1`.
    pub degenerate: bool,
}

impl Observer {
    pub fn new(name: impl Into<String>, mode: ObserverMode) -> Self {
        Observer {
            name: name.into(),
            mode,
            axis: None,
            running_min: Vec::new(),
            running_max: Vec::new(),
            sample_count: 0,
            histogram: None,
        }
    }

    pub fn per_channel(name: impl Into<String>, axis: usize) -> Self {
        Observer {
            axis: Some(axis),
            ..Observer::new(name, ObserverMode::MinMax)
        }
    }

    fn uses_histogram(&self) -> bool {
        !matches!(self.mode, ObserverMode::MinMax)
    }

    /// Folds one batch into the running statistics.
    pub fn update(&mut self, batch: &Tensor) -> Result<(), QuantError> {
        let data = batch.as_f32()?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(QuantError::NonFinite {
                edge: self.name.clone(),
                index: i,
            });
        }
        if data.is_empty() {
            return Ok(());
        }
        let (channels, stride) = match self.axis {
            Some(a) => {
                if self.uses_histogram() {
                    return Err(QuantError::Config(format!(
                        "observer '{}': per-channel statistics need minmax mode",
                        self.name
                    )));
                }
                let extent = *batch.shape().get(a).ok_or(QuantError::ChannelMismatch {
                    channels: self.running_min.len(),
                    axis: a,
                    extent: None,
                })?;
                (extent, strides(batch.shape())[a])
            }
            None => (1, 1),
        };
        if self.running_min.is_empty() {
            self.running_min = vec![f32::INFINITY; channels];
            self.running_max = vec![f32::NEG_INFINITY; channels];
        } else if self.running_min.len() != channels {
            return Err(QuantError::ChannelMismatch {
                channels: self.running_min.len(),
                axis: self.axis.unwrap_or(0),
                extent: Some(channels),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            let c = (i / stride) % channels;
            self.running_min[c] = self.running_min[c].min(v);
            self.running_max[c] = self.running_max[c].max(v);
        }
        if self.uses_histogram() {
            let h = self.histogram.get_or_insert_with(|| {
                let lo = data.iter().fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
                let hi = data.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                Histogram::new(lo, hi)
            });
            for &v in data {
                h.add(v as f64);
            }
        }
        self.sample_count += data.len() as u64;
        Ok(())
    }

    pub fn observe(mut self, batch: &Tensor) -> Result<Self, QuantError> {
        self.update(batch)?;
        Ok(self)
    }

    /// Combines two shards. Extrema merge exactly; histograms re-bin by
    /// bin centre.
    pub fn merge(&self, other: &Observer) -> Result<Observer, QuantError> {
        if self.mode != other.mode || self.axis != other.axis {
            return Err(QuantError::Config(format!(
                "cannot merge observers '{}' and '{}' of different kinds",
                self.name, other.name
            )));
        }
        if self.sample_count == 0 {
            return Ok(Observer {
                name: self.name.clone(),
                ..other.clone()
            });
        }
        if other.sample_count == 0 {
            return Ok(self.clone());
        }
        if self.running_min.len() != other.running_min.len() {
            return Err(QuantError::ChannelMismatch {
                channels: self.running_min.len(),
                axis: self.axis.unwrap_or(0),
                extent: Some(other.running_min.len()),
            });
        }
        let mut out = self.clone();
        for c in 0..out.running_min.len() {
            out.running_min[c] = out.running_min[c].min(other.running_min[c]);
            out.running_max[c] = out.running_max[c].max(other.running_max[c]);
        }
        out.sample_count += other.sample_count;
        if let (Some(h), Some(o)) = (out.histogram.as_mut(), other.histogram.as_ref()) {
            h.absorb(o);
        }
        Ok(out)
    }

    /// Range the parameters are fitted to, per channel.
    pub fn clip_range(&self) -> Result<(Vec<f32>, Vec<f32>), QuantError> {
        if self.sample_count == 0 {
            return Err(QuantError::Empty(self.name.clone()));
        }
        match (self.mode, &self.histogram) {
            (ObserverMode::Percentile { p }, Some(h)) => {
                let q = (p / 100.0).clamp(0.5, 1.0);
                let lo = h.quantile(1.0 - q).max(self.running_min[0] as f64);
                let hi = h.quantile(q).min(self.running_max[0] as f64);
                Ok((vec![lo as f32], vec![hi as f32]))
            }
            _ => Ok((self.running_min.clone(), self.running_max.clone())),
        }
    }
}

/// Scale and zero point from an observed range.
///
/// Symmetric: `S = max(|min|, |max|) / qmax`, `Z = 0`. Asymmetric: the range
/// is widened to contain 0, `S = (max − min) / (qmax − qmin)` and
/// `Z = clamp(round(qmin − min / S), qmin, qmax)`. A zero-width range falls
/// back to `S = 1` and sets the degenerate flag.
pub fn qparams_from_range(
    mins: &[f32],
    maxs: &[f32],
    bits: u8,
    signed: bool,
    symmetric: bool,
    axis: Option<usize>,
) -> Result<QParamsResult, QuantError> {
    if !(2..=16).contains(&bits) {
        return Err(QuantError::Config(format!("bits {bits} outside 2..=16")));
    }
    let (lo, hi) = int_range(bits, signed);
    let (qmin, qmax) = if symmetric && signed { (-hi, hi) } else { (lo, hi) };
    let mut scale = Vec::with_capacity(mins.len());
    let mut zero = Vec::with_capacity(mins.len());
    let mut degenerate = false;
    for (&mn, &mx) in mins.iter().zip(maxs) {
        let (mn, mx) = (mn.min(0.0) as f64, mx.max(0.0) as f64);
        if symmetric {
            let amax = mn.abs().max(mx);
            let s = amax / qmax as f64;
            if !(s > 0.0) || (s as f32) <= 0.0 {
                degenerate = true;
                scale.push(1.0);
            } else {
                scale.push(s as f32);
            }
            zero.push(0);
        } else {
            let s = (mx - mn) / (qmax - qmin) as f64;
            let s = if !(s > 0.0) || (s as f32) <= 0.0 {
                degenerate = true;
                1.0
            } else {
                s as f32
            };
            let z = (qmin as f64 - mn / s as f64).round() as i64;
            scale.push(s);
            zero.push(z.clamp(qmin, qmax));
        }
    }
    Ok(QParamsResult {
        qp: QuantParams {
            scale,
            zero_point: zero,
            bits,
            signed,
            symmetric,
            axis,
        },
        degenerate,
    })
}

/// Parameters for everything `obs` has seen. `Mse` observers search clip
/// ratios over their histogram.
pub fn compute_qparams(
    obs: &Observer,
    bits: u8,
    signed: bool,
    symmetric: bool,
) -> Result<QParamsResult, QuantError> {
    let (mins, maxs) = obs.clip_range()?;
    if let (ObserverMode::Mse, Some(h)) = (obs.mode, &obs.histogram) {
        let weighted: Vec<(f64, f64)> = h
            .counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(i, c)| (h.center(i), *c as f64))
            .collect();
        return mse_search(&weighted, bits, signed, symmetric, mins[0], maxs[0]);
    }
    qparams_from_range(&mins, &maxs, bits, signed, symmetric, obs.axis)
}

pub const MSE_CLIP_STEPS: usize = 100;
pub const MSE_MIN_SAMPLES: usize = 64;

/// `MSE_CLIP_STEPS` evenly spaced clip ratios in `[0.5, 1]`.
pub fn mse_clip_ratios() -> impl Iterator<Item = f64> {
    (0..MSE_CLIP_STEPS).map(|k| 0.5 + 0.5 * k as f64 / (MSE_CLIP_STEPS - 1) as f64)
}

fn weighted_sq_error(points: &[(f64, f64)], qp: &QuantParams) -> f64 {
    let (qmin, qmax) = qp.qrange();
    let (s, z) = (qp.scale0(), qp.zero());
    points
        .iter()
        .map(|&(x, w)| {
            let d = x - fake_quant_value(x as f32, s, z, qmin, qmax) as f64;
            w * d * d
        })
        .sum()
}

fn mse_search(
    points: &[(f64, f64)],
    bits: u8,
    signed: bool,
    symmetric: bool,
    min: f32,
    max: f32,
) -> Result<QParamsResult, QuantError> {
    let mut best: Option<(f64, QParamsResult)> = None;
    for c in mse_clip_ratios() {
        let (lo, hi) = if symmetric {
            let a = (min.abs().max(max.abs()) as f64 * c) as f32;
            (-a, a)
        } else {
            ((min as f64 * c) as f32, (max as f64 * c) as f32)
        };
        let cand = qparams_from_range(&[lo], &[hi], bits, signed, symmetric, None)?;
        if cand.degenerate {
            return Ok(cand);
        }
        let err = weighted_sq_error(points, &cand.qp);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, cand));
        }
    }
    Ok(best.expect("clip grid is non-empty").1)
}

/// Symmetric signed parameters minimising `Σ (x − fake_quant(x))²` over
/// clip values `c · max|x|`, `c` on a 100-point grid in `[0.5, 1]`.
pub fn compute_qparams_mse(samples: &Tensor, bits: u8) -> Result<QParamsResult, QuantError> {
    let data = samples.as_f32()?;
    if data.len() < MSE_MIN_SAMPLES {
        return Err(QuantError::TooFewSamples {
            needed: MSE_MIN_SAMPLES,
            got: data.len(),
        });
    }
    mse_qparams_slice(data, bits)
}

/// [`compute_qparams_mse`] without the sample-count floor, for per-channel
/// weight slices.
pub fn mse_qparams_slice(data: &[f32], bits: u8) -> Result<QParamsResult, QuantError> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite {
            edge: "samples".into(),
            index: i,
        });
    }
    let points: Vec<(f64, f64)> = data.iter().map(|&v| (v as f64, 1.0)).collect();
    let amax = data.iter().fold(0f32, |a, &b| a.max(b.abs()));
    // a single repeated value has no distribution to search over; it is
    // represented exactly at full clip and flagged like a zero-width range
    if data.iter().all(|&v| v == data[0]) {
        let mut r = qparams_from_range(&[-amax], &[amax], bits, true, true, None)?;
        r.degenerate = true;
        return Ok(r);
    }
    mse_search(&points, bits, true, true, -amax, amax)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f32>) -> Tensor {
        let n = v.len();
        Tensor::from_f32(vec![n], v).unwrap()
    }

    #[test]
    fn minmax_extrema() {
        let o = Observer::new("x", ObserverMode::MinMax).observe(&t(vec![-2.0, 6.0])).unwrap();
        assert_eq!((o.running_min[0], o.running_max[0]), (-2.0, 6.0));
        let r = compute_qparams(&o, 8, false, false).unwrap();
        assert!((r.qp.scale0() - 8.0 / 255.0).abs() < 1e-9);
        assert_eq!(r.qp.zero(), 64);
        assert!(!r.degenerate);
    }

    #[test]
    fn symmetric_unit_range() {
        let o = Observer::new("x", ObserverMode::MinMax).observe(&t(vec![-1.0, 1.0])).unwrap();
        let r = compute_qparams(&o, 8, true, true).unwrap();
        assert_eq!(r.qp.scale0(), (1.0f64 / 127.0) as f32);
        assert_eq!(r.qp.zero(), 0);
    }

    #[test]
    fn all_zero_is_degenerate() {
        let o = Observer::new("x", ObserverMode::MinMax).observe(&t(vec![0.0; 5])).unwrap();
        let r = compute_qparams(&o, 8, true, true).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.qp.scale0(), 1.0);
    }

    #[test]
    fn nan_names_edge() {
        let err = Observer::new("conv1.out", ObserverMode::MinMax)
            .observe(&t(vec![1.0, f32::NAN]))
            .unwrap_err();
        assert!(err.to_string().contains("conv1.out"));
    }

    #[test]
    fn empty_observer_errors() {
        let o = Observer::new("x", ObserverMode::MinMax);
        assert!(matches!(compute_qparams(&o, 8, true, true), Err(QuantError::Empty(_))));
    }

    #[test]
    fn histogram_growth_keeps_mass() {
        let mut o = Observer::new("x", ObserverMode::Percentile { p: 99.0 });
        o.update(&t(vec![0.0, 1.0])).unwrap();
        o.update(&t(vec![-50.0, 300.0])).unwrap();
        let h = o.histogram.as_ref().unwrap();
        assert_eq!(h.total(), 4);
        assert!(h.lo <= -50.0 && h.hi >= 300.0);
    }

    #[test]
    fn mse_rejects_few_samples() {
        assert!(matches!(
            compute_qparams_mse(&t(vec![1.0; 10]), 4),
            Err(QuantError::TooFewSamples { .. })
        ));
        let r = compute_qparams_mse(&t(vec![0.7; 100]), 4).unwrap();
        assert!(r.degenerate);
        assert!((r.qp.scale0() - 0.1).abs() < 1e-7);
        let r = compute_qparams_mse(&t(vec![0.0; 100]), 4).unwrap();
        assert!(r.degenerate);
    }
}
