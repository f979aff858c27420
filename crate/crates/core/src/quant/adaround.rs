//! Learned rounding. Each weight picks `floor(W/S)` or `floor(W/S) + 1`
//! through a soft offset `h(α)` trained to reconstruct the layer output on
//! calibration inputs, then frozen to `floor(W/S) + [α ≥ 0]`.
//!
//! The objective is evaluated in grid units on RMS-normalised inputs:
//! `L = Σ_o d_o G d_oᵀ + λ Σ (1 − |2h − 1|^β)` with `d = W/S − floor(W/S) − h`
//! and `G = X̂ᵀX̂ / N`. Each output row is independent, so this has the same
//! per-row minimisers as the unnormalised `‖W·X − W_soft·X‖²`.

use serde::{Deserialize, Serialize};

use super::ops::quantize_value;
use super::QuantError;
use crate::qparams::QuantParams;
use crate::tensor::Tensor;

pub const ZETA: f64 = 1.1;
pub const GAMMA_LO: f64 = -0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaRoundConfig {
    pub iters: usize,
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Fraction of iterations run without the rounding regulariser.
    pub warmup: f64,
    pub lr: f64,
}

impl Default for AdaRoundConfig {
    fn default() -> Self {
        AdaRoundConfig {
            iters: 2000,
            lambda: 0.01,
            beta_start: 18.0,
            beta_end: 2.0,
            warmup: 0.2,
            lr: 1e-2,
        }
    }
}

impl AdaRoundConfig {
    /// Regulariser exponent at step `t`, `None` during warm-up. Decays
    /// linearly from `beta_start` to `beta_end`.
    pub fn beta_at(&self, t: usize, iters: usize) -> Option<f64> {
        let warm = (self.warmup * iters as f64).floor() as usize;
        if t < warm {
            return None;
        }
        let span = (iters - warm).saturating_sub(1).max(1) as f64;
        let p = ((t - warm) as f64 / span).min(1.0);
        Some(self.beta_start + (self.beta_end - self.beta_start) * p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaRoundState {
    /// One logit per weight element, row-major like the weight.
    pub alpha: Vec<f64>,
    pub zeta: f64,
    pub gamma_lo: f64,
    pub lambda_reg: f64,
    pub config: AdaRoundConfig,
    pub last_loss: Option<f64>,
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// `clamp(σ(α)·(ζ − γ) + γ, 0, 1)`.
pub fn rectified_sigmoid(alpha: f64) -> f64 {
    (sigmoid(alpha) * (ZETA - GAMMA_LO) + GAMMA_LO).clamp(0.0, 1.0)
}

fn rectified_sigmoid_grad(alpha: f64) -> f64 {
    let s = sigmoid(alpha);
    let raw = s * (ZETA - GAMMA_LO) + GAMMA_LO;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        s * (1.0 - s) * (ZETA - GAMMA_LO)
    }
}

/// Inverse of the rectified sigmoid on `(0, 1)`.
pub fn alpha_for(h: f64) -> f64 {
    let s = ((h - GAMMA_LO) / (ZETA - GAMMA_LO)).clamp(1e-6, 1.0 - 1e-6);
    (s / (1.0 - s)).ln()
}

fn row_scales(w: &Tensor, qp: &QuantParams) -> Result<(usize, usize, Vec<f64>), QuantError> {
    let v = qp.violations();
    if !v.is_empty() {
        return Err(QuantError::InvalidParams(v));
    }
    if w.rank() == 0 {
        return Err(QuantError::Config("weight must have an output axis".into()));
    }
    let rows = w.shape()[0];
    let cols = w.numel() / rows.max(1);
    if qp.is_per_channel() && (qp.axis != Some(0) || qp.channels() != rows) {
        return Err(QuantError::ChannelMismatch {
            channels: qp.channels(),
            axis: qp.axis.unwrap_or(0),
            extent: Some(rows),
        });
    }
    let scales = (0..rows).map(|o| qp.scale_at(o) as f64).collect();
    Ok((rows, cols, scales))
}

/// The closed-form objective of one layer.
#[derive(Debug, Clone)]
pub struct AdaRoundProblem {
    pub rows: usize,
    pub cols: usize,
    /// `W/S`, row-major.
    pub v: Vec<f64>,
    pub floor: Vec<f64>,
    /// `X̂ᵀX̂ / N`, `cols × cols`.
    pub gram: Vec<f64>,
    pub lambda: f64,
}

impl AdaRoundProblem {
    /// `x` holds calibration inputs as `[N, cols]` rows.
    pub fn new(w: &Tensor, qp: &QuantParams, x: &Tensor, lambda: f64) -> Result<Self, QuantError> {
        let (rows, cols, scales) = row_scales(w, qp)?;
        let wd = w.as_f32()?;
        let xd = x.as_f32()?;
        if x.rank() != 2 || x.shape()[1] != cols {
            return Err(QuantError::Config(format!(
                "calibration inputs {:?} do not match {cols} weight columns",
                x.shape()
            )));
        }
        let n = x.shape()[0];
        if n == 0 {
            return Err(QuantError::EmptyCalibration);
        }
        let v: Vec<f64> = wd
            .iter()
            .enumerate()
            .map(|(i, &w)| w as f64 / scales[i / cols])
            .collect();
        let floor = v.iter().map(|x| x.floor()).collect();
        let ms = xd.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>() / xd.len() as f64;
        let inv = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
        let mut gram = vec![0.0; cols * cols];
        for row in xd.chunks(cols) {
            for a in 0..cols {
                let xa = row[a] as f64 * inv;
                if xa == 0.0 {
                    continue;
                }
                for b in 0..cols {
                    gram[a * cols + b] += xa * row[b] as f64 * inv;
                }
            }
        }
        gram.iter_mut().for_each(|g| *g /= n as f64);
        Ok(AdaRoundProblem {
            rows,
            cols,
            v,
            floor,
            gram,
            lambda,
        })
    }

    fn residual(&self, alpha: &[f64]) -> Vec<f64> {
        self.v
            .iter()
            .zip(&self.floor)
            .zip(alpha)
            .map(|((v, f), a)| v - f - rectified_sigmoid(*a))
            .collect()
    }

    fn residual_gram(&self, d: &[f64]) -> Vec<f64> {
        let k = self.cols;
        let mut dg = vec![0.0; d.len()];
        for o in 0..self.rows {
            let drow = &d[o * k..(o + 1) * k];
            let out = &mut dg[o * k..(o + 1) * k];
            for (a, &da) in drow.iter().enumerate() {
                if da == 0.0 {
                    continue;
                }
                let g = &self.gram[a * k..(a + 1) * k];
                for b in 0..k {
                    out[b] += da * g[b];
                }
            }
        }
        dg
    }

    pub fn reconstruction(&self, alpha: &[f64]) -> f64 {
        let d = self.residual(alpha);
        let dg = self.residual_gram(&d);
        d.iter().zip(&dg).map(|(a, b)| a * b).sum()
    }

    pub fn regularizer(&self, alpha: &[f64], beta: f64) -> f64 {
        alpha
            .iter()
            .map(|&a| 1.0 - (2.0 * rectified_sigmoid(a) - 1.0).abs().powf(beta))
            .sum()
    }

    pub fn loss(&self, alpha: &[f64], beta: Option<f64>) -> f64 {
        self.loss_and_grad(alpha, beta).0
    }

    pub fn grad(&self, alpha: &[f64], beta: Option<f64>) -> Vec<f64> {
        self.loss_and_grad(alpha, beta).1
    }

    /// Objective and its analytic gradient with respect to `alpha`.
    pub fn loss_and_grad(&self, alpha: &[f64], beta: Option<f64>) -> (f64, Vec<f64>) {
        let d = self.residual(alpha);
        let dg = self.residual_gram(&d);
        let mut loss: f64 = d.iter().zip(&dg).map(|(a, b)| a * b).sum();
        let mut grad = Vec::with_capacity(alpha.len());
        for (i, &a) in alpha.iter().enumerate() {
            // ∂rec/∂h = −2 (D G)
            let mut dl_dh = -2.0 * dg[i];
            if let Some(beta) = beta {
                let u = 2.0 * rectified_sigmoid(a) - 1.0;
                loss += self.lambda * (1.0 - u.abs().powf(beta));
                if u != 0.0 {
                    dl_dh += self.lambda * (-beta * u.abs().powf(beta - 1.0) * u.signum() * 2.0);
                }
            }
            grad.push(dl_dh * rectified_sigmoid_grad(a));
        }
        (loss, grad)
    }
}

impl AdaRoundState {
    /// Starts every `h(α)` at the fractional part of `W/S`, so the soft
    /// weights begin exactly at `W`.
    pub fn new(w: &Tensor, qp: &QuantParams, config: AdaRoundConfig) -> Result<Self, QuantError> {
        let (_, cols, scales) = row_scales(w, qp)?;
        let alpha = w
            .as_f32()?
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let v = x as f64 / scales[i / cols];
                alpha_for(v - v.floor())
            })
            .collect();
        Ok(Self::with_alpha(alpha, config))
    }

    pub fn with_alpha(alpha: Vec<f64>, config: AdaRoundConfig) -> Self {
        AdaRoundState {
            alpha,
            zeta: ZETA,
            gamma_lo: GAMMA_LO,
            lambda_reg: config.lambda,
            config,
            last_loss: None,
        }
    }

    pub fn h(&self) -> Vec<f64> {
        self.alpha.iter().map(|&a| rectified_sigmoid(a)).collect()
    }
}

/// Plain gradient descent on `α` for `iters` steps, annealing β after the
/// warm-up. `x_calib` holds the layer's float inputs as `[N, cols]` rows.
pub fn adaround_fit(
    w: &Tensor,
    qp: &QuantParams,
    x_calib: &Tensor,
    mut state: AdaRoundState,
    iters: usize,
) -> Result<AdaRoundState, QuantError> {
    let problem = AdaRoundProblem::new(w, qp, x_calib, state.lambda_reg)?;
    if state.alpha.len() != problem.v.len() {
        return Err(QuantError::Config(format!(
            "state has {} logits for {} weights",
            state.alpha.len(),
            problem.v.len()
        )));
    }
    let lr = state.config.lr;
    for t in 0..iters {
        let beta = state.config.beta_at(t, iters);
        let (loss, grad) = problem.loss_and_grad(&state.alpha, beta);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(QuantError::Diverged { iter: t, loss });
        }
        for (a, g) in state.alpha.iter_mut().zip(&grad) {
            *a -= lr * g;
        }
        state.last_loss = Some(loss);
    }
    Ok(state)
}

/// `clamp(floor(W/S) + [α ≥ 0], qmin, qmax)` with the weight's integer type.
pub fn adaround_freeze(w: &Tensor, qp: &QuantParams, state: &AdaRoundState) -> Result<Tensor, QuantError> {
    let (_, cols, scales) = row_scales(w, qp)?;
    let (qmin, qmax) = qp.qrange();
    if state.alpha.len() != w.numel() {
        return Err(QuantError::Config(format!(
            "state has {} logits for {} weights",
            state.alpha.len(),
            w.numel()
        )));
    }
    let values = w
        .as_f32()?
        .iter()
        .zip(&state.alpha)
        .enumerate()
        .map(|(i, (&x, &a))| {
            let f = (x as f64 / scales[i / cols]).floor() as i64;
            (f + (a >= 0.0) as i64).clamp(qmin, qmax)
        })
        .collect();
    Ok(Tensor::from_int(w.shape().to_vec(), qp.bits, qp.signed, values)?)
}

/// Round-to-nearest codes of `w` under `qp`, with rows on axis 0.
pub fn nearest_codes(w: &Tensor, qp: &QuantParams) -> Result<Vec<i64>, QuantError> {
    let (_, cols, _) = row_scales(w, qp)?;
    let (qmin, qmax) = qp.qrange();
    Ok(w.as_f32()?
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let o = i / cols;
            quantize_value(x, qp.scale_at(o), qp.zero_at(o), qmin, qmax)
        })
        .collect())
}

/// `mean((W·X − S·W_Q·X)²)` over every output row and calibration sample.
pub fn reconstruction_mse(w: &Tensor, codes: &[i64], qp: &QuantParams, x: &Tensor) -> Result<f64, QuantError> {
    let (rows, cols, scales) = row_scales(w, qp)?;
    let wd = w.as_f32()?;
    let xd = x.as_f32()?;
    if x.rank() != 2 || x.shape()[1] != cols || codes.len() != wd.len() {
        return Err(QuantError::Config("shape mismatch in reconstruction error".into()));
    }
    let n = x.shape()[0];
    let diff: Vec<f64> = (0..wd.len())
        .map(|i| wd[i] as f64 - scales[i / cols] * (codes[i] - qp.zero_at(i / cols)) as f64)
        .collect();
    let mut total = 0.0;
    for row in xd.chunks(cols) {
        for o in 0..rows {
            let r: f64 = (0..cols).map(|k| diff[o * cols + k] * row[k] as f64).sum();
            total += r * r;
        }
    }
    Ok(total / (rows * n).max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_examples() {
        let qp = QuantParams::per_tensor(1.0, 0, 8, true, true);
        let w = Tensor::from_f32(vec![1, 2], vec![2.3, 2.3]).unwrap();
        let st = AdaRoundState::with_alpha(vec![0.7, -0.5], AdaRoundConfig::default());
        assert_eq!(adaround_freeze(&w, &qp, &st).unwrap().as_int().unwrap(), &[3, 2]);
    }

    #[test]
    fn h_stays_in_unit_interval() {
        for a in [-50.0, -3.0, -0.1, 0.0, 0.1, 3.0, 50.0] {
            let h = rectified_sigmoid(a);
            assert!((0.0..=1.0).contains(&h));
        }
        assert!((rectified_sigmoid(0.0) - 0.5).abs() < 1e-12);
        assert!((rectified_sigmoid(alpha_for(0.3)) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn beta_schedule() {
        let c = AdaRoundConfig::default();
        assert_eq!(c.beta_at(0, 100), None);
        assert_eq!(c.beta_at(19, 100), None);
        assert_eq!(c.beta_at(20, 100), Some(18.0));
        assert_eq!(c.beta_at(99, 100), Some(2.0));
    }

    #[test]
    fn on_grid_weights_round_to_themselves() {
        let qp = QuantParams::per_tensor(0.5, 0, 4, true, true);
        let w = Tensor::from_f32(vec![2, 2], vec![0.5, -1.0, 1.5, 0.0]).unwrap();
        let x = Tensor::from_f32(vec![3, 2], vec![1.0, 0.5, -0.3, 2.0, 0.7, 0.1]).unwrap();
        let st = AdaRoundState::new(&w, &qp, AdaRoundConfig::default()).unwrap();
        let st = adaround_fit(&w, &qp, &x, st, 500).unwrap();
        let q = adaround_freeze(&w, &qp, &st).unwrap();
        assert_eq!(q.as_int().unwrap(), &[1, -2, 3, 0]);
    }

    #[test]
    fn divergence_reports_iteration() {
        let qp = QuantParams::per_tensor(1.0, 0, 4, true, true);
        let w = Tensor::from_f32(vec![1, 1], vec![0.3]).unwrap();
        let x = Tensor::from_f32(vec![1, 1], vec![1.0]).unwrap();
        let st = AdaRoundState::with_alpha(vec![f64::NAN], AdaRoundConfig::default());
        match adaround_fit(&w, &qp, &x, st, 10) {
            Err(QuantError::Diverged { iter, .. }) => assert_eq!(iter, 0),
            other => panic!("{other:?}"),
        }
    }
}
