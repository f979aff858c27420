//! One-shot weight pruning: per-layer magnitude pruning and N:M structured
//! pruning. Pruned weights are stored as plain zeros, which symmetric
//! quantization maps to integer zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Graph, OpKind};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SparsityError {
    #[error("target sparsity {0} outside [0, 1)")]
    Target(f64),
    #[error("N:M pattern needs 0 < N < M, got {n}:{m}")]
    Pattern { n: usize, m: usize },
    #[error("group axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("schedule step {t} beyond {total}")]
    Step { t: usize, total: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityMode {
    Elementwise,
    Nm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub s_init: f64,
    pub s_final: f64,
    pub total_steps: usize,
}

fn d_n() -> usize {
    2
}
fn d_m() -> usize {
    4
}
fn d_axis() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    pub mode: SparsityMode,
    #[serde(default)]
    pub target_sparsity: f64,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_m")]
    pub m: usize,
    /// Axis along which N:M groups run; the input-channel axis of
    /// conv (OIHW) and linear (out, in) weights.
    #[serde(default = "d_axis")]
    pub group_axis: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<SparsitySchedule>,
}

impl SparsityConfig {
    pub fn nm(n: usize, m: usize) -> Self {
        SparsityConfig {
            mode: SparsityMode::Nm,
            target_sparsity: 0.0,
            n,
            m,
            group_axis: 1,
            schedule: None,
        }
    }

    pub fn elementwise(target: f64) -> Self {
        SparsityConfig {
            mode: SparsityMode::Elementwise,
            target_sparsity: target,
            n: 2,
            m: 4,
            group_axis: 1,
            schedule: None,
        }
    }

    pub fn check(&self) -> Result<(), SparsityError> {
        match self.mode {
            SparsityMode::Elementwise if !(0.0..1.0).contains(&self.target_sparsity) => {
                Err(SparsityError::Target(self.target_sparsity))
            }
            SparsityMode::Nm if self.n == 0 || self.n >= self.m => Err(SparsityError::Pattern { n: self.n, m: self.m }),
            _ => Ok(()),
        }
    }
}

/// Zeroes the `⌈s·|W|⌉` smallest-magnitude elements; ties go to the lower
/// index.
pub fn prune_magnitude(w: &Tensor, s: f64) -> Result<Tensor, SparsityError> {
    if !(0.0..1.0).contains(&s) {
        return Err(SparsityError::Target(s));
    }
    let data = w.as_f32()?;
    let k = (s * data.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b)));
    let mut out = data.to_vec();
    for &i in &order[..k.min(data.len())] {
        out[i] = 0.0;
    }
    Ok(Tensor::from_f32(w.shape().to_vec(), out)?)
}

/// Flat indices of each consecutive group of `m` along `axis`, complete
/// groups only.
fn nm_groups(shape: &[usize], axis: usize, m: usize) -> Result<Vec<Vec<usize>>, SparsityError> {
    if axis >= shape.len() {
        return Err(SparsityError::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut groups = Vec::new();
    for o in 0..outer {
        for i in 0..inner {
            for g0 in (0..extent / m * m).step_by(m) {
                groups.push((g0..g0 + m).map(|a| (o * extent + a) * inner + i).collect());
            }
        }
    }
    Ok(groups)
}

/// Keeps the `n` largest-magnitude elements of every complete group of `m`
/// along `group_axis`; a trailing partial group stays dense.
pub fn prune_nm(w: &Tensor, n: usize, m: usize, group_axis: usize) -> Result<Tensor, SparsityError> {
    if n == 0 || n >= m {
        return Err(SparsityError::Pattern { n, m });
    }
    let data = w.as_f32()?;
    let mut out = data.to_vec();
    for group in nm_groups(w.shape(), group_axis, m)? {
        let mut order = group.clone();
        order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b)));
        for &i in &order[..m - n] {
            out[i] = 0.0;
        }
    }
    Ok(Tensor::from_f32(w.shape().to_vec(), out)?)
}

/// Outcome of [`verify_nm`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NmCheck {
    pub ok: bool,
    /// Index, in group order, of the first group with too few zeros.
    pub first_violation: Option<usize>,
}

/// Whether every complete group has at least `m − n` zeros. Works on float
/// and integer tensors.
pub fn verify_nm(w: &Tensor, n: usize, m: usize, group_axis: usize) -> Result<NmCheck, SparsityError> {
    if n == 0 || n >= m {
        return Err(SparsityError::Pattern { n, m });
    }
    let zero: Vec<bool> = if w.is_float() {
        w.as_f32()?.iter().map(|&v| v == 0.0).collect()
    } else {
        w.as_int()?.iter().map(|&v| v == 0).collect()
    };
    let first = nm_groups(w.shape(), group_axis, m)?
        .iter()
        .position(|g| g.iter().filter(|&&i| zero[i]).count() < m - n);
    Ok(NmCheck {
        ok: first.is_none(),
        first_violation: first,
    })
}

/// Cubic ramp `s_final + (s_init − s_final)·(1 − t/T)³`.
pub fn schedule_sparsity(schedule: &SparsitySchedule, t: usize) -> Result<f64, SparsityError> {
    if t > schedule.total_steps {
        return Err(SparsityError::Step {
            t,
            total: schedule.total_steps,
        });
    }
    let p = if schedule.total_steps == 0 {
        1.0
    } else {
        t as f64 / schedule.total_steps as f64
    };
    Ok(schedule.s_final + (schedule.s_init - schedule.s_final) * (1.0 - p).powi(3))
}

/// Fraction of exactly-zero elements.
pub fn sparsity_of(w: &Tensor) -> f64 {
    let n = w.numel().max(1) as f64;
    let z = match (w.as_f32(), w.as_int()) {
        (Ok(v), _) => v.iter().filter(|&&x| x == 0.0).count(),
        (_, Ok(v)) => v.iter().filter(|&&x| x == 0).count(),
        _ => 0,
    };
    z as f64 / n
}

/// Per-layer result of [`prune_graph`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSparsity {
    pub node: String,
    pub tensor: String,
    pub sparsity: f64,
}

/// Prunes every conv/linear weight of a float graph in place. With a
/// schedule the elementwise target is its final value.
pub fn prune_graph(g: &mut Graph, cfg: &SparsityConfig) -> Result<Vec<LayerSparsity>, SparsityError> {
    cfg.check()?;
    let target = match cfg.schedule {
        Some(s) => schedule_sparsity(&s, s.total_steps)?,
        None => cfg.target_sparsity,
    };
    let mut report = Vec::new();
    for node in g.nodes.iter().filter(|n| matches!(n.kind, OpKind::Conv2d | OpKind::Linear)) {
        let Some(name) = node.params.get("weight") else { continue };
        let Some(w) = g.tensors.get(name) else { continue };
        let pruned = match cfg.mode {
            SparsityMode::Elementwise => prune_magnitude(w, target)?,
            SparsityMode::Nm => prune_nm(w, cfg.n, cfg.m, cfg.group_axis.min(w.rank().saturating_sub(1)))?,
        };
        report.push(LayerSparsity {
            node: node.id.clone(),
            tensor: name.clone(),
            sparsity: sparsity_of(&pruned),
        });
        g.tensors.insert(name.clone(), pruned);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_f32(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn magnitude_examples() {
        let w = t(&[0.1, -0.5, 0.3, 0.05]);
        assert_eq!(prune_magnitude(&w, 0.5).unwrap().as_f32().unwrap(), &[0.0, -0.5, 0.3, 0.0]);
        assert_eq!(prune_magnitude(&w, 0.0).unwrap(), w);
        // ties: the lower index goes first
        let w = t(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(prune_magnitude(&w, 0.5).unwrap().as_f32().unwrap(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(prune_magnitude(&w, 1.0).is_err());
    }

    #[test]
    fn nm_examples() {
        let w = Tensor::from_f32(vec![1, 4], vec![0.1, -0.5, 0.3, 0.05]).unwrap();
        assert_eq!(prune_nm(&w, 2, 4, 1).unwrap().as_f32().unwrap(), &[0.0, -0.5, 0.3, 0.0]);
        assert!(prune_nm(&w, 4, 4, 1).is_err());
        let dense = verify_nm(&w, 2, 4, 1).unwrap();
        assert_eq!(dense.first_violation, Some(0));
        // a trailing partial group stays dense
        let w = Tensor::from_f32(vec![1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(prune_nm(&w, 2, 4, 1).unwrap().as_f32().unwrap(), &[0.0, 0.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn hand_violated_group_is_reported() {
        let w = Tensor::from_f32(vec![1, 12], vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(verify_nm(&w, 2, 4, 1).unwrap().first_violation, Some(2));
    }

    #[test]
    fn schedule_examples() {
        let s = SparsitySchedule {
            s_init: 0.0,
            s_final: 0.8,
            total_steps: 10,
        };
        assert_eq!(schedule_sparsity(&s, 0).unwrap(), 0.0);
        assert!((schedule_sparsity(&s, 10).unwrap() - 0.8).abs() < 1e-12);
        assert!((schedule_sparsity(&s, 5).unwrap() - 0.7).abs() < 1e-12);
        assert!(schedule_sparsity(&s, 11).is_err());
    }
}
