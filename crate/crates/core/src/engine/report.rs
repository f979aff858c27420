//! Side-by-side comparison of two graphs derived from the same model.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::exec::{exec_fakequant_trace, exec_float_trace, exec_int_trace, Trace};
use super::EngineError;
use crate::ir::{Graph, OpKind};
use crate::qparams::QuantParams;
use crate::quant::ops::{dequantize, quantize};
use crate::tensor::Tensor;

/// Executor a graph is run with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Float,
    FakeQuant,
    Int,
}

impl PathKind {
    /// Lowered graphs run on integers, annotated ones fake-quantized,
    /// anything else in float.
    pub fn of(g: &Graph) -> PathKind {
        let lowered = g
            .nodes
            .iter()
            .any(|n| matches!(n.kind, OpKind::QuantStub | OpKind::MulQuant))
            || (!g.tensors.is_empty() && g.is_integer_only());
        if lowered {
            PathKind::Int
        } else if !g.param_quant.is_empty() || g.values.values().any(|v| v.quant.is_some()) {
            PathKind::FakeQuant
        } else {
            PathKind::Float
        }
    }
}

/// Divergence on one edge, in units of its quantization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiff {
    pub edge: String,
    pub node: String,
    /// Step the differences are measured in (1 for unquantized edges).
    pub scale: f32,
    /// With each layer fed the other path's inputs.
    pub max_abs_lsb: f64,
    pub mean_abs_lsb: f64,
    /// With each path running on its own values end to end.
    pub propagated_max_lsb: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub float_ms: f64,
    pub fakequant_ms: f64,
    pub int_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub reference: PathKind,
    pub candidate: PathKind,
    pub samples: usize,
    pub rows: usize,
    pub layers: Vec<LayerDiff>,
    /// Largest per-layer divergence.
    pub max_layer_lsb: f64,
    pub argmax_int_vs_fakequant: Option<f64>,
    pub argmax_fakequant_vs_float: Option<f64>,
    pub argmax_int_vs_float: Option<f64>,
    /// Agreement between the two compared graphs.
    pub argmax_agreement: f64,
    pub runtime: Runtime,
    /// Float operations recorded inside integer runs.
    pub int_float_ops: u64,
}

impl ExecReport {
    pub fn within(&self, max_lsb: f64, min_agreement: f64) -> bool {
        self.max_layer_lsb <= max_lsb && self.argmax_agreement >= min_agreement && self.int_float_ops == 0
    }
}

/// Quantization of the codes entering graph input `name`'s quant stub.
pub fn input_qp<'g>(g: &'g Graph, name: &str) -> Option<&'g QuantParams> {
    g.nodes
        .iter()
        .find(|n| n.kind == OpKind::QuantStub && n.inputs.first().map(String::as_str) == Some(name))
        .and_then(|n| g.edge_quant(&n.outputs[0]))
        .or_else(|| g.edge_quant(name))
}

/// Integer run of a lowered graph on float input, every quantized edge
/// dequantized back to floats. Returns the float trace, the float ops seen
/// inside the integer path and the dequantized outputs.
pub fn run_int_dequantized(g: &Graph, x: &Tensor) -> Result<(Trace, u64, Vec<Tensor>), EngineError> {
    let name = g.inputs.first().ok_or_else(|| EngineError::Missing {
        node: "<graph>".into(),
        what: "graph input".into(),
    })?;
    let qp = input_qp(g, name).ok_or_else(|| EngineError::Annotation(format!("graph input '{name}'")))?;
    let xq = quantize(x, qp)?;
    let run = exec_int_trace(g, BTreeMap::from([(name.clone(), xq)]), false)?;
    let mut out = Trace::new();
    for (edge, t) in &run.trace {
        if edge == name {
            continue;
        }
        if let Some(qp) = g.edge_quant(edge) {
            out.insert(edge.clone(), dequantize(t, qp)?);
        }
    }
    let mut outputs = Vec::new();
    for (o, t) in g.outputs.iter().zip(&run.outputs) {
        let src = g
            .nodes
            .iter()
            .find(|n| n.kind == OpKind::DequantStub && n.outputs[0] == *o)
            .map(|n| n.inputs[0].clone())
            .unwrap_or_else(|| o.clone());
        let qp = g
            .edge_quant(&src)
            .ok_or_else(|| EngineError::Annotation(format!("output edge '{src}'")))?;
        outputs.push(dequantize(t, qp)?);
    }
    Ok((out, run.float_ops, outputs))
}

fn run_kind(g: &Graph, kind: PathKind, x: &Tensor, rt: &mut Runtime, float_ops: &mut u64) -> Result<(Trace, Tensor), EngineError> {
    let name = g.inputs.first().cloned().unwrap_or_default();
    let t0 = Instant::now();
    let res = match kind {
        PathKind::Float => {
            let tr = exec_float_trace(g, BTreeMap::from([(name, x.clone())]))?;
            let out = output_of(g, &tr)?;
            rt.float_ms += t0.elapsed().as_secs_f64() * 1e3;
            (tr, out)
        }
        PathKind::FakeQuant => {
            let tr = exec_fakequant_trace(g, BTreeMap::from([(name, x.clone())]), None)?;
            let out = output_of(g, &tr)?;
            rt.fakequant_ms += t0.elapsed().as_secs_f64() * 1e3;
            (tr, out)
        }
        PathKind::Int => {
            let (tr, ops, outs) = run_int_dequantized(g, x)?;
            rt.int_ms += t0.elapsed().as_secs_f64() * 1e3;
            *float_ops += ops;
            let out = outs.into_iter().next().ok_or_else(|| EngineError::Missing {
                node: "<graph>".into(),
                what: "graph output".into(),
            })?;
            (tr, out)
        }
    };
    Ok(res)
}

fn output_of(g: &Graph, tr: &Trace) -> Result<Tensor, EngineError> {
    let o = g.outputs.first().ok_or_else(|| EngineError::Missing {
        node: "<graph>".into(),
        what: "graph output".into(),
    })?;
    tr.get(o).cloned().ok_or_else(|| EngineError::Missing {
        node: "<graph>".into(),
        what: format!("value of output '{o}'"),
    })
}

fn agreement(a: &[usize], b: &[usize]) -> (usize, usize) {
    (a.iter().zip(b).filter(|(x, y)| x == y).count(), a.len().min(b.len()))
}

#[derive(Default)]
struct Acc {
    node: String,
    scale: f32,
    max_tf: f64,
    sum_tf: f64,
    n: usize,
    max_prop: f64,
}

/// Runs `reference` and `candidate` on every batch of `data`, each with the
/// executor its form calls for, and reports per-edge divergence and argmax
/// agreement. When one side is lowered and the other fake-quantized, the
/// per-layer figures are teacher-forced: every fake-quantized layer is fed
/// the integer path's dequantized inputs, so each row measures that
/// layer's own error rather than accumulated drift.
pub fn compare_paths(reference: &Graph, candidate: &Graph, data: &[Tensor]) -> Result<ExecReport, EngineError> {
    let ka = PathKind::of(reference);
    let kb = PathKind::of(candidate);
    let mut rt = Runtime::default();
    let mut float_ops = 0u64;
    let mut layers: BTreeMap<String, Acc> = BTreeMap::new();
    let mut agree = (0usize, 0usize);
    let mut agree_int_fq = (0usize, 0usize);
    let mut agree_fq_float = (0usize, 0usize);
    let mut agree_int_float = (0usize, 0usize);
    let has_fq = ka == PathKind::FakeQuant || kb == PathKind::FakeQuant;
    let has_int = ka == PathKind::Int || kb == PathKind::Int;
    let float_graph = [(ka, reference), (kb, candidate)]
        .into_iter()
        .find(|(k, _)| *k != PathKind::Int)
        .map(|(_, g)| g);

    for x in data {
        let (ta, oa) = run_kind(reference, ka, x, &mut rt, &mut float_ops)?;
        let (tb, ob) = run_kind(candidate, kb, x, &mut rt, &mut float_ops)?;
        let (arg_a, arg_b) = (oa.argmax_rows(), ob.argmax_rows());
        let (c, n) = agreement(&arg_a, &arg_b);
        agree = (agree.0 + c, agree.1 + n);

        let forced = match (ka, kb) {
            (PathKind::FakeQuant, PathKind::Int) => Some(exec_fakequant_trace(reference, single(reference, x), Some(&tb))?),
            (PathKind::Int, PathKind::FakeQuant) => Some(exec_fakequant_trace(candidate, single(candidate, x), Some(&ta))?),
            _ => None,
        };

        let (lowered, lowered_trace) = if kb == PathKind::Int { (candidate, &tb) } else { (reference, &ta) };
        let other_trace = if kb == PathKind::Int { &ta } else { &tb };
        let order_graph = if has_int { lowered } else { candidate };
        for node in &order_graph.nodes {
            for edge in &node.outputs {
                let (Some(b), Some(a)) = (lowered_trace.get(edge), other_trace.get(edge)) else {
                    continue;
                };
                if a.shape() != b.shape() {
                    continue;
                }
                let qp = order_graph.edge_quant(edge).or_else(|| reference.edge_quant(edge));
                let scale = qp.map_or(1.0, |q| q.scale0());
                // both sides sit on the same grid, so distances are whole steps
                let on_grid = qp.is_some() && has_int && (ka == PathKind::FakeQuant || kb == PathKind::FakeQuant);
                let steps = |d: f64| if on_grid { d.round() } else { d };
                let entry = layers.entry(edge.clone()).or_insert_with(|| Acc {
                    node: node.id.clone(),
                    scale,
                    ..Acc::default()
                });
                let b = b.as_f32()?;
                let prop = a.as_f32()?;
                let tf = match &forced {
                    Some(tr) => tr.get(edge).map(|t| t.as_f32()).transpose()?.unwrap_or(prop),
                    None => prop,
                };
                for ((&p, &f), &v) in prop.iter().zip(tf).zip(b) {
                    let dp = steps((p as f64 - v as f64).abs() / scale as f64);
                    let df = steps((f as f64 - v as f64).abs() / scale as f64);
                    entry.max_prop = entry.max_prop.max(dp);
                    entry.max_tf = entry.max_tf.max(df);
                    entry.sum_tf += df;
                    entry.n += 1;
                }
            }
        }

        if has_fq || has_int {
            let (fl, fq, it) = paths_argmax(float_graph, ka, kb, &oa, &ob, x)?;
            if let (Some(i), Some(f)) = (&it, &fq) {
                let (c, n) = agreement(i, f);
                agree_int_fq = (agree_int_fq.0 + c, agree_int_fq.1 + n);
            }
            if let (Some(f), Some(l)) = (&fq, &fl) {
                let (c, n) = agreement(f, l);
                agree_fq_float = (agree_fq_float.0 + c, agree_fq_float.1 + n);
            }
            if let (Some(i), Some(l)) = (&it, &fl) {
                let (c, n) = agreement(i, l);
                agree_int_float = (agree_int_float.0 + c, agree_int_float.1 + n);
            }
        }
    }

    let order: Vec<String> = {
        let g = if kb == PathKind::Int || ka != PathKind::Int { candidate } else { reference };
        g.nodes.iter().flat_map(|n| n.outputs.iter().cloned()).collect()
    };
    let mut rows: Vec<LayerDiff> = Vec::new();
    for edge in order {
        if let Some(a) = layers.remove(&edge) {
            rows.push(LayerDiff {
                edge,
                node: a.node,
                scale: a.scale,
                max_abs_lsb: a.max_tf,
                mean_abs_lsb: if a.n > 0 { a.sum_tf / a.n as f64 } else { 0.0 },
                propagated_max_lsb: a.max_prop,
            });
        }
    }
    let rate = |(c, n): (usize, usize)| if n == 0 { None } else { Some(c as f64 / n as f64) };
    Ok(ExecReport {
        reference: ka,
        candidate: kb,
        samples: data.len(),
        rows: agree.1,
        max_layer_lsb: rows.iter().map(|r| r.max_abs_lsb).fold(0.0, f64::max),
        layers: rows,
        argmax_int_vs_fakequant: rate(agree_int_fq),
        argmax_fakequant_vs_float: rate(agree_fq_float),
        argmax_int_vs_float: rate(agree_int_float),
        argmax_agreement: rate(agree).unwrap_or(1.0),
        runtime: rt,
        int_float_ops: float_ops,
    })
}

fn single(g: &Graph, x: &Tensor) -> Trace {
    BTreeMap::from([(g.inputs.first().cloned().unwrap_or_default(), x.clone())])
}

type Argmaxes = (Option<Vec<usize>>, Option<Vec<usize>>, Option<Vec<usize>>);

/// Argmax per row of the float, fake-quant and integer paths, reusing the
/// outputs already computed and running the float graph for the rest.
fn paths_argmax(
    float_graph: Option<&Graph>,
    ka: PathKind,
    kb: PathKind,
    oa: &Tensor,
    ob: &Tensor,
    x: &Tensor,
) -> Result<Argmaxes, EngineError> {
    let mut fl = None;
    let mut fq = None;
    let mut it = None;
    for (k, o) in [(ka, oa), (kb, ob)] {
        let slot = match k {
            PathKind::Float => &mut fl,
            PathKind::FakeQuant => &mut fq,
            PathKind::Int => &mut it,
        };
        if slot.is_none() {
            *slot = Some(o.argmax_rows());
        }
    }
    if let Some(g) = float_graph {
        if fl.is_none() {
            fl = Some(output_of(g, &exec_float_trace(g, single(g, x))?)?.argmax_rows());
        }
        if fq.is_none() && PathKind::of(g) == PathKind::FakeQuant {
            fq = Some(output_of(g, &exec_fakequant_trace(g, single(g, x), None)?)?.argmax_rows());
        }
    }
    Ok((fl, fq, it))
}
