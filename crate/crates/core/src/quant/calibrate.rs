//! Whole-graph calibration: run the float graph over calibration batches,
//! observe every quantized edge and derive weight and activation
//! parameters.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::adaround::{adaround_fit, adaround_freeze, nearest_codes, reconstruction_mse, AdaRoundState};
use super::observer::{compute_qparams, mse_qparams_slice, qparams_from_range, Observer, ObserverMode};
use super::{CalibMethod, QConfig, QuantError};
use crate::engine::exec::{run_float, Trace};
use crate::engine::kernels::ConvGeom;
use crate::engine::lut::DEFAULT_FRAC;
use crate::fuse::{find_units, prob_qp};
use crate::ir::{infer_shapes, Graph, Node, OpKind};
use crate::qparams::QuantParams;
use crate::tensor::Tensor;

/// Upper bound on calibration rows handed to learned rounding per layer.
pub const ADAROUND_MAX_ROWS: usize = 2048;

const ATTENTION_STAGES: [&str; 5] = ["q", "k", "v", "scores", "ctx"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundingReport {
    pub node: String,
    pub nearest_mse: f64,
    pub learned_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub batches: usize,
    pub annotated_edges: usize,
    pub annotated_weights: usize,
    /// Observers that saw a zero-width range and fell back to unit scale.
    pub degenerate: Vec<String>,
    pub rounding: Vec<RoundingReport>,
}

/// Edges whose values get their own activation parameters.
fn observed_edges(g: &Graph) -> BTreeSet<String> {
    let mut edges: BTreeSet<String> = g.inputs.iter().cloned().collect();
    let units = find_units(g);
    let mut in_unit = BTreeSet::new();
    for u in &units {
        edges.insert(u.out_edge.clone());
        in_unit.extend(u.nodes());
    }
    for (i, n) in g.nodes.iter().enumerate() {
        let own = match n.kind {
            OpKind::Add | OpKind::Gelu | OpKind::LayerNorm | OpKind::Attention | OpKind::AvgPool => true,
            OpKind::BatchNorm => !in_unit.contains(&i),
            _ => false,
        };
        if own {
            edges.extend(n.outputs.iter().cloned());
        }
    }
    edges
}

fn weight_roles(n: &Node) -> &'static [&'static str] {
    match n.kind {
        OpKind::Conv2d | OpKind::Linear => &["weight"],
        OpKind::Attention => &["wq", "wk", "wv", "wo"],
        _ => &[],
    }
}

/// Symmetric per-channel (axis 0) or per-tensor weight parameters.
fn weight_qp(w: &Tensor, cfg: &QConfig) -> Result<(QuantParams, bool), QuantError> {
    let data = w.as_f32()?;
    let rows = if cfg.per_channel_w { w.shape()[0].max(1) } else { 1 };
    let per = data.len() / rows;
    let axis = cfg.per_channel_w.then_some(0);
    if cfg.method == CalibMethod::Mse {
        let mut scale = Vec::with_capacity(rows);
        let mut degenerate = false;
        for c in data.chunks(per.max(1)) {
            let r = mse_qparams_slice(c, cfg.w_bits)?;
            degenerate |= r.degenerate;
            scale.push(r.qp.scale0());
        }
        let qp = if cfg.per_channel_w {
            QuantParams::per_channel_symmetric(scale, cfg.w_bits, 0)
        } else {
            QuantParams::per_tensor(scale[0], 0, cfg.w_bits, true, true)
        };
        return Ok((qp, degenerate));
    }
    let (mins, maxs): (Vec<f32>, Vec<f32>) = data
        .chunks(per.max(1))
        .map(|c| {
            let a = c.iter().fold(0f32, |a, v| a.max(v.abs()));
            (-a, a)
        })
        .unzip();
    let r = qparams_from_range(&mins, &maxs, cfg.w_bits, true, true, axis)?;
    Ok((r.qp, r.degenerate))
}

/// Layer inputs as the `[N, cols]` rows the weight multiplies.
fn layer_rows(node: &Node, w: &Tensor, x: &Tensor) -> Option<Vec<Vec<f32>>> {
    let xd = x.as_f32().ok()?;
    match node.kind {
        OpKind::Linear => {
            let cols = w.shape()[1];
            Some(xd.chunks(cols).map(|c| c.to_vec()).collect())
        }
        OpKind::Conv2d => {
            let groups = node.attr_int_or("groups", 1).max(1) as usize;
            if groups != 1 {
                return None;
            }
            let geom = ConvGeom::new(
                x.shape(),
                w.shape(),
                node.attr_pair("stride", 1),
                node.attr_pair("padding", 0),
                1,
            )?;
            let mut rows = Vec::with_capacity(geom.n * geom.oh * geom.ow);
            let mut taps = Vec::new();
            for b in 0..geom.n {
                for oy in 0..geom.oh {
                    for ox in 0..geom.ow {
                        geom.patch(b, 0, oy, ox, &mut taps);
                        rows.push(taps.iter().map(|t| t.map_or(0.0, |i| xd[i])).collect());
                    }
                }
            }
            Some(rows)
        }
        _ => None,
    }
}

/// Annotates a float graph with weight and activation quantization from
/// `batches`, each a batch for the single graph input.
pub fn calibrate_graph(g: &Graph, batches: &[Tensor], cfg: &QConfig) -> Result<(Graph, CalibrationReport), QuantError> {
    cfg.check()?;
    if !cfg.symmetric_w {
        return Err(QuantError::Config(
            "asymmetric weights are not supported: integer kernels assume a zero weight offset".into(),
        ));
    }
    if g.inputs.len() != 1 {
        return Err(QuantError::Config(format!(
            "calibration feeds exactly one graph input, graph has {}",
            g.inputs.len()
        )));
    }
    let take = if cfg.calib_batches == 0 {
        batches.len()
    } else {
        cfg.calib_batches.min(batches.len())
    };
    let batches = &batches[..take];
    if batches.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    let mut out = infer_shapes(g)?;
    let mut report = CalibrationReport {
        batches: batches.len(),
        ..Default::default()
    };

    let act_mode = if cfg.method == CalibMethod::Mse {
        ObserverMode::Mse
    } else {
        cfg.act_observer
    };
    let mut observers: BTreeMap<String, Observer> = observed_edges(&out)
        .into_iter()
        .map(|e| (e.clone(), Observer::new(e, act_mode)))
        .collect();
    for n in out.nodes.iter().filter(|n| n.kind == OpKind::Attention) {
        for s in ATTENTION_STAGES {
            let key = format!("{}#{s}", n.id);
            observers.insert(key.clone(), Observer::new(key, act_mode));
        }
    }
    let layernorm_inputs: BTreeMap<String, String> = out
        .nodes
        .iter()
        .filter(|n| n.kind == OpKind::LayerNorm)
        .filter_map(|n| Some((n.inputs.first()?.clone(), n.id.clone())))
        .collect();
    let mut ln_stats: BTreeMap<String, (f64, f64, u64)> = BTreeMap::new();
    let ada = cfg.method == CalibMethod::AdaRound;
    let layer_inputs: BTreeMap<String, Vec<usize>> = if ada {
        let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, n) in out.nodes.iter().enumerate() {
            if matches!(n.kind, OpKind::Conv2d | OpKind::Linear) {
                m.entry(n.inputs[0].clone()).or_default().push(i);
            }
        }
        m
    } else {
        BTreeMap::new()
    };
    let mut captured: BTreeMap<usize, Vec<Vec<f32>>> = BTreeMap::new();

    for x in batches {
        let inputs: Trace = [(out.inputs[0].clone(), x.clone())].into_iter().collect();
        let mut probe = |name: &str, t: &Tensor| -> Result<(), crate::engine::EngineError> {
            if let Some(o) = observers.get_mut(name) {
                o.update(t).map_err(|e| crate::engine::EngineError::Annotation(e.to_string()))?;
            }
            if let Some(ln) = layernorm_inputs.get(name) {
                let s = ln_stats.entry(ln.clone()).or_insert((0.0, 0.0, 0));
                for &v in t.as_f32()? {
                    s.0 += v as f64;
                    s.1 += (v as f64) * (v as f64);
                    s.2 += 1;
                }
            }
            if let Some(nodes) = layer_inputs.get(name) {
                for &i in nodes {
                    let n = &out.nodes[i];
                    let Ok(w) = out.param(n, "weight") else { continue };
                    if let Some(rows) = layer_rows(n, w, t) {
                        let buf = captured.entry(i).or_default();
                        let room = ADAROUND_MAX_ROWS.saturating_sub(buf.len());
                        let stride = (rows.len() / room.max(1)).max(1);
                        buf.extend(rows.into_iter().step_by(stride).take(room));
                    }
                }
            }
            Ok(())
        };
        run_float(&out, inputs, false, None, Some(&mut probe)).map_err(|e| QuantError::Exec(e.to_string()))?;
    }

    let signed = cfg.a_signed();
    let mut edge_qps: BTreeMap<String, QuantParams> = BTreeMap::new();
    let mut stage_qps: BTreeMap<(String, String), QuantParams> = BTreeMap::new();
    for (key, obs) in &observers {
        if obs.sample_count == 0 {
            return Err(QuantError::Empty(key.clone()));
        }
        let attention_stage = key.split_once('#');
        let r = match attention_stage {
            // projections feed integer matmuls with zero offsets
            Some((_, "q" | "k" | "v")) => compute_qparams(obs, cfg.a_bits, true, true)?,
            _ => compute_qparams(obs, cfg.a_bits, signed, cfg.symmetric_a)?,
        };
        if r.degenerate {
            report.degenerate.push(key.clone());
        }
        match attention_stage {
            Some((node, stage)) => {
                stage_qps.insert((node.to_string(), stage.to_string()), r.qp);
            }
            None => {
                edge_qps.insert(key.clone(), r.qp);
            }
        }
    }
    let probs = prob_qp(DEFAULT_FRAC);
    for ((node, stage), qp) in stage_qps {
        if let Some(i) = out.node_index(&node) {
            out.nodes[i].quant.insert(stage, qp);
        }
    }
    for n in out.nodes.iter_mut().filter(|n| n.kind == OpKind::Attention) {
        n.quant.insert("probs".into(), probs.clone());
    }
    for (e, qp) in edge_qps {
        out.set_edge_quant(&e, qp);
    }
    // pass-through ops share the quantization of their input
    for i in 0..out.nodes.len() {
        let n = &out.nodes[i];
        let Some(o) = n.outputs.first().cloned() else { continue };
        if out.edge_quant(&o).is_some() {
            continue;
        }
        let qp = match n.kind {
            OpKind::Relu | OpKind::MaxPool | OpKind::Flatten => n.inputs.first().and_then(|e| out.edge_quant(e)).cloned(),
            OpKind::Softmax => Some(probs.clone()),
            _ => None,
        };
        if let Some(qp) = qp {
            out.set_edge_quant(&o, qp);
        }
    }

    for (ln, (sum, sq, count)) in ln_stats {
        let Some(i) = out.node_index(&ln) else { continue };
        let c = count.max(1) as f64;
        let mean = sum / c;
        let var = (sq / c - mean * mean).max(0.0);
        let m = out.add_tensor(format!("{ln}.running_mean"), Tensor::scalar(mean as f32));
        let v = out.add_tensor(format!("{ln}.running_var"), Tensor::scalar(var as f32));
        out.nodes[i].params.insert("running_mean".into(), m);
        out.nodes[i].params.insert("running_var".into(), v);
    }

    let weighted: Vec<usize> = out
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| !weight_roles(n).is_empty())
        .map(|(i, _)| i)
        .collect();
    for i in weighted {
        for role in weight_roles(&out.nodes[i]) {
            let node = out.nodes[i].clone();
            let name = node.params.get(*role).cloned().ok_or_else(|| {
                QuantError::Config(format!("node '{}' lacks parameter '{role}'", node.id))
            })?;
            let w = out.param(&node, role)?.clone();
            let (qp, degenerate) = weight_qp(&w, cfg)?;
            if degenerate {
                report.degenerate.push(name.clone());
            }
            if ada && *role == "weight" {
                if let Some(rows) = captured.remove(&i).filter(|r| !r.is_empty()) {
                    let cols = rows[0].len();
                    let n = rows.len();
                    let x = Tensor::from_f32(vec![n, cols], rows.into_iter().flatten().collect())?;
                    let w2 = w.clone().reshape(vec![w.shape()[0], w.numel() / w.shape()[0]])?;
                    let state = AdaRoundState::new(&w2, &qp, cfg.adaround.clone())?;
                    let state = adaround_fit(&w2, &qp, &x, state, cfg.adaround.iters)?;
                    let learned = adaround_freeze(&w2, &qp, &state)?;
                    let nearest = nearest_codes(&w2, &qp)?;
                    let nearest_mse = reconstruction_mse(&w2, &nearest, &qp, &x)?;
                    let learned_mse = reconstruction_mse(&w2, learned.as_int()?, &qp, &x)?;
                    report.rounding.push(RoundingReport {
                        node: node.id.clone(),
                        nearest_mse,
                        learned_mse,
                    });
                    // learned rounding is only kept when it actually helps
                    if learned_mse <= nearest_mse {
                        let codes = learned.reshape(w.shape().to_vec())?;
                        let cname = out.add_tensor(format!("{}.weight_int", node.id), codes);
                        out.param_quant.insert(cname.clone(), qp.clone());
                        out.nodes[i].params.insert("weight_int".into(), cname);
                    }
                }
            }
            out.param_quant.insert(name, qp);
            report.annotated_weights += 1;
        }
    }
    report.annotated_edges = out.values.values().filter(|v| v.quant.is_some()).count();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Graph {
        let mut g = Graph::new();
        g.add_input("x", vec![2, 3]);
        let w = g.add_tensor("fc.w", Tensor::from_f32(vec![2, 3], vec![0.5, -1.0, 0.25, 2.0, 0.0, -0.5]).unwrap());
        g.push(
            Node::new("fc", OpKind::Linear)
                .with_io(&["x"], &["h"])
                .with_param("weight", w),
        );
        g.push(Node::new("act", OpKind::Relu).with_io(&["h"], &["y"]));
        g.outputs = vec!["y".into()];
        g
    }

    #[test]
    fn annotates_unit_output_and_weights() {
        let x = Tensor::from_f32(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
        let (g, r) = calibrate_graph(&tiny(), &[x], &QConfig::default()).unwrap();
        assert!(g.edge_quant("x").is_some());
        assert!(g.edge_quant("y").is_some());
        assert!(g.edge_quant("h").is_none());
        assert_eq!(g.param_quant["fc.w"].scale.len(), 2);
        assert_eq!(r.annotated_weights, 1);
    }

    #[test]
    fn empty_calibration_set_is_an_error() {
        assert!(matches!(
            calibrate_graph(&tiny(), &[], &QConfig::default()),
            Err(QuantError::EmptyCalibration)
        ));
    }
}
