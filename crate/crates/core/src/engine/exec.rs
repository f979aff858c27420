//! The three executors. `exec_float` runs the float graph, `exec_fakequant`
//! runs it with every annotated weight and edge passed through fake
//! quantization, and `exec_int` runs a lowered graph on integer codes only.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::attention::{diff_qp, IntAttention};
use super::kernels::{self, AttentionWeights, ConvGeom};
use super::layernorm::{int_layernorm_instant, IntLayerNorm};
use super::lut::{gelu_codes, softmax_codes, LutTable};
use super::requant::{apply_mulquant, check_i32, conv2d_int, linear_int};
use super::EngineError;
use crate::fuse::MulQuantParams;
use crate::ir::{Graph, Node, OpKind};
use crate::purity;
use crate::qparams::QuantParams;
use crate::quant::ops::{dequantize, fake_quant, fake_quant_value};
use crate::tensor::{numel, Tensor};

/// Every edge value computed by a run, by edge name.
pub type Trace = BTreeMap<String, Tensor>;

/// Callback seeing each computed edge, and each attention stage under
/// `<node>#<stage>`.
pub(crate) type Probe<'a> = &'a mut dyn FnMut(&str, &Tensor) -> Result<(), EngineError>;

fn shape_err(node: &Node, message: impl Into<String>) -> EngineError {
    EngineError::Shape {
        node: node.id.clone(),
        message: message.into(),
    }
}

fn single_input(g: &Graph, x: &Tensor) -> Result<Trace, EngineError> {
    let name = g.inputs.first().ok_or_else(|| EngineError::Missing {
        node: "<graph>".into(),
        what: "graph input".into(),
    })?;
    Ok(BTreeMap::from([(name.clone(), x.clone())]))
}

fn first_output(g: &Graph, mut trace: Trace) -> Result<Tensor, EngineError> {
    let name = g.outputs.first().ok_or_else(|| EngineError::Missing {
        node: "<graph>".into(),
        what: "graph output".into(),
    })?;
    trace.remove(name).ok_or_else(|| EngineError::Missing {
        node: "<graph>".into(),
        what: format!("value of output '{name}'"),
    })
}

/// Float forward pass of a single-input, single-output graph.
pub fn exec_float(g: &Graph, x: &Tensor) -> Result<Tensor, EngineError> {
    first_output(g, exec_float_trace(g, single_input(g, x)?)?)
}

pub fn exec_float_trace(g: &Graph, inputs: Trace) -> Result<Trace, EngineError> {
    run_float(g, inputs, false, None, None)
}

/// Fake-quantized forward pass of a calibrated graph.
pub fn exec_fakequant(g: &Graph, x: &Tensor) -> Result<Tensor, EngineError> {
    first_output(g, exec_fakequant_trace(g, single_input(g, x)?, None)?)
}

/// Fake-quantized run recording every edge. Nodes read their inputs from
/// `overrides` first, which lets callers feed each layer the values another
/// executor produced.
pub fn exec_fakequant_trace(g: &Graph, inputs: Trace, overrides: Option<&Trace>) -> Result<Trace, EngineError> {
    run_float(g, inputs, true, overrides, None)
}

/// Parameter `role` as floats; under fake quantization the weight is
/// fake-quantized with its annotation, or dequantized from learned
/// integer codes stored as `<role>_int`.
fn weight<'g>(g: &'g Graph, node: &Node, role: &str, fq: bool) -> Result<Cow<'g, [f32]>, EngineError> {
    let t = g.param(node, role)?;
    if t.is_float() && !fq {
        return Ok(Cow::Borrowed(t.as_f32()?));
    }
    if !t.is_float() {
        return Err(EngineError::Shape {
            node: node.id.clone(),
            message: format!("parameter '{role}' is integer; run lowered graphs with exec_int"),
        });
    }
    let qp = g
        .param_qp(node, role)
        .ok_or_else(|| EngineError::Annotation(format!("weight '{role}' of node '{}'", node.id)))?;
    let out = match g.param_opt(node, &format!("{role}_int")) {
        Some(codes) => dequantize(codes, qp)?,
        None => fake_quant(t, qp)?,
    };
    Ok(Cow::Owned(out.into_f32()?))
}

fn bias<'g>(g: &'g Graph, node: &Node, role: &str) -> Result<Option<&'g [f32]>, EngineError> {
    match g.param_opt(node, role) {
        Some(t) => Ok(Some(t.as_f32()?)),
        None => Ok(None),
    }
}

fn vec_param<'g>(g: &'g Graph, node: &Node, role: &str) -> Result<&'g [f32], EngineError> {
    Ok(g.param(node, role)?.as_f32()?)
}

fn softmax_axis(node: &Node, rank: usize) -> usize {
    let a = node.attr_int_or("axis", -1);
    if a < 0 {
        (rank as i64 + a).max(0) as usize
    } else {
        a as usize
    }
}

pub(crate) fn run_float(
    g: &Graph,
    inputs: Trace,
    fq: bool,
    overrides: Option<&Trace>,
    mut probe: Option<Probe<'_>>,
) -> Result<Trace, EngineError> {
    let mut trace = Trace::new();
    for (name, t) in inputs {
        if let Some(p) = probe.as_mut() {
            p(&name, &t)?;
        }
        let t = match (fq, g.edge_quant(&name)) {
            (true, Some(qp)) => fake_quant(&t, qp)?,
            _ => t,
        };
        trace.insert(name, t);
    }
    for node in &g.nodes {
        let mut ins = Vec::with_capacity(node.inputs.len());
        for i in &node.inputs {
            let t = overrides
                .and_then(|o| o.get(i))
                .or_else(|| trace.get(i))
                .ok_or_else(|| EngineError::Missing {
                    node: node.id.clone(),
                    what: format!("value of edge '{i}'"),
                })?;
            ins.push(t);
        }
        if fq && node.kind.is_weighted() && node.kind != OpKind::Attention
            && g.edge_quant(&node.inputs[0]).is_none() {
                return Err(EngineError::Annotation(format!(
                    "input '{}' of node '{}'",
                    node.inputs[0], node.id
                )));
            }
        let out = float_node(g, node, &ins, fq, &mut probe)?;
        let name = node.output(0)?.to_string();
        if let Some(p) = probe.as_mut() {
            p(&name, &out)?;
        }
        let out = match (fq, g.edge_quant(&name)) {
            (true, Some(qp)) => fake_quant(&out, qp)?,
            _ => out,
        };
        trace.insert(name, out);
    }
    Ok(trace)
}

fn float_node(g: &Graph, node: &Node, ins: &[&Tensor], fq: bool, probe: &mut Option<Probe<'_>>) -> Result<Tensor, EngineError> {
    let x = ins[0].as_f32()?;
    let shape = ins[0].shape();
    let out = match node.kind {
        OpKind::Conv2d => {
            let wt = g.param(node, "weight")?;
            let geom = ConvGeom::new(
                shape,
                wt.shape(),
                node.attr_pair("stride", 1),
                node.attr_pair("padding", 0),
                node.attr_int_or("groups", 1).max(1) as usize,
            )
            .ok_or_else(|| shape_err(node, format!("conv of {shape:?} with {:?}", wt.shape())))?;
            let w = weight(g, node, "weight", fq)?;
            Tensor::from_f32(geom.out_shape(), kernels::conv2d(x, &geom, &w, bias(g, node, "bias")?))?
        }
        OpKind::Linear => {
            let wt = g.param(node, "weight")?;
            let out_f = wt.shape()[0];
            let (rows, out_shape) = kernels::linear_layout(shape, out_f);
            if rows * wt.shape()[1] != x.len() {
                return Err(shape_err(node, format!("input {shape:?} against weight {:?}", wt.shape())));
            }
            let w = weight(g, node, "weight", fq)?;
            Tensor::from_f32(out_shape, kernels::linear(x, rows, &w, out_f, bias(g, node, "bias")?))?
        }
        OpKind::BatchNorm => Tensor::from_f32(
            shape.to_vec(),
            kernels::batchnorm(
                x,
                shape,
                vec_param(g, node, "gamma")?,
                vec_param(g, node, "beta")?,
                vec_param(g, node, "mean")?,
                vec_param(g, node, "var")?,
                node.attr_float("eps").unwrap_or(1e-5) as f32,
            ),
        )?,
        OpKind::LayerNorm => {
            let features = *shape.last().unwrap_or(&1);
            let stats = if node.attr_str("stats") == Some("running") {
                let m = vec_param(g, node, "running_mean")?;
                let v = vec_param(g, node, "running_var")?;
                Some((m[0], v[0]))
            } else {
                None
            };
            Tensor::from_f32(
                shape.to_vec(),
                kernels::layernorm(
                    x,
                    features,
                    vec_param(g, node, "gamma")?,
                    vec_param(g, node, "beta")?,
                    node.attr_float("eps").unwrap_or(1e-5) as f32,
                    stats,
                ),
            )?
        }
        OpKind::Relu => Tensor::from_f32(shape.to_vec(), kernels::relu(x))?,
        OpKind::Gelu => Tensor::from_f32(shape.to_vec(), kernels::gelu(x))?,
        OpKind::Softmax => {
            let axis = softmax_axis(node, shape.len());
            Tensor::from_f32(shape.to_vec(), kernels::softmax(x, shape, axis))?
        }
        OpKind::Add => {
            let y = ins.get(1).ok_or_else(|| shape_err(node, "add needs two inputs"))?;
            if y.shape() != shape {
                return Err(shape_err(node, format!("add of {shape:?} and {:?}", y.shape())));
            }
            Tensor::from_f32(shape.to_vec(), kernels::add(x, y.as_f32()?))?
        }
        OpKind::AvgPool | OpKind::MaxPool => {
            let (k, s) = pool_window(node);
            let r = if node.kind == OpKind::AvgPool {
                kernels::avgpool(x, shape, k, s)
            } else {
                kernels::maxpool(x, shape, k, s)
            };
            let (v, s) = r.ok_or_else(|| shape_err(node, format!("window {k:?} does not fit {shape:?}")))?;
            Tensor::from_f32(s, v)?
        }
        OpKind::Flatten => ins[0].clone().reshape(vec![shape[0], numel(&shape[1..])])?,
        OpKind::QuantStub | OpKind::DequantStub => ins[0].clone(),
        OpKind::Attention => {
            let heads = node.attr_int_or("heads", 1).max(1) as usize;
            if shape.len() != 3 || !shape[2].is_multiple_of(heads) {
                return Err(shape_err(node, format!("attention with {heads} heads over {shape:?}")));
            }
            let (wq, wk, wv, wo) = (
                weight(g, node, "wq", fq)?,
                weight(g, node, "wk", fq)?,
                weight(g, node, "wv", fq)?,
                weight(g, node, "wo", fq)?,
            );
            let w = AttentionWeights {
                wq: &wq,
                wk: &wk,
                wv: &wv,
                wo: &wo,
                bq: bias(g, node, "bq")?,
                bk: bias(g, node, "bk")?,
                bv: bias(g, node, "bv")?,
                bo: bias(g, node, "bo")?,
            };
            let mut hook = |stage: &str, s: &[usize], v: &mut Vec<f32>| -> Result<(), EngineError> {
                if let Some(p) = probe.as_mut() {
                    p(&format!("{}#{stage}", node.id), &Tensor::from_f32(s.to_vec(), v.clone())?)?;
                }
                if fq {
                    if let Some(qp) = node.quant.get(stage) {
                        let (qmin, qmax) = qp.qrange();
                        let (sc, z) = (qp.scale0(), qp.zero());
                        purity::record(v.len());
                        for e in v.iter_mut() {
                            *e = fake_quant_value(*e, sc, z, qmin, qmax);
                        }
                    }
                }
                Ok(())
            };
            Tensor::from_f32(shape.to_vec(), kernels::attention(x, shape, heads, &w, &mut hook)?)?
        }
        OpKind::MulQuant => {
            return Err(shape_err(node, "mulquant only runs on the integer path"));
        }
    };
    Ok(out)
}

fn pool_window(node: &Node) -> ((usize, usize), (usize, usize)) {
    let k = node.attr_pair("kernel", 2);
    let s = node.attr_pair("stride", 0);
    (k, (if s.0 == 0 { k.0 } else { s.0 }, if s.1 == 0 { k.1 } else { s.1 }))
}

/// Result of an integer run.
#[derive(Debug, Clone)]
pub struct IntRun {
    /// Integer tensors feeding each graph output's dequantization.
    pub outputs: Vec<Tensor>,
    pub trace: Trace,
    /// Float operations recorded while the integer path ran.
    pub float_ops: u64,
}

/// Integer run of a lowered single-input graph on input codes. Returns the
/// codes entering the output dequantization and fails if any float
/// operation ran.
pub fn exec_int(g: &Graph, x_q: &Tensor) -> Result<Tensor, EngineError> {
    let run = exec_int_trace(g, single_input(g, x_q)?, true)?;
    run.outputs.into_iter().next().ok_or_else(|| EngineError::Missing {
        node: "<graph>".into(),
        what: "graph output".into(),
    })
}

/// Integer run recording every edge. With `assert_pure`, any float
/// operation is an error.
pub fn exec_int_trace(g: &Graph, inputs: Trace, assert_pure: bool) -> Result<IntRun, EngineError> {
    let before = purity::count();
    let mut trace = Trace::new();
    for (name, t) in inputs {
        if t.is_float() {
            return Err(EngineError::NotFused(format!("graph input '{name}' is float")));
        }
        trace.insert(name, t);
    }
    let mut outputs = BTreeMap::new();
    for node in &g.nodes {
        let mut ins = Vec::with_capacity(node.inputs.len());
        for i in &node.inputs {
            ins.push(trace.get(i).ok_or_else(|| EngineError::Missing {
                node: node.id.clone(),
                what: format!("value of edge '{i}'"),
            })?);
        }
        let name = node.output(0)?.to_string();
        if node.kind == OpKind::DequantStub {
            outputs.insert(name, ins[0].clone());
            continue;
        }
        let out = int_node(g, node, &ins)?;
        trace.insert(name, out);
    }
    let float_ops = purity::count().wrapping_sub(before);
    if assert_pure && float_ops > 0 {
        return Err(EngineError::Impure(float_ops));
    }
    let mut outs = Vec::with_capacity(g.outputs.len());
    for o in &g.outputs {
        let t = outputs
            .remove(o)
            .or_else(|| trace.get(o).cloned())
            .ok_or_else(|| EngineError::Missing {
                node: "<graph>".into(),
                what: format!("value of output '{o}'"),
            })?;
        outs.push(t);
    }
    Ok(IntRun {
        outputs: outs,
        trace,
        float_ops,
    })
}

fn edge_qp<'g>(g: &'g Graph, node: &Node, edge: &str) -> Result<&'g QuantParams, EngineError> {
    g.edge_quant(edge)
        .ok_or_else(|| EngineError::Annotation(format!("edge '{edge}' of node '{}'", node.id)))
}

fn int_tensor(shape: Vec<usize>, qp: &QuantParams, values: Vec<i64>) -> Result<Tensor, EngineError> {
    Ok(Tensor::from_int(shape, qp.bits, qp.signed, values)?)
}

fn accumulator(node: &Node, shape: Vec<usize>, values: Vec<i64>) -> Result<Tensor, EngineError> {
    check_i32(&values).map_err(|v| EngineError::Overflow {
        node: node.id.clone(),
        value: v as i128,
    })?;
    Ok(Tensor::from_int(shape, 32, true, values)?)
}

fn int_node(g: &Graph, node: &Node, ins: &[&Tensor]) -> Result<Tensor, EngineError> {
    let x = ins[0].as_int()?;
    let shape = ins[0].shape();
    let overflow = |v: i128| EngineError::Overflow {
        node: node.id.clone(),
        value: v,
    };
    let out_edge = node.output(0)?;
    Ok(match node.kind {
        OpKind::QuantStub => {
            let qp = edge_qp(g, node, out_edge)?;
            let (lo, hi) = qp.storage_range();
            if let Some(v) = x.iter().find(|v| **v < lo || **v > hi) {
                return Err(shape_err(node, format!("input code {v} outside {lo}..={hi}")));
            }
            int_tensor(shape.to_vec(), qp, x.to_vec())?
        }
        OpKind::Conv2d => {
            let wt = g.param(node, "weight")?;
            let geom = ConvGeom::new(
                shape,
                wt.shape(),
                node.attr_pair("stride", 1),
                node.attr_pair("padding", 0),
                node.attr_int_or("groups", 1).max(1) as usize,
            )
            .ok_or_else(|| shape_err(node, format!("conv of {shape:?} with {:?}", wt.shape())))?;
            let zx = edge_qp(g, node, &node.inputs[0])?.zero();
            let acc = conv2d_int(x, zx, &geom, wt.as_int()?).map_err(overflow)?;
            accumulator(node, geom.out_shape(), acc)?
        }
        OpKind::Linear => {
            let wt = g.param(node, "weight")?;
            let out_f = wt.shape()[0];
            let (rows, out_shape) = kernels::linear_layout(shape, out_f);
            if rows * wt.shape()[1] != x.len() {
                return Err(shape_err(node, format!("input {shape:?} against weight {:?}", wt.shape())));
            }
            let zx = edge_qp(g, node, &node.inputs[0])?.zero();
            let acc = linear_int(x, rows, zx, wt.as_int()?, out_f).map_err(overflow)?;
            accumulator(node, out_shape, acc)?
        }
        OpKind::MulQuant => {
            let qp = edge_qp(g, node, out_edge)?;
            let mq = MulQuantParams::read(g, node, "", qp.clone())?;
            int_tensor(shape.to_vec(), qp, apply_mulquant(x, shape, &mq))?
        }
        OpKind::AvgPool => {
            let (k, s) = pool_window(node);
            let z = edge_qp(g, node, &node.inputs[0])?.zero();
            let mut out = Vec::new();
            let os = kernels::for_each_window(shape, k, s, |_, idx| {
                out.push(idx.iter().map(|&i| x[i] - z).sum::<i64>());
            })
            .ok_or_else(|| shape_err(node, format!("window {k:?} does not fit {shape:?}")))?;
            accumulator(node, os, out)?
        }
        OpKind::MaxPool => {
            let (k, s) = pool_window(node);
            let mut out = Vec::new();
            let os = kernels::for_each_window(shape, k, s, |_, idx| {
                out.push(idx.iter().map(|&i| x[i]).max().unwrap_or(0));
            })
            .ok_or_else(|| shape_err(node, format!("window {k:?} does not fit {shape:?}")))?;
            retag(ins[0], os, out)?
        }
        OpKind::Flatten => ins[0].clone().reshape(vec![shape[0], numel(&shape[1..])])?,
        OpKind::Relu => {
            let z = edge_qp(g, node, &node.inputs[0])?.zero();
            retag(ins[0], shape.to_vec(), x.iter().map(|&v| v.max(z)).collect())?
        }
        OpKind::Add => {
            let y = ins.get(1).ok_or_else(|| shape_err(node, "add needs two inputs"))?.as_int()?;
            if y.len() != x.len() {
                return Err(shape_err(node, "add operands differ in size"));
            }
            let m = g.param(node, "multiplier")?.as_int()?;
            let frac = node.attr_ints("mult_frac").and_then(|v| v.first().copied()).unwrap_or(0) as u32;
            let clamp = node.attr_ints("clamp").filter(|c| c.len() == 2).ok_or_else(|| EngineError::Missing {
                node: node.id.clone(),
                what: "attribute 'clamp'".into(),
            })?;
            if m.len() != 2 {
                return Err(shape_err(node, "add needs two multipliers"));
            }
            let za = edge_qp(g, node, &node.inputs[0])?.zero();
            let zb = edge_qp(g, node, &node.inputs[1])?.zero();
            let zo = node.attr_int_or("out_zero", 0);
            let qp = edge_qp(g, node, out_edge)?;
            let out = x
                .iter()
                .zip(y)
                .map(|(&a, &b)| {
                    let acc = (a - za) as i128 * m[0] as i128 + (b - zb) as i128 * m[1] as i128;
                    let v = crate::fixed::round_shift(acc, frac) + zo as i128;
                    v.clamp(clamp[0] as i128, clamp[1] as i128) as i64
                })
                .collect();
            int_tensor(shape.to_vec(), qp, out)?
        }
        OpKind::Gelu => {
            let in_qp = edge_qp(g, node, &node.inputs[0])?;
            let qp = edge_qp(g, node, out_edge)?;
            let lut = LutTable::read(g, node, "gelu.", Some(in_qp.clone()))?;
            let rq = MulQuantParams::read(g, node, "rq.", qp.clone())?;
            let id = if node.params.contains_key("id.multiplier") {
                Some(MulQuantParams::read(g, node, "id.", qp.clone())?)
            } else {
                None
            };
            int_tensor(shape.to_vec(), qp, gelu_codes(x, &lut, &rq, id.as_ref()))?
        }
        OpKind::Softmax => {
            let in_qp = edge_qp(g, node, &node.inputs[0])?;
            let axis = softmax_axis(node, shape.len());
            if axis >= shape.len() {
                return Err(shape_err(node, format!("axis {axis} beyond rank {}", shape.len())));
            }
            let exp = LutTable::read(g, node, "exp.", Some(diff_qp(in_qp)))?;
            let recip = LutTable::read(g, node, "recip.", None)?;
            let frac = node.attr_int_or("probs.frac", 12) as u8;
            let out = softmax_codes(x, shape, axis, &exp, &recip, frac);
            Tensor::from_int(shape.to_vec(), frac + 1, false, out)?
        }
        OpKind::LayerNorm => {
            let qp = edge_qp(g, node, out_edge)?;
            let ln = IntLayerNorm::read(g, node)?;
            let features = *shape.last().unwrap_or(&1);
            if ln.gamma.len() != features && ln.gamma.len() != 1 {
                return Err(shape_err(node, format!("{} gamma codes for {features} features", ln.gamma.len())));
            }
            int_tensor(shape.to_vec(), qp, int_layernorm_instant(x, features, &ln))?
        }
        OpKind::Attention => {
            let qp = edge_qp(g, node, out_edge)?;
            let att = IntAttention::read(g, node, qp)?;
            int_tensor(shape.to_vec(), qp, att.run(&node.id, x, shape)?)?
        }
        OpKind::BatchNorm => {
            return Err(EngineError::NotFused(format!("batchnorm '{}' was not folded", node.id)));
        }
        OpKind::DequantStub => ins[0].clone(),
    })
}

/// New values with the dtype of `like`.
fn retag(like: &Tensor, shape: Vec<usize>, values: Vec<i64>) -> Result<Tensor, EngineError> {
    let (bits, signed) = match like.dtype() {
        crate::tensor::DType::Int { bits, signed } => (bits, signed),
        d => return Err(EngineError::NotFused(format!("expected an integer value, found {d}"))),
    };
    Ok(Tensor::from_int(shape, bits, signed, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_unit_conv() {
        let mut g = Graph::new();
        g.add_input("x", vec![1, 3]);
        g.push(Node::new("r", OpKind::Flatten).with_io(&["x"], &["y"]));
        g.outputs.push("y".into());
        let x = Tensor::from_f32(vec![1, 3], vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(exec_float(&g, &x).unwrap(), x);

        let mut g = Graph::new();
        g.add_input("x", vec![1, 1, 1, 1]);
        g.add_tensor("w", Tensor::from_f32(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        g.push(Node::new("c", OpKind::Conv2d).with_io(&["x"], &["y"]).with_param("weight", "w"));
        g.outputs.push("y".into());
        let x = Tensor::from_f32(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(exec_float(&g, &x).unwrap().as_f32().unwrap(), &[6.0]);
    }

    #[test]
    fn fakequant_needs_annotations() {
        let mut g = Graph::new();
        g.add_input("x", vec![1, 2]);
        g.add_tensor("w", Tensor::from_f32(vec![1, 2], vec![0.3, 0.7]).unwrap());
        g.push(Node::new("l", OpKind::Linear).with_io(&["x"], &["y"]).with_param("weight", "w"));
        g.outputs.push("y".into());
        let x = Tensor::from_f32(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(exec_fakequant(&g, &x), Err(EngineError::Annotation(_))));
        g.set_edge_quant("x", QuantParams::per_tensor(0.5, 0, 8, true, true));
        g.param_quant.insert("w".into(), QuantParams::per_tensor(0.25, 0, 8, true, true));
        // 0.3 → 0.25, 0.7 → 0.75
        assert_eq!(exec_fakequant(&g, &x).unwrap().as_f32().unwrap(), &[1.0]);
    }
}
