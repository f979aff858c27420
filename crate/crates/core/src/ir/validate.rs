use std::collections::BTreeMap;
use std::fmt;

use super::{infer_shapes, Graph, OpKind};
use crate::tensor::TensorData;

/// One broken invariant, naming the node, edge or tensor it concerns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

fn attr_allowed(kind: OpKind, key: &str) -> bool {
    let plain: &[&str] = match kind {
        OpKind::Conv2d => &["stride", "padding", "groups"],
        OpKind::BatchNorm => &["eps"],
        OpKind::LayerNorm => &["eps", "stats"],
        OpKind::Softmax => &["axis"],
        OpKind::Add => &["mult_frac", "out_zero", "clamp"],
        OpKind::AvgPool | OpKind::MaxPool => &["kernel", "stride"],
        OpKind::Attention => &["heads"],
        OpKind::MulQuant => &[
            "mult_frac",
            "int_bits",
            "bias_frac",
            "clamp",
            "relu_folded",
            "in_zero",
            "axis",
        ],
        _ => &[],
    };
    if plain.contains(&key) {
        return true;
    }
    // lowered composites keep their internal stages under `<stage>.<attr>`
    key.contains('.')
        && matches!(
            kind,
            OpKind::Gelu | OpKind::Softmax | OpKind::LayerNorm | OpKind::Attention
        )
}

/// Alternative sets of required parameter roles; one must be complete.
fn required_params(kind: OpKind) -> &'static [&'static [&'static str]] {
    match kind {
        OpKind::Conv2d | OpKind::Linear => &[&["weight"]],
        OpKind::BatchNorm => &[&["gamma", "beta", "mean", "var"]],
        OpKind::LayerNorm => &[&["gamma", "beta"], &["gamma_code", "beta_code"]],
        OpKind::Attention => &[&["wq", "wk", "wv", "wo"]],
        OpKind::MulQuant => &[&["multiplier", "bias"]],
        _ => &[],
    }
}

/// Every invariant violation in `g`. Never panics on malformed input; an
/// empty list means the graph is valid.
pub fn validate(g: &Graph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |subject: String, message: String| out.push(Violation { subject, message });

    for (name, t) in &g.tensors {
        let subject = format!("tensor '{name}'");
        if t.numel() != t.shape().iter().product::<usize>() {
            push(subject.clone(), "element count does not match shape".into());
        }
        if let TensorData::Int { values, .. } = t.data() {
            let (lo, hi) = t.dtype().int_range();
            if let Some(v) = values.iter().find(|v| **v < lo || **v > hi) {
                push(subject.clone(), format!("element {v} outside {}", t.dtype()));
            }
        }
    }

    for (name, qp) in &g.param_quant {
        let subject = format!("tensor '{name}'");
        for m in qp.violations() {
            push(subject.clone(), format!("quant: {m}"));
        }
        match g.tensors.get(name) {
            None => push(subject, "quant annotation on a missing tensor".into()),
            Some(t) => {
                if let Some(axis) = qp.axis {
                    match t.shape().get(axis) {
                        Some(&c) if c == qp.scale.len() => {}
                        Some(&c) => push(
                            subject,
                            format!("per-channel scale has {} entries for {c} channels on axis {axis}", qp.scale.len()),
                        ),
                        None => push(subject, format!("quant axis {axis} beyond rank {}", t.rank())),
                    }
                }
            }
        }
    }

    for (edge, info) in &g.values {
        if let Some(qp) = &info.quant {
            for m in qp.violations() {
                push(format!("edge '{edge}'"), format!("quant: {m}"));
            }
        }
    }

    let mut producers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in &g.nodes {
        for o in &n.outputs {
            producers.entry(o.as_str()).or_default().push(n.id.as_str());
        }
    }
    for i in &g.inputs {
        if let Some(p) = producers.get(i.as_str()) {
            push(format!("edge '{i}'"), format!("graph input is also produced by {p:?}"));
        }
    }
    for (edge, p) in &producers {
        if p.len() > 1 {
            push(format!("edge '{edge}'"), format!("produced by several nodes {p:?}"));
        }
    }
    let mut seen_ids = BTreeMap::new();
    for n in &g.nodes {
        let subject = format!("node '{}'", n.id);
        if seen_ids.insert(n.id.as_str(), ()).is_some() {
            push(subject.clone(), "duplicate node id".into());
        }
        for i in &n.inputs {
            if !producers.contains_key(i.as_str()) && !g.inputs.contains(i) {
                push(subject.clone(), format!("input edge '{i}' has no producer"));
            }
        }
        if n.outputs.is_empty() {
            push(subject.clone(), "node has no outputs".into());
        }
        for (role, t) in &n.params {
            if !g.tensors.contains_key(t) {
                push(subject.clone(), format!("parameter '{role}' references missing tensor '{t}'"));
            }
        }
        let req = required_params(n.kind);
        if !req.is_empty() && !req.iter().any(|set| set.iter().all(|r| n.params.contains_key(*r))) {
            push(subject.clone(), format!("{} requires parameters {:?}", n.kind, req[0]));
        }
        for key in n.attrs.keys() {
            if !attr_allowed(n.kind, key) {
                push(subject.clone(), format!("attribute '{key}' is not valid for {}", n.kind));
            }
        }
        match n.kind {
            OpKind::Conv2d => {
                if let Some(w) = g.param_opt(n, "weight") {
                    if w.rank() != 4 {
                        push(subject.clone(), format!("conv2d weight must be OIHW, got {:?}", w.shape()));
                    }
                }
            }
            OpKind::Linear => {
                if let Some(w) = g.param_opt(n, "weight") {
                    if w.rank() != 2 {
                        push(subject.clone(), format!("linear weight must be (out, in), got {:?}", w.shape()));
                    }
                }
            }
            OpKind::Add
                if n.inputs.len() != 2 => {
                    push(subject.clone(), "add takes exactly two inputs".into());
                }
            _ => {}
        }
    }
    for o in &g.outputs {
        if !producers.contains_key(o.as_str()) && !g.inputs.contains(o) {
            push(format!("edge '{o}'"), "graph output is never produced".into());
        }
    }

    let structural_ok = out.is_empty();
    if let Err(cycle) = g.topo_order() {
        out.push(Violation {
            subject: "graph".into(),
            message: format!("cycle through nodes {cycle:?}"),
        });
        return out;
    }
    let in_order = {
        let order = g.topo_order().unwrap_or_default();
        order.iter().enumerate().all(|(pos, &i)| pos == i)
    };
    if !in_order {
        out.push(Violation {
            subject: "graph".into(),
            message: "nodes are not in topological order".into(),
        });
        return out;
    }
    if structural_ok {
        if let Err(e) = infer_shapes(g) {
            out.push(Violation {
                subject: "graph".into(),
                message: format!("shape inference failed: {e}"),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::Node;
    use crate::qparams::QuantParams;
    use crate::tensor::Tensor;

    fn conv_graph() -> Graph {
        let mut g = Graph::new();
        g.add_input("x", vec![1, 3, 8, 8]);
        g.add_tensor("w", Tensor::zeros(vec![16, 3, 3, 3]));
        g.push(
            Node::new("conv", OpKind::Conv2d)
                .with_io(&["x"], &["y"])
                .with_param("weight", "w")
                .with_attr("padding", vec![1, 1]),
        );
        g.outputs.push("y".into());
        g
    }

    #[test]
    fn valid_graph_is_clean() {
        assert_eq!(validate(&conv_graph()), vec![]);
    }

    #[test]
    fn per_channel_length_mismatch() {
        let mut g = conv_graph();
        g.param_quant
            .insert("w".into(), QuantParams::per_channel_symmetric(vec![0.1; 8], 8, 0));
        let v = validate(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].message.contains("8 entries for 16 channels"));
    }

    #[test]
    fn cycle_lists_nodes() {
        let mut g = Graph::new();
        g.add_input("x", vec![1, 4]);
        g.push(Node::new("a", OpKind::Add).with_io(&["x", "q"], &["p"]));
        g.push(Node::new("b", OpKind::Relu).with_io(&["p"], &["q"]));
        let v = validate(&g);
        let cyc = v.iter().find(|v| v.message.contains("cycle")).expect("cycle reported");
        assert!(cyc.message.contains("\"a\"") && cyc.message.contains("\"b\""));
    }

    #[test]
    fn unknown_attr_and_missing_param() {
        let mut g = conv_graph();
        g.nodes[0].set_attr("heads", 2i64);
        g.nodes[0].params.clear();
        let v = validate(&g);
        assert!(v.iter().any(|v| v.message.contains("'heads'")));
        assert!(v.iter().any(|v| v.message.contains("requires parameters")));
    }
}
