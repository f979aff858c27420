use crate::ir::{Graph, OpKind};

/// A conv/linear op with the normalisation and ReLU that directly follow it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub op: usize,
    pub bn: Option<usize>,
    pub relu: Option<usize>,
    /// Edge leaving the last node of the unit.
    pub out_edge: String,
}

impl Unit {
    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.op).chain(self.bn).chain(self.relu)
    }
}

/// Sole consumer of `edge` when it has exactly one and the edge is not a
/// graph output.
fn sole_consumer(g: &Graph, edge: &str, kind: OpKind) -> Option<usize> {
    if g.is_graph_output(edge) {
        return None;
    }
    match g.consumers(edge).as_slice() {
        [i] if g.nodes[*i].kind == kind => Some(*i),
        _ => None,
    }
}

/// Every conv/linear unit in graph order.
pub fn find_units(g: &Graph) -> Vec<Unit> {
    let mut out = Vec::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if !matches!(n.kind, OpKind::Conv2d | OpKind::Linear) || n.outputs.is_empty() {
            continue;
        }
        let mut edge = n.outputs[0].clone();
        let bn = sole_consumer(g, &edge, OpKind::BatchNorm);
        if let Some(b) = bn {
            edge = g.nodes[b].outputs[0].clone();
        }
        let relu = sole_consumer(g, &edge, OpKind::Relu);
        if let Some(r) = relu {
            edge = g.nodes[r].outputs[0].clone();
        }
        out.push(Unit {
            op: i,
            bn,
            relu,
            out_edge: edge,
        });
    }
    out
}
