use super::{Graph, IrError, Node, OpKind};
use crate::tensor::numel;

fn shape_err(node: &Node, message: impl Into<String>) -> IrError {
    IrError::Shape {
        node: node.id.clone(),
        message: message.into(),
    }
}

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Intermediate shapes of a multi-head attention node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionShapes {
    /// `[B, T, E]` projections.
    pub projection: Vec<usize>,
    /// `[B, H, T, E/H]` per-head queries/keys/values.
    pub per_head: Vec<usize>,
    /// `[B, H, T, T]` attention scores and probabilities.
    pub scores: Vec<usize>,
    pub output: Vec<usize>,
}

pub fn attention_shapes(input: &[usize], heads: usize) -> Option<AttentionShapes> {
    if input.len() != 3 || heads == 0 || !input[2].is_multiple_of(heads) {
        return None;
    }
    let (b, t, e) = (input[0], input[1], input[2]);
    Some(AttentionShapes {
        projection: vec![b, t, e],
        per_head: vec![b, heads, t, e / heads],
        scores: vec![b, heads, t, t],
        output: vec![b, t, e],
    })
}

/// Output shape of one node from its input shapes.
pub fn node_output_shape(g: &Graph, node: &Node, inputs: &[Vec<usize>]) -> Result<Vec<usize>, IrError> {
    let x = inputs
        .first()
        .ok_or_else(|| shape_err(node, "node has no input"))?;
    match node.kind {
        OpKind::Conv2d => {
            let w = g.param(node, "weight")?.shape().to_vec();
            if x.len() != 4 || w.len() != 4 {
                return Err(shape_err(node, format!("conv2d needs NCHW input and OIHW weight, got {x:?} / {w:?}")));
            }
            let groups = node.attr_int_or("groups", 1).max(1) as usize;
            if x[1] != w[1] * groups || w[0] % groups != 0 {
                return Err(shape_err(
                    node,
                    format!("input channels {} do not match weight {w:?} with groups {groups}", x[1]),
                ));
            }
            let (sh, sw) = node.attr_pair("stride", 1);
            let (ph, pw) = node.attr_pair("padding", 0);
            let oh = conv_out_extent(x[2], w[2], sh, ph);
            let ow = conv_out_extent(x[3], w[3], sw, pw);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Ok(vec![x[0], w[0], oh, ow]),
                _ => Err(shape_err(node, format!("kernel {w:?} does not fit input {x:?}"))),
            }
        }
        OpKind::Linear => {
            let w = g.param(node, "weight")?.shape().to_vec();
            if w.len() != 2 {
                return Err(shape_err(node, format!("linear weight must be (out, in), got {w:?}")));
            }
            match x.len() {
                2 | 3 if x[x.len() - 1] == w[1] => {
                    let mut out = x.clone();
                    *out.last_mut().unwrap() = w[0];
                    Ok(out)
                }
                4 if numel(&x[1..]) == w[1] => Ok(vec![x[0], w[0]]),
                _ => Err(shape_err(node, format!("input {x:?} incompatible with weight {w:?}"))),
            }
        }
        OpKind::BatchNorm => {
            let c = g.param(node, "gamma")?.numel();
            if x.len() < 2 || x[1] != c {
                return Err(shape_err(node, format!("batchnorm over {c} channels, input {x:?}")));
            }
            Ok(x.clone())
        }
        OpKind::LayerNorm => {
            let c = g
                .param_opt(node, "gamma")
                .or_else(|| g.param_opt(node, "gamma_code"))
                .or_else(|| g.param_opt(node, "multiplier"))
                .map(|t| t.numel());
            match c {
                Some(c) if x.last() == Some(&c) => Ok(x.clone()),
                Some(c) => Err(shape_err(node, format!("layernorm over {c} features, input {x:?}"))),
                None => Err(shape_err(node, "layernorm without gamma")),
            }
        }
        OpKind::Relu | OpKind::Gelu | OpKind::Softmax | OpKind::QuantStub | OpKind::DequantStub => {
            Ok(x.clone())
        }
        OpKind::MulQuant => {
            let c = g.param(node, "multiplier")?.numel();
            let axis = node.attr_int_or("axis", 1);
            let axis = if axis < 0 { x.len() as i64 + axis } else { axis };
            if c > 1 && (axis < 0 || axis as usize >= x.len() || x[axis as usize] != c) {
                return Err(shape_err(node, format!("{c} multipliers along axis {axis} of {x:?}")));
            }
            Ok(x.clone())
        }
        OpKind::Add => {
            let y = inputs
                .get(1)
                .ok_or_else(|| shape_err(node, "add needs two inputs"))?;
            if x != y {
                return Err(shape_err(node, format!("add of {x:?} and {y:?}")));
            }
            Ok(x.clone())
        }
        OpKind::AvgPool | OpKind::MaxPool => {
            if x.len() != 4 {
                return Err(shape_err(node, format!("pooling needs NCHW input, got {x:?}")));
            }
            let (kh, kw) = node.attr_pair("kernel", 2);
            let (sh, sw) = node.attr_pair("stride", 0);
            let (sh, sw) = (if sh == 0 { kh } else { sh }, if sw == 0 { kw } else { sw });
            match (conv_out_extent(x[2], kh, sh, 0), conv_out_extent(x[3], kw, sw, 0)) {
                (Some(oh), Some(ow)) => Ok(vec![x[0], x[1], oh, ow]),
                _ => Err(shape_err(node, format!("window {kh}x{kw} does not fit {x:?}"))),
            }
        }
        OpKind::Flatten => {
            if x.is_empty() {
                return Err(shape_err(node, "flatten of a scalar"));
            }
            Ok(vec![x[0], numel(&x[1..])])
        }
        OpKind::Attention => {
            let heads = node.attr_int_or("heads", 1).max(0) as usize;
            let s = attention_shapes(x, heads)
                .ok_or_else(|| shape_err(node, format!("attention with {heads} heads over {x:?}")))?;
            for role in ["wq", "wk", "wv", "wo"] {
                let w = g.param(node, role)?.shape();
                if w != [x[2], x[2]] {
                    return Err(shape_err(node, format!("{role} must be [{0}, {0}], got {w:?}", x[2])));
                }
            }
            Ok(s.output)
        }
    }
}

/// Resolves every edge shape from the declared input shapes.
///
/// Deterministic and idempotent: re-running on the result changes nothing.
pub fn infer_shapes(g: &Graph) -> Result<Graph, IrError> {
    let mut out = g.clone();
    for name in &g.inputs {
        if out.edge_shape(name).is_none() {
            return Err(IrError::Shape {
                node: "<input>".into(),
                message: format!("graph input '{name}' has no declared shape"),
            });
        }
    }
    for node in &g.nodes {
        let mut ins = Vec::with_capacity(node.inputs.len());
        for i in &node.inputs {
            let s = out
                .edge_shape(i)
                .ok_or_else(|| shape_err(node, format!("input edge '{i}' has no shape")))?;
            ins.push(s.to_vec());
        }
        let shape = node_output_shape(&out, node, &ins)?;
        for o in &node.outputs {
            out.values.entry(o.clone()).or_default().shape = Some(shape.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::Node;
    use crate::tensor::Tensor;

    #[test]
    fn conv_same_padding() {
        let mut g = Graph::new();
        g.add_input("x", vec![1, 3, 32, 32]);
        g.add_tensor("w", Tensor::zeros(vec![16, 3, 3, 3]));
        g.push(
            Node::new("c", OpKind::Conv2d)
                .with_io(&["x"], &["y"])
                .with_param("weight", "w")
                .with_attr("stride", vec![1, 1])
                .with_attr("padding", vec![1, 1]),
        );
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.edge_shape("y").unwrap(), &[1, 16, 32, 32]);
    }

    #[test]
    fn flatten_then_linear() {
        let mut g = Graph::new();
        g.add_input("x", vec![1, 512]);
        g.add_tensor("w", Tensor::zeros(vec![10, 512]));
        g.push(Node::new("f", OpKind::Flatten).with_io(&["x"], &["f"]));
        g.push(Node::new("l", OpKind::Linear).with_io(&["f"], &["y"]).with_param("weight", "w"));
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.edge_shape("y").unwrap(), &[1, 10]);
    }

    #[test]
    fn attention_score_shape() {
        let s = attention_shapes(&[1, 16, 64], 4).unwrap();
        assert_eq!(s.scores, vec![1, 4, 16, 16]);
        assert_eq!(s.per_head, vec![1, 4, 16, 16]);
        assert!(attention_shapes(&[1, 16, 63], 4).is_none());
    }

    #[test]
    fn mismatch_names_node() {
        let mut g = Graph::new();
        g.add_input("x", vec![1, 4, 8, 8]);
        g.add_tensor("w", Tensor::zeros(vec![8, 3, 3, 3]));
        g.push(Node::new("bad", OpKind::Conv2d).with_io(&["x"], &["y"]).with_param("weight", "w"));
        match infer_shapes(&g) {
            Err(IrError::Shape { node, .. }) => assert_eq!(node, "bad"),
            other => panic!("{other:?}"),
        }
    }
}
