//! Compute-graph IR shared by every pass: nodes in topological order, named
//! edges with optional shape/dtype/quant annotations, and a tensor store for
//! parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qparams::QuantParams;
use crate::tensor::{DType, Tensor, TensorError};

pub mod container;
pub mod shape;
pub mod validate;

pub use container::{load_model, load_tensors, save_model, save_tensors};
pub use shape::{attention_shapes, infer_shapes, AttentionShapes};
pub use validate::validate;

#[derive(Debug, Error)]
pub enum IrError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("tensor '{tensor}': blob {file} is missing")]
    MissingBlob { tensor: String, file: String },
    #[error("tensor '{tensor}': expected {expected} bytes, blob has {actual}")]
    ByteCount {
        tensor: String,
        expected: usize,
        actual: usize,
    },
    #[error("node '{node}': unknown op kind '{kind}'")]
    UnknownOp { node: String, kind: String },
    #[error("graph contains a cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("tensor '{tensor}': {source}")]
    Tensor {
        tensor: String,
        #[source]
        source: TensorError,
    },
    #[error("node '{node}': {message}")]
    Shape { node: String, message: String },
    #[error("node '{node}': missing {what}")]
    Missing { node: String, what: String },
    #[error("graph is invalid: {0:?}")]
    Invalid(Vec<String>),
    #[error("zip archive: {0}")]
    Zip(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    Linear,
    BatchNorm,
    LayerNorm,
    Relu,
    Gelu,
    Softmax,
    Add,
    AvgPool,
    MaxPool,
    Flatten,
    Attention,
    MulQuant,
    QuantStub,
    DequantStub,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::Conv2d,
        OpKind::Linear,
        OpKind::BatchNorm,
        OpKind::LayerNorm,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::Add,
        OpKind::AvgPool,
        OpKind::MaxPool,
        OpKind::Flatten,
        OpKind::Attention,
        OpKind::MulQuant,
        OpKind::QuantStub,
        OpKind::DequantStub,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::BatchNorm => "batchnorm",
            OpKind::LayerNorm => "layernorm",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::Add => "add",
            OpKind::AvgPool => "avgpool",
            OpKind::MaxPool => "maxpool",
            OpKind::Flatten => "flatten",
            OpKind::Attention => "attention",
            OpKind::MulQuant => "mulquant",
            OpKind::QuantStub => "quantstub",
            OpKind::DequantStub => "dequantstub",
        }
    }

    /// Ops whose weights and input activations are quantized.
    pub fn is_weighted(self) -> bool {
        matches!(self, OpKind::Conv2d | OpKind::Linear | OpKind::Attention)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// Node attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Attr {
    Bool(bool),
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
    Floats(Vec<f64>),
    Str(String),
}

impl From<bool> for Attr {
    fn from(v: bool) -> Self {
        Attr::Bool(v)
    }
}
impl From<i64> for Attr {
    fn from(v: i64) -> Self {
        Attr::Int(v)
    }
}
impl From<f64> for Attr {
    fn from(v: f64) -> Self {
        Attr::Float(v)
    }
}
impl From<Vec<i64>> for Attr {
    fn from(v: Vec<i64>) -> Self {
        Attr::Ints(v)
    }
}
impl From<&str> for Attr {
    fn from(v: &str) -> Self {
        Attr::Str(v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: OpKind,
    pub attrs: BTreeMap<String, Attr>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Parameter role (`weight`, `bias`, ...) to tensor name.
    pub params: BTreeMap<String, String>,
    /// Quantization of values internal to the node (attention projections).
    pub quant: BTreeMap<String, QuantParams>,
}

impl Node {
    pub fn new(id: impl Into<String>, kind: OpKind) -> Self {
        Node {
            id: id.into(),
            kind,
            attrs: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            params: BTreeMap::new(),
            quant: BTreeMap::new(),
        }
    }

    pub fn with_io(mut self, inputs: &[&str], outputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<Attr>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn with_param(mut self, role: &str, tensor: impl Into<String>) -> Self {
        self.params.insert(role.to_string(), tensor.into());
        self
    }

    pub fn set_attr(&mut self, key: &str, value: impl Into<Attr>) {
        self.attrs.insert(key.to_string(), value.into());
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key)? {
            Attr::Int(v) => Some(*v),
            Attr::Bool(b) => Some(*b as i64),
            _ => None,
        }
    }

    pub fn attr_int_or(&self, key: &str, default: i64) -> i64 {
        self.attr_int(key).unwrap_or(default)
    }

    pub fn attr_float(&self, key: &str) -> Option<f64> {
        match self.attrs.get(key)? {
            Attr::Float(v) => Some(*v),
            Attr::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn attr_bool(&self, key: &str) -> Option<bool> {
        match self.attrs.get(key)? {
            Attr::Bool(b) => Some(*b),
            Attr::Int(v) => Some(*v != 0),
            _ => None,
        }
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        match self.attrs.get(key)? {
            Attr::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn attr_ints(&self, key: &str) -> Option<Vec<i64>> {
        match self.attrs.get(key)? {
            Attr::Ints(v) => Some(v.clone()),
            Attr::Int(v) => Some(vec![*v]),
            _ => None,
        }
    }

    /// Two-element spatial attribute (`stride`, `padding`, `kernel`); a
    /// single value applies to both axes.
    pub fn attr_pair(&self, key: &str, default: usize) -> (usize, usize) {
        match self.attr_ints(key) {
            Some(v) if v.len() >= 2 => (v[0].max(0) as usize, v[1].max(0) as usize),
            Some(v) if v.len() == 1 => (v[0].max(0) as usize, v[0].max(0) as usize),
            _ => (default, default),
        }
    }

    pub fn input(&self, i: usize) -> Result<&str, IrError> {
        self.inputs.get(i).map(String::as_str).ok_or_else(|| IrError::Missing {
            node: self.id.clone(),
            what: format!("input #{i}"),
        })
    }

    pub fn output(&self, i: usize) -> Result<&str, IrError> {
        self.outputs.get(i).map(String::as_str).ok_or_else(|| IrError::Missing {
            node: self.id.clone(),
            what: format!("output #{i}"),
        })
    }
}

/// Annotation of one edge (graph value).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub nodes: Vec<Node>,
    pub tensors: BTreeMap<String, Tensor>,
    pub values: BTreeMap<String, ValueInfo>,
    /// Weight quantization, keyed by parameter tensor name.
    pub param_quant: BTreeMap<String, QuantParams>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn add_input(&mut self, name: &str, shape: Vec<usize>) {
        self.inputs.push(name.to_string());
        self.values.entry(name.to_string()).or_default().shape = Some(shape);
    }

    pub fn add_tensor(&mut self, name: impl Into<String>, t: Tensor) -> String {
        let name = name.into();
        self.tensors.insert(name.clone(), t);
        name
    }

    pub fn push(&mut self, node: Node) {
        for o in &node.outputs {
            self.values.entry(o.clone()).or_default();
        }
        self.nodes.push(node);
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn value(&self, edge: &str) -> Option<&ValueInfo> {
        self.values.get(edge)
    }

    pub fn edge_quant(&self, edge: &str) -> Option<&QuantParams> {
        self.values.get(edge).and_then(|v| v.quant.as_ref())
    }

    pub fn edge_shape(&self, edge: &str) -> Option<&[usize]> {
        self.values.get(edge).and_then(|v| v.shape.as_deref())
    }

    pub fn set_edge_quant(&mut self, edge: &str, qp: QuantParams) {
        self.values.entry(edge.to_string()).or_default().quant = Some(qp);
    }

    /// Parameter tensor bound to `role` on `node`.
    pub fn param(&self, node: &Node, role: &str) -> Result<&Tensor, IrError> {
        let name = node.params.get(role).ok_or_else(|| IrError::Missing {
            node: node.id.clone(),
            what: format!("parameter '{role}'"),
        })?;
        self.tensors.get(name).ok_or_else(|| IrError::Missing {
            node: node.id.clone(),
            what: format!("tensor '{name}'"),
        })
    }

    pub fn param_opt(&self, node: &Node, role: &str) -> Option<&Tensor> {
        node.params.get(role).and_then(|n| self.tensors.get(n))
    }

    pub fn param_qp(&self, node: &Node, role: &str) -> Option<&QuantParams> {
        node.params.get(role).and_then(|n| self.param_quant.get(n))
    }

    /// Index of the node producing each edge.
    pub fn producers(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in &n.outputs {
                m.insert(o.as_str(), i);
            }
        }
        m
    }

    /// Indices of nodes reading `edge`, in graph order.
    pub fn consumers(&self, edge: &str) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.iter().any(|i| i == edge))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_graph_output(&self, edge: &str) -> bool {
        self.outputs.iter().any(|o| o == edge)
    }

    /// Stable topological order of node indices (Kahn's algorithm, ties in
    /// original order), or the ids of nodes that sit on a cycle.
    pub fn topo_order(&self) -> Result<Vec<usize>, Vec<String>> {
        let producers = self.producers();
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                if let Some(&p) = producers.get(inp.as_str()) {
                    if succ[p].insert(i) {
                        indeg[i] += 1;
                    }
                }
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &s in &succ[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() == n {
            Ok(order)
        } else {
            Err((0..n)
                .filter(|&i| indeg[i] > 0)
                .map(|i| self.nodes[i].id.clone())
                .collect())
        }
    }

    /// Reorders nodes topologically; fails on cycles.
    pub fn sort_topologically(&mut self) -> Result<(), IrError> {
        let order = self.topo_order().map_err(IrError::Cycle)?;
        let mut slots: Vec<Option<Node>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        self.nodes = order.into_iter().map(|i| slots[i].take().expect("each index once")).collect();
        Ok(())
    }

    /// True when every parameter tensor is integer-typed.
    pub fn is_integer_only(&self) -> bool {
        self.tensors.values().all(|t| !t.is_float())
    }

    /// Drops tensors no node references.
    pub fn prune_unused_tensors(&mut self) {
        let used: BTreeSet<&String> = self.nodes.iter().flat_map(|n| n.params.values()).collect();
        let keep: BTreeSet<String> = used.into_iter().cloned().collect();
        self.tensors.retain(|k, _| keep.contains(k));
        self.param_quant.retain(|k, _| keep.contains(k));
    }

    /// Drops value annotations for edges no longer present.
    pub fn prune_unused_values(&mut self) {
        let mut live: BTreeSet<String> = self.inputs.iter().cloned().collect();
        for n in &self.nodes {
            live.extend(n.inputs.iter().cloned());
            live.extend(n.outputs.iter().cloned());
        }
        self.values.retain(|k, _| live.contains(k));
    }

    pub fn unique_name(&self, base: &str) -> String {
        if !self.tensors.contains_key(base) && !self.values.contains_key(base) {
            return base.to_string();
        }
        (1..)
            .map(|i| format!("{base}_{i}"))
            .find(|c| !self.tensors.contains_key(c) && !self.values.contains_key(c))
            .expect("unbounded search")
    }
}
