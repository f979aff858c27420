//! Lowering of a calibrated graph to integer-only form. Normalisation is
//! folded either into the weights before quantization (prefuse) or into
//! per-channel fixed-point rescalers after the integer op (channelwise).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::attention::IntAttention;
use crate::engine::layernorm::{IntLayerNorm, VAR_FRAC};
use crate::engine::lut::{exp_lut_for_scores, gelu_lut, recip_lut, DEFAULT_ENTRIES, DEFAULT_FRAC};
use crate::engine::EngineError;
use crate::fixed::{alignment_shift, FixedPointCode, FixedPointError, FixedPointSpec};
use crate::ir::{infer_shapes, Graph, IrError, Node, OpKind};
use crate::qparams::QuantParams;
use crate::quant::observer::qparams_from_range;
use crate::quant::ops::{dequantize, fake_quant, quantize};
use crate::quant::QuantError;
use crate::tensor::{DType, Tensor, TensorError};

pub mod mulquant;
pub mod norm;
pub mod pattern;

pub use mulquant::{build_mulquant, MulQuantEncoding, MulQuantParams};
pub use norm::{bn_channelwise, bn_prefuse, NormParams};
pub use pattern::{find_units, Unit};

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("node '{node}' cannot be fused: {reason}")]
    Unfusable { node: String, reason: String },
    #[error("node '{node}': {message}")]
    Malformed { node: String, message: String },
    #[error("invalid scale: {0}")]
    Scale(String),
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("multiplier of channel {channel} overflows: {source}")]
    MultiplierOverflow {
        channel: usize,
        #[source]
        source: FixedPointError,
    },
    #[error("bias of channel {channel} overflows: {source}")]
    BiasOverflow {
        channel: usize,
        #[source]
        source: FixedPointError,
    },
    #[error("missing quantization annotation: {0}")]
    MissingAnnotation(String),
    #[error("node '{node}': {source}")]
    Layer {
        node: String,
        #[source]
        source: Box<FuseError>,
    },
    #[error(transparent)]
    Fixed(#[from] FixedPointError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Engine(Box<EngineError>),
}

impl From<EngineError> for FuseError {
    fn from(e: EngineError) -> Self {
        FuseError::Engine(Box::new(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    /// Fold normalisation into the weights; one scalar rescaler per layer.
    Prefuse,
    /// Keep normalisation as per-channel rescalers.
    #[default]
    Channelwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerNormMode {
    /// Statistics computed per row on the integer path.
    #[default]
    Instant,
    /// Calibration statistics folded into a rescaler.
    RunningStats,
}

fn d_entries() -> usize {
    DEFAULT_ENTRIES
}
fn d_frac() -> u8 {
    DEFAULT_FRAC
}
fn d_exp_clip() -> (f64, f64) {
    (-8.0, 0.0)
}
fn d_gelu_clip() -> (f64, f64) {
    (-4.0, 4.0)
}
fn d_int_bits() -> u8 {
    FixedPointSpec::INT16_Q12.int_bits
}
fn d_frac_bits() -> u8 {
    FixedPointSpec::INT16_Q12.frac_bits
}
fn d_true() -> bool {
    true
}

/// Lookup-table settings for integer nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LutConfig {
    #[serde(default = "d_entries")]
    pub entries: usize,
    /// Fraction bits of table outputs.
    #[serde(default = "d_frac")]
    pub frac: u8,
    /// Fraction bits of softmax probabilities.
    #[serde(default = "d_frac")]
    pub prob_frac: u8,
    #[serde(default = "d_exp_clip")]
    pub exp_clip: (f64, f64),
    #[serde(default = "d_gelu_clip")]
    pub gelu_clip: (f64, f64),
}

impl Default for LutConfig {
    fn default() -> Self {
        LutConfig {
            entries: DEFAULT_ENTRIES,
            frac: DEFAULT_FRAC,
            prob_frac: DEFAULT_FRAC,
            exp_clip: d_exp_clip(),
            gelu_clip: d_gelu_clip(),
        }
    }
}

/// Fusion settings; JSON form `{"mode": "channelwise", "int_bits": 4,
/// "frac_bits": 12}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseConfig {
    #[serde(default)]
    pub mode: FuseMode,
    #[serde(default = "d_int_bits")]
    pub int_bits: u8,
    #[serde(default = "d_frac_bits")]
    pub frac_bits: u8,
    /// Normalise multipliers by a power of two before encoding, so
    /// `frac_bits` counts significant bits.
    #[serde(default = "d_true")]
    pub align: bool,
    #[serde(default)]
    pub layernorm: LayerNormMode,
    #[serde(default)]
    pub lut: LutConfig,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            mode: FuseMode::Channelwise,
            int_bits: d_int_bits(),
            frac_bits: d_frac_bits(),
            align: true,
            layernorm: LayerNormMode::Instant,
            lut: LutConfig::default(),
        }
    }
}

impl FuseConfig {
    pub fn new(mode: FuseMode, int_bits: u8, frac_bits: u8) -> Self {
        FuseConfig {
            mode,
            int_bits,
            frac_bits,
            ..FuseConfig::default()
        }
    }

    pub fn encoding(&self) -> Result<MulQuantEncoding, FuseError> {
        Ok(MulQuantEncoding {
            fp: FixedPointSpec::new(self.int_bits, self.frac_bits)?,
            align: self.align,
        })
    }
}

/// Quantization of softmax probabilities with `frac` fraction bits.
pub fn prob_qp(frac: u8) -> QuantParams {
    QuantParams::per_tensor(2f32.powi(-(frac as i32)), 0, frac + 1, false, false)
}

fn missing(what: impl Into<String>) -> FuseError {
    FuseError::MissingAnnotation(what.into())
}

fn in_layer<T>(node: &Node, r: Result<T, FuseError>) -> Result<T, FuseError> {
    r.map_err(|e| match e {
        e @ (FuseError::Layer { .. } | FuseError::Unfusable { .. } | FuseError::Malformed { .. }) => e,
        e => FuseError::Layer {
            node: node.id.clone(),
            source: Box::new(e),
        },
    })
}

fn floats(t: &Tensor) -> Result<Vec<f64>, FuseError> {
    Ok(t.as_f32()?.iter().map(|&v| v as f64).collect())
}

struct Lowering<'a> {
    src: &'a Graph,
    out: Graph,
    cfg: &'a FuseConfig,
    enc: MulQuantEncoding,
}

impl Lowering<'_> {
    fn edge_qp(&self, edge: &str) -> Result<QuantParams, FuseError> {
        self.src
            .edge_quant(edge)
            .cloned()
            .ok_or_else(|| missing(format!("edge '{edge}'")))
    }

    fn add_int_tensor(&mut self, name: String, t: Tensor, qp: Option<QuantParams>) -> String {
        let name = self.out.add_tensor(name, t);
        if let Some(qp) = qp {
            self.out.param_quant.insert(name.clone(), qp);
        }
        name
    }

    fn mark_acc(&mut self, edge: &str) {
        self.out.values.entry(edge.to_string()).or_default().dtype = Some(DType::int(32, true));
    }

    /// Integer weight codes and their quantization for a weighted op.
    fn weight_codes(&self, node: &Node, role: &str) -> Result<(Tensor, QuantParams), FuseError> {
        let w = self.src.param(node, role)?;
        let qp = self
            .src
            .param_qp(node, role)
            .cloned()
            .ok_or_else(|| missing(format!("weight '{role}' of node '{}'", node.id)))?;
        let codes = match self.src.param_opt(node, &format!("{role}_int")) {
            Some(t) if !t.is_float() => t.clone(),
            _ => quantize(w, &qp)?,
        };
        Ok((codes, qp))
    }

    fn unit(&mut self, unit: &Unit) -> Result<(), FuseError> {
        let node = &self.src.nodes[unit.op];
        let in_edge = node.input(0)?.to_string();
        let in_qp = self.edge_qp(&in_edge)?;
        let out_qp = self.edge_qp(&unit.out_edge)?;
        let (mut codes, mut w_qp) = self.weight_codes(node, "weight")?;
        let channels = codes.shape()[0];
        let conv_bias = match self.src.param_opt(node, "bias") {
            Some(b) => floats(b)?,
            None => vec![0.0; channels],
        };
        let bn = match unit.bn {
            Some(b) => Some(NormParams::from_batchnorm(self.src, &self.src.nodes[b])?),
            None => None,
        };
        let (gamma, beta): (Option<Vec<f64>>, Vec<f64>) = match (&bn, self.cfg.mode) {
            (None, _) => (None, conv_bias),
            (Some(np), FuseMode::Channelwise) => {
                let (g, b) = bn_channelwise(np);
                let beta = b.iter().zip(&g).zip(&conv_bias).map(|((b, g), c)| b + g * c).collect();
                (Some(g), beta)
            }
            (Some(np), FuseMode::Prefuse) => {
                // normalisation still present: fold it now and requantize the
                // folded weights per tensor
                let (wf, b) = bn_prefuse(self.src.param(node, "weight")?, np)?;
                let (g, _) = bn_channelwise(np);
                let amax = wf.as_f32()?.iter().fold(0f32, |a, v| a.max(v.abs()));
                w_qp = qparams_from_range(&[-amax], &[amax], w_qp.bits, true, true, None)?.qp;
                codes = quantize(&wf, &w_qp)?;
                let beta = b.iter().zip(&g).zip(&conv_bias).map(|((b, g), c)| b + g * c).collect();
                (None, beta)
            }
        };
        let mut mq = build_mulquant(
            &w_qp.scale,
            in_qp.scale0(),
            gamma.as_deref(),
            &beta,
            self.enc,
            &out_qp,
            unit.relu.is_some(),
        )?;
        if node.kind == OpKind::Linear {
            mq.axis = -1;
        }
        let acc_edge = format!("{}.acc", node.outputs[0]);
        let wname = self.add_int_tensor(format!("{}.weight", node.id), codes, Some(w_qp));
        let mut op = Node::new(node.id.clone(), node.kind).with_param("weight", wname);
        op.inputs = vec![in_edge];
        op.outputs = vec![acc_edge.clone()];
        for k in ["stride", "padding", "groups"] {
            if let Some(a) = node.attrs.get(k) {
                op.attrs.insert(k.into(), a.clone());
            }
        }
        self.out.push(op);
        self.mark_acc(&acc_edge);
        let mut m = Node::new(format!("{}.mq", node.id), OpKind::MulQuant);
        m.inputs = vec![acc_edge];
        m.outputs = vec![unit.out_edge.clone()];
        mq.write(&mut self.out, &mut m, "");
        self.out.push(m);
        Ok(())
    }

    fn avgpool(&mut self, node: &Node) -> Result<(), FuseError> {
        let in_qp = self.edge_qp(node.input(0)?)?;
        let out_qp = self.edge_qp(node.output(0)?)?;
        let (kh, kw) = node.attr_pair("kernel", 2);
        let k = (kh * kw).max(1) as f32;
        let mq = build_mulquant(&[1.0 / k], in_qp.scale0(), None, &[0.0], self.enc, &out_qp, false)?;
        let acc = format!("{}.acc", node.outputs[0]);
        let mut pool = node.clone();
        pool.outputs = vec![acc.clone()];
        self.out.push(pool);
        self.mark_acc(&acc);
        let mut m = Node::new(format!("{}.mq", node.id), OpKind::MulQuant);
        m.inputs = vec![acc];
        m.outputs = node.outputs.clone();
        mq.write(&mut self.out, &mut m, "");
        self.out.push(m);
        Ok(())
    }

    fn add(&mut self, node: &Node) -> Result<(), FuseError> {
        if node.inputs.len() != 2 {
            return Err(FuseError::Malformed {
                node: node.id.clone(),
                message: "add takes two inputs".into(),
            });
        }
        let qa = self.edge_qp(&node.inputs[0])?;
        let qb = self.edge_qp(&node.inputs[1])?;
        let qo = self.edge_qp(&node.outputs[0])?;
        let ma = qa.scale0() as f64 / qo.scale0() as f64;
        let mb = qb.scale0() as f64 / qo.scale0() as f64;
        let fp = self.enc.fp;
        let frac = if self.enc.align {
            fp.frac_bits + alignment_shift(ma.max(mb), fp.frac_bits)
        } else {
            fp.frac_bits
        };
        let ca = FixedPointCode::encode_raw(ma, fp.int_bits, frac)
            .map_err(|e| FuseError::MultiplierOverflow { channel: 0, source: e })?;
        let cb = FixedPointCode::encode_raw(mb, fp.int_bits, frac)
            .map_err(|e| FuseError::MultiplierOverflow { channel: 1, source: e })?;
        let t = Tensor::from_int(vec![2], 32, true, vec![ca.code, cb.code])?;
        let name = self.add_int_tensor(format!("{}.multiplier", node.id), t, None);
        let (lo, hi) = qo.qrange();
        let mut n = Node::new(node.id.clone(), OpKind::Add)
            .with_param("multiplier", name)
            .with_attr("mult_frac", vec![frac as i64])
            .with_attr("out_zero", qo.zero())
            .with_attr("clamp", vec![lo, hi]);
        n.inputs = node.inputs.clone();
        n.outputs = node.outputs.clone();
        self.out.push(n);
        Ok(())
    }

    fn gelu(&mut self, node: &Node) -> Result<(), FuseError> {
        let in_qp = self.edge_qp(node.input(0)?)?;
        let out_qp = self.edge_qp(node.output(0)?)?;
        let lut = gelu_lut(&in_qp, self.cfg.lut.entries, self.cfg.lut.frac, self.cfg.lut.gelu_clip)?;
        let unit = 2f64.powi(-(lut.out_fp.frac_bits as i32)) as f32;
        let rq = build_mulquant(&[unit], 1.0, None, &[0.0], self.enc, &out_qp, false)?;
        let mut n = Node::new(node.id.clone(), OpKind::Gelu);
        n.inputs = node.inputs.clone();
        n.outputs = node.outputs.clone();
        lut.write(&mut self.out, &mut n, "gelu.");
        rq.write(&mut self.out, &mut n, "rq.");
        if !lut.is_aligned() {
            let mut id = build_mulquant(&[in_qp.scale0()], 1.0, None, &[0.0], self.enc, &out_qp, false)?;
            id.in_zero = in_qp.zero();
            id.write(&mut self.out, &mut n, "id.");
        }
        self.out.push(n);
        Ok(())
    }

    fn softmax(&mut self, node: &Node) -> Result<(), FuseError> {
        let in_qp = self.edge_qp(node.input(0)?)?;
        let out_qp = self.edge_qp(node.output(0)?)?;
        let pf = self.cfg.lut.prob_frac;
        if out_qp != prob_qp(pf) {
            return Err(FuseError::Scale(format!(
                "softmax '{}' output must be annotated with probabilities at {pf} fraction bits",
                node.id
            )));
        }
        let exp = exp_lut_for_scores(&in_qp, self.cfg.lut.entries, self.cfg.lut.frac, self.cfg.lut.exp_clip)?;
        let recip = recip_lut(self.cfg.lut.entries)?;
        let mut n = node.clone();
        n.set_attr("probs.frac", pf as i64);
        exp.write(&mut self.out, &mut n, "exp.");
        recip.write(&mut self.out, &mut n, "recip.");
        self.out.push(n);
        Ok(())
    }

    fn layernorm(&mut self, node: &Node) -> Result<(), FuseError> {
        let mode = if node.attr_str("stats") == Some("running") {
            LayerNormMode::RunningStats
        } else {
            self.cfg.layernorm
        };
        let lowered = layernorm_fold(self.src, node, mode, self.enc, &mut self.out)?;
        self.out.push(lowered);
        Ok(())
    }

    fn attention(&mut self, node: &Node) -> Result<(), FuseError> {
        let in_qp = self.edge_qp(node.input(0)?)?;
        let out_qp = self.edge_qp(node.output(0)?)?;
        let stage = |k: &str| {
            node.quant
                .get(k)
                .cloned()
                .ok_or_else(|| missing(format!("stage '{k}' of attention '{}'", node.id)))
        };
        let (q_qp, k_qp, v_qp, s_qp, p_qp, c_qp) =
            (stage("q")?, stage("k")?, stage("v")?, stage("scores")?, stage("probs")?, stage("ctx")?);
        let pf = self.cfg.lut.prob_frac;
        if p_qp != prob_qp(pf) {
            return Err(FuseError::Scale(format!("attention '{}' probabilities must use {pf} fraction bits", node.id)));
        }
        let e = in_qp_dim(self.src, node)?;
        let heads = node.attr_int_or("heads", 1).max(1) as usize;
        let dh = (e / heads).max(1) as f64;
        let bias = |role: &str| -> Result<Vec<f64>, FuseError> {
            match self.src.param_opt(node, role) {
                Some(t) => floats(t),
                None => Ok(vec![0.0; e]),
            }
        };
        let mut ws = Vec::new();
        let mut qps = Vec::new();
        for role in ["wq", "wk", "wv", "wo"] {
            let (c, q) = self.weight_codes(node, role)?;
            ws.push(c);
            qps.push(q);
        }
        let proj = |wqp: &QuantParams, s_in: f32, b: &[f64], out: &QuantParams| -> Result<MulQuantParams, FuseError> {
            let mut m = build_mulquant(&wqp.scale, s_in, None, b, self.enc, out, false)?;
            m.axis = -1;
            Ok(m)
        };
        let q = proj(&qps[0], in_qp.scale0(), &bias("bq")?, &q_qp)?;
        let k = proj(&qps[1], in_qp.scale0(), &bias("bk")?, &k_qp)?;
        let v = proj(&qps[2], in_qp.scale0(), &bias("bv")?, &v_qp)?;
        let s_mult = (q_qp.scale0() as f64 * k_qp.scale0() as f64 / dh.sqrt()) as f32;
        let scores = build_mulquant(&[s_mult], 1.0, None, &[0.0], self.enc, &s_qp, false)?;
        let c_mult = (2f64.powi(-(pf as i32)) * v_qp.scale0() as f64) as f32;
        let ctx = build_mulquant(&[c_mult], 1.0, None, &[0.0], self.enc, &c_qp, false)?;
        let out = proj(&qps[3], c_qp.scale0(), &bias("bo")?, &out_qp)?;
        let att = IntAttention {
            heads,
            wq: ws[0].as_int()?.to_vec(),
            wk: ws[1].as_int()?.to_vec(),
            wv: ws[2].as_int()?.to_vec(),
            wo: ws[3].as_int()?.to_vec(),
            q,
            k,
            v,
            scores,
            ctx,
            out,
            exp: exp_lut_for_scores(&s_qp, self.cfg.lut.entries, self.cfg.lut.frac, self.cfg.lut.exp_clip)?,
            recip: recip_lut(self.cfg.lut.entries)?,
            prob_frac: pf,
            in_zero: in_qp.zero(),
        };
        let mut n = Node::new(node.id.clone(), OpKind::Attention);
        n.inputs = node.inputs.clone();
        n.outputs = node.outputs.clone();
        n.quant = node.quant.clone();
        let [a, b, c, d]: [Tensor; 4] = ws.try_into().expect("four projections");
        att.write(&mut self.out, &mut n, [a, b, c, d]);
        for (role, qp) in ["wq", "wk", "wv", "wo"].iter().zip(qps) {
            self.out.param_quant.insert(n.params[*role].clone(), qp);
        }
        self.out.push(n);
        Ok(())
    }
}

fn in_qp_dim(g: &Graph, node: &Node) -> Result<usize, FuseError> {
    Ok(g.param(node, "wq")?.shape()[0])
}

/// Lowers a calibrated graph to integer-only form: quant stubs on the
/// inputs, integer conv/linear ops followed by fixed-point rescalers,
/// lookup-table nonlinearities, integer layernorm and attention, and
/// dequant stubs on the outputs. Every parameter of the result is an
/// integer tensor.
pub fn fuse_graph(g: &Graph, cfg: &FuseConfig) -> Result<Graph, FuseError> {
    let src = infer_shapes(g)?;
    let enc = cfg.encoding()?;
    if let Some(n) = src
        .nodes
        .iter()
        .find(|n| matches!(n.kind, OpKind::MulQuant | OpKind::QuantStub | OpKind::DequantStub))
    {
        return Err(FuseError::Unfusable {
            node: n.id.clone(),
            reason: "graph is already lowered".into(),
        });
    }
    let units = find_units(&src);
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (ui, u) in units.iter().enumerate() {
        for n in u.nodes() {
            owner.insert(n, ui);
        }
    }
    let mut low = Lowering {
        src: &src,
        out: Graph::new(),
        cfg,
        enc,
    };

    let mut renamed: BTreeMap<String, String> = BTreeMap::new();
    for input in &src.inputs {
        let qp = low.edge_qp(input)?;
        low.out.add_input(input, src.edge_shape(input).unwrap_or(&[]).to_vec());
        low.out.set_edge_quant(input, qp.clone());
        let q = format!("{input}.q");
        low.out.push(Node::new(format!("{input}.quantstub"), OpKind::QuantStub).with_io(&[input], &[&q]));
        low.out.set_edge_quant(&q, qp);
        renamed.insert(input.clone(), q);
    }

    for (i, node) in src.nodes.iter().enumerate() {
        let start = low.out.nodes.len();
        let r = match (owner.get(&i), node.kind) {
            (Some(&u), _) if units[u].op == i => low.unit(&units[u]),
            (Some(_), _) => Ok(()),
            (None, OpKind::BatchNorm) => Err(FuseError::Unfusable {
                node: node.id.clone(),
                reason: "batchnorm without a preceding conv2d/linear".into(),
            }),
            (None, OpKind::Relu | OpKind::MaxPool | OpKind::Flatten) => {
                low.out.push(node.clone());
                Ok(())
            }
            (None, OpKind::AvgPool) => low.avgpool(node),
            (None, OpKind::Add) => low.add(node),
            (None, OpKind::Gelu) => low.gelu(node),
            (None, OpKind::Softmax) => low.softmax(node),
            (None, OpKind::LayerNorm) => low.layernorm(node),
            (None, OpKind::Attention) => low.attention(node),
            (None, k) => Err(FuseError::Unfusable {
                node: node.id.clone(),
                reason: format!("unexpected {k}"),
            }),
        };
        in_layer(node, r)?;
        for n in &mut low.out.nodes[start..] {
            for inp in &mut n.inputs {
                if let Some(r) = renamed.get(inp) {
                    *inp = r.clone();
                }
            }
        }
    }

    let mut outputs = Vec::new();
    for o in &src.outputs {
        let dq = format!("{o}.dq");
        low.out
            .push(Node::new(format!("{o}.dequantstub"), OpKind::DequantStub).with_io(&[o], &[&dq]));
        outputs.push(dq);
    }
    low.out.outputs = outputs;

    let mut out = low.out;
    for (edge, info) in &src.values {
        if let Some(qp) = &info.quant {
            if out.values.contains_key(edge) && out.values[edge].quant.is_none() {
                out.set_edge_quant(edge, qp.clone());
            }
        }
    }
    for n in &out.nodes {
        if matches!(n.kind, OpKind::MaxPool | OpKind::Flatten | OpKind::Relu)
            && out.edge_quant(&n.outputs[0]).is_none() {
                if let Some(qp) = out.edge_quant(&n.inputs[0]).cloned() {
                    out.values.entry(n.outputs[0].clone()).or_default().quant = Some(qp);
                }
            }
    }
    if let Some((name, _)) = out.tensors.iter().find(|(_, t)| t.is_float()) {
        return Err(FuseError::Malformed {
            node: name.clone(),
            message: "float tensor left after lowering".into(),
        });
    }
    out.prune_unused_values();
    infer_shapes(&out).map_err(FuseError::from)
}

/// Rewrites a layernorm node. Instant mode yields an integer layernorm
/// carrying `γ / S_out` and `β / S_out + Z_out` codes; running-stats mode
/// folds the calibration mean and variance into a rescaler, exactly like a
/// batchnorm fold.
pub fn layernorm_fold(
    g: &Graph,
    node: &Node,
    mode: LayerNormMode,
    enc: MulQuantEncoding,
    out: &mut Graph,
) -> Result<Node, FuseError> {
    let in_qp = g
        .edge_quant(node.input(0)?)
        .cloned()
        .ok_or_else(|| missing(format!("input of layernorm '{}'", node.id)))?;
    let out_qp = g
        .edge_quant(node.output(0)?)
        .cloned()
        .ok_or_else(|| missing(format!("output of layernorm '{}'", node.id)))?;
    let gamma = floats(g.param(node, "gamma")?)?;
    let beta = floats(g.param(node, "beta")?)?;
    let eps = node.attr_float("eps").unwrap_or(1e-5);
    let s_out = out_qp.scale0() as f64;
    match mode {
        LayerNormMode::RunningStats => {
            let (mean, var) = match (g.param_opt(node, "running_mean"), g.param_opt(node, "running_var")) {
                (Some(m), Some(v)) => (floats(m)?[0], floats(v)?[0]),
                _ => {
                    return Err(missing(format!(
                        "running statistics of layernorm '{}' (calibrate first)",
                        node.id
                    )))
                }
            };
            let inv = 1.0 / (var + eps).sqrt();
            let gs: Vec<f64> = gamma.iter().map(|g| g * inv).collect();
            let bs: Vec<f64> = beta.iter().zip(&gs).map(|(b, g)| b - g * mean).collect();
            let mut mq = build_mulquant(&[in_qp.scale0()], 1.0, Some(&gs), &bs, enc, &out_qp, false)?;
            mq.in_zero = in_qp.zero();
            mq.axis = -1;
            let mut n = Node::new(node.id.clone(), OpKind::MulQuant);
            n.inputs = node.inputs.clone();
            n.outputs = node.outputs.clone();
            mq.write(out, &mut n, "");
            Ok(n)
        }
        LayerNormMode::Instant => {
            // γ / S_out scales a unitless value, so it is routinely far above
            // the rescaler range; the integer part widens to fit it
            let peak = gamma.iter().fold(0f64, |a, g| a.max((g / s_out).abs()));
            let need = (peak + 1.0).log2().ceil() as u8 + 1;
            let wide = MulQuantEncoding {
                fp: FixedPointSpec::new(need.max(enc.fp.int_bits).min(24), enc.fp.frac_bits)?,
                align: enc.align,
            };
            let mut gcodes = Vec::with_capacity(gamma.len());
            for (c, gv) in gamma.iter().enumerate() {
                gcodes.push(
                    wide.encode_multiplier(gv / s_out)
                        .map_err(|e| FuseError::MultiplierOverflow { channel: c, source: e })?,
                );
            }
            let mut bcodes = Vec::with_capacity(beta.len());
            for (c, b) in beta.iter().enumerate() {
                bcodes.push(
                    enc.encode_bias(b / s_out + out_qp.zero() as f64)
                        .map_err(|e| FuseError::BiasOverflow { channel: c, source: e })?,
                );
            }
            let s_in = in_qp.scale0() as f64;
            let eps_code = ((eps / (s_in * s_in)) * 2f64.powi(VAR_FRAC as i32)).round().clamp(1.0, i64::MAX as f64) as i64;
            let ln = IntLayerNorm {
                gamma: gcodes,
                beta: bcodes,
                eps_code,
                in_zero: in_qp.zero(),
                clamp: out_qp.qrange(),
            };
            let mut n = Node::new(node.id.clone(), OpKind::LayerNorm);
            n.inputs = node.inputs.clone();
            n.outputs = node.outputs.clone();
            n.set_attr("eps", eps);
            ln.write(out, &mut n);
            Ok(n)
        }
    }
}

/// Folds every conv/linear → batchnorm pair into the weights and bias of
/// the conv/linear, in float. Quantizing the result is the prefuse flow.
pub fn prefuse_graph(g: &Graph) -> Result<Graph, FuseError> {
    let mut out = g.clone();
    let mut drop = Vec::new();
    let mut rename: BTreeMap<String, String> = BTreeMap::new();
    for u in find_units(g) {
        let Some(b) = u.bn else { continue };
        let node = &g.nodes[u.op];
        let bn = &g.nodes[b];
        let np = NormParams::from_batchnorm(g, bn)?;
        let (wf, beta) = bn_prefuse(g.param(node, "weight")?, &np)?;
        let (gs, _) = bn_channelwise(&np);
        let bias: Vec<f32> = match g.param_opt(node, "bias") {
            Some(t) => t
                .as_f32()?
                .iter()
                .zip(&gs)
                .zip(&beta)
                .map(|((c, g), b)| (b + g * *c as f64) as f32)
                .collect(),
            None => beta.iter().map(|&b| b as f32).collect(),
        };
        let n = bias.len();
        let wname = out.unique_name(&format!("{}.weight_fused", node.id));
        out.add_tensor(wname.clone(), wf);
        let bname = out.unique_name(&format!("{}.bias_fused", node.id));
        out.add_tensor(bname.clone(), Tensor::from_f32(vec![n], bias)?);
        let on = &mut out.nodes[u.op];
        on.params.insert("weight".into(), wname);
        on.params.insert("bias".into(), bname);
        rename.insert(bn.outputs[0].clone(), node.outputs[0].clone());
        drop.push(b);
    }
    drop.sort_unstable();
    for b in drop.into_iter().rev() {
        out.nodes.remove(b);
    }
    // the conv/linear now produces what the batchnorm used to
    for n in &mut out.nodes {
        for o in &mut n.outputs {
            if let Some((bn_out, _)) = rename.iter().find(|(_, conv_out)| *conv_out == o) {
                *o = bn_out.clone();
            }
        }
    }
    out.prune_unused_tensors();
    out.prune_unused_values();
    Ok(infer_shapes(&out)?)
}

/// Weight-quantization error of the two fusion schemes on one layer, both
/// measured on the fused weights `γ* · W`: prefuse quantizes `γ* · W` with
/// one per-tensor scale, channelwise quantizes `W` per output channel and
/// applies `γ*` afterwards in the rescaler. Returns `(prefuse, channelwise)`.
pub fn weight_quant_mse(w: &Tensor, np: &NormParams, bits: u8) -> Result<(f64, f64), FuseError> {
    let (wf, _) = bn_prefuse(w, np)?;
    let (gs, _) = bn_channelwise(np);
    let target = wf.as_f32()?;
    let amax = target.iter().fold(0f32, |a, v| a.max(v.abs()));
    let pt = qparams_from_range(&[-amax], &[amax], bits, true, true, None)?.qp;
    let pre = fake_quant(&wf, &pt)?;
    let o = w.shape()[0];
    let per = w.numel() / o.max(1);
    let data = w.as_f32()?;
    let (mins, maxs): (Vec<f32>, Vec<f32>) = data
        .chunks(per)
        .map(|c| {
            let a = c.iter().fold(0f32, |a, v| a.max(v.abs()));
            (-a, a)
        })
        .unzip();
    let pc = qparams_from_range(&mins, &maxs, bits, true, true, Some(0))?.qp;
    let cw = dequantize(&quantize(w, &pc)?, &pc)?;
    let cw = cw.as_f32()?;
    let n = target.len().max(1) as f64;
    let mut e_pre = 0.0;
    let mut e_cw = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let t = t as f64;
        e_pre += (pre.as_f32()?[i] as f64 - t).powi(2);
        e_cw += (gs[i / per] * cw[i] as f64 - t).powi(2);
    }
    Ok((e_pre / n, e_cw / n))
}

/// Attribute lookups used by exporters: the rescaler of `node` stored
/// under `prefix`, if any.
pub fn node_rescaler(g: &Graph, node: &Node, prefix: &str) -> Option<MulQuantParams> {
    let qp = g.edge_quant(node.outputs.first()?)?.clone();
    MulQuantParams::read(g, node, prefix, qp).ok()
}
