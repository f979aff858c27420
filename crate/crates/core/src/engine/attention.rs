//! Integer multi-head self-attention.

use super::lut::{softmax_codes, LutTable};
use super::requant::{apply_mulquant, linear_int};
use super::EngineError;
use crate::fuse::MulQuantParams;
use crate::ir::{Graph, Node};
use crate::qparams::QuantParams;

/// Rescaler prefixes of a lowered attention node, in evaluation order.
pub const RESCALERS: [&str; 6] = ["q.", "k.", "v.", "s.", "c.", "o."];

/// Everything the integer attention block needs: integer projection
/// weights `(out, in)`, one rescaler per stage and the softmax tables.
#[derive(Debug, Clone, PartialEq)]
pub struct IntAttention {
    pub heads: usize,
    pub wq: Vec<i64>,
    pub wk: Vec<i64>,
    pub wv: Vec<i64>,
    pub wo: Vec<i64>,
    /// Projections to q/k/v codes, along the feature axis.
    pub q: MulQuantParams,
    pub k: MulQuantParams,
    pub v: MulQuantParams,
    /// `S_q · S_k / (√d · S_scores)`.
    pub scores: MulQuantParams,
    /// `2^−prob_frac · S_v / S_ctx`.
    pub ctx: MulQuantParams,
    pub out: MulQuantParams,
    pub exp: LutTable,
    pub recip: LutTable,
    pub prob_frac: u8,
    pub in_zero: i64,
}

fn node_err(node: &str, message: impl Into<String>) -> EngineError {
    EngineError::Shape {
        node: node.into(),
        message: message.into(),
    }
}

impl IntAttention {
    /// Runs the block on `[B, T, E]` input codes.
    pub fn run(&self, node: &str, x: &[i64], shape: &[usize]) -> Result<Vec<i64>, EngineError> {
        if shape.len() != 3 || self.heads == 0 || !shape[2].is_multiple_of(self.heads) {
            return Err(node_err(node, format!("attention with {} heads over {shape:?}", self.heads)));
        }
        let (b, t, e) = (shape[0], shape[1], shape[2]);
        let dh = e / self.heads;
        let rows = b * t;
        let overflow = |v: i128| EngineError::Overflow {
            node: node.into(),
            value: v,
        };
        let project = |w: &[i64], zx: i64, input: &[i64], mq: &MulQuantParams| -> Result<Vec<i64>, EngineError> {
            let acc = linear_int(input, rows, zx, w, e).map_err(overflow)?;
            Ok(apply_mulquant(&acc, &[rows, e], mq))
        };
        let q = project(&self.wq, self.in_zero, x, &self.q)?;
        let k = project(&self.wk, self.in_zero, x, &self.k)?;
        let v = project(&self.wv, self.in_zero, x, &self.v)?;
        let (zq, zk, zv) = (self.q.out_qp.zero(), self.k.out_qp.zero(), self.v.out_qp.zero());

        let heads = self.heads;
        let mut scores = vec![0i64; b * heads * t * t];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..t {
                    let qi = &q[(bi * t + i) * e + h * dh..][..dh];
                    for j in 0..t {
                        let kj = &k[(bi * t + j) * e + h * dh..][..dh];
                        let acc: i64 = qi.iter().zip(kj).map(|(&a, &c)| (a - zq) * (c - zk)).sum();
                        scores[((bi * heads + h) * t + i) * t + j] = self.scores.apply(acc, 0);
                    }
                }
            }
        }
        let score_shape = [b, heads, t, t];
        let probs = softmax_codes(&scores, &score_shape, 3, &self.exp, &self.recip, self.prob_frac);

        let mut ctx = vec![0i64; rows * e];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..t {
                    let prow = &probs[((bi * heads + h) * t + i) * t..][..t];
                    for d in 0..dh {
                        let acc: i64 = (0..t).map(|j| prow[j] * (v[(bi * t + j) * e + h * dh + d] - zv)).sum();
                        ctx[(bi * t + i) * e + h * dh + d] = self.ctx.apply(acc, 0);
                    }
                }
            }
        }
        project(&self.wo, self.ctx.out_qp.zero(), &ctx, &self.out)
    }

    /// Stores the block on an attention node. Weights become parameters
    /// `wq`…`wo`; the rescalers and tables go under their stage prefixes.
    pub fn write(&self, g: &mut Graph, node: &mut Node, w_tensors: [crate::tensor::Tensor; 4]) {
        for (role, t) in ["wq", "wk", "wv", "wo"].iter().zip(w_tensors) {
            let name = g.add_tensor(format!("{}.{role}", node.id), t);
            node.params.insert(role.to_string(), name);
        }
        node.set_attr("heads", self.heads as i64);
        node.set_attr("probs.frac", self.prob_frac as i64);
        node.set_attr("in.zero", self.in_zero);
        for (prefix, mq) in RESCALERS.iter().zip(self.rescalers()) {
            mq.write(g, node, prefix);
        }
        self.exp.write(g, node, "exp.");
        self.recip.write(g, node, "recip.");
    }

    fn rescalers(&self) -> [&MulQuantParams; 6] {
        [&self.q, &self.k, &self.v, &self.scores, &self.ctx, &self.out]
    }

    /// Inverse of [`IntAttention::write`]; internal quantization comes from
    /// `node.quant`, the output from `out_qp`.
    pub fn read(g: &Graph, node: &Node, out_qp: &QuantParams) -> Result<Self, EngineError> {
        let stage_qp = |k: &str| {
            node.quant.get(k).cloned().ok_or_else(|| {
                EngineError::Annotation(format!("attention '{}' lacks '{k}' quantization", node.id))
            })
        };
        let weight = |role: &str| -> Result<Vec<i64>, EngineError> { Ok(g.param(node, role)?.as_int()?.to_vec()) };
        let mq = |prefix: &str, qp: QuantParams| MulQuantParams::read(g, node, prefix, qp).map_err(EngineError::from);
        let scores_qp = stage_qp("scores")?;
        Ok(IntAttention {
            heads: node.attr_int_or("heads", 1).max(1) as usize,
            wq: weight("wq")?,
            wk: weight("wk")?,
            wv: weight("wv")?,
            wo: weight("wo")?,
            q: mq("q.", stage_qp("q")?)?,
            k: mq("k.", stage_qp("k")?)?,
            v: mq("v.", stage_qp("v")?)?,
            scores: mq("s.", scores_qp.clone())?,
            ctx: mq("c.", stage_qp("ctx")?)?,
            out: mq("o.", out_qp.clone())?,
            exp: LutTable::read(g, node, "exp.", Some(diff_qp(&scores_qp)))?,
            recip: LutTable::read(g, node, "recip.", None)?,
            prob_frac: node.attr_int_or("probs.frac", 12) as u8,
            in_zero: node.attr_int_or("in.zero", 0),
        })
    }
}

/// Quantization of score differences `s − max(s)`: the score scale with a
/// zero offset.
pub fn diff_qp(score_qp: &QuantParams) -> QuantParams {
    QuantParams::per_tensor(score_qp.scale0(), 0, (score_qp.bits + 1).min(16), true, false)
}
