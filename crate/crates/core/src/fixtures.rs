//! Randomly initialised models and inputs for tests, benchmarks and the
//! command-line `fixture` subcommand. Everything is a pure function of the
//! seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::ir::{infer_shapes, Graph, Node, OpKind};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` samples of `N(0, std²)`.
pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f32> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    let d = Uniform::new(lo, hi);
    (0..n).map(|_| d.sample(rng) as f32).collect()
}

fn tensor(shape: Vec<usize>, v: Vec<f32>) -> Tensor {
    Tensor::from_f32(shape, v).expect("fixture shapes are consistent")
}

/// Shape of a conv-bn-relu stack followed by a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnSpec {
    pub in_channels: usize,
    pub size: usize,
    /// Output channels and stride of each conv block.
    pub blocks: Vec<(usize, usize)>,
    pub classes: usize,
    /// Ratio between the largest and smallest batchnorm scale in every
    /// layer; `None` draws scales from `[0.5, 1.5]`.
    pub gamma_spread: Option<f64>,
}

impl Default for CnnSpec {
    fn default() -> Self {
        CnnSpec {
            in_channels: 3,
            size: 16,
            blocks: vec![(8, 1), (16, 2), (16, 2)],
            classes: 10,
            gamma_spread: None,
        }
    }
}

/// Conv(3×3)-batchnorm-ReLU blocks, flatten, linear. Input edge `x`,
/// output edge `logits`.
pub fn cnn(seed: u64, spec: &CnnSpec) -> Graph {
    let mut r = rng(seed);
    let mut g = Graph::new();
    g.add_input("x", vec![1, spec.in_channels, spec.size, spec.size]);
    let mut edge = "x".to_string();
    let mut c_in = spec.in_channels;
    let mut size = spec.size;
    for (i, &(c_out, stride)) in spec.blocks.iter().enumerate() {
        let fan_in = c_in * 9;
        let w = g.add_tensor(
            format!("conv{i}.weight"),
            tensor(vec![c_out, c_in, 3, 3], normal_vec(&mut r, c_out * fan_in, (2.0 / fan_in as f64).sqrt())),
        );
        let b = g.add_tensor(format!("conv{i}.bias"), tensor(vec![c_out], normal_vec(&mut r, c_out, 0.05)));
        let conv_out = format!("conv{i}");
        g.push(
            Node::new(format!("conv{i}"), OpKind::Conv2d)
                .with_io(&[&edge], &[&conv_out])
                .with_param("weight", w)
                .with_param("bias", b)
                .with_attr("stride", vec![stride as i64, stride as i64])
                .with_attr("padding", vec![1, 1]),
        );
        let gamma = match spec.gamma_spread {
            Some(spread) => {
                // log-spaced over the full ratio, shuffled across channels
                let mut v: Vec<f32> = (0..c_out)
                    .map(|c| {
                        let t = c as f64 / (c_out.max(2) - 1) as f64;
                        (spread.powf(t - 0.5)) as f32
                    })
                    .collect();
                for k in (1..v.len()).rev() {
                    v.swap(k, r.gen_range(0..=k));
                }
                v
            }
            None => uniform_vec(&mut r, c_out, 0.5, 1.5),
        };
        let params = [
            ("gamma", gamma),
            ("beta", normal_vec(&mut r, c_out, 0.1)),
            ("mean", normal_vec(&mut r, c_out, 0.1)),
            ("var", uniform_vec(&mut r, c_out, 0.5, 1.5)),
        ];
        let mut bn = Node::new(format!("bn{i}"), OpKind::BatchNorm).with_attr("eps", 1e-5);
        for (role, v) in params {
            let t = g.add_tensor(format!("bn{i}.{role}"), tensor(vec![c_out], v));
            bn = bn.with_param(role, t);
        }
        let bn_out = format!("bn{i}");
        g.push(bn.with_io(&[&conv_out], &[&bn_out]));
        let relu_out = format!("relu{i}");
        g.push(Node::new(format!("relu{i}"), OpKind::Relu).with_io(&[&bn_out], &[&relu_out]));
        edge = relu_out;
        c_in = c_out;
        size = (size + 2 - 3) / stride + 1;
    }
    g.push(Node::new("flatten", OpKind::Flatten).with_io(&[&edge], &["flat"]));
    let features = c_in * size * size;
    let w = g.add_tensor(
        "fc.weight",
        tensor(vec![spec.classes, features], normal_vec(&mut r, spec.classes * features, (1.0 / features as f64).sqrt())),
    );
    let b = g.add_tensor("fc.bias", tensor(vec![spec.classes], normal_vec(&mut r, spec.classes, 0.05)));
    g.push(
        Node::new("fc", OpKind::Linear)
            .with_io(&["flat"], &["logits"])
            .with_param("weight", w)
            .with_param("bias", b),
    );
    g.outputs = vec!["logits".into()];
    infer_shapes(&g).expect("fixture is well formed")
}

/// Three conv-bn-relu blocks and a linear classifier on 3×16×16 inputs.
pub fn cnn3(seed: u64) -> Graph {
    cnn(seed, &CnnSpec::default())
}

/// Like [`cnn3`] with batchnorm scales spanning `spread`× within each layer.
pub fn gamma_spread_cnn(seed: u64, spread: f64) -> Graph {
    cnn(
        seed,
        &CnnSpec {
            gamma_spread: Some(spread),
            ..CnnSpec::default()
        },
    )
}

/// Shape of a pre-norm transformer encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitSpec {
    pub tokens: usize,
    pub embed: usize,
    pub heads: usize,
    pub mlp: usize,
}

impl Default for VitSpec {
    fn default() -> Self {
        VitSpec {
            tokens: 8,
            embed: 16,
            heads: 2,
            mlp: 32,
        }
    }
}

/// `x + attn(ln1(x))`, then `h + fc2(gelu(fc1(ln2(h))))`. Input edge `x`
/// of shape `[1, tokens, embed]`, output edge `out`.
pub fn vit_block(seed: u64, spec: VitSpec) -> Graph {
    let mut r = rng(seed);
    let e = spec.embed;
    let mut g = Graph::new();
    g.add_input("x", vec![1, spec.tokens, e]);
    let ln = |g: &mut Graph, r: &mut ChaCha8Rng, id: &str, input: &str, output: &str| {
        let gamma = g.add_tensor(format!("{id}.gamma"), tensor(vec![e], uniform_vec(r, e, 0.8, 1.2)));
        let beta = g.add_tensor(format!("{id}.beta"), tensor(vec![e], normal_vec(r, e, 0.05)));
        g.push(
            Node::new(id, OpKind::LayerNorm)
                .with_io(&[input], &[output])
                .with_param("gamma", gamma)
                .with_param("beta", beta)
                .with_attr("eps", 1e-5),
        );
    };
    ln(&mut g, &mut r, "ln1", "x", "ln1");
    let mut attn = Node::new("attn", OpKind::Attention)
        .with_io(&["ln1"], &["attn"])
        .with_attr("heads", spec.heads as i64);
    let std = (1.0 / e as f64).sqrt();
    for role in ["wq", "wk", "wv", "wo"] {
        let t = g.add_tensor(format!("attn.{role}"), tensor(vec![e, e], normal_vec(&mut r, e * e, std)));
        attn = attn.with_param(role, t);
    }
    for role in ["bq", "bk", "bv", "bo"] {
        let t = g.add_tensor(format!("attn.{role}"), tensor(vec![e], normal_vec(&mut r, e, 0.02)));
        attn = attn.with_param(role, t);
    }
    g.push(attn);
    g.push(Node::new("res1", OpKind::Add).with_io(&["x", "attn"], &["h"]));
    ln(&mut g, &mut r, "ln2", "h", "ln2");
    let linear = |g: &mut Graph, r: &mut ChaCha8Rng, id: &str, input: &str, output: &str, o: usize, i: usize| {
        let w = g.add_tensor(
            format!("{id}.weight"),
            tensor(vec![o, i], normal_vec(r, o * i, (1.0 / i as f64).sqrt())),
        );
        let b = g.add_tensor(format!("{id}.bias"), tensor(vec![o], normal_vec(r, o, 0.02)));
        g.push(
            Node::new(id, OpKind::Linear)
                .with_io(&[input], &[output])
                .with_param("weight", w)
                .with_param("bias", b),
        );
    };
    linear(&mut g, &mut r, "fc1", "ln2", "fc1", spec.mlp, e);
    g.push(Node::new("gelu", OpKind::Gelu).with_io(&["fc1"], &["gelu"]));
    linear(&mut g, &mut r, "fc2", "gelu", "fc2", e, spec.mlp);
    g.push(Node::new("res2", OpKind::Add).with_io(&["h", "fc2"], &["out"]));
    g.outputs = vec!["out".into()];
    infer_shapes(&g).expect("fixture is well formed")
}

/// `count` standard-normal tensors of `shape`.
pub fn random_inputs(seed: u64, shape: &[usize], count: usize) -> Vec<Tensor> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    (0..count).map(|_| tensor(shape.to_vec(), normal_vec(&mut r, n, 1.0))).collect()
}

/// [`random_inputs`] stacked into one batch along a new leading axis
/// replacing `shape[0]`.
pub fn random_batch(seed: u64, shape: &[usize], batch: usize) -> Tensor {
    let mut s = shape.to_vec();
    s[0] = batch;
    let mut r = rng(seed);
    let n: usize = s.iter().product();
    tensor(s, normal_vec(&mut r, n, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate;

    #[test]
    fn fixtures_are_valid_and_seeded() {
        for g in [cnn3(1), gamma_spread_cnn(2, 100.0), vit_block(3, VitSpec::default())] {
            assert!(validate(&g).is_empty(), "{:?}", validate(&g));
        }
        assert_eq!(cnn3(5), cnn3(5));
        assert_ne!(cnn3(5), cnn3(6));
        assert_eq!(cnn3(1).edge_shape("logits"), Some(&[1usize, 10][..]));
    }

    #[test]
    fn gamma_spread_spans_the_ratio() {
        let g = gamma_spread_cnn(4, 100.0);
        let gamma = g.tensors["bn0.gamma"].as_f32().unwrap();
        let (lo, hi) = gamma.iter().fold((f32::MAX, 0f32), |(a, b), &v| (a.min(v), b.max(v)));
        assert!((hi / lo - 100.0).abs() < 1e-3);
    }
}
