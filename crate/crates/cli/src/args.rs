use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

#[derive(Debug, Parser)]
#[command(name = "intlower", version, about = "Quantize, fuse, verify and export CNN/ViT graphs for integer-only hardware")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Observe activations and attach quantization parameters
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Zero float weights by magnitude or in an N:M pattern
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sparsity: SparsityArgs,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Lower an annotated graph to integer-only kernels
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Compare a lowered graph against its fake-quantized reference
    Verify {
        /// Calibrated (fake-quant) graph
        #[arg(long)]
        reference: PathBuf,
        /// Lowered graph
        #[arg(long)]
        model: PathBuf,
        /// Write the full report here as JSON
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Write a lowered graph as a deployment bundle
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Execute a graph on a directory of input tensors
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Store the outputs here as a tensor directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate, optionally prune, fuse, verify and export in one go
    Pipeline {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sparsity: SparsityArgs,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Write a randomly initialised model and calibration data
    Fixture {
        #[arg(long, value_parser = ["cnn", "vit", "gamma-spread"], default_value = "cnn")]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ratio of largest to smallest batchnorm scale for `gamma-spread`
        #[arg(long, default_value_t = 100.0)]
        spread: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write calibration batches to this directory
        #[arg(long)]
        calib_out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        calib_batches: usize,
        #[arg(long, default_value_t = 8)]
        calib_batch_size: usize,
    },
}

/// Settings shared by the stage commands. Each mirrors a field of the
/// pipeline config; values from `--config` take precedence.
#[derive(Debug, Args, Default)]
pub struct Knobs {
    /// JSON pipeline configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub calib_data: Option<PathBuf>,
    #[arg(long)]
    pub calib_batches: Option<usize>,
    #[arg(long)]
    pub calib_batch_size: Option<usize>,

    #[arg(long)]
    pub w_bits: Option<u8>,
    #[arg(long)]
    pub a_bits: Option<u8>,
    #[arg(long, value_parser = ["minmax", "mse", "adaround"])]
    pub method: Option<String>,
    /// One weight scale per tensor instead of per output channel
    #[arg(long)]
    pub per_tensor: bool,
    #[arg(long)]
    pub adaround_iters: Option<usize>,

    #[arg(long, value_parser = ["prefuse", "channelwise"])]
    pub fuse_mode: Option<String>,
    #[arg(long)]
    pub int_bits: Option<u8>,
    #[arg(long)]
    pub frac_bits: Option<u8>,
    #[arg(long, value_parser = ["instant", "running_stats"])]
    pub layernorm: Option<String>,

    #[arg(long, value_parser = ["hex", "binstr", "rawbin", "decimal_json"])]
    pub format: Option<String>,
    #[arg(long)]
    pub word_bits: Option<u8>,
    #[arg(long)]
    pub words_per_line: Option<usize>,
    /// Comma-separated unroll order of tensor axes
    #[arg(long, value_delimiter = ',')]
    pub axis_order: Option<Vec<usize>>,
    #[arg(long)]
    pub pack: bool,

    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub verify_data: Option<PathBuf>,
    #[arg(long)]
    pub max_lsb: Option<f64>,
    #[arg(long)]
    pub min_agreement: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct SparsityArgs {
    #[arg(long = "mode", visible_alias = "sparsity-mode", value_parser = ["nm", "elementwise"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Target fraction of zeros for elementwise pruning
    #[arg(long)]
    pub sparsity: Option<f64>,
}

fn put(m: &mut Map<String, Value>, path: &[&str], v: impl Into<Value>) {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut slot = m;
    for p in parents {
        slot = slot
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("config sections are objects");
    }
    slot.insert(last.to_string(), v.into());
}

macro_rules! opt {
    ($m:expr, $field:expr, $($key:literal).+) => {
        if let Some(v) = &$field {
            put($m, &[$($key),+], json!(v));
        }
    };
}

impl Knobs {
    pub fn to_json(&self) -> Map<String, Value> {
        let mut m = Map::new();
        opt!(&mut m, self.seed, "seed");
        opt!(&mut m, self.calib_data, "calib_data");
        opt!(&mut m, self.calib_batches, "calib_batches");
        opt!(&mut m, self.calib_batch_size, "calib_batch_size");
        opt!(&mut m, self.w_bits, "quant"."w_bits");
        opt!(&mut m, self.a_bits, "quant"."a_bits");
        opt!(&mut m, self.method, "quant"."method");
        opt!(&mut m, self.adaround_iters, "quant"."adaround"."iters");
        if self.per_tensor {
            put(&mut m, &["quant", "per_channel_w"], false);
        }
        opt!(&mut m, self.fuse_mode, "fuse"."mode");
        opt!(&mut m, self.int_bits, "fuse"."int_bits");
        opt!(&mut m, self.frac_bits, "fuse"."frac_bits");
        opt!(&mut m, self.layernorm, "fuse"."layernorm");
        opt!(&mut m, self.format, "export"."format");
        opt!(&mut m, self.word_bits, "export"."word_bits");
        opt!(&mut m, self.words_per_line, "export"."words_per_line");
        opt!(&mut m, self.axis_order, "export"."axis_order");
        if self.pack {
            put(&mut m, &["export", "pack"], true);
        }
        opt!(&mut m, self.samples, "verify"."samples");
        opt!(&mut m, self.verify_data, "verify"."data");
        opt!(&mut m, self.max_lsb, "verify"."max_lsb");
        opt!(&mut m, self.min_agreement, "verify"."min_agreement");
        m
    }
}

impl SparsityArgs {
    pub fn merge_into(&self, m: &mut Map<String, Value>) {
        if let Some(mode) = &self.mode {
            put(m, &["sparsity", "mode"], mode.as_str());
            if let Some(s) = self.sparsity {
                put(m, &["sparsity", "target_sparsity"], s);
            }
            opt!(m, self.n, "sparsity"."n");
            opt!(m, self.m, "sparsity"."m");
        }
    }

    pub fn given(&self) -> bool {
        self.mode.is_some() || self.n.is_some() || self.m.is_some() || self.sparsity.is_some()
    }
}
