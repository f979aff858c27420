//! Hardware-facing artifacts: memory-initialisation text files (hex or
//! binary words), raw little-endian binaries, decimal JSON archives, and a
//! deployment bundle that reloads into an executable integer graph.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Attr, Graph, IrError, Node, OpKind, ValueInfo};
use crate::qparams::QuantParams;
use crate::tensor::{numel, DType, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("value {value} at element {index} does not fit {word_bits}-bit words")]
    Range { value: i64, index: usize, word_bits: u8 },
    #[error("word width {word_bits} is narrower than the {bits}-bit tensor '{tensor}'")]
    Width { tensor: String, bits: u8, word_bits: u8 },
    #[error("invalid export configuration: {0}")]
    Config(String),
    #[error("graph is not integer-only: tensor '{0}' is float")]
    NotFused(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed bundle: {0}")]
    Bundle(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ir(#[from] IrError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    #[default]
    Hex,
    Binstr,
    Rawbin,
    DecimalJson,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Hex => "hex",
            ExportFormat::Binstr => "bin.txt",
            ExportFormat::Rawbin => "bin",
            ExportFormat::DecimalJson => "json",
        }
    }
}

fn d_wpl() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    #[serde(default)]
    pub format: ExportFormat,
    /// Bits per word; `None` uses each tensor's own width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_bits: Option<u8>,
    #[serde(default = "d_wpl")]
    pub words_per_line: usize,
    /// Order in which tensor axes are unrolled, outermost first; `None` is
    /// row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_order: Option<Vec<usize>>,
    /// Pack sub-byte words contiguously in raw binaries.
    #[serde(default)]
    pub pack: bool,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig::new(ExportFormat::Hex)
    }
}

impl ExportConfig {
    pub fn new(format: ExportFormat) -> Self {
        ExportConfig {
            format,
            word_bits: None,
            words_per_line: 1,
            axis_order: None,
            pack: false,
        }
    }
}

/// Shape and integer format of an exported tensor, needed to parse it back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorLayout {
    pub shape: Vec<usize>,
    pub bits: u8,
    pub signed: bool,
}

impl TensorLayout {
    pub fn of(t: &Tensor) -> Result<Self, ExportError> {
        match t.dtype() {
            DType::Int { bits, signed } => Ok(TensorLayout {
                shape: t.shape().to_vec(),
                bits,
                signed,
            }),
            DType::F32 => Err(ExportError::Config("only integer tensors can be exported".into())),
        }
    }
}

fn word_bits(cfg: &ExportConfig, layout: &TensorLayout, name: &str) -> Result<u8, ExportError> {
    let w = cfg.word_bits.unwrap_or(layout.bits);
    if !(1..=64).contains(&w) {
        return Err(ExportError::Config(format!("word_bits {w} outside 1..=64")));
    }
    if w < layout.bits {
        return Err(ExportError::Width {
            tensor: name.into(),
            bits: layout.bits,
            word_bits: w,
        });
    }
    if cfg.words_per_line == 0 {
        return Err(ExportError::Config("words_per_line must be at least 1".into()));
    }
    Ok(w)
}

fn check_order(order: &[usize], rank: usize) -> Result<(), ExportError> {
    let mut seen = vec![false; rank];
    if order.len() != rank || order.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(ExportError::Config(format!("axis order {order:?} is not a permutation of {rank} axes")));
    }
    Ok(())
}

/// Flat source index of every element in unroll order.
fn unroll_indices(shape: &[usize], order: Option<&[usize]>) -> Result<Vec<usize>, ExportError> {
    let n = numel(shape);
    let Some(order) = order else {
        return Ok((0..n).collect());
    };
    check_order(order, shape.len())?;
    let strides = crate::tensor::strides(shape);
    let perm_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    let mut idx = vec![0usize; shape.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(order.iter().zip(&idx).map(|(&a, &i)| i * strides[a]).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < perm_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(out)
}

fn unrolled(t: &Tensor, cfg: &ExportConfig) -> Result<Vec<i64>, ExportError> {
    let v = t.as_int()?;
    Ok(unroll_indices(t.shape(), cfg.axis_order.as_deref())?
        .into_iter()
        .map(|i| v[i])
        .collect())
}

fn rerolled(words: Vec<i64>, layout: &TensorLayout, cfg: &ExportConfig) -> Result<Tensor, ExportError> {
    let idx = unroll_indices(&layout.shape, cfg.axis_order.as_deref())?;
    if words.len() != idx.len() {
        return Err(ExportError::Parse {
            line: 0,
            message: format!("expected {} values, found {}", idx.len(), words.len()),
        });
    }
    let mut v = vec![0i64; idx.len()];
    for (w, i) in words.into_iter().zip(idx) {
        v[i] = w;
    }
    Ok(Tensor::from_int(layout.shape.clone(), layout.bits, layout.signed, v)?)
}

/// Two's-complement word of `w` bits.
fn to_word(v: i64, index: usize, w: u8, signed: bool) -> Result<u64, ExportError> {
    let fits = if signed {
        w == 64 || (-(1i128 << (w - 1))..(1i128 << (w - 1))).contains(&(v as i128))
    } else {
        v >= 0 && (w == 64 || (v as u128) < (1u128 << w))
    };
    if !fits {
        return Err(ExportError::Range { value: v, index, word_bits: w });
    }
    let mask = if w == 64 { u64::MAX } else { (1u64 << w) - 1 };
    Ok(v as u64 & mask)
}

fn from_word(u: u64, w: u8, signed: bool) -> i64 {
    if signed && w < 64 && (u >> (w - 1)) & 1 == 1 {
        (u | !((1u64 << w) - 1)) as i64
    } else {
        u as i64
    }
}

fn export_text(t: &Tensor, cfg: &ExportConfig, digit: fn(u64, u8) -> String) -> Result<String, ExportError> {
    let layout = TensorLayout::of(t)?;
    let w = word_bits(cfg, &layout, "tensor")?;
    let mut out = String::new();
    for (i, chunk) in unrolled(t, cfg)?.chunks(cfg.words_per_line).enumerate() {
        let words: Vec<String> = chunk
            .iter()
            .enumerate()
            .map(|(j, &v)| to_word(v, i * cfg.words_per_line + j, w, layout.signed).map(|u| digit(u, w)))
            .collect::<Result<_, _>>()?;
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn parse_text(text: &str, layout: &TensorLayout, cfg: &ExportConfig, radix: u32) -> Result<Tensor, ExportError> {
    let w = word_bits(cfg, layout, "tensor")?;
    let digits = if radix == 16 { w.div_ceil(4) } else { w } as usize;
    let mut words = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        for tok in line.split_whitespace() {
            let bad = |message: String| ExportError::Parse { line: ln + 1, message };
            if tok.len() != digits {
                return Err(bad(format!("word '{tok}' should have {digits} digits")));
            }
            let u = u64::from_str_radix(tok, radix).map_err(|e| bad(format!("word '{tok}': {e}")))?;
            if w < 64 && u >> w != 0 {
                return Err(bad(format!("word '{tok}' exceeds {w} bits")));
            }
            words.push(from_word(u, w, layout.signed));
        }
    }
    rerolled(words, layout, cfg)
}

/// Uppercase hex words, zero-padded to `⌈word_bits/4⌉` digits, MSB first.
pub fn export_hex(t: &Tensor, cfg: &ExportConfig) -> Result<String, ExportError> {
    export_text(t, cfg, |u, w| format!("{:0width$X}", u, width = w.div_ceil(4) as usize))
}

pub fn parse_hex(text: &str, layout: &TensorLayout, cfg: &ExportConfig) -> Result<Tensor, ExportError> {
    parse_text(text, layout, cfg, 16)
}

/// `'0'`/`'1'` words of exactly `word_bits` digits, MSB first.
pub fn export_binstr(t: &Tensor, cfg: &ExportConfig) -> Result<String, ExportError> {
    export_text(t, cfg, |u, w| format!("{:0width$b}", u, width = w as usize))
}

pub fn parse_binstr(text: &str, layout: &TensorLayout, cfg: &ExportConfig) -> Result<Tensor, ExportError> {
    parse_text(text, layout, cfg, 2)
}

/// Little-endian words of `⌈word_bits/8⌉` bytes, or with `pack` a
/// contiguous little-endian bit stream (two 4-bit words per byte, low
/// nibble first).
pub fn export_rawbin(t: &Tensor, cfg: &ExportConfig) -> Result<Vec<u8>, ExportError> {
    let layout = TensorLayout::of(t)?;
    let w = word_bits(cfg, &layout, "tensor")?;
    let words = unrolled(t, cfg)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| to_word(v, i, w, layout.signed))
        .collect::<Result<Vec<_>, _>>()?;
    if cfg.pack {
        let mut out = vec![0u8; (words.len() * w as usize).div_ceil(8)];
        let mut bit = 0usize;
        for u in words {
            for b in 0..w as usize {
                if (u >> b) & 1 == 1 {
                    out[(bit + b) / 8] |= 1 << ((bit + b) % 8);
                }
            }
            bit += w as usize;
        }
        Ok(out)
    } else {
        let bytes = w.div_ceil(8) as usize;
        Ok(words.iter().flat_map(|u| u.to_le_bytes()[..bytes].to_vec()).collect())
    }
}

pub fn parse_rawbin(bytes: &[u8], layout: &TensorLayout, cfg: &ExportConfig) -> Result<Tensor, ExportError> {
    let w = word_bits(cfg, layout, "tensor")?;
    let n = numel(&layout.shape);
    let words: Vec<i64> = if cfg.pack {
        let need = (n * w as usize).div_ceil(8);
        if bytes.len() != need {
            return Err(ExportError::Parse {
                line: 0,
                message: format!("expected {need} bytes, found {}", bytes.len()),
            });
        }
        (0..n)
            .map(|k| {
                let mut u = 0u64;
                for b in 0..w as usize {
                    let bit = k * w as usize + b;
                    u |= (((bytes[bit / 8] >> (bit % 8)) & 1) as u64) << b;
                }
                from_word(u, w, layout.signed)
            })
            .collect()
    } else {
        let width = w.div_ceil(8) as usize;
        if bytes.len() != n * width {
            return Err(ExportError::Parse {
                line: 0,
                message: format!("expected {} bytes, found {}", n * width, bytes.len()),
            });
        }
        bytes
            .chunks_exact(width)
            .map(|c| {
                let mut buf = [0u8; 8];
                buf[..width].copy_from_slice(c);
                let u = u64::from_le_bytes(buf);
                if w < 64 && u >> w != 0 {
                    return Err(ExportError::Parse {
                        line: 0,
                        message: format!("word {u:#x} exceeds {w} bits"),
                    });
                }
                Ok(from_word(u, w, layout.signed))
            })
            .collect::<Result<_, _>>()?
    };
    rerolled(words, layout, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DecimalArchive {
    #[serde(flatten)]
    layout: TensorLayout,
    values: Vec<i64>,
}

/// `{"shape", "bits", "signed", "values"}` with values in unroll order.
pub fn export_decimal_json(t: &Tensor, cfg: &ExportConfig) -> Result<String, ExportError> {
    let layout = TensorLayout::of(t)?;
    let w = word_bits(cfg, &layout, "tensor")?;
    let values = unrolled(t, cfg)?;
    for (i, &v) in values.iter().enumerate() {
        to_word(v, i, w, layout.signed)?;
    }
    let mut s = serde_json::to_string(&DecimalArchive { layout, values }).expect("archive serializes");
    s.push('\n');
    Ok(s)
}

pub fn parse_decimal_json(text: &str, cfg: &ExportConfig) -> Result<Tensor, ExportError> {
    let a: DecimalArchive = serde_json::from_str(text).map_err(|e| ExportError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    rerolled(a.values, &a.layout, cfg)
}

/// One tensor in the configured format.
pub fn export_tensor(t: &Tensor, cfg: &ExportConfig) -> Result<Vec<u8>, ExportError> {
    Ok(match cfg.format {
        ExportFormat::Hex => export_hex(t, cfg)?.into_bytes(),
        ExportFormat::Binstr => export_binstr(t, cfg)?.into_bytes(),
        ExportFormat::Rawbin => export_rawbin(t, cfg)?,
        ExportFormat::DecimalJson => export_decimal_json(t, cfg)?.into_bytes(),
    })
}

/// Inverse of [`export_tensor`].
pub fn parse_tensor(bytes: &[u8], layout: &TensorLayout, cfg: &ExportConfig) -> Result<Tensor, ExportError> {
    let text = || {
        std::str::from_utf8(bytes).map_err(|e| ExportError::Parse {
            line: 0,
            message: e.to_string(),
        })
    };
    match cfg.format {
        ExportFormat::Hex => parse_hex(text()?, layout, cfg),
        ExportFormat::Binstr => parse_binstr(text()?, layout, cfg),
        ExportFormat::Rawbin => parse_rawbin(bytes, layout, cfg),
        ExportFormat::DecimalJson => {
            let t = parse_decimal_json(text()?, cfg)?;
            if t.shape() != layout.shape.as_slice() {
                return Err(ExportError::Bundle(format!("archive shape {:?} differs from {:?}", t.shape(), layout.shape)));
            }
            Ok(t)
        }
    }
}

// ---------------------------------------------------------------------------
// deployment bundle

pub const BUNDLE_MANIFEST: &str = "manifest.json";
pub const BUNDLE_VERSION: u32 = 1;

/// An `f32` written exactly as `code · 2^−frac`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleCode {
    pub code: i64,
    pub frac: i32,
}

impl ScaleCode {
    pub fn of(x: f32) -> Self {
        if x == 0.0 || !x.is_finite() {
            return ScaleCode { code: 0, frac: 0 };
        }
        let bits = x.to_bits();
        let exp = ((bits >> 23) & 0xFF) as i32;
        let (mut mant, mut e) = if exp == 0 {
            ((bits & 0x7F_FFFF) as i64, -149)
        } else {
            (((bits & 0x7F_FFFF) | 0x80_0000) as i64, exp - 150)
        };
        while mant & 1 == 0 {
            mant >>= 1;
            e += 1;
        }
        let sign = if x < 0.0 { -1 } else { 1 };
        ScaleCode {
            code: sign * mant,
            frac: -e,
        }
    }

    pub fn value(self) -> f32 {
        (self.code as f64 * 2f64.powi(-self.frac)) as f32
    }
}

/// Quantization parameters with scales as exact fixed-point codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantEntry {
    pub scale: Vec<ScaleCode>,
    pub zero_point: Vec<i64>,
    pub bits: u8,
    pub signed: bool,
    pub symmetric: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
}

impl From<&QuantParams> for QuantEntry {
    fn from(q: &QuantParams) -> Self {
        QuantEntry {
            scale: q.scale.iter().map(|&s| ScaleCode::of(s)).collect(),
            zero_point: q.zero_point.clone(),
            bits: q.bits,
            signed: q.signed,
            symmetric: q.symmetric,
            axis: q.axis,
        }
    }
}

impl From<&QuantEntry> for QuantParams {
    fn from(q: &QuantEntry) -> Self {
        QuantParams {
            scale: q.scale.iter().map(|s| s.value()).collect(),
            zero_point: q.zero_point.clone(),
            bits: q.bits,
            signed: q.signed,
            symmetric: q.symmetric,
            axis: q.axis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantEntry>,
}

/// A weight memory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub tensor: String,
    pub file: String,
    #[serde(flatten)]
    pub layout: TensorLayout,
    pub word_bits: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantEntry>,
}

/// Rescaler codes, lookup tables and other small integer parameters of
/// one layer, stored inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlineTensor {
    pub tensor: String,
    #[serde(flatten)]
    pub layout: TensorLayout,
    pub values: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: String,
    pub op: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Fixed-point formats, clamp ranges, table metadata.
    pub attrs: BTreeMap<String, Attr>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<String, WeightFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_file: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub quant: BTreeMap<String, QuantEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub export: ExportConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub edges: Vec<EdgeEntry>,
    pub layers: Vec<LayerEntry>,
}

const WEIGHT_ROLES: [&str; 5] = ["weight", "wq", "wk", "wv", "wo"];

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `g` as a deployment bundle under `dir`: `manifest.json`, one
/// memory file per weight under `weights/`, and per-layer rescaler codes
/// and tables under `scale/`. Output bytes depend only on `g` and `cfg`.
pub fn export_model(g: &Graph, dir: impl AsRef<Path>, cfg: &ExportConfig) -> Result<BundleManifest, ExportError> {
    let dir = dir.as_ref();
    if let Some((name, _)) = g.tensors.iter().find(|(_, t)| t.is_float()) {
        return Err(ExportError::NotFused(name.clone()));
    }
    if cfg.words_per_line == 0 {
        return Err(ExportError::Config("words_per_line must be at least 1".into()));
    }
    let mut files: BTreeMap<PathBuf, Vec<u8>> = BTreeMap::new();
    let mut layers = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let stem = file_stem(&node.id);
        let mut weights = BTreeMap::new();
        let mut inline = Vec::new();
        for (role, tname) in &node.params {
            let t = g.param(node, role)?;
            let layout = TensorLayout::of(t)?;
            if WEIGHT_ROLES.contains(&role.as_str()) {
                let file = if role == "weight" {
                    format!("weights/{stem}.{}", cfg.format.extension())
                } else {
                    format!("weights/{stem}.{role}.{}", cfg.format.extension())
                };
                let wb = word_bits(cfg, &layout, tname)?;
                let bytes = export_tensor(t, cfg).map_err(|e| match e {
                    ExportError::Range { value, index, word_bits } => ExportError::Bundle(format!(
                        "tensor '{tname}': value {value} at {index} exceeds {word_bits}-bit words"
                    )),
                    e => e,
                })?;
                files.insert(PathBuf::from(&file), bytes);
                weights.insert(
                    role.clone(),
                    WeightFile {
                        tensor: tname.clone(),
                        file,
                        layout,
                        word_bits: wb,
                        quant: g.param_quant.get(tname).map(QuantEntry::from),
                    },
                );
            } else {
                inline.push((
                    role.clone(),
                    InlineTensor {
                        tensor: tname.clone(),
                        layout,
                        values: t.as_int()?.to_vec(),
                    },
                ));
            }
        }
        let scale_file = if inline.is_empty() {
            None
        } else {
            let file = format!("scale/{stem}.json");
            let map: BTreeMap<String, InlineTensor> = inline.into_iter().collect();
            let mut text = serde_json::to_vec_pretty(&map).expect("scale file serializes");
            text.push(b'\n');
            files.insert(PathBuf::from(&file), text);
            Some(file)
        };
        layers.push(LayerEntry {
            id: node.id.clone(),
            op: node.kind.name().to_string(),
            inputs: node.inputs.clone(),
            outputs: node.outputs.clone(),
            attrs: node.attrs.clone(),
            weights,
            scale_file,
            quant: node.quant.iter().map(|(k, q)| (k.clone(), q.into())).collect(),
        });
    }
    let edges = g
        .values
        .iter()
        .map(|(name, v)| EdgeEntry {
            name: name.clone(),
            shape: v.shape.clone(),
            dtype: v.dtype,
            quant: v.quant.as_ref().map(QuantEntry::from),
        })
        .collect();
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        export: cfg.clone(),
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        edges,
        layers,
    };
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    files.insert(PathBuf::from(BUNDLE_MANIFEST), text);
    for (rel, bytes) in &files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(manifest)
}

/// Rebuilds the integer graph stored in a bundle.
pub fn import_bundle(dir: impl AsRef<Path>) -> Result<Graph, ExportError> {
    let dir = dir.as_ref();
    let path = dir.join(BUNDLE_MANIFEST);
    let text = fs::read(&path).map_err(io_err(&path))?;
    let m: BundleManifest = serde_json::from_slice(&text).map_err(|e| ExportError::Bundle(e.to_string()))?;
    if m.version != BUNDLE_VERSION {
        return Err(ExportError::Bundle(format!("unsupported bundle version {}", m.version)));
    }
    let mut g = Graph::new();
    g.inputs = m.inputs.clone();
    g.outputs = m.outputs.clone();
    for e in &m.edges {
        g.values.insert(
            e.name.clone(),
            ValueInfo {
                shape: e.shape.clone(),
                dtype: e.dtype,
                quant: e.quant.as_ref().map(QuantParams::from),
            },
        );
    }
    for layer in &m.layers {
        let kind: OpKind = layer.op.parse().map_err(|_| ExportError::Bundle(format!("unknown op '{}'", layer.op)))?;
        let mut node = Node::new(layer.id.clone(), kind);
        node.inputs = layer.inputs.clone();
        node.outputs = layer.outputs.clone();
        node.attrs = layer.attrs.clone();
        node.quant = layer.quant.iter().map(|(k, q)| (k.clone(), q.into())).collect();
        for (role, wf) in &layer.weights {
            let p = dir.join(&wf.file);
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            let mut cfg = m.export.clone();
            cfg.word_bits = Some(wf.word_bits);
            let t = parse_tensor(&bytes, &wf.layout, &cfg)?;
            g.tensors.insert(wf.tensor.clone(), t);
            if let Some(q) = &wf.quant {
                g.param_quant.insert(wf.tensor.clone(), q.into());
            }
            node.params.insert(role.clone(), wf.tensor.clone());
        }
        if let Some(file) = &layer.scale_file {
            let p = dir.join(file);
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            let map: BTreeMap<String, InlineTensor> =
                serde_json::from_slice(&bytes).map_err(|e| ExportError::Bundle(format!("{file}: {e}")))?;
            for (role, it) in map {
                let t = Tensor::from_int(it.layout.shape.clone(), it.layout.bits, it.layout.signed, it.values)?;
                g.tensors.insert(it.tensor.clone(), t);
                node.params.insert(role, it.tensor);
            }
        }
        g.nodes.push(node);
    }
    let violations = crate::ir::validate(&g);
    if !violations.is_empty() {
        return Err(ExportError::Ir(IrError::Invalid(
            violations.iter().map(ToString::to_string).collect(),
        )));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn int(shape: Vec<usize>, bits: u8, signed: bool, v: Vec<i64>) -> Tensor {
        Tensor::from_int(shape, bits, signed, v).unwrap()
    }

    #[test]
    fn word_examples() {
        let mut cfg = ExportConfig::new(ExportFormat::Hex);
        cfg.word_bits = Some(8);
        assert_eq!(export_hex(&int(vec![1], 8, true, vec![-3]), &cfg).unwrap(), "FD\n");
        cfg.word_bits = Some(12);
        assert_eq!(export_hex(&int(vec![1], 8, true, vec![26]), &cfg).unwrap(), "01A\n");
        cfg.word_bits = Some(8);
        assert_eq!(export_binstr(&int(vec![1], 8, true, vec![-3]), &cfg).unwrap(), "11111101\n");
        cfg.word_bits = Some(4);
        assert_eq!(export_binstr(&int(vec![1], 4, true, vec![5]), &cfg).unwrap(), "0101\n");
        cfg.word_bits = Some(4);
        assert!(matches!(
            export_hex(&int(vec![1], 8, true, vec![100]), &cfg),
            Err(ExportError::Width { .. })
        ));
    }

    #[test]
    fn nibble_packing() {
        let t = int(vec![2], 4, true, vec![1, 2]);
        let mut cfg = ExportConfig::new(ExportFormat::Rawbin);
        cfg.pack = true;
        assert_eq!(export_rawbin(&t, &cfg).unwrap(), vec![0x21]);
        cfg.pack = false;
        assert_eq!(export_rawbin(&t, &cfg).unwrap(), vec![0x01, 0x02]);
    }

    #[test]
    fn axis_order_roundtrip() {
        let t = int(vec![2, 3], 8, true, vec![0, 1, 2, 3, 4, 5]);
        let mut cfg = ExportConfig::new(ExportFormat::DecimalJson);
        cfg.axis_order = Some(vec![1, 0]);
        let s = export_decimal_json(&t, &cfg).unwrap();
        assert!(s.contains("[0,3,1,4,2,5]"), "{s}");
        assert_eq!(parse_decimal_json(&s, &cfg).unwrap(), t);
        cfg.axis_order = Some(vec![0, 0]);
        assert!(export_decimal_json(&t, &cfg).is_err());
    }

    #[test]
    fn scale_codes_are_exact() {
        for x in [1.0f32, 0.1, 3.0e-3, 1.0 / 127.0, 2.5e-40, 65504.0] {
            assert_eq!(ScaleCode::of(x).value(), x);
        }
    }
}
