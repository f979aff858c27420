//! On-disk interchange container: a directory (or `.zip` archive) holding
//! `manifest.json` and one raw little-endian blob per tensor under
//! `tensors/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Attr, Graph, IrError, Node, OpKind, ValueInfo};
use crate::qparams::QuantParams;
use crate::tensor::{DType, Tensor, TensorData};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub inputs: Vec<ValueEntry>,
    pub outputs: Vec<String>,
    pub nodes: Vec<NodeEntry>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEntry {
    pub name: String,
    #[serde(flatten)]
    pub info: ValueInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: String,
    pub op: String,
    #[serde(default)]
    pub attrs: BTreeMap<String, Attr>,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<ValueEntry>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub quant: BTreeMap<String, QuantParams>,
}

/// One tensor blob. `dtype` is the storage type; `bits`/`signed` the
/// logical integer format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub bits: u8,
    pub signed: bool,
    pub file: String,
    pub byte_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
}

impl TensorEntry {
    pub fn describe(name: &str, t: &Tensor, file: String) -> Self {
        let dtype = t.dtype();
        let (bits, signed) = match dtype {
            DType::F32 => (32, true),
            DType::Int { bits, signed } => (bits, signed),
        };
        TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: dtype.storage_name().to_string(),
            bits,
            signed,
            file,
            byte_len: t.numel() * dtype.storage_bytes(),
            quant: None,
        }
    }

    fn logical_dtype(&self) -> Result<DType, IrError> {
        let d = if self.dtype == "float32" {
            DType::F32
        } else {
            DType::int(self.bits, self.signed)
        };
        if d.storage_name() != self.dtype {
            return Err(IrError::Manifest(format!(
                "tensor '{}': dtype '{}' does not match bits={} signed={}",
                self.name, self.dtype, self.bits, self.signed
            )));
        }
        Ok(d)
    }
}

/// Little-endian, row-major bytes of a tensor in its storage width.
pub fn encode_blob(t: &Tensor) -> Vec<u8> {
    match t.data() {
        TensorData::Float(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        TensorData::Int { values, .. } => {
            let width = t.dtype().storage_bytes();
            let mut out = Vec::with_capacity(values.len() * width);
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes()[..width]);
            }
            out
        }
    }
}

/// Inverse of [`encode_blob`].
pub fn decode_blob(entry: &TensorEntry, bytes: &[u8]) -> Result<Tensor, IrError> {
    let dtype = entry.logical_dtype()?;
    let n: usize = entry.shape.iter().product();
    let width = dtype.storage_bytes();
    let expected = n * width;
    if bytes.len() != expected || entry.byte_len != expected {
        return Err(IrError::ByteCount {
            tensor: entry.name.clone(),
            expected,
            actual: bytes.len(),
        });
    }
    let wrap = |source| IrError::Tensor {
        tensor: entry.name.clone(),
        source,
    };
    match dtype {
        DType::F32 => {
            let v = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_f32(entry.shape.clone(), v).map_err(wrap)
        }
        DType::Int { bits, signed } => {
            let v = bytes
                .chunks_exact(width)
                .map(|c| {
                    let mut buf = [0u8; 8];
                    buf[..width].copy_from_slice(c);
                    let raw = u64::from_le_bytes(buf);
                    if signed {
                        let shift = 64 - 8 * width as u32;
                        ((raw << shift) as i64) >> shift
                    } else {
                        raw as i64
                    }
                })
                .collect();
            Tensor::from_int(entry.shape.clone(), bits, signed, v).map_err(wrap)
        }
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Manifest plus blob payloads for a graph.
pub fn to_manifest(g: &Graph) -> (Manifest, Vec<(String, Vec<u8>)>) {
    let mut blobs = Vec::new();
    let mut used_files = BTreeSet::new();
    let mut tensors = Vec::new();
    for (name, t) in &g.tensors {
        let base = sanitize(name);
        let mut file = format!("tensors/{base}.bin");
        let mut i = 1;
        while !used_files.insert(file.clone()) {
            file = format!("tensors/{base}_{i}.bin");
            i += 1;
        }
        let mut entry = TensorEntry::describe(name, t, file.clone());
        entry.quant = g.param_quant.get(name).cloned();
        blobs.push((file, encode_blob(t)));
        tensors.push(entry);
    }
    let value = |name: &str| ValueEntry {
        name: name.to_string(),
        info: g.values.get(name).cloned().unwrap_or_default(),
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        inputs: g.inputs.iter().map(|i| value(i)).collect(),
        outputs: g.outputs.clone(),
        nodes: g
            .nodes
            .iter()
            .map(|n| NodeEntry {
                id: n.id.clone(),
                op: n.kind.name().to_string(),
                attrs: n.attrs.clone(),
                inputs: n.inputs.clone(),
                outputs: n.outputs.iter().map(|o| value(o)).collect(),
                params: n.params.clone(),
                quant: n.quant.clone(),
            })
            .collect(),
        tensors,
    };
    (manifest, blobs)
}

/// Rebuilds a graph from a manifest, reading blobs through `read_blob`.
pub fn from_manifest(
    m: Manifest,
    mut read_blob: impl FnMut(&str) -> Option<Vec<u8>>,
) -> Result<Graph, IrError> {
    if m.version != MANIFEST_VERSION {
        return Err(IrError::Manifest(format!("unsupported version {}", m.version)));
    }
    let mut g = Graph::new();
    for e in m.tensors {
        let bytes = read_blob(&e.file).ok_or_else(|| IrError::MissingBlob {
            tensor: e.name.clone(),
            file: e.file.clone(),
        })?;
        let t = decode_blob(&e, &bytes)?;
        if let Some(q) = e.quant.clone() {
            g.param_quant.insert(e.name.clone(), q);
        }
        g.tensors.insert(e.name, t);
    }
    for v in m.inputs {
        g.inputs.push(v.name.clone());
        g.values.insert(v.name, v.info);
    }
    g.outputs = m.outputs;
    for n in m.nodes {
        let kind: OpKind = n.op.parse().map_err(|kind| IrError::UnknownOp {
            node: n.id.clone(),
            kind,
        })?;
        let mut node = Node::new(n.id, kind);
        node.attrs = n.attrs;
        node.inputs = n.inputs;
        node.params = n.params;
        node.quant = n.quant;
        for o in n.outputs {
            node.outputs.push(o.name.clone());
            g.values.insert(o.name, o.info);
        }
        g.nodes.push(node);
    }
    g.sort_topologically()?;
    Ok(g)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IrError + '_ {
    move |source| IrError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn is_zip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("zip"))
}

/// Reads a container and validates every graph invariant.
pub fn load_model(path: impl AsRef<Path>) -> Result<Graph, IrError> {
    let g = load_unchecked(path)?;
    let violations = super::validate(&g);
    if !violations.is_empty() {
        return Err(IrError::Invalid(
            violations.iter().map(ToString::to_string).collect(),
        ));
    }
    Ok(g)
}

/// Reads a container without running [`super::validate`]; structural errors
/// (missing blobs, byte counts, unknown ops, cycles) are still reported.
pub fn load_unchecked(path: impl AsRef<Path>) -> Result<Graph, IrError> {
    let path = path.as_ref();
    if is_zip(path) {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut archive = zip::ZipArchive::new(file).map_err(|e| IrError::Zip(e.to_string()))?;
        let mut read = |name: &str| -> Option<Vec<u8>> {
            let mut f = archive.by_name(name).ok()?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf).ok()?;
            Some(buf)
        };
        let text = read(MANIFEST_FILE).ok_or_else(|| IrError::MissingBlob {
            tensor: "<manifest>".into(),
            file: MANIFEST_FILE.into(),
        })?;
        let m: Manifest =
            serde_json::from_slice(&text).map_err(|e| IrError::Manifest(e.to_string()))?;
        from_manifest(m, read)
    } else {
        let manifest_path = path.join(MANIFEST_FILE);
        let text = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        let m: Manifest =
            serde_json::from_slice(&text).map_err(|e| IrError::Manifest(e.to_string()))?;
        from_manifest(m, |file| fs::read(path.join(file)).ok())
    }
}

/// Writes `g` as a directory container, or as a zip archive when `path`
/// ends in `.zip`.
pub fn save_model(g: &Graph, path: impl AsRef<Path>) -> Result<(), IrError> {
    let path = path.as_ref();
    let (manifest, blobs) = to_manifest(g);
    let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    if is_zip(path) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut zw = zip::ZipWriter::new(file);
        let opts = zip::write::SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Stored)
            .last_modified_time(zip::DateTime::default());
        let zerr = |e: zip::result::ZipError| IrError::Zip(e.to_string());
        zw.start_file(MANIFEST_FILE, opts).map_err(zerr)?;
        zw.write_all(&text).map_err(io_err(path))?;
        for (file, bytes) in &blobs {
            zw.start_file(file.as_str(), opts).map_err(zerr)?;
            zw.write_all(bytes).map_err(io_err(path))?;
        }
        zw.finish().map_err(zerr)?;
        return Ok(());
    }
    fs::create_dir_all(path).map_err(io_err(path))?;
    let tensor_dir: PathBuf = path.join("tensors");
    if tensor_dir.exists() {
        fs::remove_dir_all(&tensor_dir).map_err(io_err(&tensor_dir))?;
    }
    if !blobs.is_empty() {
        fs::create_dir_all(&tensor_dir).map_err(io_err(&tensor_dir))?;
    }
    for (file, bytes) in &blobs {
        let p = path.join(file);
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    let mp = path.join(MANIFEST_FILE);
    fs::write(&mp, text).map_err(io_err(&mp))?;
    Ok(())
}

/// Index file of a tensor-set directory.
pub const TENSOR_INDEX_FILE: &str = "tensors.json";

/// Writes `tensors` as a directory of raw blobs plus a JSON index, in list
/// order. Used for calibration and evaluation data.
pub fn save_tensors(dir: impl AsRef<Path>, tensors: &[Tensor]) -> Result<(), IrError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut index = Vec::with_capacity(tensors.len());
    for (i, t) in tensors.iter().enumerate() {
        let file = format!("{i:06}.bin");
        let path = dir.join(&file);
        fs::write(&path, encode_blob(t)).map_err(io_err(&path))?;
        index.push(TensorEntry::describe(&format!("{i:06}"), t, file));
    }
    let path = dir.join(TENSOR_INDEX_FILE);
    let text = serde_json::to_vec_pretty(&index).expect("index serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

/// Inverse of [`save_tensors`].
pub fn load_tensors(dir: impl AsRef<Path>) -> Result<Vec<Tensor>, IrError> {
    let dir = dir.as_ref();
    let path = dir.join(TENSOR_INDEX_FILE);
    let text = fs::read(&path).map_err(io_err(&path))?;
    let index: Vec<TensorEntry> =
        serde_json::from_slice(&text).map_err(|e| IrError::Manifest(e.to_string()))?;
    index
        .iter()
        .map(|e| {
            let p = dir.join(&e.file);
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            decode_blob(e, &bytes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int8_blob_is_twos_complement() {
        let t = Tensor::from_int(vec![2], 8, true, vec![-3, 5]).unwrap();
        assert_eq!(encode_blob(&t), vec![0xFD, 0x05]);
        let e = TensorEntry::describe("t", &t, "x".into());
        assert_eq!(decode_blob(&e, &[0xFD, 0x05]).unwrap(), t);
    }

    #[test]
    fn sub_byte_values_use_one_byte_each() {
        let t = Tensor::from_int(vec![3], 4, true, vec![-8, 7, -1]).unwrap();
        assert_eq!(encode_blob(&t), vec![0xF8, 0x07, 0xFF]);
        let t = Tensor::from_int(vec![2], 12, false, vec![4095, 1]).unwrap();
        assert_eq!(encode_blob(&t), vec![0xFF, 0x0F, 0x01, 0x00]);
        let e = TensorEntry::describe("t", &t, "x".into());
        assert_eq!(decode_blob(&e, &encode_blob(&t)).unwrap(), t);
    }

    #[test]
    fn sanitized_names() {
        assert_eq!(sanitize("layer1/conv.weight"), "layer1_conv.weight");
    }
}
