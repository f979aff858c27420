use intlower::engine::exec_int;
use intlower::engine::report::input_qp;
use intlower::export::{export_model, import_bundle, ExportConfig, ExportError, ExportFormat};
use intlower::fixtures::{cnn3, random_inputs, vit_block, VitSpec};
use intlower::fuse::{fuse_graph, FuseConfig};
use intlower::quant::{calibrate_graph, quantize, QConfig};
use intlower::Graph;
use sha2::{Digest, Sha256};
use std::path::Path;

fn lowered(g: &Graph, calib_shape: &[usize]) -> Graph {
    let calib = random_inputs(11, calib_shape, 2);
    let (cal, _) = calibrate_graph(g, &calib, &QConfig::default()).unwrap();
    fuse_graph(&cal, &FuseConfig::default()).unwrap()
}

fn tree_hash(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn assert_bundle_executes(fused: &Graph, cfg: &ExportConfig, sample_shape: &[usize]) {
    let dir = tempfile::tempdir().unwrap();
    export_model(fused, dir.path(), cfg).unwrap();
    let back = import_bundle(dir.path()).unwrap();
    assert_eq!(back.tensors, fused.tensors);
    let qp = input_qp(fused, &fused.inputs[0]).unwrap().clone();
    for x in random_inputs(5, sample_shape, 5) {
        let xq = quantize(&x, &qp).unwrap();
        assert_eq!(exec_int(&back, &xq).unwrap(), exec_int(fused, &xq).unwrap());
    }
}

#[test]
fn cnn_bundle_reloads_bit_exact_in_every_format() {
    let fused = lowered(&cnn3(3), &[4, 3, 16, 16]);
    for format in [ExportFormat::Hex, ExportFormat::Binstr, ExportFormat::Rawbin, ExportFormat::DecimalJson] {
        assert_bundle_executes(&fused, &ExportConfig::new(format), &[1, 3, 16, 16]);
    }
    let mut wide = ExportConfig::new(ExportFormat::Hex);
    wide.word_bits = Some(16);
    wide.words_per_line = 4;
    wide.axis_order = Some(vec![1, 0, 2, 3]);
    // the linear weight is rank 2, so a rank-4 order must be rejected
    let dir = tempfile::tempdir().unwrap();
    assert!(export_model(&fused, dir.path(), &wide).is_err());
}

#[test]
fn vit_bundle_reloads_bit_exact() {
    let fused = lowered(&vit_block(3, VitSpec::default()), &[4, 8, 16]);
    assert_bundle_executes(&fused, &ExportConfig::new(ExportFormat::Hex), &[1, 8, 16]);
}

#[test]
fn bundle_bytes_are_deterministic() {
    let fused = lowered(&cnn3(9), &[4, 3, 16, 16]);
    let cfg = ExportConfig::new(ExportFormat::Hex);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    export_model(&fused, a.path(), &cfg).unwrap();
    export_model(&lowered(&cnn3(9), &[4, 3, 16, 16]), b.path(), &cfg).unwrap();
    assert_eq!(tree_hash(a.path()), tree_hash(b.path()));
    assert!(a.path().join("manifest.json").exists());
    assert!(a.path().join("weights/conv0.hex").exists());
}

#[test]
fn float_graph_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let err = export_model(&cnn3(1), dir.path(), &ExportConfig::default()).unwrap_err();
    assert!(matches!(err, ExportError::NotFused(_)), "{err}");
}
