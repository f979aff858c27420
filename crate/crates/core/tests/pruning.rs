use intlower::fixtures::{cnn3, random_inputs};
use intlower::fuse::{fuse_graph, FuseConfig};
use intlower::quant::{calibrate_graph, QConfig};
use intlower::sparsity::{prune_graph, sparsity_of, verify_nm, SparsityConfig, SparsitySchedule};

#[test]
fn elementwise_target_is_met_per_layer() {
    let mut g = cnn3(12);
    let report = prune_graph(&mut g, &SparsityConfig::elementwise(0.8)).unwrap();
    assert_eq!(report.len(), 4);
    for layer in &report {
        let n = g.tensors[&layer.tensor].numel() as f64;
        assert_eq!(layer.sparsity, (0.8 * n).ceil() / n, "{}", layer.node);
    }
}

#[test]
fn schedule_end_point_is_used() {
    let mut g = cnn3(12);
    let mut cfg = SparsityConfig::elementwise(0.0);
    cfg.schedule = Some(SparsitySchedule {
        s_init: 0.1,
        s_final: 0.6,
        total_steps: 50,
    });
    for layer in prune_graph(&mut g, &cfg).unwrap() {
        assert!((layer.sparsity - 0.6).abs() < 0.01, "{}: {}", layer.node, layer.sparsity);
    }
}

#[test]
fn nm_pattern_reaches_the_integer_weights() {
    let mut g = cnn3(13);
    prune_graph(&mut g, &SparsityConfig::nm(2, 4)).unwrap();
    // three input channels leave one dense trailing channel per tap
    assert!(sparsity_of(&g.tensors["conv0.weight"]) < 0.5);
    for name in ["conv1.weight", "conv2.weight", "fc.weight"] {
        assert_eq!(sparsity_of(&g.tensors[name]), 0.5, "{name}");
    }
    let (cal, _) = calibrate_graph(&g, &random_inputs(1, &[8, 3, 16, 16], 2), &QConfig::default()).unwrap();
    let fused = fuse_graph(&cal, &FuseConfig::default()).unwrap();
    for id in ["conv0", "conv1", "conv2", "fc"] {
        let node = fused.node(id).unwrap();
        let w = fused.param(node, "weight").unwrap();
        assert!(!w.is_float());
        assert!(verify_nm(w, 2, 4, 1).unwrap().ok, "{id}");
    }
}

#[test]
fn square_matrix_two_of_four() {
    use intlower::fixtures::{normal_vec, rng};
    use intlower::sparsity::prune_nm;
    use intlower::Tensor;
    let w = Tensor::from_f32(vec![64, 64], normal_vec(&mut rng(64), 64 * 64, 1.0)).unwrap();
    let p = prune_nm(&w, 2, 4, 1).unwrap();
    assert!(verify_nm(&p, 2, 4, 1).unwrap().ok);
    assert_eq!(sparsity_of(&p), 0.5);
}
