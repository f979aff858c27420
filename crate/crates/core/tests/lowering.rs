use intlower::engine::compare_paths;
use intlower::fixtures::{cnn3, random_inputs, vit_block, VitSpec};
use intlower::fuse::{fuse_graph, FuseConfig};
use intlower::ir::validate;
use intlower::quant::{calibrate_graph, QConfig};

#[test]
fn cnn_lowers_and_agrees() {
    let g = cnn3(7);
    let calib = random_inputs(1, &[8, 3, 16, 16], 4);
    let (cal, _) = calibrate_graph(&g, &calib, &QConfig::default()).unwrap();
    assert!(validate(&cal).is_empty(), "{:?}", validate(&cal));
    let fused = fuse_graph(&cal, &FuseConfig::default()).unwrap();
    assert!(validate(&fused).is_empty(), "{:?}", validate(&fused));
    let data = random_inputs(2, &[1, 3, 16, 16], 50);
    let r = compare_paths(&cal, &fused, &data).unwrap();
    for l in &r.layers {
        eprintln!("{} {} max {} mean {}", l.edge, l.node, l.max_abs_lsb, l.mean_abs_lsb);
    }
    eprintln!("{:?} {:?} {:?}", r.argmax_int_vs_fakequant, r.argmax_fakequant_vs_float, r.int_float_ops);
    assert!(r.max_layer_lsb <= 1.0);
}

#[test]
fn vit_lowers_and_agrees() {
    let g = vit_block(7, VitSpec::default());
    let calib = random_inputs(1, &[8, 8, 16], 4);
    let (cal, _) = calibrate_graph(&g, &calib, &QConfig::default()).unwrap();
    assert!(validate(&cal).is_empty(), "{:?}", validate(&cal));
    let fused = fuse_graph(&cal, &FuseConfig::default()).unwrap();
    assert!(validate(&fused).is_empty(), "{:?}", validate(&fused));
    let data = random_inputs(2, &[1, 8, 16], 20);
    let r = compare_paths(&cal, &fused, &data).unwrap();
    for l in &r.layers {
        eprintln!("{} {} max {} mean {}", l.edge, l.node, l.max_abs_lsb, l.mean_abs_lsb);
    }
    eprintln!("{:?} {:?} {:?}", r.argmax_int_vs_fakequant, r.argmax_fakequant_vs_float, r.int_float_ops);
    assert!(r.max_layer_lsb <= 2.0);
}

#[test]
fn channelwise_at_four_bits_keeps_a_multiplier_per_channel() {
    use intlower::fuse::FuseMode;
    use intlower::OpKind;
    let g = cnn3(8);
    let q = QConfig {
        w_bits: 4,
        a_bits: 4,
        ..QConfig::default()
    };
    let (cal, _) = calibrate_graph(&g, &random_inputs(1, &[8, 3, 16, 16], 2), &q).unwrap();
    let fused = fuse_graph(&cal, &FuseConfig::new(FuseMode::Channelwise, 4, 12)).unwrap();
    for (id, channels) in [("conv0", 8), ("conv1", 16), ("conv2", 16)] {
        let mq = fused
            .nodes
            .iter()
            .find(|n| n.kind == OpKind::MulQuant && n.id.starts_with(id))
            .unwrap_or_else(|| panic!("{id} has no rescaler"));
        let m = fused.param(mq, "multiplier").unwrap();
        assert_eq!(m.shape(), &[channels], "{id}");
        let distinct: std::collections::BTreeSet<i64> = m.as_int().unwrap().iter().copied().collect();
        assert!(distinct.len() > 1, "{id}: batchnorm scales collapsed to one multiplier");
    }
}
