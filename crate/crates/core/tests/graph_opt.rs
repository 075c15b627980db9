use resflow::builders::{build_resnet20, build_resnet8, plain_chain, random_input, two_block_residual};
use resflow::graph_opt::*;
use resflow::interp::run_graph;
use resflow::ir::{LayerKind, SkipKind};
use resflow::model::validate_graph;

#[test]
fn block_counts() {
    let b20 = detect_blocks(&build_resnet20(0)).unwrap();
    assert_eq!(b20.len(), 9);
    // Stage entries 2 and 3 change resolution; stage 1 keeps the stem's 16 channels.
    assert_eq!(b20.iter().filter(|b| b.downsample.is_some()).count(), 2);
    assert_eq!(detect_blocks(&build_resnet8(0)).unwrap().len(), 3);
    assert!(detect_blocks(&plain_chain(0, [3, 8, 8], &[4, 4])).unwrap().is_empty());
}

#[test]
fn unsupported_add_is_rejected() {
    let mut g = plain_chain(0, [4, 8, 8], &[4, 4, 4]);
    let mut b = resflow::builders::Builder::new(0);
    b.g = g.clone();
    // add straight across a single conv: one branch has 1 conv, the other 0.
    b.add("bad", "conv1", "conv0", resflow::builders::ACT, false);
    g = b.finish();
    assert!(matches!(detect_blocks(&g), Err(OptError::UnsupportedTopology { .. })));
}

#[test]
fn buffer_ratios() {
    for g in [build_resnet8(0), build_resnet20(0)] {
        for b in detect_blocks(&g).unwrap() {
            let r = skip_buffer_optimized(&g, &b) as f64 / skip_buffer_naive(&g, &b).unwrap() as f64;
            assert!((0.45..=0.55).contains(&r), "{}: {r}", b.merge);
        }
    }
    let g = build_resnet20(0);
    let blocks = detect_blocks(&g).unwrap();
    let first = &blocks[0];
    assert_eq!((skip_buffer_naive(&g, first).unwrap(), skip_buffer_optimized(&g, first)), (2128, 1056));
    let ds = blocks.iter().find(|b| b.downsample.is_some()).unwrap();
    assert_eq!((skip_buffer_naive(&g, ds).unwrap(), skip_buffer_optimized(&g, ds)), (2128, 1088));
}

#[test]
fn rewrite_preconditions_and_idempotence() {
    let g = build_resnet20(0);
    let blocks = detect_blocks(&g).unwrap();
    let plain = &blocks[0];
    let ds = blocks.iter().find(|b| b.downsample.is_some()).unwrap();
    assert!(matches!(apply_loop_merge(&g, plain), Err(OptError::Precondition { .. })));
    assert!(matches!(apply_temporal_reuse(&g, ds), Err(OptError::Precondition { .. })));
    assert!(matches!(fold_add_into_accumulator(&g, plain), Err(OptError::Precondition { .. })));
    let once = apply_temporal_reuse(&g, plain).unwrap();
    assert_eq!(apply_temporal_reuse(&once, plain).unwrap(), once);
    assert_eq!(once.nodes[&plain.merge].skip.as_ref().unwrap().buffer_codes, 1056);
    let merged = apply_loop_merge(&g, ds).unwrap();
    let dsn = &merged.nodes[ds.downsample.as_ref().unwrap()];
    assert_eq!(dsn.merged_into.as_ref(), Some(&ds.conv0));
    // Both outputs of the merged task carry 32 channels.
    assert_eq!((merged.nodes[&ds.conv0].geom.och, dsn.geom.och), (32, 32));
}

#[test]
fn optimize_structure() {
    let g = build_resnet20(0);
    let o = optimize(&g).unwrap();
    assert!(validate_graph(&o).is_empty(), "{:?}", validate_graph(&o));
    assert_eq!(o.count_kind(LayerKind::Add), 0);
    let anns: Vec<_> = o.nodes.values().filter_map(|n| n.skip.as_ref()).collect();
    assert_eq!(anns.len(), 9);
    assert_eq!(anns.iter().filter(|a| a.kind == SkipKind::MergedOutput).count(), 2);
    assert_eq!(optimize(&o).unwrap(), o);
    // Both branch streams run between conv0 and conv1.
    for b in folded_blocks(&o) {
        let c1 = &o.nodes[&b.conv1];
        assert_eq!(c1.preds[0], b.conv0);
        assert_eq!(c1.skip.as_ref().unwrap().via, b.conv0);
    }
    let p = plain_chain(1, [3, 8, 8], &[4, 4]);
    assert_eq!(optimize(&p).unwrap(), p);
}

#[test]
fn semantic_preservation() {
    for (g, frames) in [(build_resnet8(7), 20u64), (build_resnet20(8), 20), (two_block_residual(1, 4, 8), 20)] {
        let o = optimize(&g).unwrap();
        for s in 0..frames {
            let x = random_input(&g, 100 + s);
            let (a, _) = run_graph(&g, &x).unwrap();
            let (b, _) = run_graph(&o, &x).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn fold_with_zero_skip_is_plain_conv() {
    let g = two_block_residual(4, 4, 8);
    let o = optimize(&g).unwrap();
    let node = &o.nodes["b1_conv1"];
    let (_, acts) = run_graph(&o, &random_input(&o, 1)).unwrap();
    let x = &acts["b1_conv0"];
    let zero = resflow::tensor::Tensor::zeros(node.geom.out_dims(), acts[&node.preds[1]].spec);
    let with_zero = resflow::interp::run_layer(node, &[x, &zero], o.params("b1_conv1")).unwrap();
    let mut plain = node.clone();
    plain.skip = None;
    plain.preds.truncate(1);
    assert_eq!(resflow::interp::run_layer(&plain, &[x], o.params("b1_conv1")).unwrap(), with_zero);
}
