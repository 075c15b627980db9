use resflow::alloc::{solve_allocation, AllocOptions, AllocationPlan};
use resflow::builders::{build_resnet8, conv_chain, random_input, two_block_residual};
use resflow::graph_opt::optimize;
use resflow::interp::run_graph;
use resflow::ir::Graph;
use resflow::sim::*;
use resflow::tensor::Tensor;

fn plan(g: &Graph, n_par: usize) -> AllocationPlan {
    solve_allocation(g, n_par, AllocOptions::default()).unwrap()
}

fn frames(g: &Graph, n: u64) -> Vec<Tensor> {
    (0..n).map(|s| random_input(g, 1000 + s)).collect()
}

fn assert_exact(g: &Graph, n_par: usize, n: u64) -> SimTrace {
    let net = elaborate(g, &plan(g, n_par), &SimConfig::default()).unwrap();
    let xs = frames(g, n);
    let tr = simulate(&net, &xs).unwrap();
    assert_eq!(tr.outputs.len(), xs.len());
    for (i, (x, y)) in xs.iter().zip(&tr.outputs).enumerate() {
        assert_eq!(&run_graph(g, x).unwrap().0, y, "frame {i}");
    }
    tr
}

fn interval_plan(p: &AllocationPlan) -> f64 {
    *p.interval_cycles.numer() as f64 / *p.interval_cycles.denom() as f64
}

#[test]
fn bit_exact_small_nets() {
    assert_exact(&conv_chain(1, 3, 8, &[(4, 3), (8, 1), (4, 3)]), 64, 3);
    // Odd width forces the single-pixel path.
    assert_exact(&conv_chain(2, 3, 7, &[(4, 3), (4, 3)]), 64, 3);
    let tb = two_block_residual(1, 4, 8);
    assert_exact(&tb, 128, 3);
    assert_exact(&optimize(&tb).unwrap(), 128, 3);
}

#[test]
fn bit_exact_resnet8() {
    let g = optimize(&build_resnet8(3)).unwrap();
    let tr = assert_exact(&g, 1248, 3);
    let iv = interval_plan(&plan(&g, 1248));
    assert!((tr.steady_interval() as f64 - iv).abs() / iv < 0.05);
}

#[test]
fn inventory() {
    // 7 wide: one pixel per cycle.
    let g = conv_chain(0, 2, 7, &[(4, 3)]);
    let p = plan(&g, 64);
    assert_eq!(p.layers["l0"].ow_par, 1);
    let inv = elaborate(&g, &p, &SimConfig::default()).unwrap().inventory;
    assert_eq!((inv.window_slices, inv.padding, inv.compute, inv.parameter), (9, 1, 1, 1));
    assert_eq!((inv.dma_in, inv.dma_out), (1, 1));

    let g = conv_chain(0, 4, 8, &[(4, 1)]);
    let inv = elaborate(&g, &plan(&g, 64), &SimConfig::default()).unwrap().inventory;
    assert_eq!((inv.window_slices, inv.padding), (0, 0));

    let r8 = build_resnet8(0);
    assert!(elaborate(&r8, &plan(&r8, 1248), &SimConfig::default()).unwrap().inventory.add > 0);
    let o = optimize(&r8).unwrap();
    assert_eq!(elaborate(&o, &plan(&o, 1248), &SimConfig::default()).unwrap().inventory.add, 0);
}

#[test]
fn zero_parameter_depth_deadlocks() {
    let g = conv_chain(0, 3, 8, &[(4, 3), (4, 3)]);
    let mut net = elaborate(&g, &plan(&g, 64), &SimConfig::default()).unwrap();
    assert!(check_deadlock_free(&net, 2).unwrap().deadlock_free);
    assert_eq!(net.set_capacity("l1.params", 0), 1);
    let r = check_deadlock_free(&net, 2).unwrap();
    assert!(!r.deadlock_free);
    let report = r.report.unwrap();
    assert!(report.tasks.iter().any(|(t, s)| t == "l1" && *s == Status::StallIn), "{report}");
    assert!(matches!(simulate(&net, &frames(&g, 1)), Err(SimError::Deadlock(_))));
}

#[test]
fn doubled_depths_keep_interval() {
    let g = optimize(&two_block_residual(3, 8, 16)).unwrap();
    let net = elaborate(&g, &plan(&g, 128), &SimConfig::default()).unwrap();
    let base = check_deadlock_free(&net, 3).unwrap().trace.unwrap();
    let mut wide = net.clone();
    for c in &mut wide.channels {
        c.capacity *= 2;
    }
    let r = check_deadlock_free(&wide, 3).unwrap();
    assert!(r.deadlock_free);
    assert_eq!(r.trace.unwrap().steady_interval(), base.steady_interval());
}

#[test]
fn output_depth_minus_one_deadlocks() {
    // A depth-first reader drains lane 0 while lane 1 holds a whole pixel.
    let g = optimize(&two_block_residual(3, 8, 16)).unwrap();
    let p = plan(&g, 64);
    let mut net = elaborate(&g, &p, &SimConfig::default()).unwrap();
    let depth = p.stream("b1_conv0", "b1_conv1", resflow::alloc::StreamKind::Output).unwrap().depth;
    net.set_capacity("b1_conv0->b1_conv1", depth - 1);
    assert!(!check_deadlock_free(&net, 2).unwrap().deadlock_free);
}

#[test]
fn deterministic() {
    let g = optimize(&two_block_residual(5, 4, 8)).unwrap();
    let cfg = SimConfig { record_events: true, ..SimConfig::default() };
    let net = elaborate(&g, &plan(&g, 64), &cfg).unwrap();
    let xs = frames(&g, 2);
    let a = simulate(&net, &xs).unwrap();
    let b = simulate(&net, &xs).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.events, b.events);
    assert_eq!(a.events_csv(), b.events_csv());
    assert!(a.events_csv().starts_with("cycle,task,status\n"));
}

#[test]
fn channel_safety() {
    let g = optimize(&two_block_residual(2, 8, 8)).unwrap();
    let p = plan(&g, 128);
    let tr = simulate(&elaborate(&g, &p, &SimConfig::default()).unwrap(), &frames(&g, 3)).unwrap();
    for c in &tr.channels {
        assert!(c.high_water <= c.capacity, "{}", c.name);
        assert!(c.pops <= c.pushes && c.pushes - c.pops <= c.capacity as u64, "{}", c.name);
        // Only the free-running parameter sources may leave tokens behind.
        if !c.name.ends_with(".params") {
            assert_eq!(c.pushes, c.pops, "{}", c.name);
        }
    }
}

#[test]
fn overflow_is_reported() {
    let g = conv_chain(0, 3, 8, &[(4, 3)]);
    let mut g2 = g.clone();
    // A 32-bit bias sitting at the top of the range; the first product overflows.
    g2.nodes["l0"].specs.b.as_mut().unwrap().bw = 32;
    let params = g2.params.get_mut("l0").unwrap();
    params.weight.iter_mut().for_each(|w| *w = 127);
    params.bias.iter_mut().for_each(|b| *b = i32::MAX - 1);
    let net = elaborate(&g2, &plan(&g2, 64), &SimConfig::default()).unwrap();
    let x = Tensor::new([3, 8, 8], vec![127; 3 * 64], resflow::builders::ACT).unwrap();
    assert!(matches!(simulate(&net, &[x]), Err(SimError::Overflow { .. })));
}

#[test]
fn no_frames_is_error() {
    let g = conv_chain(0, 3, 8, &[(4, 1)]);
    let net = elaborate(&g, &plan(&g, 64), &SimConfig::default()).unwrap();
    assert!(matches!(simulate(&net, &[]), Err(SimError::NoFrames)));
}

#[test]
fn measure_single_layer_closed_form() {
    // Fully unrolled over output channels: one window per cycle.
    for (hw, ich, och, f) in [(8, 4, 8, 3), (8, 3, 4, 1), (7, 2, 4, 3)] {
        let g = conv_chain(0, ich, hw, &[(och, f)]);
        let p = plan(&g, 4096);
        let l = &p.layers["l0"];
        assert_eq!(l.och_par, och);
        let iters = (hw * hw / l.ow_par * ich) as u64;
        let tr = simulate(&elaborate(&g, &p, &SimConfig::default()).unwrap(), &frames(&g, 3)).unwrap();
        let m = measure(&tr, 100.0);
        assert!(m.interval_cycles.abs_diff(iters) <= PIPELINE_DEPTH as u64, "{} vs {iters}", m.interval_cycles);
        assert!((m.fps - 100e6 / m.interval_cycles as f64).abs() < 1e-6);
        assert_eq!(m.bottleneck, "l0");
        assert!((m.latency_ms - m.latency_cycles as f64 / 1e5).abs() < 1e-12);
        assert!(m.latency_cycles >= iters);
    }
}

#[test]
fn bottleneck_is_a_slowest_layer() {
    let g = optimize(&two_block_residual(3, 8, 16)).unwrap();
    let p = plan(&g, 128);
    let tr = simulate(&elaborate(&g, &p, &SimConfig::default()).unwrap(), &frames(&g, 3)).unwrap();
    let m = measure(&tr, 200.0);
    let worst = p.layers.values().map(|l| l.interval()).max().unwrap();
    assert_eq!(p.layers[&m.bottleneck].interval(), worst);
}

#[test]
fn lane_parallel_line_buffers_agree() {
    let g = optimize(&two_block_residual(6, 8, 16)).unwrap();
    let p = plan(&g, 128);
    let xs = frames(&g, 3);
    let seq = simulate(&elaborate(&g, &p, &SimConfig::default()).unwrap(), &xs).unwrap();
    let cfg = SimConfig { lane_parallel_windows: true, ..SimConfig::default() };
    let par = simulate(&elaborate(&g, &p, &cfg).unwrap(), &xs).unwrap();
    assert_eq!(seq.outputs, par.outputs);
    assert_eq!(seq.steady_interval(), par.steady_interval());
}
