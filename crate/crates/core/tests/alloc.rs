use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resflow::alloc::*;
use resflow::builders::{build_resnet20, build_resnet8, conv_chain, two_block_residual};
use resflow::graph_opt::optimize;
use resflow::ir::{Graph, LayerGeom};

fn opts(unit: BudgetUnit) -> AllocOptions {
    AllocOptions { unit, strategy: Strategy::Exact }
}

/// Brute force straight from the geometry: every divisor per layer, best interval that fits.
fn oracle(g: &Graph, n_par: usize, unit: BudgetUnit) -> Option<Ratio<u64>> {
    let layers: Vec<(u64, usize, usize, usize)> = g
        .conv_layers()
        .map(|n| {
            let gm = &n.geom;
            let c = (gm.oh * gm.ow * gm.och * gm.ich * gm.fh * gm.fw) as u64;
            let ow = if gm.ow % 2 == 0 { 2 } else { 1 };
            (c, gm.fh * gm.fw, ow, gm.och)
        })
        .collect();
    let mut best = None;
    let mut stack = vec![(0usize, 0usize, Ratio::from_integer(0u64))];
    while let Some((i, cost, iv)) = stack.pop() {
        if cost > n_par {
            continue;
        }
        if i == layers.len() {
            best = Some(best.map_or(iv, |b: Ratio<u64>| b.min(iv)));
            continue;
        }
        let (c, k, ow, och) = layers[i];
        for q in (1..=och).filter(|q| och % q == 0) {
            let lanes = k * q * ow;
            let units = if unit == BudgetUnit::MacLanes { lanes } else { lanes / ow };
            stack.push((i + 1, cost + units, iv.max(Ratio::new(c, lanes as u64))));
        }
    }
    best
}

fn random_chain(rng: &mut ChaCha8Rng) -> Graph {
    let n = rng.gen_range(1..=4);
    let layers: Vec<(usize, usize)> = (0..n).map(|_| ([1, 2, 3, 4, 6, 8, 12, 16][rng.gen_range(0..8)], [1, 3][rng.gen_range(0..2)])).collect();
    conv_chain(rng.gen(), rng.gen_range(1..=8), [4, 5, 6, 8][rng.gen_range(0..4)], &layers)
}

#[test]
fn solver_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..200 {
        let g = random_chain(&mut rng);
        let n_par = rng.gen_range(1..=64);
        for unit in [BudgetUnit::DspSlices, BudgetUnit::MacLanes] {
            let want = oracle(&g, n_par, unit);
            assert_eq!(enumerate_optimum(&g, n_par, unit), want);
            match solve_allocation(&g, n_par, opts(unit)) {
                Ok(p) => {
                    assert_eq!(Some(p.interval_cycles), want);
                    assert!(p.budget_used <= n_par);
                    checked += 1;
                }
                Err(AllocError::Infeasible { .. }) => assert_eq!(want, None),
                Err(e) => panic!("{e}"),
            }
        }
    }
    assert!(checked >= 50, "{checked}");
}

#[test]
fn two_identical_pointwise_layers() {
    let g = conv_chain(0, 4, 4, &[(4, 1), (4, 1)]);
    let p = solve_allocation(&g, 8, opts(BudgetUnit::MacLanes)).unwrap();
    for l in p.layers.values() {
        assert_eq!((l.och_par, l.ow_par, l.cp), (2, 2, 4));
    }
    assert_eq!(p.cp_tot, 8);
    // Counting packed slices instead, the same budget fully unrolls both.
    let p = solve_allocation(&g, 8, opts(BudgetUnit::DspSlices)).unwrap();
    assert_eq!((p.cp_tot, p.budget_used), (16, 8));
}

#[test]
fn huge_budget_fully_unrolls() {
    let g = conv_chain(0, 3, 8, &[(12, 3)]);
    let p = solve_allocation(&g, 1 << 20, AllocOptions::default()).unwrap();
    let l = &p.layers["l0"];
    assert_eq!((l.och_par, l.och_groups, l.cw), (12, 1, 12 * 9));
    assert_eq!(p.stream("l0", "output", StreamKind::Output).unwrap().depth, 1);
}

#[test]
fn infeasible_and_empty() {
    let g = conv_chain(0, 3, 8, &[(4, 3), (4, 3)]);
    assert_eq!(solve_allocation(&g, 17, AllocOptions::default()), Err(AllocError::Infeasible { n_par: 17, needed: 18 }));
    assert!(solve_allocation(&g, 18, AllocOptions::default()).is_ok());
    let mut b = resflow::builders::Builder::new(0);
    b.input("input", [1, 4, 4], resflow::builders::ACT);
    b.output("output", "input");
    assert_eq!(solve_allocation(&b.finish(), 8, AllocOptions::default()), Err(AllocError::Empty));
}

#[test]
fn stream_depth_rules() {
    let g = conv_chain(0, 4, 8, &[(64, 1)]);
    let p = solve_allocation(&g, 8, AllocOptions::default()).unwrap();
    assert_eq!(p.layers["l0"].och_par, 8);
    let s = p.stream("l0", "output", StreamKind::Output).unwrap();
    assert_eq!((s.depth, s.lanes, s.token_codes), (8, 2, 8));

    for g in [optimize(&build_resnet8(0)).unwrap(), optimize(&two_block_residual(0, 8, 16)).unwrap()] {
        let p = solve_allocation(&g, 256, AllocOptions::default()).unwrap();
        for s in &p.streams {
            match s.kind {
                StreamKind::Parameter => assert_eq!(s.depth, 2),
                StreamKind::Output => {
                    let l = &p.layers[&s.producer];
                    assert_eq!((s.depth, s.lanes, s.token_codes), (l.och_groups, l.ow_par, l.och_par));
                }
                StreamKind::Skip => {
                    let ann = g.nodes[&s.consumer].skip.as_ref().unwrap();
                    assert_eq!(s.depth, ann.buffer_codes.div_ceil(s.token_codes * s.lanes));
                }
                _ => {}
            }
            // A downsample running inside its host gets only its own filter stream.
            assert!(g.nodes[&s.consumer].merged_into.is_none() || s.kind == StreamKind::Parameter, "{s:?}");
        }
    }
}

#[test]
fn predict_closed_forms() {
    // c = 4*4*1*16 = 256 MACs; och_par 2 with two packed pixels: cp = 4.
    let g = conv_chain(0, 1, 4, &[(16, 1)]);
    let p = solve_allocation(&g, 4, opts(BudgetUnit::MacLanes)).unwrap();
    assert_eq!((p.layers["l0"].c, p.layers["l0"].cp), (256, 4));
    let pr = predict(&g, &p, 1.0);
    assert!((pr.fps - 15625.0).abs() < 1e-9);
    assert!((pr.gops - 2.0 * 256.0 * 15625.0 * 1e-9).abs() < 1e-12);
    // Fully unrolled single pixel: one frame per cycle.
    let g = conv_chain(0, 1, 1, &[(4, 1)]);
    let p = solve_allocation(&g, 64, AllocOptions::default()).unwrap();
    assert_eq!(p.layers["l0"].cp as u64, p.layers["l0"].c);
    assert!((predict(&g, &p, 200.0).fps - 200e6).abs() < 1e-6);
}

/// Every unit sits at the smallest divisor meeting the plan interval, and
/// speeding up the largest layer by one divisor step does not fit.
fn assert_balanced_and_maximal(g: &Graph, p: &AllocationPlan) {
    let us = units(g).unwrap();
    for u in &us {
        assert_eq!(u.min_par(p.interval_cycles), Some(p.layers[&u.id].och_par), "{}", u.id);
    }
    let imax = us.iter().find(|u| u.members.iter().any(|m| m.0 == p.i_max)).unwrap();
    let q = p.layers[&imax.id].och_par;
    if let Some(next) = divisors(imax.och).into_iter().find(|&d| d > q) {
        let target = imax.interval(next);
        let cost: Option<usize> = us.iter().map(|u| u.min_par(target).map(|q| u.cost(q, p.options.unit))).sum();
        assert!(cost.is_none_or(|c| c > p.n_par_budget));
    }
}

#[test]
fn resnet_plans() {
    let r8 = optimize(&build_resnet8(0)).unwrap();
    let r20 = optimize(&build_resnet20(0)).unwrap();
    for (g, n_par, interval) in [(&r8, 1248, 8192u64), (&r20, 1248, 24576), (&r8, 360, 32768), (&r20, 360, 65536)] {
        let p = solve_allocation(g, n_par, AllocOptions::default()).unwrap();
        assert_eq!(p.interval_cycles, Ratio::from_integer(interval));
        assert!(p.budget_used <= n_par);
        assert_balanced_and_maximal(g, &p);
        for (id, l) in &p.layers {
            assert_eq!(g.nodes[id].geom.och % l.och_par, 0);
            assert_eq!(l.cp % l.k, 0);
            assert_eq!(l.cw, l.och_par * l.k);
        }
    }
    let fps8 = predict(&r8, &solve_allocation(&r8, 1248, AllocOptions::default()).unwrap(), 274.0).fps;
    let fps20 = predict(&r20, &solve_allocation(&r20, 1248, AllocOptions::default()).unwrap(), 274.0).fps;
    assert!((0.7..=1.5).contains(&(fps8 / 30153.0)), "{fps8}");
    assert!((0.7..=1.5).contains(&(fps20 / 7601.0)), "{fps20}");
}

#[test]
fn bottleneck_only_never_beats_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let g = random_chain(&mut rng);
        let n_par = rng.gen_range(8..=64);
        let Ok(e) = solve_allocation(&g, n_par, AllocOptions::default()) else { continue };
        // Targets come from the largest layer only, so a slower small layer can leave nothing that fits.
        let Ok(b) = solve_allocation(&g, n_par, AllocOptions { strategy: Strategy::BottleneckOnly, ..AllocOptions::default() }) else { continue };
        assert!(b.interval_cycles >= e.interval_cycles);
        assert!(b.budget_used <= n_par);
    }
}

#[test]
fn window_plans_reconstruct_buffer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let f = rng.gen_range(1..=5);
        let stride = rng.gen_range(1..=2);
        let iw = rng.gen_range(f + 1..=20);
        let g = LayerGeom::conv(rng.gen_range(1..=16), rng.gen_range(f..=20), iw, 4, f, f, stride, f / 2);
        let one = window_plan_geom("l", &g, 1).unwrap();
        let two = window_plan_geom("l", &g, 2).unwrap();
        assert_eq!(one.buffer_codes, g.ich * ((f - 1) * g.iw + f - 1));
        for w in [&one, &two] {
            assert_eq!(w.slice_sizes.iter().sum::<usize>(), w.buffer_codes);
            assert_eq!(w.slice_count, w.slice_sizes.len());
        }
        assert_eq!(two.window_elements, (f + stride) * f);
        assert_eq!(two.buffer_codes - one.buffer_codes, stride * g.ich);
        for (e, &s) in one.slice_sizes.iter().enumerate().skip(1) {
            assert_eq!(s, if e % f == 0 { one.s2 } else { one.s1 });
        }
    }
    let g = LayerGeom::conv(4, 4, 4, 4, 5, 5, 1, 0);
    assert!(window_plan_geom("l", &g, 1).is_err());
}
