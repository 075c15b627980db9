//! Parallelism allocation and static sizing.
//!
//! Each conv-like layer `i` gets an output-channel unroll `och_par` (a divisor
//! of `och`); its compute parallelism is `cp = k * och_par * ow_par` MACs per
//! cycle and it needs `c / cp` cycles per frame. The pipeline interval is the
//! slowest layer's. The solver maximizes throughput under the budget.
//!
//! Budget accounting ([`BudgetUnit`]): with 8-bit data and `ow_par = 2` one DSP
//! slice performs the two MACs of a packed pair, so a layer occupies
//! `cp / ow_par` slices; [`BudgetUnit::MacLanes`] counts raw `cp` instead.

use crate::graph_opt::folded_blocks;
use crate::ir::{layer_macs, Graph, LayerGeom, LayerKind, LayerNode, SkipKind};
use indexmap::IndexMap;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocError {
    #[error("budget of {n_par} cannot fit the minimum allocation of {needed}")]
    Infeasible { n_par: usize, needed: usize },
    #[error("graph has no conv-like layers")]
    Empty,
    #[error("{0}: merged downsample host is not in the plan")]
    DanglingMerge(String),
    #[error("{node}: window filter width {fw} exceeds input width {iw}")]
    Window { node: String, fw: usize, iw: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetUnit {
    /// One unit per DSP slice; packed layers pay `cp / 2`.
    #[default]
    DspSlices,
    /// One unit per MAC lane (`cp`).
    MacLanes,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Searches every achievable layer interval: optimal over all divisor assignments.
    #[default]
    Exact,
    /// Only the most expensive layer's divisors set the target throughput.
    BottleneckOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocOptions {
    pub unit: BudgetUnit,
    pub strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAlloc {
    pub och_par: usize,
    pub ow_par: usize,
    pub k: usize,
    pub cp: usize,
    pub c: u64,
    /// `c / c_max`.
    pub r: Ratio<u64>,
    pub och_groups: usize,
    /// Filter codes consumed per cycle.
    pub cw: usize,
    /// Budget units charged for this layer.
    pub cost: usize,
    /// Set for a downsample conv running inside another layer's task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tied_to: Option<String>,
}

impl LayerAlloc {
    /// Cycles per frame, `c / cp`.
    pub fn interval(&self) -> Ratio<u64> {
        Ratio::new(self.c, self.cp as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Parameter,
    Output,
    Skip,
    Pool,
    Add,
    Dma,
}

/// One FIFO channel (or a bundle of `lanes` parallel channels).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub producer: String,
    pub consumer: String,
    pub kind: StreamKind,
    pub lanes: usize,
    /// Codes per token.
    pub token_codes: usize,
    /// Capacity per lane, in tokens.
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    /// Codes retained besides the newest one, `B`.
    pub buffer_codes: usize,
    /// FIFO slice in front of each window tap, newest tap first (its slice is empty).
    pub slice_sizes: Vec<usize>,
    pub slice_count: usize,
    pub window_elements: usize,
    /// Same-row gap, `S1`.
    pub s1: usize,
    /// Row-to-row gap, `S2`.
    pub s2: usize,
    pub rewire_step: usize,
    pub padding_enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub layers: IndexMap<String, LayerAlloc>,
    pub cp_tot: usize,
    /// Budget units used (equals `cp_tot` under [`BudgetUnit::MacLanes`]).
    pub budget_used: usize,
    pub n_par_budget: usize,
    pub options: AllocOptions,
    /// Layer with the largest MAC count.
    pub i_max: String,
    /// Layer setting the pipeline interval.
    pub bottleneck: String,
    pub interval_cycles: Ratio<u64>,
    pub streams: Vec<StreamPlan>,
    pub window_plans: IndexMap<String, WindowPlan>,
}

impl AllocationPlan {
    /// Throughput of the slowest layer, `min cp_i / c_i`.
    pub fn throughput(&self) -> Ratio<u64> {
        self.interval_cycles.recip()
    }

    pub fn stream(&self, producer: &str, consumer: &str, kind: StreamKind) -> Option<&StreamPlan> {
        self.streams.iter().find(|s| s.producer == producer && s.consumer == consumer && s.kind == kind)
    }

    pub fn stream_mut(&mut self, producer: &str, consumer: &str, kind: StreamKind) -> Option<&mut StreamPlan> {
        self.streams.iter_mut().find(|s| s.producer == producer && s.consumer == consumer && s.kind == kind)
    }
}

/// Width unroll: two packed pixels for 8-bit data when the output row splits evenly.
pub fn ow_par_for(node: &LayerNode) -> usize {
    if node.specs.x.bw == 8 && node.geom.ow % 2 == 0 {
        2
    } else {
        1
    }
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

pub fn layer_cost(k: usize, och_par: usize, ow_par: usize, unit: BudgetUnit) -> usize {
    let cp = k * och_par * ow_par;
    match unit {
        BudgetUnit::MacLanes => cp,
        BudgetUnit::DspSlices => cp / ow_par,
    }
}

/// `cw = och_par * fh * fw`; the width unroll shares the filter.
pub fn parameter_bandwidth(geom: &LayerGeom, och_par: usize) -> usize {
    och_par * geom.fh * geom.fw
}

/// A schedulable unit: one layer plus any downsample merged into its task.
#[derive(Clone, Debug)]
pub struct Unit {
    pub id: String,
    pub och: usize,
    /// `(c, k, ow_par)` of every layer in the unit, host first.
    pub members: Vec<(String, u64, usize, usize)>,
}

impl Unit {
    pub fn interval(&self, q: usize) -> Ratio<u64> {
        self.members.iter().map(|&(_, c, k, ow)| Ratio::new(c, (k * q * ow) as u64)).max().unwrap()
    }

    pub fn cost(&self, q: usize, unit: BudgetUnit) -> usize {
        self.members.iter().map(|&(_, _, k, ow)| layer_cost(k, q, ow, unit)).sum()
    }

    /// Smallest divisor reaching `target`, if any.
    pub fn min_par(&self, target: Ratio<u64>) -> Option<usize> {
        divisors(self.och).into_iter().find(|&q| self.interval(q) <= target)
    }
}

/// Groups conv-like layers into schedulable units (merged downsamples join their host).
pub fn units(g: &Graph) -> Result<Vec<Unit>, AllocError> {
    let mut out: Vec<Unit> = Vec::new();
    for n in g.conv_layers() {
        let m = (n.id.clone(), layer_macs(&n.geom), n.geom.k(), ow_par_for(n));
        match &n.merged_into {
            None => out.push(Unit { id: n.id.clone(), och: n.geom.och, members: vec![m] }),
            Some(_) => {}
        }
    }
    for n in g.conv_layers() {
        if let Some(host) = &n.merged_into {
            let u = out.iter_mut().find(|u| &u.id == host).ok_or_else(|| AllocError::DanglingMerge(n.id.clone()))?;
            u.members.push((n.id.clone(), layer_macs(&n.geom), n.geom.k(), ow_par_for(n)));
        }
    }
    Ok(out)
}

/// Minimal-cost assignment reaching `target`, with its cost.
fn assign(units: &[Unit], target: Ratio<u64>, unit: BudgetUnit) -> Option<(Vec<usize>, usize)> {
    let mut qs = Vec::with_capacity(units.len());
    let mut cost = 0;
    for u in units {
        let q = u.min_par(target)?;
        cost += u.cost(q, unit);
        qs.push(q);
    }
    Some((qs, cost))
}

/// Chooses `och_par` for every conv-like layer and sizes all streams and windows.
pub fn solve_allocation(g: &Graph, n_par: usize, opts: AllocOptions) -> Result<AllocationPlan, AllocError> {
    let us = units(g)?;
    if us.is_empty() {
        return Err(AllocError::Empty);
    }
    let needed: usize = us.iter().map(|u| u.cost(1, opts.unit)).sum();
    if needed > n_par {
        return Err(AllocError::Infeasible { n_par, needed });
    }
    let i_max = g.conv_layers().max_by_key(|n| (layer_macs(&n.geom), std::cmp::Reverse(n.id.clone()))).unwrap().id.clone();
    let imax_unit = us.iter().find(|u| u.members.iter().any(|m| m.0 == i_max)).unwrap();
    let mut targets: BTreeSet<Ratio<u64>> = BTreeSet::new();
    match opts.strategy {
        Strategy::Exact => {
            for u in &us {
                targets.extend(divisors(u.och).into_iter().map(|q| u.interval(q)));
            }
        }
        Strategy::BottleneckOnly => {
            targets.extend(divisors(imax_unit.och).into_iter().map(|q| imax_unit.interval(q)));
        }
    }
    // Ascending interval = descending throughput; the first fit is optimal.
    let (qs, _) = targets
        .iter()
        .find_map(|&t| assign(&us, t, opts.unit).filter(|(_, c)| *c <= n_par))
        .ok_or(AllocError::Infeasible { n_par, needed })?;

    let c_max = us.iter().flat_map(|u| u.members.iter().map(|m| m.1)).max().unwrap();
    let mut layers = IndexMap::new();
    for (u, &q) in us.iter().zip(&qs) {
        for (j, (id, c, k, ow)) in u.members.iter().enumerate() {
            let geom = &g.nodes[id].geom;
            layers.insert(
                id.clone(),
                LayerAlloc {
                    och_par: q,
                    ow_par: *ow,
                    k: *k,
                    cp: k * q * ow,
                    c: *c,
                    r: Ratio::new(*c, c_max),
                    och_groups: geom.och / q,
                    cw: parameter_bandwidth(geom, q),
                    cost: layer_cost(*k, q, *ow, opts.unit),
                    tied_to: (j > 0).then(|| u.id.clone()),
                },
            );
        }
    }
    // Keep graph order.
    let mut ordered = IndexMap::new();
    for n in g.conv_layers() {
        ordered.insert(n.id.clone(), layers.swap_remove(&n.id).unwrap());
    }
    let (bottleneck, interval) = ordered.iter().map(|(id, l)| (id.clone(), l.interval())).max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap();
    let mut plan = AllocationPlan {
        cp_tot: ordered.values().map(|l| l.cp).sum(),
        budget_used: ordered.values().map(|l| l.cost).sum(),
        layers: ordered,
        n_par_budget: n_par,
        options: opts,
        i_max,
        bottleneck,
        interval_cycles: interval,
        streams: Vec::new(),
        window_plans: IndexMap::new(),
    };
    for n in g.nodes.values() {
        if (n.kind.is_conv_like() || n.kind.is_pool()) && n.merged_into.is_none() {
            let ow = plan.layers.get(&n.id).map(|l| l.ow_par).unwrap_or(1);
            plan.window_plans.insert(n.id.clone(), window_buffer_plan(n, ow)?);
        }
    }
    plan.streams = stream_depths(g, &plan);
    Ok(plan)
}

/// Exhaustive search over every divisor assignment; the oracle for the solver.
/// Returns the best achievable interval, or `None` when nothing fits.
pub fn enumerate_optimum(g: &Graph, n_par: usize, unit: BudgetUnit) -> Option<Ratio<u64>> {
    let us = units(g).ok()?;
    let choices: Vec<Vec<usize>> = us.iter().map(|u| divisors(u.och)).collect();
    let mut idx = vec![0usize; us.len()];
    let mut best: Option<Ratio<u64>> = None;
    loop {
        let qs: Vec<usize> = idx.iter().zip(&choices).map(|(&i, c)| c[i]).collect();
        let cost: usize = us.iter().zip(&qs).map(|(u, &q)| u.cost(q, unit)).sum();
        if cost <= n_par {
            let iv = us.iter().zip(&qs).map(|(u, &q)| u.interval(q)).max().unwrap();
            best = Some(best.map_or(iv, |b| b.min(iv)));
        }
        // Odometer step.
        let mut d = 0;
        loop {
            if d == idx.len() {
                return best;
            }
            idx[d] += 1;
            if idx[d] < choices[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Window-buffer partitioning of a sliding-window layer.
///
/// `ow_par` adjacent output pixels share the buffer, widening each window row
/// by `(ow_par - 1) * stride` columns.
pub fn window_buffer_plan(node: &LayerNode, ow_par: usize) -> Result<WindowPlan, AllocError> {
    window_plan_geom(&node.id, &node.geom, ow_par)
}

pub fn window_plan_geom(id: &str, g: &LayerGeom, ow_par: usize) -> Result<WindowPlan, AllocError> {
    if g.fw > g.iw + 2 * g.pad {
        return Err(AllocError::Window { node: id.to_string(), fw: g.fw, iw: g.iw });
    }
    let width = g.fw + (ow_par - 1) * g.stride;
    let elements = width * g.fh;
    let s1 = g.ich;
    let s2 = g.ich * (g.iw + 1).saturating_sub(width);
    let buffer_codes = g.ich * ((g.fh - 1) * g.iw + width - 1);
    let slice_sizes = if elements == 1 {
        Vec::new()
    } else {
        let mut v = Vec::with_capacity(elements);
        for e in 0..elements {
            v.push(if e == 0 {
                0
            } else if e % width == 0 {
                s2
            } else {
                s1
            });
        }
        v
    };
    Ok(WindowPlan {
        buffer_codes,
        slice_count: slice_sizes.len(),
        slice_sizes,
        window_elements: elements,
        s1,
        s2,
        rewire_step: ow_par,
        padding_enabled: g.pad > 0,
    })
}

/// Output stream format of a task: `(lanes, codes per token)`.
pub fn output_format(g: &Graph, plan: &AllocationPlan, id: &str) -> (usize, usize) {
    let n = &g.nodes[id];
    match plan.layers.get(id) {
        Some(l) => (l.ow_par, l.och_par),
        None if n.kind == LayerKind::Input => (1, n.geom.och),
        None => (1, 1),
    }
}

/// Capacity of every channel in the network.
pub fn stream_depths(g: &Graph, plan: &AllocationPlan) -> Vec<StreamPlan> {
    let mut out = Vec::new();
    for (id, l) in &plan.layers {
        out.push(StreamPlan { producer: format!("{id}.params"), consumer: id.clone(), kind: StreamKind::Parameter, lanes: 1, token_codes: l.cw, depth: 2 });
    }
    let skip_of: IndexMap<String, usize> = folded_blocks(g)
        .into_iter()
        .filter_map(|b| g.nodes[&b.conv1].skip.as_ref().map(|s| (b.conv1.clone(), s.buffer_codes)))
        .collect();
    for n in g.nodes.values() {
        // A merged downsample reads its host's window; it has no input stream.
        if n.merged_into.is_some() {
            continue;
        }
        for (pi, p) in n.preds.iter().enumerate() {
            let prod = &g.nodes[p];
            if pi == 1 && n.skip.is_some() {
                let s = n.skip.as_ref().unwrap();
                let c1 = &plan.layers[&n.id];
                let (lanes, token) = match s.kind {
                    SkipKind::ForwardedWindow => (1, c1.och_par),
                    SkipKind::MergedOutput => {
                        let h = &plan.layers[&s.via];
                        (h.ow_par, h.och_par)
                    }
                };
                let depth = skip_of[&n.id].div_ceil(token * lanes).max(1);
                out.push(StreamPlan { producer: s.via.clone(), consumer: n.id.clone(), kind: StreamKind::Skip, lanes, token_codes: token, depth });
                continue;
            }
            let producer = prod.merged_into.clone().map(|h| format!("{h}:{p}")).unwrap_or_else(|| p.clone());
            let (lanes, token) = output_format(g, plan, p);
            let (kind, depth) = if let Some(l) = plan.layers.get(p) {
                if n.kind == LayerKind::Add && pi == 1 {
                    // Unrewritten block: the skip waits for conv1's whole receptive field.
                    (StreamKind::Skip, naive_skip_codes(g, &n.id).div_ceil(token * lanes).max(1))
                } else {
                    (StreamKind::Output, l.och_groups)
                }
            } else if prod.kind == LayerKind::Input || n.kind == LayerKind::Output {
                (StreamKind::Dma, 2)
            } else if prod.kind.is_pool() {
                (StreamKind::Pool, 2)
            } else if n.kind == LayerKind::Add && pi == 1 {
                (StreamKind::Skip, naive_skip_codes(g, &n.id).div_ceil(token * lanes).max(1))
            } else {
                (StreamKind::Add, 2)
            };
            out.push(StreamPlan { producer, consumer: n.id.clone(), kind, lanes, token_codes: token, depth });
        }
    }
    out
}

fn naive_skip_codes(g: &Graph, add: &str) -> usize {
    crate::graph_opt::detect_blocks(g)
        .ok()
        .and_then(|bs| bs.into_iter().find(|b| b.merge == add))
        .and_then(|b| crate::graph_opt::skip_buffer_naive(g, &b).ok())
        .unwrap_or(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fps: f64,
    pub gops: f64,
    pub interval_cycles: f64,
    pub latency_estimate_cycles: u64,
}

/// Analytic throughput and a coarse latency estimate.
pub fn predict(g: &Graph, plan: &AllocationPlan, freq_mhz: f64) -> Prediction {
    let interval = *plan.interval_cycles.numer() as f64 / *plan.interval_cycles.denom() as f64;
    let fps = freq_mhz * 1e6 / interval;
    let macs: u64 = plan.layers.values().map(|l| l.c).sum();
    // Each layer must see its window before the first output: buffer fill at the
    // layer's own input rate, plus a fixed pipeline depth.
    let mut fill = 0u64;
    for (id, l) in &plan.layers {
        if l.tied_to.is_some() {
            continue;
        }
        let geo = &g.nodes[id].geom;
        let per_code = l.interval() / Ratio::from_integer((geo.ih * geo.iw * geo.ich) as u64);
        let b = plan.window_plans.get(id).map(|w| w.buffer_codes).unwrap_or(0) as u64;
        fill += (per_code * Ratio::from_integer(b + geo.ich as u64)).ceil().to_integer() + crate::sim::PIPELINE_DEPTH as u64;
    }
    Prediction { fps, gops: 2.0 * macs as f64 * fps * 1e-9, interval_cycles: interval, latency_estimate_cycles: fill + interval.ceil() as u64 }
}
