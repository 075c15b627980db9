//! Run configuration, board presets and the JSON documents produced by the
//! command-line tool (plan, trace, report), plus end-to-end verification.

use crate::alloc::{predict, solve_allocation, AllocError, AllocOptions, AllocationPlan, StreamPlan};
use crate::graph_opt::{optimize, OptError};
use crate::interp::{run_graph, InterpError};
use crate::ir::Graph;
use crate::model::{parse_model, topo_order, IrError};
use crate::sim::{elaborate, measure, simulate, Measurement, SimConfig, SimError, SimTrace, TaskTrace, ChannelTrace};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const PLAN_SCHEMA: &str = "resflow.plan/1";
pub const TRACE_SCHEMA: &str = "resflow.trace/1";
pub const REPORT_SCHEMA: &str = "resflow.report/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Board {
    Ultra96,
    Kv260,
}

/// Informational board data; only `n_par` and the clock feed the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoardInfo {
    pub name: String,
    pub dsp: usize,
    pub bram36: usize,
    pub uram: usize,
    pub default_freq_mhz: f64,
}

impl Board {
    pub fn n_par(self) -> usize {
        match self {
            Board::Ultra96 => 360,
            Board::Kv260 => 1248,
        }
    }

    pub fn freq_mhz(self) -> f64 {
        match self {
            Board::Ultra96 => 214.0,
            Board::Kv260 => 274.0,
        }
    }

    pub fn info(self) -> BoardInfo {
        let (name, bram36, uram) = match self {
            Board::Ultra96 => ("ultra96", 216, 0),
            Board::Kv260 => ("kv260", 144, 64),
        };
        BoardInfo { name: name.into(), dsp: self.n_par(), bram36, uram, default_freq_mhz: self.freq_mhz() }
    }
}

impl std::str::FromStr for Board {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ultra96" => Ok(Board::Ultra96),
            "kv260" => Ok(Board::Kv260),
            _ => Err(format!("unknown board `{s}` (expected ultra96 or kv260)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: PathBuf,
    pub weights: PathBuf,
    pub board: Option<Board>,
    pub n_par: usize,
    pub freq_mhz: f64,
    pub frames: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    /// Explicit values override the board preset; with neither, KV260 is used.
    pub fn resolve(model: PathBuf, weights: PathBuf, board: Option<Board>, n_par: Option<usize>, freq_mhz: Option<f64>, frames: usize, seed: u64, out: PathBuf) -> Result<Self, RunError> {
        let preset = board.unwrap_or(Board::Kv260);
        let cfg = RunConfig { model, weights, board, n_par: n_par.unwrap_or(preset.n_par()), freq_mhz: freq_mhz.unwrap_or(preset.freq_mhz()), frames, seed, out };
        if cfg.n_par == 0 {
            return Err(RunError::Config("n_par must be at least 1".into()));
        }
        if !(cfg.freq_mhz > 0.0 && cfg.freq_mhz.is_finite()) {
            return Err(RunError::Config(format!("frequency must be positive, got {}", cfg.freq_mhz)));
        }
        if cfg.frames == 0 {
            return Err(RunError::Config("frames must be at least 1".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: IrError },
    #[error("graph optimization: {0}")]
    Optimize(#[from] OptError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("allocation: {0}")]
    Alloc(#[from] AllocError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("reference interpreter: {0}")]
    Interp(#[from] InterpError),
    #[error("{path}: {msg}")]
    Document { path: PathBuf, msg: String },
}

impl RunError {
    /// 1 invalid input, 2 infeasible budget, 4 simulation or interpreter failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Alloc(AllocError::Infeasible { .. }) => 2,
            RunError::Sim(_) | RunError::Interp(_) => 4,
            _ => 1,
        }
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, RunError> {
    std::fs::read(path).map_err(|source| RunError::Io { path: path.to_path_buf(), source })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| RunError::Io { path: path.to_path_buf(), source })
}

pub fn load_model(model: &Path, weights: &Path) -> Result<Graph, RunError> {
    let text = read_file(model)?;
    let text = String::from_utf8(text).map_err(|e| RunError::Document { path: model.to_path_buf(), msg: e.to_string() })?;
    let blob = read_file(weights)?;
    parse_model(&text, &blob).map_err(|source| RunError::Model { path: model.to_path_buf(), source })
}

/// Seeded input frames: frame `i` uses seed `seed + i`.
pub fn seeded_frames(g: &Graph, seed: u64, n: usize) -> Vec<Tensor> {
    (0..n as u64).map(|i| crate::builders::random_input(g, seed.wrapping_add(i))).collect()
}

// Plan

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub buffer_codes: usize,
    pub slices: Vec<usize>,
    pub rewire_step: usize,
    pub padding: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub id: String,
    pub kind: String,
    pub och_par: usize,
    pub ow_par: usize,
    pub k: usize,
    pub cp: usize,
    pub c: u64,
    pub cw: usize,
    pub och_groups: usize,
    pub interval_cycles: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tied_to: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BufferTotals {
    /// Line-buffer history codes over all window plans.
    pub window_codes: usize,
    /// Skip-connection buffering in codes.
    pub skip_codes: usize,
    /// Capacity of every planned stream, in codes.
    pub stream_codes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanTotals {
    pub cp_tot: usize,
    pub budget_used: usize,
    pub n_par: usize,
    pub interval_cycles: f64,
    pub predicted_fps: f64,
    pub gops: f64,
    pub latency_estimate_cycles: u64,
    pub bottleneck: String,
    pub i_max: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanDoc {
    pub schema: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub board: Option<BoardInfo>,
    pub freq_mhz: f64,
    pub totals: PlanTotals,
    pub buffers: BufferTotals,
    pub layers: Vec<LayerRow>,
    pub streams: Vec<StreamPlan>,
    /// The full plan, readable back by `simulate --plan`.
    pub allocation: AllocationPlan,
}

fn ratio_f64(r: num_rational::Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn buffer_totals(g: &Graph, plan: &AllocationPlan) -> BufferTotals {
    BufferTotals {
        window_codes: plan.window_plans.values().map(|w| w.buffer_codes).sum(),
        skip_codes: plan.streams.iter().filter(|s| s.kind == crate::alloc::StreamKind::Skip).map(|s| {
            g.nodes.get(&s.consumer).and_then(|n| n.skip.as_ref()).map(|a| a.buffer_codes).unwrap_or(s.depth * s.token_codes * s.lanes)
        }).sum(),
        stream_codes: plan.streams.iter().map(|s| s.depth * s.token_codes * s.lanes).sum(),
    }
}

pub fn plan_doc(g: &Graph, plan: &AllocationPlan, cfg: &RunConfig) -> PlanDoc {
    let pred = predict(g, plan, cfg.freq_mhz);
    let layers = plan
        .layers
        .iter()
        .map(|(id, l)| LayerRow {
            id: id.clone(),
            kind: serde_json::to_value(g.nodes[id].kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            och_par: l.och_par,
            ow_par: l.ow_par,
            k: l.k,
            cp: l.cp,
            c: l.c,
            cw: l.cw,
            och_groups: l.och_groups,
            interval_cycles: ratio_f64(l.interval()),
            tied_to: l.tied_to.clone(),
            window: plan.window_plans.get(id).map(|w| WindowSummary { buffer_codes: w.buffer_codes, slices: w.slice_sizes.clone(), rewire_step: w.rewire_step, padding: w.padding_enabled }),
        })
        .collect();
    PlanDoc {
        schema: PLAN_SCHEMA.into(),
        model: cfg.model.display().to_string(),
        board: cfg.board.map(Board::info),
        freq_mhz: cfg.freq_mhz,
        totals: PlanTotals {
            cp_tot: plan.cp_tot,
            budget_used: plan.budget_used,
            n_par: plan.n_par_budget,
            interval_cycles: pred.interval_cycles,
            predicted_fps: pred.fps,
            gops: pred.gops,
            latency_estimate_cycles: pred.latency_estimate_cycles,
            bottleneck: plan.bottleneck.clone(),
            i_max: plan.i_max.clone(),
        },
        buffers: buffer_totals(g, plan),
        layers,
        streams: plan.streams.clone(),
        allocation: plan.clone(),
    }
}

/// Human-readable summary of a plan.
pub fn plan_table(doc: &PlanDoc) -> String {
    let t = &doc.totals;
    let mut s = String::new();
    let _ = writeln!(s, "model {}  n_par {}  {:.0} MHz", doc.model, t.n_par, doc.freq_mhz);
    let _ = writeln!(s, "cp_tot {}  budget used {}/{}  interval {:.1} cycles  predicted {:.1} fps  {:.2} GOPS", t.cp_tot, t.budget_used, t.n_par, t.interval_cycles, t.predicted_fps, t.gops);
    let _ = writeln!(s, "bottleneck {}  largest layer {}", t.bottleneck, t.i_max);
    let _ = writeln!(s, "{:<16} {:>7} {:>6} {:>3} {:>6} {:>10} {:>5} {:>6} {:>10} {:>7}", "layer", "och_par", "ow_par", "k", "cp", "c", "cw", "groups", "interval", "B");
    for l in &doc.layers {
        let b = l.window.as_ref().map(|w| w.buffer_codes.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:<16} {:>7} {:>6} {:>3} {:>6} {:>10} {:>5} {:>6} {:>10.1} {:>7}", l.id, l.och_par, l.ow_par, l.k, l.cp, l.c, l.cw, l.och_groups, l.interval_cycles, b);
    }
    let b = &doc.buffers;
    let _ = writeln!(s, "buffers: window {} codes, skip {} codes, streams {} codes", b.window_codes, b.skip_codes, b.stream_codes);
    s
}

/// Parses and optimizes the model, then allocates.
pub fn prepare(cfg: &RunConfig) -> Result<(Graph, Graph, AllocationPlan), RunError> {
    let g = load_model(&cfg.model, &cfg.weights)?;
    let opt = optimize(&g)?;
    let plan = solve_allocation(&opt, cfg.n_par, AllocOptions::default())?;
    Ok((g, opt, plan))
}

// Trace

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceDoc {
    pub schema: String,
    pub frames: usize,
    pub cycles: u64,
    pub first_input: Vec<u64>,
    pub frame_done: Vec<u64>,
    pub steady_interval_cycles: u64,
    pub measurement: Measurement,
    /// FNV digest of each output frame.
    pub output_digests: Vec<String>,
    pub tasks: Vec<TaskTrace>,
    pub channels: Vec<ChannelTrace>,
}

pub fn trace_doc(trace: &SimTrace, freq_mhz: f64) -> TraceDoc {
    TraceDoc {
        schema: TRACE_SCHEMA.into(),
        frames: trace.frames,
        cycles: trace.cycles,
        first_input: trace.first_input.clone(),
        frame_done: trace.frame_done.clone(),
        steady_interval_cycles: trace.steady_interval(),
        measurement: measure(trace, freq_mhz),
        output_digests: trace.outputs.iter().map(|t| format!("{:016x}", t.digest())).collect(),
        tasks: trace.tasks.clone(),
        channels: trace.channels.clone(),
    }
}

pub fn run_simulation(opt: &Graph, plan: &AllocationPlan, frames: &[Tensor], config: SimConfig) -> Result<SimTrace, RunError> {
    let net = elaborate(opt, plan, &config)?;
    Ok(simulate(&net, frames)?)
}

// Report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub schema: String,
    pub fps: f64,
    pub predicted_fps: f64,
    /// `fps / predicted_fps`.
    pub fps_ratio: f64,
    pub interval_cycles: u64,
    pub latency_cycles: u64,
    pub latency_ms: f64,
    pub gops: f64,
    pub cp_tot: usize,
    pub budget_used: usize,
    pub n_par: usize,
    pub bottleneck: String,
    pub buffers: BufferTotals,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub board: Option<BoardInfo>,
}

pub fn report_doc(plan: &PlanDoc, trace: &TraceDoc) -> ReportDoc {
    let m = &trace.measurement;
    let macs: u64 = plan.layers.iter().map(|l| l.c).sum();
    ReportDoc {
        schema: REPORT_SCHEMA.into(),
        fps: m.fps,
        predicted_fps: plan.totals.predicted_fps,
        fps_ratio: m.fps / plan.totals.predicted_fps,
        interval_cycles: m.interval_cycles,
        latency_cycles: m.latency_cycles,
        latency_ms: m.latency_ms,
        gops: 2.0 * macs as f64 * m.fps * 1e-9,
        cp_tot: plan.totals.cp_tot,
        budget_used: plan.totals.budget_used,
        n_par: plan.totals.n_par,
        bottleneck: m.bottleneck.clone(),
        buffers: plan.buffers.clone(),
        board: plan.board.clone(),
    }
}

// Verify

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub frame: usize,
    pub layer: String,
    /// Flat index in stream order, and its `(c, y, x)` position.
    pub index: usize,
    pub position: [usize; 3],
    pub expected: i32,
    pub got: i32,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [c, y, x] = self.position;
        write!(f, "frame {} layer {} index {} (c {c}, y {y}, x {x}): expected {}, got {}", self.frame, self.layer, self.index, self.expected, self.got)
    }
}

fn first_difference(layer: &str, frame: usize, want: &Tensor, got: &Tensor) -> Option<Mismatch> {
    let [ch, _, w] = want.dims;
    if want.dims != got.dims {
        return Some(Mismatch { frame, layer: layer.into(), index: 0, position: [0; 3], expected: want.codes.len() as i32, got: got.codes.len() as i32 });
    }
    let i = want.codes.iter().zip(&got.codes).position(|(a, b)| a != b)?;
    Some(Mismatch { frame, layer: layer.into(), index: i, position: [i % ch, i / ch / w, i / ch % w], expected: want.codes[i], got: got.codes[i] })
}

/// Simulates `sim_graph` (whose parameters may differ, e.g. a corrupted
/// parameter image) and checks every captured layer and the network output
/// against the reference interpreter on `reference`. Returns the first
/// difference in execution order.
pub fn verify(reference: &Graph, sim_graph: &Graph, n_par: usize, frames: &[Tensor]) -> Result<Option<Mismatch>, RunError> {
    let ref_opt = optimize(reference)?;
    let sim_opt = optimize(sim_graph)?;
    let plan = solve_allocation(&sim_opt, n_par, AllocOptions::default())?;
    let trace = run_simulation(&sim_opt, &plan, frames, SimConfig { capture_layers: true, ..SimConfig::default() })?;
    let order = topo_order(&ref_opt).unwrap_or_default();
    for (f, x) in frames.iter().enumerate() {
        let (want_out, acts) = run_graph(&ref_opt, x)?;
        for id in &order {
            if let (Some(want), Some(got)) = (acts.get(id), trace.layer_outputs.get(id).and_then(|v| v.get(f))) {
                if let Some(m) = first_difference(id, f, want, got) {
                    return Ok(Some(m));
                }
            }
        }
        let out_id = ref_opt.output_node().map(|n| n.id.clone()).unwrap_or_else(|| "output".into());
        if let Some(m) = first_difference(&out_id, f, &want_out, &trace.outputs[f]) {
            return Ok(Some(m));
        }
        // The unoptimized graph is the final word.
        let (orig, _) = run_graph(reference, x)?;
        if let Some(m) = first_difference(&out_id, f, &orig, &trace.outputs[f]) {
            return Ok(Some(m));
        }
    }
    Ok(None)
}
