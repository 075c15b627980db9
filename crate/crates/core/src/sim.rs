//! Cycle-stepped simulation of the task/FIFO network.
//!
//! Every conv-like layer becomes a window task (line buffer plus padding),
//! one or two parameter tasks and a compute task; pools and unfolded adds get
//! their own tasks; DMA tasks feed frames in and collect results. Each cycle,
//! tasks are stepped consumers-first so a pop frees space for a push in the
//! same cycle, while a pushed token becomes visible to its consumer on the next
//! cycle. All arithmetic is integer and bit-exact; packed layers go through
//! [`crate::dsp_pack`].

use crate::alloc::{AllocationPlan, StreamKind};
use crate::dsp_pack::packed_dot_fast;
use crate::ir::{Graph, LayerGeom, LayerKind, QuantSpec, SkipKind};
use crate::model::topo_order;
use crate::quant::requantize_unchecked;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

/// Fill depth of every task's arithmetic pipeline, in cycles.
pub const PIPELINE_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub pipeline_depth: usize,
    /// Cycles before a parameter task emits its first token.
    pub param_warmup: usize,
    /// Capacity of the window-to-compute hand-off, in windows.
    pub window_depth: usize,
    pub max_cycles: u64,
    pub record_events: bool,
    /// Keep every task's output tensors, not only the network output.
    pub capture_layers: bool,
    /// Line buffers read their input lanes side by side instead of in
    /// depth-first order (which needs a whole pixel buffered per lane).
    pub lane_parallel_windows: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { pipeline_depth: PIPELINE_DEPTH, param_warmup: 16, window_depth: 2, max_cycles: 50_000_000, record_events: false, capture_layers: false, lane_parallel_windows: false }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("elaboration: {0}")]
    Elaborate(String),
    #[error("deadlock: {0}")]
    Deadlock(Box<DeadlockReport>),
    #[error("{task}: accumulator {value} leaves the 32-bit register")]
    Overflow { task: String, value: i64 },
    #[error("no frames to simulate")]
    NoFrames,
    #[error("input frame {index} has dims {got:?}, network expects {want:?}")]
    Input { index: usize, got: [usize; 3], want: [usize; 3] },
    #[error("simulation exceeded {0} cycles")]
    MaxCycles(u64),
}

fn elab(msg: impl Into<String>) -> SimError {
    SimError::Elaborate(msg.into())
}

// ---------------------------------------------------------------------------
// Channels and ports

#[derive(Clone, Debug)]
pub struct Channel {
    pub name: String,
    pub capacity: usize,
    pub token_codes: usize,
    q: VecDeque<Vec<i32>>,
    pub high_water: usize,
    pub pushes: u64,
    pub pops: u64,
}

impl Channel {
    fn new(name: String, capacity: usize, token_codes: usize) -> Self {
        Self { name, capacity, token_codes, q: VecDeque::new(), high_water: 0, pushes: 0, pops: 0 }
    }

    #[inline]
    fn has_space(&self) -> bool {
        self.q.len() < self.capacity
    }

    #[inline]
    fn push(&mut self, t: Vec<i32>) {
        debug_assert!(self.has_space());
        self.q.push_back(t);
        self.pushes += 1;
        self.high_water = self.high_water.max(self.q.len());
    }

    #[inline]
    fn front(&self) -> Option<&Vec<i32>> {
        self.q.front()
    }

    #[inline]
    fn pop(&mut self) -> Option<Vec<i32>> {
        let t = self.q.pop_front();
        if t.is_some() {
            self.pops += 1;
        }
        t
    }

    pub fn occupancy(&self) -> usize {
        self.q.len()
    }
}

/// Output port: one bundle of lane channels per consumer.
#[derive(Clone, Debug, Default)]
struct Port {
    bundles: Vec<Vec<usize>>,
}

impl Port {
    fn can_push(&self, chans: &[Channel], lane: usize) -> bool {
        self.bundles.iter().all(|b| chans[b[lane]].has_space())
    }

    fn push(&self, chans: &mut [Channel], lane: usize, tok: &[i32]) {
        for b in &self.bundles {
            chans[b[lane]].push(tok.to_vec());
        }
    }
}

/// Reads a multi-lane token stream back in depth-first code order. Pixel `x`
/// travels on lane `x % lanes`; each pixel's channels are split into tokens.
#[derive(Clone, Debug)]
struct CodeReader {
    lanes: Vec<usize>,
    token_codes: usize,
    dims: [usize; 3],
    y: usize,
    x: usize,
    c: usize,
}

impl CodeReader {
    fn new(lanes: Vec<usize>, token_codes: usize, dims: [usize; 3]) -> Self {
        Self { lanes, token_codes, dims, y: 0, x: 0, c: 0 }
    }

    #[inline]
    fn peek(&self, chans: &[Channel]) -> Option<i32> {
        let ch = self.lanes[self.x % self.lanes.len()];
        chans[ch].front().map(|t| t[self.c % self.token_codes])
    }

    #[inline]
    fn advance(&mut self, chans: &mut [Channel]) {
        let ch = self.lanes[self.x % self.lanes.len()];
        if self.c % self.token_codes == self.token_codes - 1 {
            chans[ch].pop();
        }
        self.c += 1;
        if self.c == self.dims[0] {
            self.c = 0;
            self.x += 1;
            if self.x == self.dims[2] {
                self.x = 0;
                self.y += 1;
                if self.y == self.dims[1] {
                    self.y = 0;
                }
            }
        }
    }

    #[inline]
    fn read(&mut self, chans: &mut [Channel]) -> Option<i32> {
        let v = self.peek(chans)?;
        self.advance(chans);
        Some(v)
    }
}

/// Stalling output pipeline: results surface `depth` active cycles after issue;
/// a blocked head freezes the whole pipeline (and its task).
#[derive(Clone, Debug)]
struct Pipe {
    depth: usize,
    entries: VecDeque<(usize, Vec<(usize, usize, Vec<i32>)>)>,
}

impl Pipe {
    fn new(depth: usize) -> Self {
        Self { depth, entries: VecDeque::new() }
    }

    /// Tries to retire the head. Returns `(frozen, progressed)`.
    fn drain(&mut self, ports: &[Port], chans: &mut [Channel]) -> (bool, bool) {
        match self.entries.front() {
            Some((0, outs)) => {
                if outs.iter().all(|(p, lane, _)| ports[*p].can_push(chans, *lane)) {
                    let (_, outs) = self.entries.pop_front().unwrap();
                    for (p, lane, tok) in &outs {
                        ports[*p].push(chans, *lane, tok);
                    }
                    (false, true)
                } else {
                    (true, false)
                }
            }
            _ => (false, false),
        }
    }

    fn issue(&mut self, outs: Vec<(usize, usize, Vec<i32>)>) {
        self.entries.push_back((self.depth, outs));
    }

    fn advance(&mut self) -> bool {
        let mut moved = false;
        for e in self.entries.iter_mut() {
            if e.0 > 0 {
                e.0 -= 1;
                moved = true;
            }
        }
        moved
    }

    fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Compute,
    Parameter,
    /// Line buffer: the window slices plus the padding stage, shifted in lockstep.
    Window,
    Pool,
    Add,
    DmaIn,
    DmaOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Fire,
    StallIn,
    StallOut,
    Idle,
    Done,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Fire => "fire",
            Status::StallIn => "stall_in",
            Status::StallOut => "stall_out",
            Status::Idle => "idle",
            Status::Done => "done",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStats {
    pub fire: u64,
    pub stall_in: u64,
    pub stall_out: u64,
    pub idle: u64,
}

struct Ctx<'a> {
    chans: &'a mut [Channel],
    progress: bool,
}

#[derive(Clone, Debug)]
struct DmaIn {
    frames: Vec<Tensor>,
    pixel: usize,
    frame: usize,
    port: Port,
    first_input: Vec<u64>,
}

impl DmaIn {
    fn step(&mut self, cx: &mut Ctx, cycle: u64) -> Status {
        let Some(t) = self.frames.get(self.frame) else { return Status::Done };
        if !self.port.can_push(cx.chans, 0) {
            return Status::StallOut;
        }
        let ch = t.dims[0];
        if self.pixel == 0 {
            self.first_input.push(cycle);
        }
        let tok = &t.codes[self.pixel * ch..(self.pixel + 1) * ch];
        self.port.push(cx.chans, 0, tok);
        self.pixel += 1;
        if self.pixel * ch == t.codes.len() {
            self.pixel = 0;
            self.frame += 1;
        }
        cx.progress = true;
        Status::Fire
    }
}

#[derive(Clone, Debug)]
struct DmaOut {
    reader: CodeReader,
    dims: [usize; 3],
    spec: QuantSpec,
    per_cycle: usize,
    cur: Vec<i32>,
    frames: Vec<Tensor>,
    done_cycle: Vec<u64>,
    n_frames: usize,
}

impl DmaOut {
    fn step(&mut self, cx: &mut Ctx, cycle: u64) -> Status {
        if self.frames.len() == self.n_frames {
            return Status::Done;
        }
        let size: usize = self.dims.iter().product();
        let mut got = 0;
        while got < self.per_cycle {
            let Some(v) = self.reader.read(cx.chans) else { break };
            self.cur.push(v);
            got += 1;
            if self.cur.len() == size {
                let codes = std::mem::take(&mut self.cur);
                self.frames.push(Tensor { dims: self.dims, codes, spec: self.spec });
                self.done_cycle.push(cycle);
                break;
            }
        }
        if got > 0 {
            cx.progress = true;
            Status::Fire
        } else {
            Status::StallIn
        }
    }
}

#[derive(Clone, Debug)]
struct ParamTask {
    out: usize,
    ich: usize,
    groups: usize,
    c: usize,
    g: usize,
    remaining: u64,
    warmup: usize,
}

impl ParamTask {
    fn step(&mut self, cx: &mut Ctx) -> Status {
        if self.remaining == 0 {
            return Status::Done;
        }
        if self.warmup > 0 {
            self.warmup -= 1;
            cx.progress = true;
            return Status::Idle;
        }
        if !cx.chans[self.out].has_space() {
            return Status::StallOut;
        }
        // The token only names its (channel, group) slice; the compute task holds the codes.
        cx.chans[self.out].push(vec![self.c as i32, self.g as i32]);
        self.g += 1;
        if self.g == self.groups {
            self.g = 0;
            self.c += 1;
            if self.c == self.ich {
                self.c = 0;
            }
        }
        self.remaining -= 1;
        cx.progress = true;
        Status::Fire
    }
}

/// Temporal-reuse output: codes forwarded once no window needs them.
#[derive(Clone, Debug)]
struct Forward {
    port: Port,
    token_codes: usize,
    pending: Vec<i32>,
    /// Next stream index to forward.
    next: i64,
}

/// Write cursor of a line buffer. A depth-first cursor walks every pixel,
/// taking pixel `x` from lane `x % lanes`; a per-lane cursor walks only the
/// pixels `x ≡ lane (mod step)` of its single channel.
#[derive(Clone, Debug)]
struct LaneCursor {
    chans: Vec<usize>,
    token_codes: usize,
    lane: usize,
    step: usize,
    f: usize,
    y: usize,
    x: usize,
    c: usize,
    done: bool,
}

impl LaneCursor {
    fn chan(&self) -> usize {
        self.chans[self.x % self.chans.len()]
    }

    fn index(&self, g: &LayerGeom, frame_stride: i64) -> i64 {
        if self.done {
            return i64::MAX;
        }
        self.f as i64 * frame_stride + ((self.y * g.iw + self.x) * g.ich + self.c) as i64
    }

    fn advance(&mut self, g: &LayerGeom, n_frames: usize) {
        self.c += 1;
        if self.c == g.ich {
            self.c = 0;
            self.x += self.step;
            if self.x >= g.iw {
                self.x = self.lane;
                self.y += 1;
                if self.y == g.ih {
                    self.y = 0;
                    self.f += 1;
                    self.done = self.f == n_frames;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct WindowTask {
    cursors: Vec<LaneCursor>,
    geom: LayerGeom,
    width: usize,
    ow_par: usize,
    b: i64,
    span: i64,
    /// Codes accepted per cycle, split over the input lanes.
    rate: usize,
    ring: Vec<i32>,
    frame_size: i64,
    /// Index distance between frames: the data plus a gap of padding rows,
    /// so a frame's bottom windows never wait for the next frame.
    frame_stride: i64,
    n_frames: usize,
    /// One past the last real index of the last frame.
    end: i64,
    // Next window to emit.
    f: usize,
    oy: usize,
    ox0: usize,
    c: usize,
    t_new: i64,
    windows_done: bool,
    out: usize,
    fwd: Option<Forward>,
}

impl WindowTask {
    fn lin(&self, y: i64, x: i64) -> i64 {
        (y * self.geom.iw as i64 + x) * self.geom.ich as i64
    }

    fn newest_index(&self) -> i64 {
        let g = &self.geom;
        let y = (self.oy * g.stride + g.fh - 1) as i64 - g.pad as i64;
        let x = (self.ox0 * g.stride + self.width - 1) as i64 - g.pad as i64;
        self.f as i64 * self.frame_stride + self.lin(y, x) + self.c as i64
    }

    fn prepare(&mut self, n: usize) {
        self.n_frames = n;
        self.end = (n as i64 - 1) * self.frame_stride + self.frame_size;
        self.windows_done = n == 0;
        for c in &mut self.cursors {
            c.done = n == 0;
        }
    }

    fn next_window(&mut self) {
        self.c += 1;
        if self.c == self.geom.ich {
            self.c = 0;
            self.ox0 += self.ow_par;
            if self.ox0 >= self.geom.ow {
                self.ox0 = 0;
                self.oy += 1;
                if self.oy == self.geom.oh {
                    self.oy = 0;
                    self.f += 1;
                    if self.f == self.n_frames {
                        self.windows_done = true;
                        return;
                    }
                }
            }
        }
        let t = self.newest_index();
        debug_assert!(t > self.t_new, "window order must follow the stream");
        self.t_new = t;
    }

    /// All stream indices below this are in the ring or are padding gap.
    fn frontier(&self) -> i64 {
        self.cursors.iter().map(|c| c.index(&self.geom, self.frame_stride)).min().unwrap_or(i64::MAX)
    }

    fn build(&self) -> Vec<i32> {
        let g = &self.geom;
        let mut w = Vec::with_capacity(g.fh * self.width);
        let base = self.f as i64 * self.frame_stride + self.c as i64;
        for ky in 0..g.fh {
            let y = (self.oy * g.stride + ky) as i64 - g.pad as i64;
            for kx in 0..self.width {
                let x = (self.ox0 * g.stride + kx) as i64 - g.pad as i64;
                if y < 0 || x < 0 || y >= g.ih as i64 || x >= g.iw as i64 {
                    w.push(0);
                } else {
                    let idx = base + self.lin(y, x);
                    w.push(self.ring[idx.rem_euclid(self.span) as usize]);
                }
            }
        }
        w
    }

    fn step(&mut self, cx: &mut Ctx) -> Status {
        let mut moved = false;
        let mut blocked_out = false;
        // Oldest code the pending window still reads.
        let needed = if self.windows_done { i64::MAX } else { self.t_new - self.b };
        let frontier = self.frontier();
        if let Some(fw) = self.fwd.as_mut() {
            let mut n = 0;
            while n < self.rate && fw.next < self.end && fw.next < frontier && fw.next < needed {
                if fw.next.rem_euclid(self.frame_stride) >= self.frame_size {
                    fw.next = (fw.next / self.frame_stride + 1) * self.frame_stride;
                    continue;
                }
                if fw.pending.len() + 1 == fw.token_codes && !fw.port.can_push(cx.chans, 0) {
                    blocked_out = true;
                    break;
                }
                fw.pending.push(self.ring[fw.next.rem_euclid(self.span) as usize]);
                if fw.pending.len() == fw.token_codes {
                    let tok = std::mem::take(&mut fw.pending);
                    fw.port.push(cx.chans, 0, &tok);
                }
                fw.next += 1;
                n += 1;
                moved = true;
            }
        }
        // A slot may be overwritten once its code is neither read nor awaiting forwarding.
        let guard = needed.min(self.fwd.as_ref().map_or(i64::MAX, |f| f.next)).saturating_add(self.span);
        let per_lane = (self.rate / self.cursors.len()).max(1);
        for cur in self.cursors.iter_mut() {
            for _ in 0..per_lane {
                if cur.done {
                    break;
                }
                let j = cur.index(&self.geom, self.frame_stride);
                if j >= guard {
                    break;
                }
                let ch = cur.chan();
                let Some(tok) = cx.chans[ch].front() else { break };
                let code = tok[cur.c % cur.token_codes];
                if cur.c % cur.token_codes == cur.token_codes - 1 {
                    cx.chans[ch].pop();
                }
                self.ring[j.rem_euclid(self.span) as usize] = code;
                cur.advance(&self.geom, self.n_frames);
                moved = true;
            }
        }
        if !self.windows_done && self.frontier() > self.t_new {
            if cx.chans[self.out].has_space() {
                let w = self.build();
                cx.chans[self.out].push(w);
                self.next_window();
                moved = true;
            } else {
                blocked_out = true;
            }
        }
        cx.progress |= moved;
        let drained = self.fwd.as_ref().map_or(true, |f| f.next >= self.end);
        if moved {
            Status::Fire
        } else if blocked_out {
            Status::StallOut
        } else if self.windows_done && drained && self.cursors.iter().all(|c| c.done) {
            Status::Done
        } else {
            Status::StallIn
        }
    }
}

/// Extra layer folded into a compute task: a 1x1 downsample reading one tap of
/// the host window.
#[derive(Clone, Debug)]
struct MergedDs {
    id: String,
    params_in: usize,
    weight: Vec<i32>,
    bias: Vec<i32>,
    tap: usize,
    shift: u32,
    y: QuantSpec,
    relu: bool,
    acc: Vec<i64>,
}

#[derive(Clone, Debug)]
struct SkipIn {
    reader: CodeReader,
    align: u32,
    /// Double-buffered prefetch banks, `ow_par * och` codes each.
    banks: VecDeque<Vec<i32>>,
    per_cycle: usize,
}

#[derive(Clone, Debug)]
struct ComputeTask {
    id: String,
    geom: LayerGeom,
    width: usize,
    ow_par: usize,
    och_par: usize,
    groups: usize,
    packed: bool,
    weight: Vec<i32>,
    bias: Vec<i32>,
    shift: u32,
    y: QuantSpec,
    relu: bool,
    win_in: usize,
    params_in: usize,
    skip: Option<SkipIn>,
    ds: Option<MergedDs>,
    acc: Vec<i64>,
    pipe: Pipe,
    ports: Vec<Port>,
    n_frames: usize,
    f: usize,
    pg: usize,
    c: usize,
    g: usize,
    capture: Option<Vec<Tensor>>,
    ds_capture: Option<Vec<Tensor>>,
}

fn overflow(task: &str, v: i64) -> Result<(), SimError> {
    if v < i32::MIN as i64 || v > i32::MAX as i64 {
        Err(SimError::Overflow { task: task.to_string(), value: v })
    } else {
        Ok(())
    }
}

impl ComputeTask {
    fn groups_per_row(&self) -> usize {
        self.geom.ow / self.ow_par
    }

    fn prefetch(&mut self, cx: &mut Ctx) {
        let och = self.geom.och;
        let Some(s) = self.skip.as_mut() else { return };
        let full = self.ow_par * och;
        let mut budget = s.per_cycle;
        while budget > 0 {
            let need_new = s.banks.back().map_or(true, |b| b.len() == full);
            if need_new {
                if s.banks.len() == 2 {
                    break;
                }
                s.banks.push_back(Vec::with_capacity(full));
            }
            let Some(v) = s.reader.read(cx.chans) else { break };
            s.banks.back_mut().unwrap().push(v);
            budget -= 1;
            cx.progress = true;
        }
    }

    fn step(&mut self, cx: &mut Ctx) -> Result<Status, SimError> {
        let (frozen, drained) = self.pipe.drain(&self.ports, cx.chans);
        cx.progress |= drained;
        self.prefetch(cx);
        if frozen {
            return Ok(Status::StallOut);
        }
        let st = self.try_fire(cx)?;
        cx.progress |= self.pipe.advance();
        Ok(st)
    }

    fn try_fire(&mut self, cx: &mut Ctx) -> Result<Status, SimError> {
        if self.f == self.n_frames {
            return Ok(if self.pipe.is_empty() { Status::Done } else { Status::Idle });
        }
        let frame_start = self.pg == 0 && self.c == 0 && self.g == 0;
        if frame_start && !self.pipe.is_empty() {
            // A new frame may not overlap the previous one in the pipeline.
            return Ok(Status::StallOut);
        }
        if cx.chans[self.win_in].front().is_none() || cx.chans[self.params_in].front().is_none() {
            return Ok(Status::StallIn);
        }
        if let Some(ds) = &self.ds {
            if cx.chans[ds.params_in].front().is_none() {
                return Ok(Status::StallIn);
            }
        }
        let och = self.geom.och;
        if self.c == 0 {
            if let Some(s) = &self.skip {
                if s.banks.front().map_or(true, |b| b.len() < self.ow_par * och) {
                    return Ok(Status::StallIn);
                }
            }
        }
        let ptok = cx.chans[self.params_in].pop().unwrap();
        debug_assert_eq!((ptok[0] as usize, ptok[1] as usize), (self.c, self.g), "{}: parameter order", self.id);
        if let Some(ds) = &self.ds {
            cx.chans[ds.params_in].pop();
        }
        let win = if self.g + 1 == self.groups { cx.chans[self.win_in].pop().unwrap() } else { cx.chans[self.win_in].front().unwrap().clone() };
        self.fire(&win)?;
        cx.progress = true;
        self.g += 1;
        if self.g == self.groups {
            self.g = 0;
            if self.c == 0 {
                if let Some(s) = self.skip.as_mut() {
                    s.banks.pop_front();
                }
            }
            self.c += 1;
            if self.c == self.geom.ich {
                self.c = 0;
                self.pg += 1;
                if self.pg == self.geom.oh * self.groups_per_row() {
                    self.pg = 0;
                    self.f += 1;
                }
            }
        }
        Ok(Status::Fire)
    }

    fn fire(&mut self, win: &[i32]) -> Result<(), SimError> {
        let (geo, k, s) = (self.geom, self.geom.k(), self.geom.stride);
        let (op, g, c) = (self.och_par, self.g, self.c);
        let och = geo.och;
        let lanes: Vec<Vec<i32>> = (0..self.ow_par)
            .map(|p| {
                let mut v = Vec::with_capacity(k);
                for ky in 0..geo.fh {
                    for kx in 0..geo.fw {
                        v.push(win[ky * self.width + kx + p * s]);
                    }
                }
                v
            })
            .collect();
        for j in 0..op {
            let o = g * op + j;
            if c == 0 {
                for p in 0..self.ow_par {
                    let mut init = self.bias[o] as i64;
                    if let Some(sk) = &self.skip {
                        init += (sk.banks[0][p * och + o] as i64) << sk.align;
                    }
                    self.acc[p * och + o] = init;
                }
            }
            let wrow = &self.weight[(o * geo.ich + c) * k..(o * geo.ich + c + 1) * k];
            if self.packed {
                let (a, d) = packed_dot_fast(&lanes[0], &lanes[1], wrow);
                self.acc[o] += a;
                self.acc[och + o] += d;
            } else {
                for p in 0..self.ow_par {
                    self.acc[p * och + o] += lanes[p].iter().zip(wrow).map(|(&x, &w)| x as i64 * w as i64).sum::<i64>();
                }
            }
            for p in 0..self.ow_par {
                overflow(&self.id, self.acc[p * och + o])?;
            }
            if let Some(ds) = self.ds.as_mut() {
                let wv = ds.weight[o * geo.ich + c];
                if c == 0 {
                    for p in 0..self.ow_par {
                        ds.acc[p * och + o] = ds.bias[o] as i64;
                    }
                }
                if self.packed {
                    let (a, d) = packed_dot_fast(&[win[ds.tap]], &[win[ds.tap + s]], &[wv]);
                    ds.acc[o] += a;
                    ds.acc[och + o] += d;
                } else {
                    for p in 0..self.ow_par {
                        ds.acc[p * och + o] += win[ds.tap + p * s] as i64 * wv as i64;
                    }
                }
                for p in 0..self.ow_par {
                    overflow(&ds.id, ds.acc[p * och + o])?;
                }
            }
        }
        if c + 1 == geo.ich {
            let gpr = self.groups_per_row();
            let (oy, ox0) = (self.pg / gpr, (self.pg % gpr) * self.ow_par);
            let mut outs = Vec::new();
            for p in 0..self.ow_par {
                let tok: Vec<i32> = (g * op..(g + 1) * op).map(|o| requantize_unchecked(self.acc[p * och + o], self.shift, self.y, self.relu) as i32).collect();
                if let Some(cap) = self.capture.as_mut() {
                    write_capture(cap, self.f, geo.out_dims(), self.y, oy, ox0 + p, g * op, &tok);
                }
                outs.push((0, p, tok));
                if let Some(ds) = &self.ds {
                    let tok: Vec<i32> = (g * op..(g + 1) * op).map(|o| requantize_unchecked(ds.acc[p * och + o], ds.shift, ds.y, ds.relu) as i32).collect();
                    if let Some(cap) = self.ds_capture.as_mut() {
                        write_capture(cap, self.f, geo.out_dims(), ds.y, oy, ox0 + p, g * op, &tok);
                    }
                    outs.push((1, p, tok));
                }
            }
            self.pipe.issue(outs);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn write_capture(cap: &mut Vec<Tensor>, f: usize, dims: [usize; 3], spec: QuantSpec, y: usize, x: usize, c0: usize, tok: &[i32]) {
    while cap.len() <= f {
        cap.push(Tensor::zeros(dims, spec));
    }
    let t = &mut cap[f];
    let i = t.idx(c0, y, x);
    t.codes[i..i + tok.len()].copy_from_slice(tok);
}

#[derive(Clone, Debug)]
struct PoolTask {
    geom: LayerGeom,
    max: bool,
    shift: u32,
    y: QuantSpec,
    relu: bool,
    win_in: usize,
    pipe: Pipe,
    ports: Vec<Port>,
    per_frame: usize,
    emitted: usize,
    n_frames: usize,
    capture: Option<Vec<Tensor>>,
}

impl PoolTask {
    fn step(&mut self, cx: &mut Ctx) -> Status {
        let (frozen, drained) = self.pipe.drain(&self.ports, cx.chans);
        cx.progress |= drained;
        if frozen {
            return Status::StallOut;
        }
        let st = if self.emitted == self.per_frame * self.n_frames {
            if self.pipe.is_empty() { Status::Done } else { Status::Idle }
        } else if self.emitted % self.per_frame == 0 && !self.pipe.is_empty() {
            Status::StallOut
        } else if let Some(w) = cx.chans[self.win_in].pop() {
            let v = if self.max { w.iter().map(|&v| v as i64).max().unwrap() } else { w.iter().map(|&v| v as i64).sum() };
            let code = requantize_unchecked(v, self.shift, self.y, self.relu) as i32;
            let i = self.emitted % self.per_frame;
            if let Some(cap) = self.capture.as_mut() {
                let ch = self.geom.och;
                let (pix, c) = (i / ch, i % ch);
                write_capture(cap, self.emitted / self.per_frame, self.geom.out_dims(), self.y, pix / self.geom.ow, pix % self.geom.ow, c, &[code]);
            }
            self.pipe.issue(vec![(0, 0, vec![code])]);
            self.emitted += 1;
            cx.progress = true;
            Status::Fire
        } else {
            Status::StallIn
        };
        cx.progress |= self.pipe.advance();
        st
    }
}

#[derive(Clone, Debug)]
struct AddTask {
    a: CodeReader,
    b: CodeReader,
    align_a: u32,
    align_b: u32,
    shift: u32,
    y: QuantSpec,
    relu: bool,
    dims: [usize; 3],
    pipe: Pipe,
    ports: Vec<Port>,
    per_frame: usize,
    emitted: usize,
    n_frames: usize,
    capture: Option<Vec<Tensor>>,
}

impl AddTask {
    fn step(&mut self, cx: &mut Ctx) -> Status {
        let (frozen, drained) = self.pipe.drain(&self.ports, cx.chans);
        cx.progress |= drained;
        if frozen {
            return Status::StallOut;
        }
        let st = if self.emitted == self.per_frame * self.n_frames {
            if self.pipe.is_empty() { Status::Done } else { Status::Idle }
        } else if self.emitted % self.per_frame == 0 && !self.pipe.is_empty() {
            Status::StallOut
        } else {
            match (self.a.peek(cx.chans), self.b.peek(cx.chans)) {
                (Some(x), Some(z)) => {
                    self.a.advance(cx.chans);
                    self.b.advance(cx.chans);
                    let s = ((x as i64) << self.align_a) + ((z as i64) << self.align_b);
                    let code = requantize_unchecked(s, self.shift, self.y, self.relu) as i32;
                    let i = self.emitted % self.per_frame;
                    if let Some(cap) = self.capture.as_mut() {
                        let ch = self.dims[0];
                        write_capture(cap, self.emitted / self.per_frame, self.dims, self.y, i / ch / self.dims[2], i / ch % self.dims[2], i % ch, &[code]);
                    }
                    self.pipe.issue(vec![(0, 0, vec![code])]);
                    self.emitted += 1;
                    cx.progress = true;
                    Status::Fire
                }
                _ => Status::StallIn,
            }
        };
        cx.progress |= self.pipe.advance();
        st
    }
}

// ---------------------------------------------------------------------------
// Network

#[derive(Clone, Debug)]
enum Body {
    DmaIn(DmaIn),
    DmaOut(DmaOut),
    Param(ParamTask),
    Window(Box<WindowTask>),
    Compute(Box<ComputeTask>),
    Pool(PoolTask),
    Add(AddTask),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub name: String,
    pub kind: TaskKind,
    /// Graph node the task implements.
    pub node: String,
}

/// Logical task counts; a window task stands for its slices plus padding.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub compute: usize,
    pub parameter: usize,
    pub window_slices: usize,
    pub padding: usize,
    pub pool: usize,
    pub add: usize,
    pub dma_in: usize,
    pub dma_out: usize,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub tasks: Vec<TaskInfo>,
    pub channels: Vec<Channel>,
    pub inventory: Inventory,
    pub config: SimConfig,
    pub input_dims: [usize; 3],
    pub input_spec: QuantSpec,
    bodies: Vec<Body>,
}

impl Network {
    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// Overrides one channel's capacity (all lanes share the name prefix).
    pub fn set_capacity(&mut self, name: &str, capacity: usize) -> usize {
        let mut n = 0;
        for c in self.channels.iter_mut().filter(|c| c.name == name || c.name.starts_with(&format!("{name}#"))) {
            c.capacity = capacity;
            n += 1;
        }
        n
    }

    pub fn max_capacity(&self) -> usize {
        self.channels.iter().map(|c| c.capacity).max().unwrap_or(1)
    }
}

struct Linker {
    channels: Vec<Channel>,
    ports: IndexMap<(String, usize), Port>,
}

impl Linker {
    fn link(&mut self, key: (String, usize), name: String, lanes: usize, token: usize, depth: usize) -> Vec<usize> {
        let ids: Vec<usize> = (0..lanes)
            .map(|l| {
                let n = if lanes == 1 { name.clone() } else { format!("{name}#{l}") };
                self.channels.push(Channel::new(n, depth, token));
                self.channels.len() - 1
            })
            .collect();
        self.ports.entry(key).or_default().bundles.push(ids.clone());
        ids
    }

    fn take(&mut self, key: &str, port: usize) -> Port {
        self.ports.shift_remove(&(key.to_string(), port)).unwrap_or_default()
    }
}

fn producer_key(g: &Graph, p: &str) -> (String, usize) {
    match &g.nodes[p].merged_into {
        Some(h) => (h.clone(), 1),
        None => (p.to_string(), 0),
    }
}

fn planned(plan: &AllocationPlan, producer: &str, consumer: &str, skip: bool) -> Result<(usize, usize, usize), SimError> {
    plan.streams
        .iter()
        .find(|s| s.consumer == consumer && s.producer == producer && s.kind != StreamKind::Parameter && (s.kind == StreamKind::Skip) == skip)
        .map(|s| (s.lanes, s.token_codes, s.depth))
        .ok_or_else(|| elab(format!("no stream planned from {producer} to {consumer}")))
}

fn window_width(geom: &LayerGeom, ow_par: usize) -> usize {
    geom.fw + (ow_par - 1) * geom.stride
}

fn make_window(id: &str, geom: LayerGeom, ow_par: usize, input: (Vec<usize>, usize), out: usize, fwd: Option<Forward>, lane_parallel: bool) -> Result<WindowTask, SimError> {
    if geom.pad > 0 && (2 * geom.pad >= geom.fh || 2 * geom.pad >= geom.fw) {
        return Err(elab(format!("{id}: padding {} needs windows out of stream order", geom.pad)));
    }
    if geom.ow % ow_par != 0 {
        return Err(elab(format!("{id}: ow {} not divisible by ow_par {ow_par}", geom.ow)));
    }
    let (lanes, token_codes) = input;
    if geom.iw % lanes.len() != 0 {
        return Err(elab(format!("{id}: {} input lanes do not tile width {}", lanes.len(), geom.iw)));
    }
    let width = window_width(&geom, ow_par);
    let b = geom.ich * ((geom.fh - 1) * geom.iw + width - 1);
    let rate = ow_par * geom.stride * geom.stride;
    // Room for the input lanes to run ahead of the oldest tap; a strided layer
    // also holds the extra input rows it consumes per output row, and every
    // layer the next frame's first rows while its bottom padding drains.
    let gap = geom.pad * (geom.iw + 1) * geom.ich;
    let span = (b + 1 + rate * geom.ich + (geom.stride - 1) * geom.iw * geom.ich + 2 * gap) as i64;
    let n = lanes.len();
    let cursors = if lane_parallel {
        lanes.into_iter().enumerate().map(|(lane, chan)| LaneCursor { chans: vec![chan], token_codes, lane, step: n, f: 0, y: 0, x: lane, c: 0, done: true }).collect()
    } else {
        vec![LaneCursor { chans: lanes, token_codes, lane: 0, step: 1, f: 0, y: 0, x: 0, c: 0, done: true }]
    };
    let mut w = WindowTask {
        cursors,
        geom,
        width,
        ow_par,
        b: b as i64,
        span,
        rate,
        ring: vec![0; span as usize],
        frame_size: (geom.ih * geom.iw * geom.ich) as i64,
        frame_stride: (geom.ih * geom.iw * geom.ich + gap) as i64,
        n_frames: 0,
        end: 0,
        f: 0,
        oy: 0,
        ox0: 0,
        c: 0,
        t_new: 0,
        windows_done: true,
        out,
        fwd,
    };
    w.t_new = w.newest_index();
    Ok(w)
}

/// Builds the task/FIFO network for a graph and its allocation.
pub fn elaborate(g: &Graph, plan: &AllocationPlan, config: &SimConfig) -> Result<Network, SimError> {
    let v = crate::model::validate_graph(g);
    if !v.is_empty() {
        return Err(elab(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")));
    }
    let order: Vec<String> = topo_order(g).ok_or_else(|| elab("graph has a cycle"))?.into_iter().map(|s| s.to_string()).collect();
    let mut lk = Linker { channels: Vec::new(), ports: IndexMap::new() };
    let mut readers: IndexMap<(String, usize), CodeReader> = IndexMap::new();

    // Pass 1: every consumer links its inputs.
    for id in &order {
        let n = &g.nodes[id];
        if n.merged_into.is_some() || n.kind == LayerKind::Input {
            continue;
        }
        for (pi, p) in n.preds.iter().enumerate() {
            let pn = &g.nodes[p];
            let dims = pn.geom.out_dims();
            let reader = if pi == 1 && n.skip.is_some() {
                let s = n.skip.as_ref().unwrap();
                let (lanes, token, depth) = planned(plan, &s.via, id, true)?;
                let key = match s.kind {
                    SkipKind::ForwardedWindow => (format!("{}#fwd", s.via), 0),
                    SkipKind::MergedOutput => (s.via.clone(), 1),
                };
                let ids = lk.link(key, format!("{}->{id}.skip", s.via), lanes, token, depth);
                CodeReader::new(ids, token, dims)
            } else {
                let key = producer_key(g, p);
                let pname = if key.1 == 1 { format!("{}:{p}", key.0) } else { p.clone() };
                let (lanes, token, depth) = planned(plan, &pname, id, n.kind == LayerKind::Add && pi == 1)?;
                let ids = lk.link(key, format!("{p}->{id}"), lanes, token, depth);
                CodeReader::new(ids, token, dims)
            };
            readers.insert((id.clone(), pi), reader);
        }
    }

    // Pass 2: tasks, producers before consumers.
    let mut tasks = Vec::new();
    let mut bodies = Vec::new();
    let mut inv = Inventory::default();
    let push = |tasks: &mut Vec<TaskInfo>, bodies: &mut Vec<Body>, name: String, kind: TaskKind, node: &str, b: Body| {
        tasks.push(TaskInfo { name, kind, node: node.to_string() });
        bodies.push(b);
    };
    for id in &order {
        let n = &g.nodes[id];
        if n.merged_into.is_some() {
            continue;
        }
        match n.kind {
            LayerKind::Input => {
                inv.dma_in += 1;
                let port = lk.take(id, 0);
                push(&mut tasks, &mut bodies, format!("{id}.dma"), TaskKind::DmaIn, id, Body::DmaIn(DmaIn { frames: Vec::new(), pixel: 0, frame: 0, port, first_input: Vec::new() }));
            }
            LayerKind::Output => {
                inv.dma_out += 1;
                let reader = readers.shift_remove(&(id.clone(), 0)).unwrap();
                let per_cycle = reader.lanes.len() * reader.token_codes;
                let pspec = g.nodes[&n.preds[0]].specs.y;
                if pspec.frac != n.specs.y.frac || pspec.bw > n.specs.y.bw {
                    return Err(elab(format!("{id}: output format conversion is not supported")));
                }
                let body = DmaOut { reader, dims: n.geom.out_dims(), spec: n.specs.y, per_cycle, cur: Vec::new(), frames: Vec::new(), done_cycle: Vec::new(), n_frames: 0 };
                push(&mut tasks, &mut bodies, format!("{id}.dma"), TaskKind::DmaOut, id, Body::DmaOut(body));
            }
            k if k.is_conv_like() => {
                let l = plan.layers.get(id).ok_or_else(|| elab(format!("{id}: no allocation")))?;
                let p = g.params(id).ok_or_else(|| elab(format!("{id}: no parameters")))?;
                let geom = n.geom;
                let param_chan = |lk: &mut Linker, pid: &str| -> Result<usize, SimError> {
                    let s = plan.stream(&format!("{pid}.params"), pid, StreamKind::Parameter).ok_or_else(|| elab(format!("{pid}: no parameter stream")))?;
                    lk.channels.push(Channel::new(format!("{pid}.params"), s.depth, s.token_codes));
                    Ok(lk.channels.len() - 1)
                };
                let pchan = param_chan(&mut lk, id)?;
                let param = ParamTask { out: pchan, ich: geom.ich, groups: l.och_groups, c: 0, g: 0, remaining: 0, warmup: config.param_warmup };
                inv.parameter += 1;
                push(&mut tasks, &mut bodies, format!("{id}.params"), TaskKind::Parameter, id, Body::Param(param.clone()));

                let ds_id = g.nodes.values().find(|d| d.merged_into.as_deref() == Some(id.as_str())).map(|d| d.id.clone());
                let ds = match &ds_id {
                    Some(did) => {
                        let d = &g.nodes[did];
                        if d.geom.och != geom.och || d.geom.stride != geom.stride || d.geom.k() != 1 || d.geom.pad > geom.pad {
                            return Err(elab(format!("{did}: cannot share {id}'s loop")));
                        }
                        let dp = g.params(did).ok_or_else(|| elab(format!("{did}: no parameters")))?;
                        let dchan = param_chan(&mut lk, did)?;
                        inv.parameter += 1;
                        push(&mut tasks, &mut bodies, format!("{did}.params"), TaskKind::Parameter, did, Body::Param(ParamTask { out: dchan, ..param.clone() }));
                        let off = geom.pad - d.geom.pad;
                        let width = window_width(&geom, l.ow_par);
                        Some(MergedDs {
                            id: did.clone(),
                            params_in: dchan,
                            weight: dp.weight.clone(),
                            bias: dp.bias.clone(),
                            tap: off * width + off,
                            shift: shift_of(d)?,
                            y: d.specs.y,
                            relu: d.relu,
                            acc: vec![0; l.ow_par * geom.och],
                        })
                    }
                    None => None,
                };

                lk.channels.push(Channel::new(format!("{id}.win"), config.window_depth, geom.fh * window_width(&geom, l.ow_par)));
                let win = lk.channels.len() - 1;
                let fport = lk.take(&format!("{id}#fwd"), 0);
                let fwd = if fport.bundles.is_empty() {
                    None
                } else {
                    let tc = lk.channels[fport.bundles[0][0]].token_codes;
                    Some(Forward { port: fport, token_codes: tc, pending: Vec::new(), next: 0 })
                };
                let reader = readers.shift_remove(&(id.clone(), 0)).unwrap();
                let wt = make_window(id, geom, l.ow_par, (reader.lanes, reader.token_codes), win, fwd, config.lane_parallel_windows)?;
                inv.window_slices += if geom.k() > 1 { geom.k() + (l.ow_par - 1) * geom.fh * geom.stride } else { 0 };
                inv.padding += usize::from(geom.pad > 0);
                push(&mut tasks, &mut bodies, format!("{id}.window"), TaskKind::Window, id, Body::Window(Box::new(wt)));

                let skip = match &n.skip {
                    Some(s) => {
                        let reader = readers.shift_remove(&(id.clone(), 1)).unwrap();
                        let sf = g.nodes[&s.source].specs.y.frac;
                        let af = n.acc_frac();
                        if sf > af {
                            return Err(elab(format!("{id}: skip frac {sf} finer than accumulator frac {af}")));
                        }
                        Some(SkipIn { reader, align: (af - sf) as u32, banks: VecDeque::new(), per_cycle: l.och_par * l.ow_par })
                    }
                    None => None,
                };
                let packed = l.ow_par == 2 && n.specs.x.bw <= 8 && n.specs.w.map_or(false, |w| w.bw <= 8);
                let mut ports = vec![lk.take(id, 0)];
                if ds.is_some() {
                    ports.push(lk.take(id, 1));
                }
                let ct = ComputeTask {
                    id: id.clone(),
                    geom,
                    width: window_width(&geom, l.ow_par),
                    ow_par: l.ow_par,
                    och_par: l.och_par,
                    groups: l.och_groups,
                    packed,
                    weight: p.weight.clone(),
                    bias: p.bias.clone(),
                    shift: shift_of(n)?,
                    y: n.specs.y,
                    relu: n.relu,
                    win_in: win,
                    params_in: pchan,
                    skip,
                    ds,
                    acc: vec![0; l.ow_par * geom.och],
                    pipe: Pipe::new(config.pipeline_depth),
                    ports,
                    n_frames: 0,
                    f: 0,
                    pg: 0,
                    c: 0,
                    g: 0,
                    capture: None,
                    ds_capture: None,
                };
                inv.compute += 1;
                push(&mut tasks, &mut bodies, id.clone(), TaskKind::Compute, id, Body::Compute(Box::new(ct)));
            }
            k if k.is_pool() => {
                let geom = n.geom;
                let shift = if k == LayerKind::Avgpool {
                    if !geom.k().is_power_of_two() {
                        return Err(elab(format!("{id}: average over {} elements is not a shift", geom.k())));
                    }
                    geom.k().trailing_zeros()
                } else {
                    0
                };
                let in_frac = n.specs.x.frac + shift as i32;
                if in_frac < n.specs.y.frac {
                    return Err(elab(format!("{id}: output frac finer than input")));
                }
                lk.channels.push(Channel::new(format!("{id}.win"), config.window_depth, geom.k()));
                let win = lk.channels.len() - 1;
                let reader = readers.shift_remove(&(id.clone(), 0)).unwrap();
                let wt = make_window(id, geom, 1, (reader.lanes, reader.token_codes), win, None, config.lane_parallel_windows)?;
                inv.window_slices += if geom.k() > 1 { geom.k() } else { 0 };
                inv.padding += usize::from(geom.pad > 0);
                push(&mut tasks, &mut bodies, format!("{id}.window"), TaskKind::Window, id, Body::Window(Box::new(wt)));
                let pt = PoolTask {
                    geom,
                    max: k == LayerKind::Maxpool,
                    shift: (in_frac - n.specs.y.frac) as u32,
                    y: n.specs.y,
                    relu: n.relu,
                    win_in: win,
                    pipe: Pipe::new(config.pipeline_depth),
                    ports: vec![lk.take(id, 0)],
                    per_frame: geom.oh * geom.ow * geom.och,
                    emitted: 0,
                    n_frames: 0,
                    capture: None,
                };
                inv.pool += 1;
                push(&mut tasks, &mut bodies, id.clone(), TaskKind::Pool, id, Body::Pool(pt));
            }
            LayerKind::Add => {
                let a = readers.shift_remove(&(id.clone(), 0)).unwrap();
                let b = readers.shift_remove(&(id.clone(), 1)).unwrap();
                let (fa, fb) = (g.nodes[&n.preds[0]].specs.y.frac, g.nodes[&n.preds[1]].specs.y.frac);
                let f = fa.max(fb);
                if f < n.specs.y.frac {
                    return Err(elab(format!("{id}: output frac finer than operands")));
                }
                let dims = n.geom.out_dims();
                let at = AddTask {
                    a,
                    b,
                    align_a: (f - fa) as u32,
                    align_b: (f - fb) as u32,
                    shift: (f - n.specs.y.frac) as u32,
                    y: n.specs.y,
                    relu: n.relu,
                    dims,
                    pipe: Pipe::new(config.pipeline_depth),
                    ports: vec![lk.take(id, 0)],
                    per_frame: dims.iter().product(),
                    emitted: 0,
                    n_frames: 0,
                    capture: None,
                };
                inv.add += 1;
                push(&mut tasks, &mut bodies, id.clone(), TaskKind::Add, id, Body::Add(at));
            }
            k => return Err(elab(format!("{id}: {k:?} has no task"))),
        }
    }
    if let Some(((k, p), _)) = lk.ports.iter().find(|(_, port)| !port.bundles.is_empty()) {
        return Err(elab(format!("stream from {k} port {p} has no producer task")));
    }
    let inp = g.input_node().ok_or_else(|| elab("no input node"))?;
    Ok(Network { tasks, channels: lk.channels, inventory: inv, config: config.clone(), input_dims: inp.geom.out_dims(), input_spec: inp.specs.y, bodies })
}

fn shift_of(n: &crate::ir::LayerNode) -> Result<u32, SimError> {
    let s = n.acc_frac() - n.specs.y.frac;
    if s < 0 {
        return Err(elab(format!("{}: output frac finer than accumulator", n.id)));
    }
    Ok(s as u32)
}

// ---------------------------------------------------------------------------
// Running

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub name: String,
    pub kind: TaskKind,
    pub node: String,
    pub stats: TaskStats,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelTrace {
    pub name: String,
    pub capacity: usize,
    pub token_codes: usize,
    pub high_water: usize,
    pub pushes: u64,
    pub pops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub cycle: u64,
    pub task: String,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadlockReport {
    pub cycle: u64,
    pub tasks: Vec<(String, Status)>,
    /// `(name, occupancy, capacity)` of every channel.
    pub channels: Vec<(String, usize, usize)>,
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no progress at cycle {}; blocked:", self.cycle)?;
        for (t, s) in self.tasks.iter().filter(|(_, s)| matches!(s, Status::StallIn | Status::StallOut)) {
            write!(f, " {t}={s}")?;
        }
        write!(f, "; full:")?;
        for (c, o, cap) in self.channels.iter().filter(|(_, o, cap)| o >= cap) {
            write!(f, " {c}({o}/{cap})")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub frames: usize,
    pub cycles: u64,
    pub first_input: Vec<u64>,
    pub frame_done: Vec<u64>,
    #[serde(skip)]
    pub outputs: Vec<Tensor>,
    /// Per-layer outputs, when captured.
    #[serde(skip)]
    pub layer_outputs: IndexMap<String, Vec<Tensor>>,
    pub tasks: Vec<TaskTrace>,
    pub channels: Vec<ChannelTrace>,
    #[serde(skip)]
    pub events: Vec<Event>,
}

impl SimTrace {
    /// Cycles between the last two frame completions (the whole run for one frame).
    pub fn steady_interval(&self) -> u64 {
        match self.frame_done.len() {
            0 => 0,
            1 => self.frame_done[0] + 1,
            n => self.frame_done[n - 1] - self.frame_done[n - 2],
        }
    }

    /// First input pixel to last output code of frame 0.
    pub fn latency_cycles(&self) -> u64 {
        match (self.first_input.first(), self.frame_done.first()) {
            (Some(a), Some(b)) => b - a + 1,
            _ => 0,
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskTrace> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelTrace> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn events_csv(&self) -> String {
        let mut s = String::from("cycle,task,status\n");
        for e in &self.events {
            s.push_str(&format!("{},{},{}\n", e.cycle, e.task, e.status));
        }
        s
    }
}

impl Body {
    fn prepare(&mut self, n: usize, frames: &[Tensor], capture: bool) {
        match self {
            Body::DmaIn(d) => d.frames = frames.to_vec(),
            Body::DmaOut(d) => d.n_frames = n,
            // Its length comes from the owner's loop, set by the caller.
            Body::Param(_) => {}
            Body::Window(w) => w.prepare(n),
            Body::Compute(c) => {
                c.n_frames = n;
                if capture {
                    c.capture = Some(Vec::new());
                    if c.ds.is_some() {
                        c.ds_capture = Some(Vec::new());
                    }
                }
            }
            Body::Pool(p) => {
                p.n_frames = n;
                if capture {
                    p.capture = Some(Vec::new());
                }
            }
            Body::Add(a) => {
                a.n_frames = n;
                if capture {
                    a.capture = Some(Vec::new());
                }
            }
        }
    }
}

/// Runs the network on `frames` back to back.
pub fn simulate(net: &Network, frames: &[Tensor]) -> Result<SimTrace, SimError> {
    if frames.is_empty() {
        return Err(SimError::NoFrames);
    }
    for (i, f) in frames.iter().enumerate() {
        if f.dims != net.input_dims {
            return Err(SimError::Input { index: i, got: f.dims, want: net.input_dims });
        }
    }
    let n = frames.len();
    let cfg = &net.config;
    let mut bodies = net.bodies.clone();
    // Parameter streams run for the owner's whole loop.
    let loops: IndexMap<String, u64> = bodies
        .iter()
        .filter_map(|b| match b {
            Body::Compute(c) => {
                let per = (c.geom.oh * c.geom.ow / c.ow_par * c.geom.ich * c.groups) as u64 * n as u64;
                let mut v = vec![(c.id.clone(), per)];
                if let Some(d) = &c.ds {
                    v.push((d.id.clone(), per));
                }
                Some(v)
            }
            _ => None,
        })
        .flatten()
        .collect();
    for (b, info) in bodies.iter_mut().zip(&net.tasks) {
        b.prepare(n, frames, cfg.capture_layers);
        if let Body::Param(p) = b {
            p.remaining = loops[&info.node];
        }
    }
    let mut chans = net.channels.clone();
    let mut stats = vec![TaskStats::default(); bodies.len()];
    let mut last = vec![None::<Status>; bodies.len()];
    let mut events = Vec::new();
    let threshold = 4 * net.max_capacity().max(1) as u64;
    let mut stuck = 0u64;
    let mut cycle = 0u64;
    loop {
        let mut cx = Ctx { chans: &mut chans, progress: false };
        let mut finished = false;
        for i in (0..bodies.len()).rev() {
            let st = match &mut bodies[i] {
                Body::DmaIn(d) => d.step(&mut cx, cycle),
                Body::DmaOut(d) => {
                    let s = d.step(&mut cx, cycle);
                    finished = d.frames.len() == n;
                    s
                }
                Body::Param(p) => p.step(&mut cx),
                Body::Window(w) => w.step(&mut cx),
                Body::Compute(c) => c.step(&mut cx)?,
                Body::Pool(p) => p.step(&mut cx),
                Body::Add(a) => a.step(&mut cx),
            };
            let s = &mut stats[i];
            match st {
                Status::Fire => s.fire += 1,
                Status::StallIn => s.stall_in += 1,
                Status::StallOut => s.stall_out += 1,
                Status::Idle | Status::Done => s.idle += 1,
            }
            if cfg.record_events && last[i] != Some(st) {
                events.push(Event { cycle, task: net.tasks[i].name.clone(), status: st });
            }
            last[i] = Some(st);
        }
        let progress = cx.progress;
        if finished {
            break;
        }
        if progress {
            stuck = 0;
        } else {
            stuck += 1;
            if stuck > threshold {
                let report = DeadlockReport {
                    cycle,
                    tasks: net.tasks.iter().zip(&last).map(|(t, s)| (t.name.clone(), s.unwrap_or(Status::Idle))).collect(),
                    channels: chans.iter().map(|c| (c.name.clone(), c.occupancy(), c.capacity)).collect(),
                };
                return Err(SimError::Deadlock(Box::new(report)));
            }
        }
        cycle += 1;
        if cycle > cfg.max_cycles {
            return Err(SimError::MaxCycles(cfg.max_cycles));
        }
    }

    let mut trace = SimTrace {
        frames: n,
        cycles: cycle + 1,
        first_input: Vec::new(),
        frame_done: Vec::new(),
        outputs: Vec::new(),
        layer_outputs: IndexMap::new(),
        tasks: net.tasks.iter().zip(stats).map(|(t, stats)| TaskTrace { name: t.name.clone(), kind: t.kind, node: t.node.clone(), stats }).collect(),
        channels: chans.iter().map(|c| ChannelTrace { name: c.name.clone(), capacity: c.capacity, token_codes: c.token_codes, high_water: c.high_water, pushes: c.pushes, pops: c.pops }).collect(),
        events,
    };
    for b in bodies {
        match b {
            Body::DmaIn(d) => trace.first_input = d.first_input,
            Body::DmaOut(d) => {
                trace.frame_done = d.done_cycle;
                trace.outputs = d.frames;
            }
            Body::Compute(c) => {
                if let Some(cap) = c.capture {
                    trace.layer_outputs.insert(c.id.clone(), cap);
                }
                if let (Some(cap), Some(ds)) = (c.ds_capture, c.ds) {
                    trace.layer_outputs.insert(ds.id, cap);
                }
            }
            _ => {}
        }
    }
    Ok(trace)
}

/// Runs `frames` zero frames; a deadlock is reported, not raised.
pub fn check_deadlock_free(net: &Network, frames: usize) -> Result<DeadlockCheck, SimError> {
    let zeros = vec![Tensor::zeros(net.input_dims, net.input_spec); frames.max(1)];
    match simulate(net, &zeros) {
        Ok(t) => Ok(DeadlockCheck { deadlock_free: true, report: None, trace: Some(t) }),
        Err(SimError::Deadlock(r)) => Ok(DeadlockCheck { deadlock_free: false, report: Some(*r), trace: None }),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug)]
pub struct DeadlockCheck {
    pub deadlock_free: bool,
    pub report: Option<DeadlockReport>,
    pub trace: Option<SimTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub fps: f64,
    pub interval_cycles: u64,
    pub latency_cycles: u64,
    pub latency_ms: f64,
    pub bottleneck: String,
    /// Fraction of cycles the bottleneck compute task fired.
    pub bottleneck_utilization: f64,
}

pub fn measure(trace: &SimTrace, freq_mhz: f64) -> Measurement {
    let interval = trace.steady_interval().max(1);
    let (bottleneck, util) = trace
        .tasks
        .iter()
        .filter(|t| t.kind == TaskKind::Compute)
        .map(|t| (t.name.clone(), t.stats.fire as f64 / trace.cycles as f64))
        .fold((String::new(), -1.0), |a, b| if b.1 > a.1 { b } else { a });
    let lat = trace.latency_cycles();
    Measurement {
        fps: freq_mhz * 1e6 / interval as f64,
        interval_cycles: interval,
        latency_cycles: lat,
        latency_ms: lat as f64 / (freq_mhz * 1e3),
        bottleneck,
        bottleneck_utilization: util.max(0.0),
    }
}
