//! Quantized-network intermediate representation.
//!
//! A [`Graph`] is an ordered collection of [`LayerNode`]s (insertion order is a
//! topological order), the producer/consumer edges between them and the integer
//! parameter tensors of every weighted layer.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Fixed-point format of a tensor: `value = code * 2^-frac`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bw: u32,
    pub frac: i32,
    pub signed: bool,
}

impl QuantSpec {
    pub const fn signed(bw: u32, frac: i32) -> Self {
        Self { bw, frac, signed: true }
    }

    pub const fn unsigned(bw: u32, frac: i32) -> Self {
        Self { bw, frac, signed: false }
    }

    /// Smallest representable code.
    pub fn q_min(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bw - 1))
        } else {
            0
        }
    }

    /// Largest representable code.
    pub fn q_max(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bw - 1)) - 1
        } else {
            (1i64 << self.bw) - 1
        }
    }

    pub fn contains(&self, code: i64) -> bool {
        code >= self.q_min() && code <= self.q_max()
    }

    pub fn is_valid(&self) -> bool {
        matches!(self.bw, 8 | 16 | 32)
    }

    /// Bytes used by one code in the weight blob / tensor file format.
    pub fn code_bytes(&self) -> usize {
        (self.bw / 8) as usize
    }
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = if self.signed { "s" } else { "u" };
        write!(f, "{s}{}.f{}", self.bw, self.frac)
    }
}

/// Geometry of a layer (NCHW-style extents without the batch).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerGeom {
    pub ich: usize,
    pub ih: usize,
    pub iw: usize,
    pub och: usize,
    pub oh: usize,
    pub ow: usize,
    pub fh: usize,
    pub fw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerGeom {
    /// Builds a geometry, deriving `oh`/`ow` from the input extents.
    pub fn conv(ich: usize, ih: usize, iw: usize, och: usize, fh: usize, fw: usize, stride: usize, pad: usize) -> Self {
        let oh = out_extent(ih, fh, stride, pad).unwrap_or(0);
        let ow = out_extent(iw, fw, stride, pad).unwrap_or(0);
        Self { ich, ih, iw, och, oh, ow, fh, fw, stride, pad }
    }

    /// Identity geometry for element-wise nodes (`input`, `output`, `add`).
    pub fn elementwise(ch: usize, h: usize, w: usize) -> Self {
        Self { ich: ch, ih: h, iw: w, och: ch, oh: h, ow: w, fh: 1, fw: 1, stride: 1, pad: 0 }
    }

    pub fn k(&self) -> usize {
        self.fh * self.fw
    }

    pub fn in_dims(&self) -> [usize; 3] {
        [self.ich, self.ih, self.iw]
    }

    pub fn out_dims(&self) -> [usize; 3] {
        [self.och, self.oh, self.ow]
    }

    /// Checks the output-extent formula; returns the expected `(oh, ow)` on mismatch.
    pub fn check_extents(&self) -> Result<(), (Option<usize>, Option<usize>)> {
        let eh = out_extent(self.ih, self.fh, self.stride, self.pad);
        let ew = out_extent(self.iw, self.fw, self.stride, self.pad);
        if eh == Some(self.oh) && ew == Some(self.ow) {
            Ok(())
        } else {
            Err((eh, ew))
        }
    }
}

/// `floor((i + 2*pad - f) / stride) + 1`, or `None` when the filter does not fit.
pub fn out_extent(i: usize, f: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || i + 2 * pad < f {
        return None;
    }
    Some((i + 2 * pad - f) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    PointwiseConv,
    Linear,
    Maxpool,
    Avgpool,
    Add,
    Input,
    Output,
}

impl LayerKind {
    /// Layers that carry weights and run on the MAC array.
    pub fn is_conv_like(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::PointwiseConv | LayerKind::Linear)
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::Maxpool | LayerKind::Avgpool)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv => "conv",
            LayerKind::PointwiseConv => "pointwise_conv",
            LayerKind::Linear => "linear",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Avgpool => "avgpool",
            LayerKind::Add => "add",
            LayerKind::Input => "input",
            LayerKind::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipRole {
    #[default]
    None,
    SkipSource,
    SkipSink,
    MergedDownsample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipKind {
    /// Temporal reuse: the skip tensor leaves `conv0`'s window buffer after its last use.
    ForwardedWindow,
    /// Loop merge: the skip tensor is the second output of the merged `conv0` task.
    MergedOutput,
}

/// Attached to the second convolution of a rewritten residual block. Its
/// accumulators are initialized with the skip tensor (the residual add is gone).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkipAnnotation {
    pub kind: SkipKind,
    /// Node whose output tensor is the skip value (block input or downsample conv).
    pub source: String,
    /// Task that physically emits the skip stream (always the block's first conv).
    pub via: String,
    /// Skip buffering after the rewrite, in activation codes.
    pub buffer_codes: usize,
    /// Skip buffering of the unoptimized block, in activation codes.
    pub naive_buffer_codes: usize,
    /// Planned FIFO depth in tokens (filled in by the allocator, 0 until then).
    pub fifo_depth: usize,
}

/// Quantization formats of one node's input, weights, bias and output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeSpecs {
    pub x: QuantSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<QuantSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<QuantSpec>,
    pub y: QuantSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub geom: LayerGeom,
    pub specs: NodeSpecs,
    pub relu: bool,
    pub preds: Vec<String>,
    #[serde(default)]
    pub skip_role: SkipRole,
    /// Set on a downsample conv fused into the task of the named conv.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_into: Option<String>,
    /// Set on a conv whose accumulators are initialized with a skip tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<SkipAnnotation>,
}

impl LayerNode {
    /// Fractional bits of the raw accumulator (`frac_x + frac_w`).
    pub fn acc_frac(&self) -> i32 {
        self.specs.x.frac + self.specs.w.map(|w| w.frac).unwrap_or(0)
    }

    /// Number of inputs that carry the main activation (skip excluded).
    pub fn main_pred(&self) -> Option<&str> {
        self.preds.first().map(String::as_str)
    }
}

/// Integer weight (och-major, then ich, fh, fw) and bias codes of one layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Vec<i32>,
    pub bias: Vec<i32>,
}

impl LayerParams {
    #[inline]
    pub fn w(&self, g: &LayerGeom, o: usize, c: usize, ky: usize, kx: usize) -> i32 {
        self.weight[((o * g.ich + c) * g.fh + ky) * g.fw + kx]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Graph {
    pub nodes: IndexMap<String, LayerNode>,
    pub edges: Vec<(String, String)>,
    pub params: IndexMap<String, LayerParams>,
}

impl Graph {
    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut LayerNode> {
        self.nodes.get_mut(id)
    }

    pub fn params(&self, id: &str) -> Option<&LayerParams> {
        self.params.get(id)
    }

    /// Appends a node and the edges from its predecessors.
    pub fn push(&mut self, node: LayerNode, params: Option<LayerParams>) {
        for p in &node.preds {
            self.edges.push((p.clone(), node.id.clone()));
        }
        if let Some(p) = params {
            self.params.insert(node.id.clone(), p);
        }
        self.nodes.insert(node.id.clone(), node);
    }

    /// Ids of the nodes that list `id` among their predecessors, in graph order.
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        self.nodes
            .values()
            .filter(|n| n.preds.iter().any(|p| p == id))
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn input_node(&self) -> Option<&LayerNode> {
        self.nodes.values().find(|n| n.kind == LayerKind::Input)
    }

    pub fn output_node(&self) -> Option<&LayerNode> {
        self.nodes.values().find(|n| n.kind == LayerKind::Output)
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.nodes.values().filter(|n| n.kind == kind).count()
    }

    /// Rebuilds `edges` from the predecessor lists.
    pub fn rebuild_edges(&mut self) {
        self.edges = self
            .nodes
            .values()
            .flat_map(|n| n.preds.iter().map(move |p| (p.clone(), n.id.clone())))
            .collect();
    }

    /// Conv-like nodes in graph order.
    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerNode> {
        self.nodes.values().filter(|n| n.kind.is_conv_like())
    }
}

/// `c_i = oh * ow * och * ich * fh * fw`, the MAC count of a conv-like layer.
pub fn layer_macs(geom: &LayerGeom) -> u64 {
    [geom.oh, geom.ow, geom.och, geom.ich, geom.fh, geom.fw]
        .iter()
        .map(|&v| v as u64)
        .product()
}
