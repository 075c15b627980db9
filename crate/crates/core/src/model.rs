//! On-disk model format (JSON manifest + little-endian code blob) and graph validation.

use crate::ir::{
    Graph, LayerGeom, LayerKind, LayerNode, LayerParams, NodeSpecs, QuantSpec, SkipAnnotation, SkipRole,
};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IrError {
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported manifest version {0} (expected {MANIFEST_VERSION})")]
    Version(u32),
    #[error("node `{node}`, field `{field}`: {msg}")]
    Schema { node: String, field: String, msg: String },
    #[error("edge {producer} -> {consumer} references an unknown node")]
    DanglingEdge { producer: String, consumer: String },
    #[error("node `{node}`, tensor `{tensor}`: code {code} at index {index} outside {spec} range")]
    CodeRange { node: String, tensor: String, index: usize, code: i64, spec: QuantSpec },
    #[error("node `{node}`, tensor `{tensor}`: bytes {offset}..{end} exceed blob of {blob_len} bytes")]
    BlobTruncated { node: String, tensor: String, offset: usize, end: usize, blob_len: usize },
    #[error("graph is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    /// Byte offset from the start of the blob.
    pub offset: usize,
    /// Number of codes.
    pub len: usize,
    /// Storage bytes per code; defaults to the spec's bit-width / 8. A wider
    /// container than the spec (e.g. 8-bit codes stored as `i16`) is allowed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestNode {
    id: String,
    kind: LayerKind,
    geom: LayerGeom,
    specs: NodeSpecs,
    relu: bool,
    preds: Vec<String>,
    #[serde(default)]
    skip_role: SkipRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    merged_into: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skip: Option<SkipAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_ref: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_ref: Option<BlobRef>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    nodes: Vec<ManifestNode>,
    edges: Vec<(String, String)>,
}

/// Reads `len` codes stored on `nb` bytes each starting at byte `offset`.
/// Single-byte unsigned codes are zero-extended, everything else sign-extended.
pub fn read_codes(blob: &[u8], offset: usize, len: usize, nb: usize, signed: bool) -> Option<Vec<i32>> {
    if !matches!(nb, 1 | 2 | 4) {
        return None;
    }
    let end = offset.checked_add(len.checked_mul(nb)?)?;
    let bytes = blob.get(offset..end)?;
    Some(
        bytes
            .chunks_exact(nb)
            .map(|c| match nb {
                1 if signed => c[0] as i8 as i32,
                1 => c[0] as i32,
                2 if !signed => u16::from_le_bytes([c[0], c[1]]) as i32,
                2 => i16::from_le_bytes([c[0], c[1]]) as i32,
                _ => i32::from_le_bytes([c[0], c[1], c[2], c[3]]),
            })
            .collect(),
    )
}

/// Appends codes as little-endian two's complement of the spec's width.
pub fn write_codes(out: &mut Vec<u8>, codes: &[i32], spec: QuantSpec) {
    for &c in codes {
        match spec.code_bytes() {
            1 => out.push(c as i8 as u8),
            2 => out.extend_from_slice(&(c as i16).to_le_bytes()),
            _ => out.extend_from_slice(&c.to_le_bytes()),
        }
    }
}

fn load_tensor(
    node: &str,
    tensor: &str,
    blob: &[u8],
    r: BlobRef,
    spec: Option<QuantSpec>,
) -> Result<Vec<i32>, IrError> {
    let spec = spec.ok_or_else(|| IrError::Schema {
        node: node.into(),
        field: format!("specs.{}", &tensor[..1]),
        msg: format!("{tensor} reference present but no quantization spec"),
    })?;
    if !spec.is_valid() {
        return Err(IrError::Schema { node: node.into(), field: format!("specs.{}", &tensor[..1]), msg: format!("bit-width {} not in {{8, 16, 32}}", spec.bw) });
    }
    let nb = r.bytes.unwrap_or(spec.code_bytes());
    if !matches!(nb, 1 | 2 | 4) || nb < spec.code_bytes() {
        return Err(IrError::Schema { node: node.into(), field: format!("{}_ref.bytes", &tensor[..tensor.len().min(6)]), msg: format!("{nb} bytes cannot hold {spec} codes") });
    }
    let codes = read_codes(blob, r.offset, r.len, nb, spec.signed).ok_or(IrError::BlobTruncated {
        node: node.into(),
        tensor: tensor.into(),
        offset: r.offset,
        end: r.offset.saturating_add(r.len.saturating_mul(nb)),
        blob_len: blob.len(),
    })?;
    for (index, &c) in codes.iter().enumerate() {
        if !spec.contains(c as i64) {
            return Err(IrError::CodeRange { node: node.into(), tensor: tensor.into(), index, code: c as i64, spec });
        }
    }
    Ok(codes)
}

/// Parses and validates a model.
pub fn parse_model(manifest_text: &str, weight_blob: &[u8]) -> Result<Graph, IrError> {
    let m: Manifest = serde_json::from_str(manifest_text)?;
    if m.version != MANIFEST_VERSION {
        return Err(IrError::Version(m.version));
    }
    let ids: HashSet<String> = m.nodes.iter().map(|n| n.id.clone()).collect();
    for (p, c) in &m.edges {
        if !ids.contains(p) || !ids.contains(c) {
            return Err(IrError::DanglingEdge { producer: p.clone(), consumer: c.clone() });
        }
    }
    let mut g = Graph::default();
    for n in m.nodes {
        if g.nodes.contains_key(&n.id) {
            return Err(IrError::Schema { node: n.id, field: "id".into(), msg: "duplicate id".into() });
        }
        for p in &n.preds {
            if !ids.contains(p) {
                return Err(IrError::DanglingEdge { producer: p.clone(), consumer: n.id.clone() });
            }
        }
        let params = match (n.weight_ref, n.bias_ref) {
            (None, None) => None,
            (Some(w), Some(b)) => Some(LayerParams {
                weight: load_tensor(&n.id, "weight", weight_blob, w, n.specs.w)?,
                bias: load_tensor(&n.id, "bias", weight_blob, b, n.specs.b)?,
            }),
            (w, _) => {
                let field = if w.is_none() { "weight_ref" } else { "bias_ref" };
                return Err(IrError::Schema { node: n.id, field: field.into(), msg: "weight and bias references must both be present".into() });
            }
        };
        let node = LayerNode {
            id: n.id.clone(),
            kind: n.kind,
            geom: n.geom,
            specs: n.specs,
            relu: n.relu,
            preds: n.preds,
            skip_role: n.skip_role,
            merged_into: n.merged_into,
            skip: n.skip,
        };
        if let Some(p) = params {
            g.params.insert(n.id.clone(), p);
        }
        g.nodes.insert(n.id, node);
    }
    g.edges = m.edges;
    let violations = validate_graph(&g);
    if violations.is_empty() {
        Ok(g)
    } else {
        Err(IrError::Invalid(violations))
    }
}

/// Serializes a graph into `(manifest JSON, weight blob)`.
pub fn serialize_model(g: &Graph) -> (String, Vec<u8>) {
    let mut blob = Vec::new();
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for n in g.nodes.values() {
        let (mut weight_ref, mut bias_ref) = (None, None);
        if let (Some(p), Some(ws), Some(bs)) = (g.params.get(&n.id), n.specs.w, n.specs.b) {
            weight_ref = Some(BlobRef { offset: blob.len(), len: p.weight.len(), bytes: None });
            write_codes(&mut blob, &p.weight, ws);
            bias_ref = Some(BlobRef { offset: blob.len(), len: p.bias.len(), bytes: None });
            write_codes(&mut blob, &p.bias, bs);
        }
        nodes.push(ManifestNode {
            id: n.id.clone(),
            kind: n.kind,
            geom: n.geom,
            specs: n.specs,
            relu: n.relu,
            preds: n.preds.clone(),
            skip_role: n.skip_role,
            merged_into: n.merged_into.clone(),
            skip: n.skip.clone(),
            weight_ref,
            bias_ref,
        });
    }
    let m = Manifest { version: MANIFEST_VERSION, nodes, edges: g.edges.clone() };
    (serde_json::to_string_pretty(&m).expect("manifest serializes"), blob)
}

/// One broken invariant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node: String,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.node, self.detail)
    }
}

pub mod rules {
    pub const SPEC_WIDTH: &str = "spec-width";
    pub const GEOM_POSITIVE: &str = "geom-positive";
    pub const GEOM_EXTENT: &str = "geom-extent";
    pub const GEOM_IDENTITY: &str = "geom-identity";
    pub const PARAM_SHAPE: &str = "param-shape";
    pub const PARAM_RANGE: &str = "param-range";
    pub const ADD_ARITY: &str = "add-arity";
    pub const ADD_GEOMETRY: &str = "add-geometry";
    pub const PRED_ARITY: &str = "pred-arity";
    pub const DANGLING: &str = "dangling-pred";
    pub const EDGE_LIST: &str = "edge-list";
    pub const EDGE_GEOMETRY: &str = "edge-geometry";
    pub const ACYCLIC: &str = "acyclic";
    pub const SINGLE_INPUT: &str = "single-input";
    pub const SINGLE_OUTPUT: &str = "single-output";
    pub const MERGE: &str = "merged-downsample";
    pub const SKIP: &str = "skip-annotation";
}

/// Checks every IR invariant; an empty list means the graph is valid.
pub fn validate_graph(g: &Graph) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut push = |node: &str, rule: &'static str, detail: String| v.push(Violation { node: node.to_string(), rule, detail });

    let inputs = g.count_kind(LayerKind::Input);
    let outputs = g.count_kind(LayerKind::Output);
    if inputs != 1 {
        push("<graph>", rules::SINGLE_INPUT, format!("{inputs} input nodes"));
    }
    if outputs != 1 {
        push("<graph>", rules::SINGLE_OUTPUT, format!("{outputs} output nodes"));
    }

    for n in g.nodes.values() {
        let geo = &n.geom;
        for (name, s) in [("x", Some(n.specs.x)), ("w", n.specs.w), ("b", n.specs.b), ("y", Some(n.specs.y))] {
            if let Some(s) = s {
                if !s.is_valid() {
                    push(&n.id, rules::SPEC_WIDTH, format!("specs.{name} has bit-width {}", s.bw));
                }
            }
        }
        let dims = [geo.ich, geo.ih, geo.iw, geo.och, geo.oh, geo.ow, geo.fh, geo.fw, geo.stride];
        if dims.iter().any(|&d| d == 0) {
            push(&n.id, rules::GEOM_POSITIVE, format!("zero extent in {geo:?}"));
            continue;
        }
        match n.kind {
            LayerKind::Conv | LayerKind::PointwiseConv | LayerKind::Linear | LayerKind::Maxpool | LayerKind::Avgpool => {
                if let Err((eh, ew)) = geo.check_extents() {
                    push(
                        &n.id,
                        rules::GEOM_EXTENT,
                        format!("oh/ow = {}/{} but floor((i + 2*pad - f)/stride) + 1 gives {:?}/{:?}", geo.oh, geo.ow, eh, ew),
                    );
                }
                if n.kind.is_pool() && geo.ich != geo.och {
                    push(&n.id, rules::GEOM_IDENTITY, "pooling must keep the channel count".into());
                }
                if n.kind == LayerKind::PointwiseConv && geo.k() != 1 {
                    push(&n.id, rules::GEOM_EXTENT, "pointwise conv with non-1x1 filter".into());
                }
            }
            LayerKind::Add | LayerKind::Input | LayerKind::Output => {
                if geo.in_dims() != geo.out_dims() {
                    push(&n.id, rules::GEOM_IDENTITY, "element-wise node changes geometry".into());
                }
            }
        }
        if n.kind.is_conv_like() {
            match (g.params.get(&n.id), n.specs.w, n.specs.b) {
                (Some(p), Some(ws), Some(bs)) => {
                    let wl = geo.och * geo.ich * geo.k();
                    if p.weight.len() != wl {
                        push(&n.id, rules::PARAM_SHAPE, format!("weight has {} codes, expected och*ich*fh*fw = {wl}", p.weight.len()));
                    }
                    if p.bias.len() != geo.och {
                        push(&n.id, rules::PARAM_SHAPE, format!("bias has {} codes, expected och = {}", p.bias.len(), geo.och));
                    }
                    if let Some(i) = p.weight.iter().position(|&c| !ws.contains(c as i64)) {
                        push(&n.id, rules::PARAM_RANGE, format!("weight code {} at {i} outside {ws}", p.weight[i]));
                    }
                    if let Some(i) = p.bias.iter().position(|&c| !bs.contains(c as i64)) {
                        push(&n.id, rules::PARAM_RANGE, format!("bias code {} at {i} outside {bs}", p.bias[i]));
                    }
                }
                _ => push(&n.id, rules::PARAM_SHAPE, "conv-like node without weights, bias and their specs".into()),
            }
        }

        for p in &n.preds {
            if !g.nodes.contains_key(p) {
                push(&n.id, rules::DANGLING, format!("predecessor `{p}` does not exist"));
            }
        }
        let expect_preds = match n.kind {
            LayerKind::Input => 0,
            LayerKind::Add => 2,
            _ if n.skip.is_some() => 2,
            _ => 1,
        };
        if n.preds.len() != expect_preds {
            let rule = if n.kind == LayerKind::Add { rules::ADD_ARITY } else { rules::PRED_ARITY };
            push(&n.id, rule, format!("{} predecessors, expected {expect_preds}", n.preds.len()));
        }

        // Edge geometry.
        let out_of = |id: &str| g.nodes.get(id).map(|p| p.geom.out_dims());
        if n.kind == LayerKind::Add {
            let dims: Vec<_> = n.preds.iter().filter_map(|p| out_of(p)).collect();
            if dims.len() == 2 && (dims[0] != dims[1] || dims[0] != geo.in_dims()) {
                push(&n.id, rules::ADD_GEOMETRY, format!("operand geometries {:?} and {:?} differ from {:?}", dims[0], dims[1], geo.in_dims()));
            }
        } else if n.kind != LayerKind::Input {
            if let Some(d) = n.main_pred().and_then(out_of) {
                if d != geo.in_dims() {
                    push(&n.id, rules::EDGE_GEOMETRY, format!("producer `{}` emits {d:?}, node expects {:?}", n.preds[0], geo.in_dims()));
                }
            }
        }

        if let Some(host) = &n.merged_into {
            match g.nodes.get(host) {
                Some(h) if h.kind == LayerKind::Conv && h.preds.first() == n.preds.first() && h.geom.och == geo.och && geo.k() == 1 && h.geom.oh == geo.oh && h.geom.ow == geo.ow && geo.pad < h.geom.fh && geo.pad < h.geom.fw => {}
                _ => push(&n.id, rules::MERGE, format!("cannot be merged into `{host}`: needs a conv sharing input, och and output extents")),
            }
            if n.skip_role != SkipRole::MergedDownsample {
                push(&n.id, rules::MERGE, "merged node must have skip_role merged_downsample".into());
            }
        }
        if let Some(s) = &n.skip {
            if n.preds.get(1) != Some(&s.source) {
                push(&n.id, rules::SKIP, format!("second predecessor must be the skip source `{}`", s.source));
            }
            if let Some(d) = out_of(&s.source) {
                if d != geo.out_dims() {
                    push(&n.id, rules::SKIP, format!("skip tensor {d:?} does not match output {:?}", geo.out_dims()));
                }
            }
            // An add carries the annotation between a block rewrite and its fold.
            if !n.kind.is_conv_like() && n.kind != LayerKind::Add {
                push(&n.id, rules::SKIP, "only convolutions and adds can carry a skip annotation".into());
            }
        }
    }

    // Edge list must mirror the predecessor lists.
    let from_preds: HashSet<(String, String)> =
        g.nodes.values().flat_map(|n| n.preds.iter().map(move |p| (p.clone(), n.id.clone()))).collect();
    let listed: HashSet<(String, String)> = g.edges.iter().cloned().collect();
    for (p, c) in listed.symmetric_difference(&from_preds) {
        v.push(Violation { node: c.clone(), rule: rules::EDGE_LIST, detail: format!("edge {p} -> {c} not mirrored between edges and preds") });
    }

    if topo_order(g).is_none() {
        v.push(Violation { node: "<graph>".into(), rule: rules::ACYCLIC, detail: "graph contains a cycle".into() });
    }
    v
}

/// Topological order of node ids, or `None` if the graph has a cycle.
pub fn topo_order(g: &Graph) -> Option<Vec<String>> {
    let mut indeg: HashMap<&str, usize> = g.nodes.keys().map(|k| (k.as_str(), 0)).collect();
    let mut succ: HashMap<&str, Vec<&str>> = HashMap::new();
    for n in g.nodes.values() {
        for p in &n.preds {
            if g.nodes.contains_key(p) {
                *indeg.get_mut(n.id.as_str()).unwrap() += 1;
                succ.entry(p.as_str()).or_default().push(n.id.as_str());
            }
        }
    }
    let mut queue: VecDeque<&str> = g.nodes.keys().map(String::as_str).filter(|k| indeg[k] == 0).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(k) = queue.pop_front() {
        order.push(k.to_string());
        for &s in succ.get(k).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(s).unwrap();
            *d -= 1;
            if *d == 0 {
                queue.push_back(s);
            }
        }
    }
    (order.len() == g.nodes.len()).then_some(order)
}
