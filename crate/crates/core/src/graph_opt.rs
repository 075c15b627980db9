//! Residual-block rewrites that shrink skip-connection buffering.
//!
//! Rewrites work on IR annotations: semantics stay those of the reference
//! interpreter, the simulator reads the annotations to build the physical
//! streams. Per block:
//!
//! * identity skip -> temporal reuse: the skip values leave `conv0`'s window
//!   buffer after their last use instead of being buffered separately;
//! * downsample skip -> loop merge: the 1x1 downsample runs inside `conv0`'s
//!   task and is emitted as its second output;
//! * then the add is folded into `conv1`'s accumulator initialization.

use crate::ir::{Graph, LayerGeom, LayerKind, SkipAnnotation, SkipKind, SkipRole};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptError {
    #[error("{node}: unsupported topology: {msg}")]
    UnsupportedTopology { node: String, msg: String },
    #[error("{node}: precondition violated: {msg}")]
    Precondition { node: String, msg: String },
    #[error("receptive field with conv1 stride {0} is not supported")]
    Stride(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlock {
    /// Block input tensor (producer id).
    pub input: String,
    pub conv0: String,
    pub conv1: String,
    pub downsample: Option<String>,
    pub merge: String,
}

fn topo(node: &str, msg: impl Into<String>) -> OptError {
    OptError::UnsupportedTopology { node: node.to_string(), msg: msg.into() }
}

fn pre(node: &str, msg: impl Into<String>) -> OptError {
    OptError::Precondition { node: node.to_string(), msg: msg.into() }
}

/// Tries to read `long` as conv1 of a block whose short branch is `short`.
fn match_block(g: &Graph, add: &str, long: &str, short: &str) -> Option<ResidualBlock> {
    let c1 = g.node(long)?;
    if c1.kind != LayerKind::Conv || c1.preds.len() != 1 {
        return None;
    }
    let c0 = g.node(&c1.preds[0])?;
    if c0.kind != LayerKind::Conv || c0.preds.len() != 1 {
        return None;
    }
    let x = &c0.preds[0];
    let s = g.node(short)?;
    let downsample = if short == x {
        None
    } else if s.kind == LayerKind::PointwiseConv && s.preds.len() == 1 && &s.preds[0] == x {
        Some(short.to_string())
    } else {
        return None;
    };
    Some(ResidualBlock { input: x.clone(), conv0: c0.id.clone(), conv1: c1.id.clone(), downsample, merge: add.to_string() })
}

/// Finds every residual block, in graph order.
pub fn detect_blocks(g: &Graph) -> Result<Vec<ResidualBlock>, OptError> {
    let mut out = Vec::new();
    for n in g.nodes.values().filter(|n| n.kind == LayerKind::Add) {
        if n.preds.len() != 2 {
            return Err(topo(&n.id, "add without two operands"));
        }
        let (a, b) = (&n.preds[0], &n.preds[1]);
        let block = match_block(g, &n.id, a, b)
            .or_else(|| match_block(g, &n.id, b, a))
            .ok_or_else(|| topo(&n.id, "branches do not reconverge as (2 convs, 0 or 1 pointwise conv)"))?;
        for id in [&block.conv0, &block.conv1] {
            let cons = g.consumers(id);
            let expect = if id == &block.conv0 { &block.conv1 } else { &block.merge };
            if cons.len() != 1 || cons[0] != expect.as_str() {
                return Err(topo(id, format!("long-branch conv feeds {cons:?} besides the block")));
            }
        }
        if let Some(ds) = &block.downsample {
            if g.consumers(ds) != [block.merge.as_str()] {
                return Err(topo(ds, "downsample conv feeds nodes outside the block"));
            }
        }
        out.push(block);
    }
    Ok(out)
}

/// `(rh0, rw0, B_r)`: extent of conv0's input region feeding one conv1 output.
pub fn receptive_field(conv0: &LayerGeom, conv1: &LayerGeom) -> Result<(usize, usize, usize), OptError> {
    if conv1.stride != 1 {
        return Err(OptError::Stride(conv1.stride));
    }
    let rh = conv1.fh + conv0.fh - 1;
    let rw = conv1.fw + conv0.fw - 1;
    Ok((rh, rw, rh * rw))
}

/// Skip buffering of the unrewritten block: the skip value must wait for the
/// whole receptive field of conv1's output to have streamed in.
pub fn skip_buffer_naive_geom(conv0: &LayerGeom, conv1: &LayerGeom) -> Result<usize, OptError> {
    let (rh, rw, _) = receptive_field(conv0, conv1)?;
    Ok((conv0.iw * (rh - 1) + rw) * conv0.ich)
}

/// Skip buffering after the rewrite: conv1's own window buffer.
pub fn skip_buffer_optimized_geom(conv1: &LayerGeom) -> usize {
    ((conv1.fh - 1) * conv1.iw + conv1.fw - 1) * conv1.ich
}

pub fn skip_buffer_naive(g: &Graph, b: &ResidualBlock) -> Result<usize, OptError> {
    skip_buffer_naive_geom(&g.nodes[&b.conv0].geom, &g.nodes[&b.conv1].geom)
}

pub fn skip_buffer_optimized(g: &Graph, b: &ResidualBlock) -> usize {
    skip_buffer_optimized_geom(&g.nodes[&b.conv1].geom)
}

fn annotate(g: &Graph, b: &ResidualBlock, kind: SkipKind, source: &str) -> Result<SkipAnnotation, OptError> {
    Ok(SkipAnnotation {
        kind,
        source: source.to_string(),
        via: b.conv0.clone(),
        buffer_codes: skip_buffer_optimized(g, b),
        naive_buffer_codes: skip_buffer_naive(g, b)?,
        fifo_depth: 0,
    })
}

/// Re-sources an identity skip from conv0's window buffer.
pub fn apply_temporal_reuse(g: &Graph, b: &ResidualBlock) -> Result<Graph, OptError> {
    if b.downsample.is_some() {
        return Err(pre(&b.merge, "temporal reuse needs an identity skip"));
    }
    let mut out = g.clone();
    if let Some(s) = &g.nodes[&b.merge].skip {
        if s.kind == SkipKind::ForwardedWindow {
            return Ok(out);
        }
    }
    let ann = annotate(g, b, SkipKind::ForwardedWindow, &b.input)?;
    let add = out.node_mut(&b.merge).unwrap();
    add.preds = vec![b.conv1.clone(), b.input.clone()];
    add.skip = Some(ann);
    out.node_mut(&b.conv0).unwrap().skip_role = SkipRole::SkipSource;
    out.rebuild_edges();
    Ok(out)
}

/// Fuses the downsample 1x1 conv into conv0's task.
pub fn apply_loop_merge(g: &Graph, b: &ResidualBlock) -> Result<Graph, OptError> {
    let ds = b.downsample.as_ref().ok_or_else(|| pre(&b.merge, "loop merge needs a downsample conv"))?;
    let (c0, d) = (&g.nodes[&b.conv0].geom, &g.nodes[ds].geom);
    if c0.och != d.och || c0.oh != d.oh || c0.ow != d.ow || d.pad >= c0.fh || d.pad >= c0.fw {
        return Err(pre(ds, "downsample does not share conv0's output grid and channel count"));
    }
    let mut out = g.clone();
    let ann = annotate(g, b, SkipKind::MergedOutput, ds)?;
    let add = out.node_mut(&b.merge).unwrap();
    add.preds = vec![b.conv1.clone(), ds.clone()];
    add.skip = Some(ann);
    let dn = out.node_mut(ds).unwrap();
    dn.merged_into = Some(b.conv0.clone());
    dn.skip_role = SkipRole::MergedDownsample;
    out.node_mut(&b.conv0).unwrap().skip_role = SkipRole::SkipSource;
    out.rebuild_edges();
    Ok(out)
}

/// Deletes the add: conv1 initializes its accumulators with the skip tensor
/// (shifted to the accumulator frac) and takes over the add's output format.
pub fn fold_add_into_accumulator(g: &Graph, b: &ResidualBlock) -> Result<Graph, OptError> {
    let add = &g.nodes[&b.merge];
    let ann = add.skip.clone().ok_or_else(|| pre(&b.merge, "block must be rewritten before the add is folded"))?;
    let c1 = &g.nodes[&b.conv1];
    let acc_frac = c1.acc_frac();
    if c1.relu || c1.specs.y.bw != crate::quant::ACC_WIDTH || c1.specs.y.frac != acc_frac || !c1.specs.y.signed {
        return Err(pre(&b.conv1, "conv1 must emit its raw accumulator for the add to fold into it"));
    }
    let skip_frac = g.nodes[&ann.source].specs.y.frac;
    if skip_frac > acc_frac {
        return Err(pre(&b.merge, format!("skip frac {skip_frac} finer than accumulator frac {acc_frac}")));
    }
    let (y, relu) = (add.specs.y, add.relu);
    let mut out = g.clone();
    out.nodes.shift_remove(&b.merge);
    for n in out.nodes.values_mut() {
        for p in n.preds.iter_mut() {
            if p == &b.merge {
                *p = b.conv1.clone();
            }
        }
        if let Some(s) = n.skip.as_mut() {
            if s.source == b.merge {
                s.source = b.conv1.clone();
            }
        }
    }
    let c1 = out.node_mut(&b.conv1).unwrap();
    c1.preds.push(ann.source.clone());
    c1.specs.y = y;
    c1.relu = relu;
    c1.skip = Some(ann);
    c1.skip_role = SkipRole::SkipSink;
    out.rebuild_edges();
    Ok(out)
}

/// Rewrites and folds every residual block. Idempotent.
pub fn optimize(g: &Graph) -> Result<Graph, OptError> {
    let mut g = g.clone();
    while let Some(b) = detect_blocks(&g)?.into_iter().next() {
        let r = if b.downsample.is_some() { apply_loop_merge(&g, &b)? } else { apply_temporal_reuse(&g, &b)? };
        g = fold_add_into_accumulator(&r, &b)?;
    }
    Ok(g)
}

/// Blocks of an optimized graph, recovered from the skip annotations.
pub fn folded_blocks(g: &Graph) -> Vec<ResidualBlock> {
    g.nodes
        .values()
        .filter_map(|n| {
            let s = n.skip.as_ref()?;
            let c0 = &g.nodes[&s.via];
            Some(ResidualBlock {
                input: c0.preds[0].clone(),
                conv0: s.via.clone(),
                conv1: n.id.clone(),
                downsample: (s.kind == SkipKind::MergedOutput).then(|| s.source.clone()),
                merge: n.id.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_examples() {
        let g3 = LayerGeom::conv(16, 32, 32, 16, 3, 3, 1, 1);
        let g1 = LayerGeom::conv(16, 32, 32, 16, 1, 1, 1, 0);
        assert_eq!(receptive_field(&g3, &g3).unwrap(), (5, 5, 25));
        assert_eq!(receptive_field(&g1, &g1).unwrap(), (1, 1, 1));
        assert_eq!(receptive_field(&g3, &g1).unwrap(), (3, 3, 9));
        let s2 = LayerGeom::conv(16, 32, 32, 16, 3, 3, 2, 1);
        assert_eq!(receptive_field(&g3, &s2), Err(OptError::Stride(2)));
    }

    #[test]
    fn buffer_examples() {
        let g3 = LayerGeom::conv(16, 32, 32, 16, 3, 3, 1, 1);
        assert_eq!(skip_buffer_naive_geom(&g3, &g3).unwrap(), 2128);
        assert_eq!(skip_buffer_optimized_geom(&g3), 1056);
        let p = LayerGeom::conv(2, 4, 4, 2, 1, 1, 1, 0);
        assert_eq!(skip_buffer_naive_geom(&p, &p).unwrap(), 2);
        assert_eq!(skip_buffer_optimized_geom(&p), 0);
        let p1 = LayerGeom::conv(1, 4, 9, 1, 1, 1, 1, 0);
        assert_eq!(skip_buffer_naive_geom(&p1, &p1).unwrap(), 1);
        let ds1 = LayerGeom::conv(32, 16, 16, 32, 3, 3, 1, 1);
        assert_eq!(skip_buffer_optimized_geom(&ds1), 1088);
    }
}
