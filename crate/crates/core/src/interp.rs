//! Golden integer-only interpreter. Executes a graph layer by layer with no
//! dataflow machinery; its activations are the oracle for everything else.

use crate::ir::{Graph, LayerKind, LayerNode, LayerParams, QuantSpec};
use crate::model::{topo_order, validate_graph};
use crate::quant::{requantize, QuantError};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InterpError {
    #[error("{node}: input {index} has dims {got:?}, expected {want:?}")]
    Geometry { node: String, index: usize, got: [usize; 3], want: [usize; 3] },
    #[error("{node}: expected {want} inputs, got {got}")]
    Arity { node: String, want: usize, got: usize },
    #[error("{node}: missing weights")]
    MissingParams { node: String },
    #[error("{node}: accumulator {value} at output {index} leaves the 32-bit register")]
    Overflow { node: String, index: usize, value: i64 },
    #[error("{node}: {source}")]
    Quant { node: String, source: QuantError },
    #[error("{node}: {msg}")]
    Unsupported { node: String, msg: String },
    #[error("graph is invalid: {0}")]
    InvalidGraph(String),
}

/// Per-layer activations in execution order.
pub type Activations = IndexMap<String, Tensor>;

fn check_acc(node: &LayerNode, index: usize, value: i64) -> Result<i64, InterpError> {
    if value < i32::MIN as i64 || value > i32::MAX as i64 {
        return Err(InterpError::Overflow { node: node.id.clone(), index, value });
    }
    Ok(value)
}

fn rq(node: &LayerNode, acc: i64, in_frac: i32) -> Result<i32, InterpError> {
    requantize(acc, in_frac, node.specs.y, node.relu)
        .map(|v| v as i32)
        .map_err(|source| InterpError::Quant { node: node.id.clone(), source })
}

/// Left shift that brings a `from`-frac operand to `to` fractional bits.
fn align(code: i64, from: i32, to: i32) -> i64 {
    code << (to - from)
}

fn check_dims(node: &LayerNode, index: usize, t: &Tensor, want: [usize; 3]) -> Result<(), InterpError> {
    if t.dims != want {
        return Err(InterpError::Geometry { node: node.id.clone(), index, got: t.dims, want });
    }
    Ok(())
}

/// Executes one node.
///
/// Conv-like nodes take `[x]`, or `[x, skip]` when they carry a skip
/// annotation (the skip, aligned to the accumulator frac, initializes the
/// accumulator alongside the bias). Add nodes align both operands to the finer
/// frac before requantizing.
pub fn run_layer(node: &LayerNode, inputs: &[&Tensor], params: Option<&LayerParams>) -> Result<Tensor, InterpError> {
    let geo = &node.geom;
    let want = match node.kind {
        LayerKind::Add => 2,
        _ if node.skip.is_some() => 2,
        _ => 1,
    };
    if inputs.len() != want {
        return Err(InterpError::Arity { node: node.id.clone(), want, got: inputs.len() });
    }
    let x = inputs[0];
    check_dims(node, 0, x, geo.in_dims())?;
    let out_dims = geo.out_dims();
    let mut out = Tensor::zeros(out_dims, node.specs.y);
    let xf = x.spec.frac;

    match node.kind {
        LayerKind::Input | LayerKind::Output => {
            for (i, &c) in x.codes.iter().enumerate() {
                out.codes[i] = rq(node, c as i64, xf)?;
            }
        }
        LayerKind::Add => {
            let b = inputs[1];
            check_dims(node, 1, b, geo.in_dims())?;
            let f = xf.max(b.spec.frac);
            for i in 0..x.codes.len() {
                let s = align(x.codes[i] as i64, xf, f) + align(b.codes[i] as i64, b.spec.frac, f);
                out.codes[i] = rq(node, s, f)?;
            }
        }
        LayerKind::Conv | LayerKind::PointwiseConv | LayerKind::Linear => {
            let p = params.ok_or_else(|| InterpError::MissingParams { node: node.id.clone() })?;
            let acc_frac = node.acc_frac();
            let skip = if node.skip.is_some() {
                let s = inputs[1];
                check_dims(node, 1, s, out_dims)?;
                if s.spec.frac > acc_frac {
                    return Err(InterpError::Unsupported { node: node.id.clone(), msg: format!("skip frac {} finer than accumulator frac {acc_frac}", s.spec.frac) });
                }
                Some(s)
            } else {
                None
            };
            let (ih, iw, ich) = (geo.ih as isize, geo.iw as isize, geo.ich);
            for y in 0..geo.oh {
                for xo in 0..geo.ow {
                    for o in 0..geo.och {
                        let oi = out.idx(o, y, xo);
                        let mut acc = p.bias[o] as i64;
                        if let Some(s) = skip {
                            acc += align(s.codes[oi] as i64, s.spec.frac, acc_frac);
                        }
                        for ky in 0..geo.fh {
                            let yy = (y * geo.stride + ky) as isize - geo.pad as isize;
                            if yy < 0 || yy >= ih {
                                continue;
                            }
                            for kx in 0..geo.fw {
                                let xx = (xo * geo.stride + kx) as isize - geo.pad as isize;
                                if xx < 0 || xx >= iw {
                                    continue;
                                }
                                let base = x.idx(0, yy as usize, xx as usize);
                                for c in 0..ich {
                                    acc += p.w(geo, o, c, ky, kx) as i64 * x.codes[base + c] as i64;
                                }
                            }
                        }
                        check_acc(node, oi, acc)?;
                        out.codes[oi] = rq(node, acc, acc_frac)?;
                    }
                }
            }
        }
        LayerKind::Maxpool | LayerKind::Avgpool => {
            let k = geo.k();
            let shift = if node.kind == LayerKind::Avgpool {
                if !k.is_power_of_two() {
                    return Err(InterpError::Unsupported { node: node.id.clone(), msg: format!("average over {k} elements is not a power-of-two division") });
                }
                k.trailing_zeros() as i32
            } else {
                0
            };
            for y in 0..geo.oh {
                for xo in 0..geo.ow {
                    for c in 0..geo.och {
                        let mut sum = 0i64;
                        let mut max = i64::MIN;
                        for ky in 0..geo.fh {
                            for kx in 0..geo.fw {
                                let yy = (y * geo.stride + ky) as isize - geo.pad as isize;
                                let xx = (xo * geo.stride + kx) as isize - geo.pad as isize;
                                // Zero padding: contributes 0 to both reductions.
                                let v = if yy < 0 || xx < 0 || yy >= geo.ih as isize || xx >= geo.iw as isize {
                                    0
                                } else {
                                    x.at(c, yy as usize, xx as usize) as i64
                                };
                                sum += v;
                                max = max.max(v);
                            }
                        }
                        let oi = out.idx(c, y, xo);
                        out.codes[oi] = if node.kind == LayerKind::Avgpool { rq(node, sum, xf + shift)? } else { rq(node, max, xf)? };
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Runs the whole graph on one input frame. Returns the output node's tensor
/// and every node's activation.
pub fn run_graph(g: &Graph, input: &Tensor) -> Result<(Tensor, Activations), InterpError> {
    let v = validate_graph(g);
    if !v.is_empty() {
        return Err(InterpError::InvalidGraph(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")));
    }
    let order = topo_order(g).expect("validated graph is acyclic");
    let mut acts: Activations = IndexMap::with_capacity(order.len());
    for id in &order {
        let node = &g.nodes[id];
        let out = if node.kind == LayerKind::Input {
            run_layer(node, &[input], None)?
        } else {
            let ins: Vec<&Tensor> = node.preds.iter().map(|p| &acts[p]).collect();
            run_layer(node, &ins, g.params(id))?
        };
        acts.insert(id.clone(), out);
    }
    let out_id = &g.output_node().expect("validated graph has an output").id;
    Ok((acts[out_id].clone(), acts))
}

/// Float view of a tensor, for debugging and reports.
pub fn dequantize_tensor(t: &Tensor) -> Vec<f64> {
    let s: QuantSpec = t.spec;
    t.codes.iter().map(|&c| c as f64 * 2f64.powi(-s.frac)).collect()
}
