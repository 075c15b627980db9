//! Streaming residual-network accelerator model: integer IR, reference
//! interpreter, graph rewrites, parallelism allocation and a cycle-level
//! dataflow simulator.

pub mod dsp_pack;
pub mod ir;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod builders;
pub mod graph_opt;
pub mod interp;
pub mod alloc;
pub mod sim;
pub mod report;
