//! Topology generators: the CIFAR-10 ResNet8/ResNet20 benchmarks and small
//! synthetic graphs used by tests.
//!
//! Quantization scheme of the generated nets: every 8-bit activation has
//! 4 fractional bits, a layer with fan-in `n` gets `round(log2(n)/2 + 6.5)`
//! weight fractional bits so that the requantization shift keeps activations
//! roughly scale-free under uniform random codes. The second conv of a residual
//! block emits its raw 32-bit accumulator; the add aligns the skip operand to it
//! and requantizes back to 8 bits with the block's ReLU.

use crate::ir::{Graph, LayerGeom, LayerKind, LayerNode, LayerParams, NodeSpecs, QuantSpec, SkipRole};
use crate::quant::{bias_spec, ACC_WIDTH};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ACT_FRAC: i32 = 4;
pub const ACT: QuantSpec = QuantSpec::signed(8, ACT_FRAC);

/// Weight fractional bits for a layer of the given fan-in.
pub fn weight_frac(fan_in: usize) -> i32 {
    (0.5 * (fan_in as f64).log2() + 6.5).round() as i32
}

/// Incremental graph construction with seeded parameters.
pub struct Builder {
    pub g: Graph,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self { g: Graph::default(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn out_dims(&self, id: &str) -> [usize; 3] {
        self.g.nodes[id].geom.out_dims()
    }

    fn out_spec(&self, id: &str) -> QuantSpec {
        self.g.nodes[id].specs.y
    }

    fn node(id: &str, kind: LayerKind, geom: LayerGeom, specs: NodeSpecs, relu: bool, preds: &[&str]) -> LayerNode {
        LayerNode {
            id: id.to_string(),
            kind,
            geom,
            specs,
            relu,
            preds: preds.iter().map(|s| s.to_string()).collect(),
            skip_role: SkipRole::None,
            merged_into: None,
            skip: None,
        }
    }

    pub fn input(&mut self, id: &str, dims: [usize; 3], spec: QuantSpec) -> String {
        let geom = LayerGeom::elementwise(dims[0], dims[1], dims[2]);
        let specs = NodeSpecs { x: spec, w: None, b: None, y: spec };
        self.g.push(Self::node(id, LayerKind::Input, geom, specs, false, &[]), None);
        id.to_string()
    }

    pub fn output(&mut self, id: &str, pred: &str) -> String {
        let [c, h, w] = self.out_dims(pred);
        let spec = self.out_spec(pred);
        let specs = NodeSpecs { x: spec, w: None, b: None, y: spec };
        self.g.push(Self::node(id, LayerKind::Output, LayerGeom::elementwise(c, h, w), specs, false, &[pred]), None);
        id.to_string()
    }

    /// Conv-like layer with random weights; `y` defaults to the raw accumulator
    /// format when `None`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, id: &str, kind: LayerKind, pred: &str, och: usize, f: usize, stride: usize, pad: usize, relu: bool, y: Option<QuantSpec>) -> String {
        let [ich, ih, iw] = self.out_dims(pred);
        let x = self.out_spec(pred);
        let geom = LayerGeom::conv(ich, ih, iw, och, f, f, stride, pad);
        let fan_in = ich * f * f;
        let w = QuantSpec::signed(8, weight_frac(fan_in));
        let b = bias_spec(x, w);
        let y = y.unwrap_or(QuantSpec::signed(ACC_WIDTH, x.frac + w.frac));
        let blim = (1i64 << (w.frac + 3)).min(b.q_max());
        let weight = (0..och * fan_in).map(|_| self.rng.gen_range(w.q_min()..=w.q_max()) as i32).collect();
        let bias = (0..och).map(|_| self.rng.gen_range(-blim..=blim) as i32).collect();
        let specs = NodeSpecs { x, w: Some(w), b: Some(b), y };
        self.g.push(Self::node(id, kind, geom, specs, relu, &[pred]), Some(LayerParams { weight, bias }));
        id.to_string()
    }

    pub fn pool(&mut self, id: &str, kind: LayerKind, pred: &str, f: usize, stride: usize, y: QuantSpec) -> String {
        let [c, ih, iw] = self.out_dims(pred);
        let x = self.out_spec(pred);
        let geom = LayerGeom::conv(c, ih, iw, c, f, f, stride, 0);
        let specs = NodeSpecs { x, w: None, b: None, y };
        self.g.push(Self::node(id, kind, geom, specs, false, &[pred]), None);
        id.to_string()
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str, y: QuantSpec, relu: bool) -> String {
        let [c, h, w] = self.out_dims(a);
        let x = self.out_spec(a);
        let specs = NodeSpecs { x, w: None, b: None, y };
        self.g.push(Self::node(id, LayerKind::Add, LayerGeom::elementwise(c, h, w), specs, relu, &[a, b]), None);
        id.to_string()
    }

    /// Basic residual block; a strided 1x1 downsample is inserted when the
    /// channel count or resolution changes.
    pub fn residual_block(&mut self, prefix: &str, x: &str, och: usize, stride: usize) -> String {
        let ich = self.out_dims(x)[0];
        let c0 = self.conv(&format!("{prefix}_conv0"), LayerKind::Conv, x, och, 3, stride, 1, true, Some(ACT));
        let c1 = self.conv(&format!("{prefix}_conv1"), LayerKind::Conv, &c0, och, 3, 1, 1, false, None);
        let skip = if stride != 1 || ich != och {
            self.conv(&format!("{prefix}_ds"), LayerKind::PointwiseConv, x, och, 1, stride, 0, false, Some(ACT))
        } else {
            x.to_string()
        };
        self.add(&format!("{prefix}_add"), &c1, &skip, ACT, true)
    }

    pub fn finish(self) -> Graph {
        self.g
    }
}

fn build_resnet(seed: u64, blocks_per_stage: usize) -> Graph {
    let mut b = Builder::new(seed);
    let x = b.input("input", [3, 32, 32], ACT);
    let mut x = b.conv("stem", LayerKind::Conv, &x, 16, 3, 1, 1, true, Some(ACT));
    for (s, &ch) in [16usize, 32, 64].iter().enumerate() {
        for k in 0..blocks_per_stage {
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            x = b.residual_block(&format!("s{}b{}", s + 1, k + 1), &x, ch, stride);
        }
    }
    let p = b.pool("pool", LayerKind::Avgpool, &x, 8, 8, ACT);
    let fc = b.conv("fc", LayerKind::Linear, &p, 10, 1, 1, 0, false, Some(ACT));
    b.output("output", &fc);
    b.finish()
}

/// ResNet8: stem, one block per stage at 16/32/64 channels, avgpool, linear(10).
pub fn build_resnet8(seed: u64) -> Graph {
    build_resnet(seed, 1)
}

/// ResNet20: stem, three blocks per stage at 16/32/64 channels, avgpool, linear(10).
pub fn build_resnet20(seed: u64) -> Graph {
    build_resnet(seed, 3)
}

/// Residual-free chain of 3x3 convs.
pub fn plain_chain(seed: u64, dims: [usize; 3], channels: &[usize]) -> Graph {
    let mut b = Builder::new(seed);
    let mut x = b.input("input", dims, ACT);
    for (i, &c) in channels.iter().enumerate() {
        x = b.conv(&format!("conv{i}"), LayerKind::Conv, &x, c, 3, 1, 1, true, Some(ACT));
    }
    b.output("output", &x);
    b.finish()
}

/// Stem plus two residual blocks: one identity block, one downsample block.
pub fn two_block_residual(seed: u64, ch: usize, hw: usize) -> Graph {
    let mut b = Builder::new(seed);
    let x = b.input("input", [ch, hw, hw], ACT);
    let x = b.conv("stem", LayerKind::Conv, &x, ch, 3, 1, 1, true, Some(ACT));
    let x = b.residual_block("b1", &x, ch, 1);
    let x = b.residual_block("b2", &x, 2 * ch, 2);
    b.output("output", &x);
    b.finish()
}

/// Chain of `och.len()` conv layers with the given output channels and filter
/// sizes over a `ch0 x hw x hw` input; used by the allocation oracle tests.
pub fn conv_chain(seed: u64, ch0: usize, hw: usize, layers: &[(usize, usize)]) -> Graph {
    let mut b = Builder::new(seed);
    let mut x = b.input("input", [ch0, hw, hw], ACT);
    for (i, &(och, f)) in layers.iter().enumerate() {
        let kind = if f == 1 { LayerKind::PointwiseConv } else { LayerKind::Conv };
        x = b.conv(&format!("l{i}"), kind, &x, och, f, 1, f / 2, true, Some(ACT));
    }
    b.output("output", &x);
    b.finish()
}

/// Uniform random 8-bit input frame for a graph.
pub fn random_input(g: &Graph, seed: u64) -> crate::tensor::Tensor {
    let inp = g.input_node().expect("graph has an input");
    let spec = inp.specs.y;
    let dims = inp.geom.out_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = (0..dims.iter().product::<usize>()).map(|_| rng.gen_range(spec.q_min()..=spec.q_max()) as i32).collect();
    crate::tensor::Tensor { dims, codes, spec }
}
