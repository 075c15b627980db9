use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use resflow::alloc::{predict, solve_allocation, window_plan_geom, AllocOptions, AllocationPlan, BudgetUnit, Strategy};
use resflow::builders::{build_resnet20, build_resnet8, random_input, two_block_residual};
use resflow::graph_opt::optimize;
use resflow::interp::run_graph;
use resflow::ir::{LayerGeom, QuantSpec};
use resflow::model::serialize_model;
use resflow::report::{self, Mismatch, RunConfig};
use resflow::sim::{check_deadlock_free, elaborate, measure, simulate, SimConfig, SimTrace};
use serde_json::Value;

create_exception!(resflow_py, ResflowError, PyException);

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    ResflowError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (_, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn doc<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(v).map_err(err)?)
}

/// Integer activation tensor, channels innermost.
#[pyclass(module = "resflow_py", skip_from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: resflow::tensor::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    #[pyo3(signature = (dims, codes, bw=8, frac=4))]
    fn new(dims: [usize; 3], codes: Vec<i32>, bw: u32, frac: i32) -> PyResult<Self> {
        resflow::tensor::Tensor::new(dims, codes, QuantSpec::signed(bw, frac)).map(|inner| Tensor { inner }).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn codes(&self) -> Vec<i32> {
        self.inner.codes.clone()
    }

    #[getter]
    fn frac(&self) -> i32 {
        self.inner.spec.frac
    }

    fn digest(&self) -> u64 {
        self.inner.digest()
    }

    fn __eq__(&self, other: PyRef<'_, Tensor>) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?}, spec={})", self.inner.dims, self.inner.spec)
    }
}

/// A quantized network graph.
#[pyclass(module = "resflow_py", skip_from_py_object)]
#[derive(Clone)]
struct Graph {
    inner: resflow::ir::Graph,
}

#[pymethods]
impl Graph {
    /// Parses a manifest and its weight blob.
    #[staticmethod]
    fn load(model: std::path::PathBuf, weights: std::path::PathBuf) -> PyResult<Self> {
        report::load_model(&model, &weights).map(|inner| Graph { inner }).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn resnet8(seed: u64) -> Self {
        Graph { inner: build_resnet8(seed) }
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn resnet20(seed: u64) -> Self {
        Graph { inner: build_resnet20(seed) }
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0, channels=8, hw=16))]
    fn two_block(seed: u64, channels: usize, hw: usize) -> Self {
        Graph { inner: two_block_residual(seed, channels, hw) }
    }

    fn optimize(&self) -> PyResult<Graph> {
        optimize(&self.inner).map(|inner| Graph { inner }).map_err(err)
    }

    fn node_ids(&self) -> Vec<String> {
        self.inner.nodes.keys().cloned().collect()
    }

    /// Count of nodes of one kind, e.g. `"add"`.
    fn count_kind(&self, kind: &str) -> PyResult<usize> {
        let k = serde_json::from_value(Value::String(kind.into())).map_err(err)?;
        Ok(self.inner.count_kind(k))
    }

    /// `(manifest JSON, weight blob)`.
    fn to_manifest(&self) -> (String, Vec<u8>) {
        serialize_model(&self.inner)
    }

    fn random_input(&self, seed: u64) -> Tensor {
        Tensor { inner: random_input(&self.inner, seed) }
    }

    /// Reference interpreter on one frame.
    fn run(&self, x: PyRef<'_, Tensor>) -> PyResult<Tensor> {
        run_graph(&self.inner, &x.inner).map(|(inner, _)| Tensor { inner }).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.nodes.len()
    }
}

/// Parallelism allocation and buffer sizing for one graph.
#[pyclass(module = "resflow_py", skip_from_py_object)]
#[derive(Clone)]
struct Plan {
    inner: AllocationPlan,
}

#[pymethods]
impl Plan {
    #[staticmethod]
    #[pyo3(signature = (graph, n_par, unit="dsp_slices", strategy="exact"))]
    fn solve(graph: PyRef<'_, Graph>, n_par: usize, unit: &str, strategy: &str) -> PyResult<Self> {
        let unit: BudgetUnit = serde_json::from_value(Value::String(unit.into())).map_err(err)?;
        let strategy: Strategy = serde_json::from_value(Value::String(strategy.into())).map_err(err)?;
        solve_allocation(&graph.inner, n_par, AllocOptions { unit, strategy }).map(|inner| Plan { inner }).map_err(err)
    }

    #[getter]
    fn interval_cycles(&self) -> f64 {
        *self.inner.interval_cycles.numer() as f64 / *self.inner.interval_cycles.denom() as f64
    }

    #[getter]
    fn cp_tot(&self) -> usize {
        self.inner.cp_tot
    }

    #[getter]
    fn budget_used(&self) -> usize {
        self.inner.budget_used
    }

    #[getter]
    fn bottleneck(&self) -> String {
        self.inner.bottleneck.clone()
    }

    /// Per-layer allocation as dicts.
    fn layers<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        doc(py, &self.inner.layers)
    }

    fn streams<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        doc(py, &self.inner.streams)
    }

    fn predict<'py>(&self, py: Python<'py>, graph: PyRef<'_, Graph>, freq_mhz: f64) -> PyResult<Bound<'py, PyAny>> {
        doc(py, &predict(&graph.inner, &self.inner, freq_mhz))
    }

    /// The `plan.json` document.
    #[pyo3(signature = (graph, freq_mhz=274.0))]
    fn to_json(&self, graph: PyRef<'_, Graph>, freq_mhz: f64) -> PyResult<String> {
        let cfg = RunConfig { model: "<memory>".into(), weights: "<memory>".into(), board: None, n_par: self.inner.n_par_budget, freq_mhz, frames: 1, seed: 0, out: ".".into() };
        serde_json::to_string(&report::plan_doc(&graph.inner, &self.inner, &cfg)).map_err(err)
    }
}

/// Result of a simulation run.
#[pyclass(module = "resflow_py", skip_from_py_object)]
struct Trace {
    inner: SimTrace,
}

#[pymethods]
impl Trace {
    #[getter]
    fn cycles(&self) -> u64 {
        self.inner.cycles
    }

    #[getter]
    fn steady_interval(&self) -> u64 {
        self.inner.steady_interval()
    }

    #[getter]
    fn latency_cycles(&self) -> u64 {
        self.inner.latency_cycles()
    }

    #[getter]
    fn outputs(&self) -> Vec<Tensor> {
        self.inner.outputs.iter().map(|t| Tensor { inner: t.clone() }).collect()
    }

    fn measure<'py>(&self, py: Python<'py>, freq_mhz: f64) -> PyResult<Bound<'py, PyAny>> {
        doc(py, &measure(&self.inner, freq_mhz))
    }

    /// The `trace.json` document as a dict.
    fn report<'py>(&self, py: Python<'py>, freq_mhz: f64) -> PyResult<Bound<'py, PyAny>> {
        doc(py, &report::trace_doc(&self.inner, freq_mhz))
    }
}

fn frames_of(frames: Vec<PyRef<'_, Tensor>>) -> Vec<resflow::tensor::Tensor> {
    frames.iter().map(|t| t.inner.clone()).collect()
}

/// Cycle-level simulation of `graph` under `plan`.
#[pyfunction]
#[pyo3(name = "simulate")]
fn simulate_py(graph: PyRef<'_, Graph>, plan: PyRef<'_, Plan>, frames: Vec<PyRef<'_, Tensor>>) -> PyResult<Trace> {
    let net = elaborate(&graph.inner, &plan.inner, &SimConfig::default()).map_err(err)?;
    simulate(&net, &frames_of(frames)).map(|inner| Trace { inner }).map_err(err)
}

/// `True` when `frames` zero frames drain without a deadlock.
#[pyfunction]
#[pyo3(name = "check_deadlock_free", signature = (graph, plan, frames=3))]
fn check_deadlock_free_py(graph: PyRef<'_, Graph>, plan: PyRef<'_, Plan>, frames: usize) -> PyResult<bool> {
    let net = elaborate(&graph.inner, &plan.inner, &SimConfig::default()).map_err(err)?;
    check_deadlock_free(&net, frames).map(|r| r.deadlock_free).map_err(err)
}

/// First simulator/interpreter difference on seeded frames, or `None`.
#[pyfunction]
#[pyo3(name = "verify", signature = (graph, n_par, frames=3, seed=0))]
fn verify_py<'py>(py: Python<'py>, graph: PyRef<'_, Graph>, n_par: usize, frames: usize, seed: u64) -> PyResult<Option<Bound<'py, PyAny>>> {
    let xs = report::seeded_frames(&graph.inner, seed, frames);
    let m: Option<Mismatch> = report::verify(&graph.inner, &graph.inner, n_par, &xs).map_err(err)?;
    m.map(|m| doc(py, &m)).transpose()
}

/// `(n_acc, bw_acc)` for a layer's accumulator.
#[pyfunction]
#[pyo3(signature = (och, ich, fh, fw, bw=8))]
fn accumulator_requirements(och: usize, ich: usize, fh: usize, fw: usize, bw: u32) -> PyResult<(u64, u32)> {
    let g = LayerGeom::conv(ich, fh.max(1), fw.max(1), och, fh, fw, 1, 0);
    resflow::quant::accumulator_requirements(&g, bw).map(|a| (a.n_acc, a.bw_acc_required)).map_err(err)
}

/// Two dot products sharing `b`, computed on packed DSP chains.
#[pyfunction]
#[pyo3(signature = (a, d, b, init=0))]
fn packed_dot(a: Vec<i8>, d: Vec<i8>, b: Vec<i8>, init: i32) -> PyResult<(i64, i64)> {
    resflow::dsp_pack::packed_dot(&a, &d, &b, init).map_err(err)
}

#[pyfunction]
fn split_chain(n_taps: usize) -> Vec<usize> {
    resflow::dsp_pack::split_chain(n_taps)
}

/// Line-buffer plan of a square-filter layer.
#[pyfunction]
#[pyo3(signature = (ich, ih, iw, f, stride=1, pad=0, ow_par=1))]
fn window_plan<'py>(py: Python<'py>, ich: usize, ih: usize, iw: usize, f: usize, stride: usize, pad: usize, ow_par: usize) -> PyResult<Bound<'py, PyAny>> {
    let g = LayerGeom::conv(ich, ih, iw, 1, f, f, stride, pad);
    doc(py, &window_plan_geom("layer", &g, ow_par).map_err(err)?)
}

#[pymodule]
fn resflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ResflowError", m.py().get_type::<ResflowError>())?;
    m.add_class::<Tensor>()?;
    m.add_class::<Graph>()?;
    m.add_class::<Plan>()?;
    m.add_class::<Trace>()?;
    m.add_function(wrap_pyfunction!(simulate_py, m)?)?;
    m.add_function(wrap_pyfunction!(check_deadlock_free_py, m)?)?;
    m.add_function(wrap_pyfunction!(verify_py, m)?)?;
    m.add_function(wrap_pyfunction!(accumulator_requirements, m)?)?;
    m.add_function(wrap_pyfunction!(packed_dot, m)?)?;
    m.add_function(wrap_pyfunction!(split_chain, m)?)?;
    m.add_function(wrap_pyfunction!(window_plan, m)?)?;
    Ok(())
}
