//! Python bindings for the HALP core: models, partition plans, the schedule
//! simulator, distributed inference and the model selector.

use std::collections::HashMap;
use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use halp::planner::{self, PartitionPlan, Scheme};
use halp::runtime::{self, InferenceInput, OffloadChoice, SessionOptions};
use halp::selector::{self, Catalog, ChannelState, Mode};
use halp::sim::{self, SimOptions};
use halp::tensor::Tensor;
use halp::zoo::{self, ModelSpec, ModelWeights, VggConfig};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A CNN specification: VGG-16 or one MobileNet-V1 variant.
#[pyclass(name = "Model", module = "halp_py", frozen)]
struct PyModel {
    inner: ModelSpec,
}

#[pymethods]
impl PyModel {
    /// VGG-16; `base_width` below 64 gives a narrower test network.
    #[staticmethod]
    #[pyo3(signature = (base_width = 64, classes = 1000))]
    fn vgg16(base_width: usize, classes: usize) -> PyResult<Self> {
        if base_width == 0 || classes == 0 {
            return Err(value_err("base_width and classes must be positive"));
        }
        let fc_hidden = if base_width == 64 { 4096 } else { (base_width * 64).max(classes) };
        Ok(Self { inner: zoo::build_vgg16_with(VggConfig { base_width, fc_hidden, num_classes: classes }) })
    }

    #[staticmethod]
    #[pyo3(signature = (alpha = 1.0, rho = 224, classes = 1000))]
    fn mobilenet(alpha: f64, rho: usize, classes: usize) -> PyResult<Self> {
        Ok(Self { inner: zoo::build_mobilenet_v1_with(alpha, rho, classes).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ModelSpec::from_json(text).map_err(value_err)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    /// (height, width, channels)
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        self.inner.input
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.layers.len()
    }

    /// Total multiply-accumulates of one inference.
    #[getter]
    fn macs(&self) -> u64 {
        self.inner.macs().total
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!("Model('{}', input={:?})", self.inner.name, self.inner.input)
    }
}

/// Row partition of a model across the host and two secondaries.
#[pyclass(name = "Plan", module = "halp_py", frozen)]
struct PyPlan {
    inner: PartitionPlan,
}

#[pymethods]
impl PyPlan {
    /// The paper's default layout (z1 = 4 for VGG-16).
    #[staticmethod]
    fn default(model: &PyModel) -> PyResult<Self> {
        Ok(Self { inner: planner::default_plan(&model.inner).map_err(value_err)? })
    }

    /// VGG-16 layout with `z1` overlap rows at the first block.
    #[staticmethod]
    fn vgg(model: &PyModel, z1: usize) -> PyResult<Self> {
        Ok(Self { inner: planner::build_plan_vgg(&model.inner, z1).map_err(value_err)? })
    }

    /// Makespan-optimal layout under the calibrated timing model.
    #[staticmethod]
    #[pyo3(signature = (model, rate_mbps = sim::REFERENCE_MBPS))]
    fn optimize(model: &PyModel, rate_mbps: f64) -> PyResult<Self> {
        let t = sim::calibrated_timing(&model.inner);
        Ok(Self { inner: planner::optimize_plan(&model.inner, &t, rate_mbps).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: PartitionPlan::from_json(text).map_err(value_err)? })
    }

    /// z1 for VGG-16 layouts, None otherwise.
    #[getter]
    fn z1(&self) -> Option<usize> {
        match self.inner.scheme {
            Scheme::Vgg { z1 } => Some(z1),
            _ => None,
        }
    }

    /// Input rows read by (host, ED1, ED2) at every partitioned layer.
    #[getter]
    fn input_rows(&self) -> Vec<(usize, usize, usize)> {
        self.inner.layers.iter().map(|l| (l.host_rows, l.ed1_rows, l.ed2_rows)).collect()
    }

    /// Exchange schedule as (before_layer, sender, receiver, start, end).
    #[getter]
    fn exchanges(&self) -> Vec<(usize, String, String, usize, usize)> {
        self.inner
            .exchange_schedule
            .iter()
            .map(|s| (s.before_layer, s.sender.to_string(), s.receiver.to_string(), s.row_range.start, s.row_range.end))
            .collect()
    }

    /// Coverage problems of this plan for `model`; empty when valid.
    fn validate(&self, model: &PyModel) -> Vec<String> {
        planner::validate_plan(&self.inner, &model.inner).iter().map(|v| v.to_string()).collect()
    }

    fn table(&self, model: &PyModel) -> String {
        halp::cli::plan_report(&self.inner, &model.inner)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

#[pyfunction]
fn overlap_recurrence(z_prev: usize) -> PyResult<usize> {
    planner::overlap_recurrence(z_prev).map_err(value_err)
}

#[pyfunction]
fn overlap_chain(z1: usize, blocks: usize) -> PyResult<Vec<usize>> {
    planner::overlap_chain(z1, blocks).map_err(value_err)
}

/// Simulated schedule: makespan, standalone time (both ms) and gain.
#[pyfunction]
#[pyo3(signature = (model, plan, rate_mbps = sim::REFERENCE_MBPS, image_kb = None))]
fn simulate(model: &PyModel, plan: &PyPlan, rate_mbps: f64, image_kb: Option<f64>) -> PyResult<HashMap<String, f64>> {
    let t = sim::calibrated_timing(&model.inner);
    let opts = SimOptions { raw_image_bits: image_kb.map(|kb| (kb * 1024.0 * 8.0).round() as u64) };
    let tl = sim::simulate_with(&plan.inner, &model.inner, &t, rate_mbps, opts).map_err(value_err)?;
    Ok(HashMap::from([
        ("makespan_ms".to_string(), tl.makespan_s * 1e3),
        ("standalone_ms".to_string(), tl.standalone_s * 1e3),
        ("gain".to_string(), tl.gain()),
    ]))
}

/// "raw" when the encoded image is smaller than the float32 segment it
/// would replace, else "tensor".
#[pyfunction]
fn offload_choice(image_bits: u64, segment_rows: usize, width: usize, channels: usize) -> &'static str {
    match runtime::offload_choice(image_bits, segment_rows, width, channels) {
        OffloadChoice::RawImage(_) => "raw",
        OffloadChoice::HalfTensor => "tensor",
    }
}

fn input_tensor(model: &ModelSpec, seed: u64, data: Option<Vec<f32>>) -> PyResult<Tensor> {
    let (h, w, c) = model.input;
    match data {
        None => Ok(Tensor::random(h, w, c, seed ^ 0x5eed)),
        Some(v) => Tensor::new(h, w, c, v).map_err(value_err),
    }
}

/// Single-node inference with seeded weights; `data` is an HWC row-major
/// input, random when omitted.
#[pyfunction]
#[pyo3(signature = (model, seed = 0, data = None))]
fn infer_local(py: Python<'_>, model: &PyModel, seed: u64, data: Option<Vec<f32>>) -> PyResult<Vec<f32>> {
    let x = input_tensor(&model.inner, seed, data)?;
    let m = &model.inner;
    py.detach(|| {
        let w = ModelWeights::random(m, seed);
        runtime::monolithic_infer(m, &w, &x).map_err(runtime_err)
    })
}

/// Three-node in-process inference; returns (output, max relative error
/// against the single-node oracle).
#[pyfunction]
#[pyo3(signature = (model, plan, seed = 0, data = None, timeout_s = 60.0))]
fn infer_distributed(
    py: Python<'_>,
    model: &PyModel,
    plan: &PyPlan,
    seed: u64,
    data: Option<Vec<f32>>,
    timeout_s: f64,
) -> PyResult<(Vec<f32>, f64)> {
    let x = input_tensor(&model.inner, seed, data)?;
    let (m, p) = (&model.inner, &plan.inner);
    py.detach(|| {
        let w = ModelWeights::random(m, seed);
        let want = runtime::monolithic_infer(m, &w, &x).map_err(runtime_err)?;
        let opts = SessionOptions { timeout: Duration::from_secs_f64(timeout_s) };
        let got = runtime::run_in_process(m, &w, p, &InferenceInput::Tensor(x), None, opts).map_err(runtime_err)?;
        let err = runtime::max_rel_err(&want, &got.output);
        Ok((got.output, err))
    })
}

/// Name of the most accurate shipped-catalog model meeting the deadline.
#[pyfunction]
#[pyo3(signature = (deadline_ms, image_kb, rate_mbps, mode = "halp"))]
fn select_model(deadline_ms: f64, image_kb: f64, rate_mbps: f64, mode: &str) -> PyResult<Option<String>> {
    let mode: Mode = mode.parse().map_err(value_err)?;
    let cat = Catalog::shipped();
    let task = selector::TaskInstance { image_bytes: image_kb * selector::KB, deadline_ms, throughput_mbps: rate_mbps };
    Ok(selector::select_model(&cat, &task, mode).map(|e| e.name.clone()))
}

/// Monte Carlo reliability over the shipped catalog: one dict per deadline.
#[pyfunction]
#[pyo3(signature = (deadlines, channel, mode = "halp", tasks = 10_000, seed = 0))]
fn reliability(
    py: Python<'_>,
    deadlines: Vec<f64>,
    channel: &str,
    mode: &str,
    tasks: usize,
    seed: u64,
) -> PyResult<Vec<HashMap<String, f64>>> {
    let ch: ChannelState = channel.parse().map_err(value_err)?;
    let mode: Mode = mode.parse().map_err(value_err)?;
    let pts = py
        .detach(|| selector::run_reliability(&Catalog::shipped(), &deadlines, ch, mode, tasks, seed))
        .map_err(value_err)?;
    Ok(pts
        .iter()
        .map(|p| {
            HashMap::from([
                ("deadline_ms".to_string(), p.deadline_ms),
                ("failure_prob".to_string(), p.failure_prob),
                ("expected_accuracy".to_string(), p.expected_accuracy),
                ("service_reliability".to_string(), p.service_reliability),
            ])
        })
        .collect())
}

#[pymodule]
fn halp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyPlan>()?;
    m.add_function(wrap_pyfunction!(overlap_recurrence, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_chain, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(offload_choice, m)?)?;
    m.add_function(wrap_pyfunction!(infer_local, m)?)?;
    m.add_function(wrap_pyfunction!(infer_distributed, m)?)?;
    m.add_function(wrap_pyfunction!(select_model, m)?)?;
    m.add_function(wrap_pyfunction!(reliability, m)?)?;
    m.add("REFERENCE_MBPS", sim::REFERENCE_MBPS)?;
    Ok(())
}
