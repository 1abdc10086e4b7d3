//! Python bindings: tensors, the four adapter forward paths, the cost model,
//! the serving simulator, adapter files and recovery training.
//!
//! Tensors cross the boundary as flat row-major `f64` lists plus a shape.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use flora_core::adapters as ad;
use flora_core::costmodel as cm;
use flora_core::numkit;
use flora_core::scheduler as sched;
use flora_core::trainer;

fn err(e: flora_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_activation(name: &str) -> PyResult<numkit::Activation> {
    match name {
        "identity" => Ok(numkit::Activation::Identity),
        "relu" => Ok(numkit::Activation::Relu),
        "gelu" => Ok(numkit::Activation::Gelu),
        other => Err(PyValueError::new_err(format!(
            "unknown activation `{other}` (expected identity, relu or gelu)"
        ))),
    }
}

fn parse_reduction(name: &str) -> PyResult<numkit::Reduction> {
    match name {
        "sum" => Ok(numkit::Reduction::Sum),
        "mean" => Ok(numkit::Reduction::Mean),
        other => Err(PyValueError::new_err(format!(
            "unknown reduction `{other}` (expected sum or mean)"
        ))),
    }
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: numkit::Tensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: numkit::Tensor::new(shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: numkit::Tensor::zeros(shape),
        }
    }

    #[staticmethod]
    fn ones(shape: Vec<usize>) -> Self {
        Self {
            inner: numkit::Tensor::ones(shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major copy of the data.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.reshape(shape).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyfunction]
fn matmul(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: numkit::matmul(&a.inner, &b.inner).map_err(err)?,
    })
}

#[pyfunction]
fn bmm(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: numkit::bmm(&a.inner, &b.inner).map_err(err)?,
    })
}

#[pyfunction]
fn ewise_mul(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: numkit::ewise_mul(&a.inner, &b.inner).map_err(err)?,
    })
}

#[pyfunction]
fn reduce(a: &PyTensor, axis: usize, mode: &str) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: numkit::reduce(&a.inner, axis, parse_reduction(mode)?).map_err(err)?,
    })
}

#[pyfunction]
fn activation(a: &PyTensor, kind: &str) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: numkit::activation(&a.inner, parse_activation(kind)?),
    })
}

/// Base projection with optional bias and output activation.
#[pyclass(name = "AdaptedLinear", from_py_object)]
#[derive(Clone)]
struct PyAdaptedLinear {
    inner: ad::AdaptedLinear<f64>,
}

#[pymethods]
impl PyAdaptedLinear {
    #[new]
    #[pyo3(signature = (w0, bias=None, activation="identity"))]
    fn new(w0: &PyTensor, bias: Option<&PyTensor>, activation: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ad::AdaptedLinear::new(
                w0.inner.clone(),
                bias.map(|b| b.inner.clone()),
                parse_activation(activation)?,
            )
            .map_err(err)?,
        })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }
}

/// Additive low-rank adapter (effective weight `W0 + B·A`).
#[pyclass(name = "LoraAdapter", from_py_object)]
#[derive(Clone)]
struct PyLoraAdapter {
    inner: ad::LoraAdapter<f64>,
}

#[pymethods]
impl PyLoraAdapter {
    #[new]
    fn new(id: u64, b: &PyTensor, a: &PyTensor) -> PyResult<Self> {
        Ok(Self {
            inner: ad::LoraAdapter::new(id, b.inner.clone(), a.inner.clone()).map_err(err)?,
        })
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    /// Full adapted weight `W0 + B·A`.
    fn materialize(&self, layer: &PyAdaptedLinear) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: ad::materialize_weight(&layer.inner, &ad::AdapterRecord::Lora(self.inner.clone()))
                .map_err(err)?,
        })
    }

    fn store(&self, path: &str) -> PyResult<()> {
        flora_core::registry::store(&ad::AdapterRecord::Lora(self.inner.clone()), path).map_err(err)
    }
}

/// Multiplicative low-rank adapter (effective weight `W0 ∘ (B·A)`).
#[pyclass(name = "FloraAdapter", from_py_object)]
#[derive(Clone)]
struct PyFloraAdapter {
    inner: ad::FloraAdapter<f64>,
}

#[pymethods]
impl PyFloraAdapter {
    #[new]
    #[pyo3(signature = (id, b, a, reduction="sum"))]
    fn new(id: u64, b: &PyTensor, a: &PyTensor, reduction: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ad::FloraAdapter::new(
                id,
                b.inner.clone(),
                a.inner.clone(),
                parse_reduction(reduction)?,
            )
            .map_err(err)?,
        })
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    /// Full adapted weight `W0 ∘ (B·A)`.
    fn materialize(&self, layer: &PyAdaptedLinear) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: ad::materialize_weight(
                &layer.inner,
                &ad::AdapterRecord::Flora(self.inner.clone()),
            )
            .map_err(err)?,
        })
    }

    fn store(&self, path: &str) -> PyResult<()> {
        flora_core::registry::store(&ad::AdapterRecord::Flora(self.inner.clone()), path).map_err(err)
    }
}

/// Activation-rescaling adapter (a learned vector over output columns).
#[pyclass(name = "Ia3Adapter", from_py_object)]
#[derive(Clone)]
struct PyIa3Adapter {
    inner: ad::Ia3Adapter<f64>,
}

#[pymethods]
impl PyIa3Adapter {
    #[new]
    fn new(id: u64, scale: &PyTensor) -> PyResult<Self> {
        Ok(Self {
            inner: ad::Ia3Adapter::new(id, scale.inner.clone()).map_err(err)?,
        })
    }

    /// Column-scaled weight.
    fn materialize(&self, layer: &PyAdaptedLinear) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: ad::materialize_ia3(&layer.inner, &self.inner).map_err(err)?,
        })
    }

    fn store(&self, path: &str) -> PyResult<()> {
        flora_core::registry::store(&ad::AdapterRecord::Ia3(self.inner.clone()), path).map_err(err)
    }
}

#[pyfunction]
fn lora_forward_shared(
    x: &PyTensor,
    layer: &PyAdaptedLinear,
    adapter: &PyLoraAdapter,
) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: ad::lora_forward_shared(&x.inner, &layer.inner, &adapter.inner).map_err(err)?,
    })
}

#[pyfunction]
fn bmm_lora_forward(
    x: &PyTensor,
    layer: &PyAdaptedLinear,
    adapters: Vec<PyLoraAdapter>,
) -> PyResult<PyTensor> {
    let ads: Vec<_> = adapters.into_iter().map(|a| a.inner).collect();
    Ok(PyTensor {
        inner: ad::bmm_lora_forward(&x.inner, &layer.inner, &ads).map_err(err)?,
    })
}

#[pyfunction]
fn flora_forward(
    x: &PyTensor,
    layer: &PyAdaptedLinear,
    adapter: &PyFloraAdapter,
) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: ad::flora_forward(&x.inner, &layer.inner, &adapter.inner).map_err(err)?,
    })
}

#[pyfunction]
fn flora_forward_batched(
    x: &PyTensor,
    layer: &PyAdaptedLinear,
    adapters: Vec<PyFloraAdapter>,
) -> PyResult<PyTensor> {
    let ads: Vec<_> = adapters.into_iter().map(|a| a.inner).collect();
    Ok(PyTensor {
        inner: ad::flora_forward_batched(&x.inner, &layer.inner, &ads).map_err(err)?,
    })
}

#[pyfunction]
fn ia3_forward(
    x: &PyTensor,
    layer: &PyAdaptedLinear,
    adapters: Vec<PyIa3Adapter>,
) -> PyResult<PyTensor> {
    let ads: Vec<_> = adapters.into_iter().map(|a| a.inner).collect();
    Ok(PyTensor {
        inner: ad::ia3_forward(&x.inner, &layer.inner, &ads).map_err(err)?,
    })
}

/// Freshly initialized adapter of the given kind; a `noop` strategy start
/// leaves the target layer's output unchanged.
#[pyfunction]
#[pyo3(signature = (kind, d, k, r, seed, strategy="noop", std=0.02))]
#[allow(clippy::too_many_arguments)]
fn init_adapter(
    py: Python<'_>,
    kind: &str,
    d: usize,
    k: usize,
    r: usize,
    seed: u64,
    strategy: &str,
    std: f64,
) -> PyResult<Py<PyAny>> {
    let kind: ad::AdapterKind = kind.parse().map_err(err)?;
    let strategy = match strategy {
        "noop" => ad::InitStrategy::NoOp,
        "random" => ad::InitStrategy::Random { std },
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown init strategy `{other}` (expected noop or random)"
            )))
        }
    };
    let record = ad::init_adapter::<f64>(kind, d, k, r, seed, strategy).map_err(err)?;
    match record {
        ad::AdapterRecord::Lora(inner) => {
            Ok(PyLoraAdapter { inner }.into_pyobject(py)?.into_any().unbind())
        }
        ad::AdapterRecord::Flora(inner) => {
            Ok(PyFloraAdapter { inner }.into_pyobject(py)?.into_any().unbind())
        }
        ad::AdapterRecord::Ia3(inner) => {
            Ok(PyIa3Adapter { inner }.into_pyobject(py)?.into_any().unbind())
        }
    }
}

/// Reads an adapter file written by `store` (64-bit payloads).
#[pyfunction]
fn load_adapter(py: Python<'_>, path: &str) -> PyResult<Py<PyAny>> {
    match flora_core::registry::load_f64(path).map_err(err)? {
        ad::AdapterRecord::Lora(inner) => {
            Ok(PyLoraAdapter { inner }.into_pyobject(py)?.into_any().unbind())
        }
        ad::AdapterRecord::Flora(inner) => {
            Ok(PyFloraAdapter { inner }.into_pyobject(py)?.into_any().unbind())
        }
        ad::AdapterRecord::Ia3(inner) => {
            Ok(PyIa3Adapter { inner }.into_pyobject(py)?.into_any().unbind())
        }
    }
}

/// On-disk size of an adapter file with the given geometry.
#[pyfunction]
fn storage_bytes(kind: &str, d: u64, k: u64, r: u64, dtype: &str) -> PyResult<u64> {
    let kind: ad::AdapterKind = kind.parse().map_err(err)?;
    let dtype = match dtype {
        "f32" => numkit::Dtype::F32,
        "f64" => numkit::Dtype::F64,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown dtype `{other}` (expected f32 or f64)"
            )))
        }
    };
    Ok(flora_core::registry::storage_bytes(kind, d, k, r, dtype))
}

#[pyfunction]
#[pyo3(signature = (c1, c2, d, b, l, r, m=1.0))]
#[allow(clippy::too_many_arguments)]
fn bmm_lora_cost(c1: f64, c2: f64, d: f64, b: f64, l: f64, r: f64, m: f64) -> PyResult<f64> {
    let p = cm::CostParams::new(c1, c2, d, b, l, r, m).map_err(err)?;
    Ok(cm::bmm_lora_cost(&p))
}

#[pyfunction]
#[pyo3(signature = (c1, c2, d, b, l, r, m=1.0))]
#[allow(clippy::too_many_arguments)]
fn flora_cost(c1: f64, c2: f64, d: f64, b: f64, l: f64, r: f64, m: f64) -> PyResult<f64> {
    let p = cm::CostParams::new(c1, c2, d, b, l, r, m).map_err(err)?;
    Ok(cm::flora_cost(&p))
}

#[pyfunction]
#[pyo3(signature = (c1, c2, d, r, m=1.0))]
fn flora_preferred(c1: f64, c2: f64, d: f64, r: f64, m: f64) -> PyResult<bool> {
    let p = cm::CostParams::new(c1, c2, d, 1.0, 1.0, r, m).map_err(err)?;
    Ok(cm::flora_preferred(&p))
}

/// Largest rank at which the multiplicative route stays preferred;
/// `None` means it is preferred at every rank.
#[pyfunction]
#[pyo3(signature = (c1, c2, d, m=1.0))]
fn crossover_rank(c1: f64, c2: f64, d: f64, m: f64) -> Option<u32> {
    cm::crossover_rank(c1, c2, d, m).bound()
}

#[pyfunction]
fn infer_coeff_ratio(d: f64, crossover: u32) -> f64 {
    cm::infer_coeff_ratio(d, crossover)
}

/// Runs the continuous-batching simulator over a generated workload and
/// returns its metrics as a dict.
#[pyfunction]
#[pyo3(signature = (n, len_lo, len_hi, strategy, rank, c1, c2, d, seed, rate=None, max_batched_tokens=8192))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    n: usize,
    len_lo: u32,
    len_hi: u32,
    strategy: &str,
    rank: u32,
    c1: f64,
    c2: f64,
    d: u32,
    seed: u64,
    rate: Option<f64>,
    max_batched_tokens: u32,
) -> PyResult<Py<PyAny>> {
    let strategy: sched::ServeStrategy = strategy.parse().map_err(err)?;
    let arrivals = match rate {
        None => sched::ArrivalProcess::Immediate,
        Some(r) => sched::ArrivalProcess::Poisson { rate: r },
    };
    let workload = sched::generate_workload(n, (len_lo, len_hi), arrivals, seed).map_err(err)?;
    let cfg = sched::ServeConfig {
        max_batched_tokens,
        strategy,
        rank,
        adapters_per_example: 1,
        cost: sched::CostSource::Model { c1, c2, d },
        seed,
    };
    let m = sched::run_continuous(&cfg, &workload).map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("throughput_tok_s", m.throughput_tok_s)?;
    out.set_item("latency_mean_s_per_tok", m.latency_mean_s_per_tok)?;
    out.set_item("latency_p50_s_per_tok", m.latency_p50_s_per_tok)?;
    out.set_item("latency_p95_s_per_tok", m.latency_p95_s_per_tok)?;
    out.set_item("total_tokens", m.total_tokens)?;
    out.set_item("duration_s", m.duration_s)?;
    out.set_item("completed", m.completions.len())?;
    out.set_item("rejected", m.rejections.len())?;
    Ok(out.into_any().unbind())
}

/// Trains one adapter against a planted teacher and returns the loss trace
/// and held-out MSE.
#[pyfunction]
#[pyo3(signature = (kind, d, k, seed, steps=None, lr=None))]
fn train_recovery(
    py: Python<'_>,
    kind: &str,
    d: usize,
    k: usize,
    seed: u64,
    steps: Option<u32>,
    lr: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let kind: ad::AdapterKind = kind.parse().map_err(err)?;
    let teacher = match kind {
        ad::AdapterKind::Flora => trainer::Teacher::multiplicative_rank1(d, k, seed),
        ad::AdapterKind::Lora => trainer::Teacher::additive_rank1(d, k, seed),
        ad::AdapterKind::Ia3 => trainer::Teacher::non_column_scaling(d, k, seed),
    };
    let mut cfg = trainer::TrainConfig::default_for(kind);
    cfg.seed = seed;
    if let Some(steps) = steps {
        cfg.steps = steps;
    }
    if let Some(lr) = lr {
        cfg.learning_rate = lr;
    }
    let outcome = trainer::train_recovery(&teacher, &cfg).map_err(err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("final_heldout_mse", outcome.final_heldout_mse)?;
    out.set_item("final_loss", outcome.loss_trace.last().copied())?;
    out.set_item("steps", outcome.loss_trace.len())?;
    Ok(out.into_any().unbind())
}

#[pymodule]
fn florapy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyAdaptedLinear>()?;
    m.add_class::<PyLoraAdapter>()?;
    m.add_class::<PyFloraAdapter>()?;
    m.add_class::<PyIa3Adapter>()?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(bmm, m)?)?;
    m.add_function(wrap_pyfunction!(ewise_mul, m)?)?;
    m.add_function(wrap_pyfunction!(reduce, m)?)?;
    m.add_function(wrap_pyfunction!(activation, m)?)?;
    m.add_function(wrap_pyfunction!(lora_forward_shared, m)?)?;
    m.add_function(wrap_pyfunction!(bmm_lora_forward, m)?)?;
    m.add_function(wrap_pyfunction!(flora_forward, m)?)?;
    m.add_function(wrap_pyfunction!(flora_forward_batched, m)?)?;
    m.add_function(wrap_pyfunction!(ia3_forward, m)?)?;
    m.add_function(wrap_pyfunction!(init_adapter, m)?)?;
    m.add_function(wrap_pyfunction!(load_adapter, m)?)?;
    m.add_function(wrap_pyfunction!(storage_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(bmm_lora_cost, m)?)?;
    m.add_function(wrap_pyfunction!(flora_cost, m)?)?;
    m.add_function(wrap_pyfunction!(flora_preferred, m)?)?;
    m.add_function(wrap_pyfunction!(crossover_rank, m)?)?;
    m.add_function(wrap_pyfunction!(infer_coeff_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train_recovery, m)?)?;
    Ok(())
}
