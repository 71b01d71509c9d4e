//! Python bindings: task generation, meta-training, scoring, adaptation and
//! checkpoints. Configs are passed as JSON strings or dicts.

// pyo3 0.22 method wrappers convert `PyErr` into itself.
#![allow(clippy::useless_conversion)]

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use tasml::checkpoint::Checkpoint;
use tasml::dataset_kernel::{top_m_filter, FeatureMapper};
use tasml::driver::{adapt, evaluate, meta_train, AdaptParams, AdaptationTrace, TasmlConfig, TrainedSystem};
use tasml::harness::{cmd_run, ExperimentConfig};
use tasml::ls_meta_learn::{task_loss, MetaParams};
use tasml::taskgen::{sample_multimodal_tasks, Example, GeneratorConfig, MetaSet, Split, Task};
use tasml::TasmlError;

fn to_py(e: TasmlError) -> PyErr {
    match e {
        TasmlError::ConfigInvalid { .. } | TasmlError::Json(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Accepts a JSON string, a dict or `None` (all defaults).
fn json_arg(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<String> {
    match obj {
        None => Ok("{}".to_string()),
        Some(o) if o.is_none() => Ok("{}".to_string()),
        Some(o) => match o.extract::<String>() {
            Ok(s) => Ok(s),
            Err(_) => py.import_bound("json")?.call_method1("dumps", (o,))?.extract(),
        },
    }
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    }
}

fn examples(x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<Vec<Example>> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err(format!("{} inputs but {} labels", x.len(), y.len())));
    }
    Ok(x.into_iter().zip(y).map(|(x, y)| Example { x, y }).collect())
}

/// A set of few-shot tasks.
#[pyclass(name = "TaskSet", module = "tasml_py", frozen)]
struct PyTaskSet {
    inner: Arc<MetaSet>,
}

#[pymethods]
impl PyTaskSet {
    /// Samples `n_tasks` tasks from the synthetic multimodal generator.
    #[staticmethod]
    #[pyo3(signature = (n_tasks, split = "train", generator = None))]
    fn synthetic(py: Python<'_>, n_tasks: usize, split: &str, generator: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: GeneratorConfig = parse(&json_arg(py, generator)?)?;
        let split = parse_split(split)?;
        let set = py.allow_threads(|| sample_multimodal_tasks(&cfg, n_tasks, split)).map_err(to_py)?;
        Ok(PyTaskSet { inner: Arc::new(set) })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn mode_ids(&self) -> Vec<Option<usize>> {
        self.inner.tasks.iter().map(|t| t.mode_id).collect()
    }

    /// Task `index` as a dict of support/query inputs and labels.
    fn task<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let t = self.get(index)?;
        let d = PyDict::new_bound(py);
        let split = |ex: &[Example]| -> (Vec<Vec<f64>>, Vec<usize>) { ex.iter().map(|e| (e.x.clone(), e.y)).unzip() };
        let (sx, sy) = split(&t.support);
        let (qx, qy) = split(&t.query);
        d.set_item("support_x", sx)?;
        d.set_item("support_y", sy)?;
        d.set_item("query_x", qx)?;
        d.set_item("query_y", qy)?;
        d.set_item("ways", t.ways)?;
        d.set_item("mode_id", t.mode_id)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("TaskSet(n={}, dim={}, split={:?})", self.inner.len(), self.inner.dim(), self.inner.split)
    }
}

impl PyTaskSet {
    fn get(&self, index: usize) -> PyResult<&Task> {
        self.inner
            .tasks
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("task {index} out of range 0..{}", self.inner.len())))
    }
}

fn trace_dict<'py>(py: Python<'py>, tr: &AdaptationTrace) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    let records = PyList::empty_bound(py);
    for r in &tr.records {
        records.append((r.step, r.objective, r.accuracy))?;
    }
    d.set_item("records", records)?;
    d.set_item("selected", tr.selected.clone())?;
    d.set_item("initial_accuracy", tr.initial_accuracy)?;
    d.set_item("final_accuracy", tr.final_accuracy)?;
    d.set_item("final_theta", tr.final_theta.to_flat())?;
    Ok(d)
}

/// Meta-trained system: scoring model over the training tasks plus the
/// unconditional initialization.
#[pyclass(name = "System", module = "tasml_py", frozen)]
struct PySystem {
    inner: TrainedSystem,
}

impl PySystem {
    fn params(&self, steps: Option<usize>, top_m: Option<usize>) -> AdaptParams {
        let mut p = AdaptParams::from_config(&self.inner.config, self.inner.train.len());
        if let Some(s) = steps {
            p.steps = s;
        }
        if let Some(m) = top_m {
            p.top_m = m;
        }
        p
    }
}

#[pymethods]
impl PySystem {
    /// Fits the scoring model and trains the initialization on `tasks`.
    #[staticmethod]
    #[pyo3(signature = (tasks, config = None))]
    fn train(py: Python<'_>, tasks: &PyTaskSet, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: TasmlConfig = parse(&json_arg(py, config)?)?;
        let train = Arc::clone(&tasks.inner);
        let inner = py.allow_threads(|| meta_train(train, &cfg)).map_err(to_py)?;
        Ok(PySystem { inner })
    }

    /// Restores a system saved with `save`, given the same training tasks.
    #[staticmethod]
    fn load(path: PathBuf, tasks: &PyTaskSet) -> PyResult<Self> {
        let ck = Checkpoint::read(&path).map_err(to_py)?;
        let config: TasmlConfig = ck
            .config
            .get("tasml")
            .cloned()
            .ok_or_else(|| PyValueError::new_err("checkpoint config lacks `tasml`"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| PyValueError::new_err(e.to_string())))?;
        let sigs = ck.scoring.signatures();
        if sigs.len() != tasks.inner.len() {
            return Err(PyValueError::new_err(format!(
                "checkpoint holds {} tasks, got {}",
                sigs.len(),
                tasks.inner.len()
            )));
        }
        let mapper = FeatureMapper::new(ck.scoring.kernel().feature_map, tasks.inner.dim()).map_err(to_py)?;
        for (i, (t, s)) in tasks.inner.tasks.iter().zip(sigs).enumerate() {
            if mapper.signature(&t.support).map_err(to_py)? != *s {
                return Err(PyValueError::new_err(format!("task {i} does not match the checkpoint")));
            }
        }
        Ok(PySystem {
            inner: TrainedSystem {
                scoring: ck.scoring,
                theta0: ck.theta0,
                train: Arc::clone(&tasks.inner),
                config,
                init_losses: Vec::new(),
            },
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let config = serde_json::json!({ "tasml": self.inner.config });
        Checkpoint {
            config,
            theta0: self.inner.theta0.clone(),
            scoring: self.inner.scoring.clone(),
        }
        .write(&path)
        .map_err(to_py)
    }

    /// Config as a JSON string.
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    /// Flattened initialization `(W1, b1, W2, b2)`.
    fn theta0(&self) -> Vec<f64> {
        self.inner.theta0.to_flat()
    }

    fn init_losses(&self) -> Vec<f64> {
        self.inner.init_losses.clone()
    }

    /// Unfiltered scores of every training task for a target support set.
    fn score(&self, support_x: Vec<Vec<f64>>, support_y: Vec<usize>) -> PyResult<Vec<f64>> {
        let support = examples(support_x, support_y)?;
        Ok(self.inner.scoring.score(&support).map_err(to_py)?.full)
    }

    /// Top-`m` training tasks as `(index, weight)` pairs.
    fn select(&self, support_x: Vec<Vec<f64>>, support_y: Vec<usize>, m: usize) -> PyResult<Vec<(usize, f64)>> {
        let support = examples(support_x, support_y)?;
        let w = self.inner.scoring.score(&support).map_err(to_py)?;
        Ok(top_m_filter(&w, m).selected)
    }

    /// Adapts to task `index` of `tasks`; `steps` and `top_m` override the config.
    #[pyo3(signature = (tasks, index, steps = None, top_m = None))]
    fn adapt<'py>(
        &self,
        py: Python<'py>,
        tasks: &PyTaskSet,
        index: usize,
        steps: Option<usize>,
        top_m: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let task = tasks.get(index)?;
        let params = self.params(steps, top_m);
        let tr = py
            .allow_threads(|| adapt(&self.inner, task, &params, index as u64))
            .map_err(to_py)?;
        trace_dict(py, &tr)
    }

    /// Adapts to every task and returns mean/std accuracies before and after.
    #[pyo3(signature = (tasks, steps = None, top_m = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        tasks: &PyTaskSet,
        steps: Option<usize>,
        top_m: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let params = self.params(steps, top_m);
        let s = py
            .allow_threads(|| evaluate(&self.inner, &tasks.inner, &params))
            .map_err(to_py)?;
        let d = PyDict::new_bound(py);
        d.set_item("mean_accuracy", s.mean_accuracy)?;
        d.set_item("std_accuracy", s.std_accuracy)?;
        d.set_item("mean_initial_accuracy", s.mean_initial_accuracy)?;
        d.set_item("std_initial_accuracy", s.std_initial_accuracy)?;
        d.set_item("mode_retrieval", s.mode_retrieval)?;
        Ok(d)
    }

    /// Query loss and accuracy of the initialization on task `index`.
    fn task_loss(&self, tasks: &PyTaskSet, index: usize) -> PyResult<(f64, f64)> {
        let t = tasks.get(index)?;
        let r = task_loss(&self.inner.theta0, &t.support, &t.query, t.ways, self.inner.config.lambda_theta)
            .map_err(to_py)?;
        Ok((r.loss, r.accuracy))
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.theta0.n_params()
    }

    fn __repr__(&self) -> String {
        format!("System(n_train={}, dim={})", self.inner.train.len(), self.inner.theta0.dim())
    }
}

/// Runs a full experiment from a config file and returns per-seed accuracies.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_path: PathBuf) -> PyResult<Vec<(u64, f64, f64)>> {
    let exp = ExperimentConfig::load(&config_path).map_err(to_py)?;
    let report = py.allow_threads(|| cmd_run(&exp)).map_err(to_py)?;
    Ok(report
        .rows
        .iter()
        .map(|r| (r.seed, r.summary.mean_initial_accuracy, r.summary.mean_accuracy))
        .collect())
}

/// Number of parameters of the representation for input dimension `p`.
#[pyfunction]
fn n_params(p: usize) -> usize {
    MetaParams::zeros(p).n_params()
}

#[pymodule]
fn tasml_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTaskSet>()?;
    m.add_class::<PySystem>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(n_params, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
