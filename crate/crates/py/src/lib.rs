//! Python bindings for the memvir training lab: the numeric primitives,
//! the loss family with analytic gradients, the virtual-class queue, and
//! the config-driven training / evaluation entry points.
//!
//! Matrix arguments are lists of rows; class-weight matrices are passed as
//! lists of columns (one D-vector per class), matching how proxies are
//! usually kept on the Python side.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use memvir::linalg::Matrix;
use memvir::losses::{LossConfig, LossVariant};
use memvir::memvir::{MemVirConfig, MemVirMode, MemVirState};

fn to_py_err(err: memvir::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py_err)
}

fn matrix_from_columns(cols: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let as_rows = Matrix::from_rows(&cols).map_err(to_py_err)?;
    Ok(as_rows.transpose())
}

fn matrix_to_columns(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.cols()).map(|j| m.column(j)).collect()
}

fn parse_variant(name: &str) -> PyResult<LossVariant> {
    LossVariant::ALL
        .iter()
        .copied()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            let names: Vec<&str> = LossVariant::ALL.iter().map(|v| v.name()).collect();
            PyValueError::new_err(format!(
                "unknown loss variant '{name}'; expected one of {}",
                names.join(", ")
            ))
        })
}

fn parse_mode(name: &str) -> PyResult<MemVirMode> {
    match name {
        "full" => Ok(MemVirMode::Full),
        "no_warmup" => Ok(MemVirMode::NoWarmup),
        "no_step_pacing" => Ok(MemVirMode::NoStepPacing),
        "baseline" => Ok(MemVirMode::Baseline),
        _ => Err(PyValueError::new_err(format!(
            "unknown mode '{name}'; expected full, no_warmup, no_step_pacing or baseline"
        ))),
    }
}

/// Scale a vector to unit l2 norm.
#[pyfunction]
fn l2_normalize(v: Vec<f64>) -> PyResult<Vec<f64>> {
    memvir::linalg::l2_normalize(&v).map_err(to_py_err)
}

/// Numerically stable log-softmax.
#[pyfunction]
fn stable_log_softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    if logits.is_empty() {
        return Err(PyValueError::new_err("empty logits"));
    }
    Ok(memvir::linalg::stable_log_softmax(&logits))
}

/// Cosine similarity between every row of `a` and every row of `b`.
#[pyfunction]
fn pairwise_cosine(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let a = matrix_from_rows(a)?;
    let b = matrix_from_rows(b)?;
    let out = memvir::linalg::pairwise_cosine(&a, &b).map_err(to_py_err)?;
    Ok(out.to_rows())
}

/// The staircase class-count schedule: C before warm-up step `u`, then one
/// extra block of `c` classes every `m + 1` steps, saturating at (n+1)c.
#[pyfunction]
fn schedule_class_count(step: usize, c: usize, u: usize, n: usize, m: usize) -> usize {
    memvir::memvir::schedule_class_count(step, c, u, n, m)
}

/// Loss value and exact analytic gradients.
///
/// Returns (value, d_embeddings rows, d_weight columns, curricular_t_next).
#[pyfunction]
#[pyo3(signature = (variant, embeddings, labels, weight_columns, gamma=16.0, margin=None,
                    curricular_t=0.0, proxy_anchor_alpha=32.0, proxy_anchor_delta=0.1))]
#[allow(clippy::too_many_arguments)]
fn loss_forward(
    variant: &str,
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    weight_columns: Vec<Vec<f64>>,
    gamma: f64,
    margin: Option<f64>,
    curricular_t: f64,
    proxy_anchor_alpha: f64,
    proxy_anchor_delta: f64,
) -> PyResult<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> {
    let mut cfg = LossConfig::new(parse_variant(variant)?).with_gamma(gamma);
    if let Some(m) = margin {
        cfg = cfg.with_margin(m);
    }
    cfg.curricular_t = curricular_t;
    cfg.proxy_anchor_alpha = proxy_anchor_alpha;
    cfg.proxy_anchor_delta = proxy_anchor_delta;
    let x = matrix_from_rows(embeddings)?;
    let w = matrix_from_columns(weight_columns)?;
    let out = memvir::losses::loss_forward(&cfg, &x, &labels, &w).map_err(to_py_err)?;
    Ok((
        out.value,
        out.d_embeddings.to_rows(),
        matrix_to_columns(&out.d_weights),
        out.curricular_t,
    ))
}

/// Gradient decomposition over an extended weight matrix: (tau0, [tau_n]).
/// With `n_steps = 0` this is the plain softmax decomposition.
#[pyfunction]
fn grad_decompose(
    x: Vec<f64>,
    y: usize,
    weight_columns: Vec<Vec<f64>>,
    n_steps: usize,
    num_classes: usize,
) -> PyResult<(f64, Vec<f64>)> {
    let w = matrix_from_columns(weight_columns)?;
    let d = memvir::losses::grad_decompose_memvir(&x, y, &w, n_steps, num_classes)
        .map_err(to_py_err)?;
    Ok((d.tau0, d.tau_virtual))
}

/// Exact self-excluded retrieval metrics over embeddings:
/// ({k: recall@k}, p_at_1, r_precision, map_at_r).
#[pyfunction]
fn retrieval_metrics(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    ks: Vec<u32>,
) -> PyResult<(std::collections::BTreeMap<u32, f64>, f64, f64, f64)> {
    let emb = matrix_from_rows(embeddings)?;
    let ranking = memvir::eval::retrieve(&emb, &emb, true).map_err(to_py_err)?;
    let m = memvir::eval::compute_metrics(&ranking, &labels, &labels, &ks).map_err(to_py_err)?;
    Ok((m.recall_at, m.p_at_1, m.r_precision, m.map_at_r))
}

/// Class-disjoint synthetic splits:
/// ((train_rows, train_labels), (test_rows, test_labels)).
#[pyfunction]
#[pyo3(signature = (num_train_classes, num_test_classes, samples_per_class, input_dim,
                    cluster_spread=0.5, center_scale=1.0, seed=0))]
fn gen_synthetic(
    num_train_classes: usize,
    num_test_classes: usize,
    samples_per_class: usize,
    input_dim: usize,
    cluster_spread: f64,
    center_scale: f64,
    seed: u64,
) -> PyResult<(
    (Vec<Vec<f64>>, Vec<usize>),
    (Vec<Vec<f64>>, Vec<usize>),
)> {
    let spec = memvir::data::SyntheticSpec {
        num_train_classes,
        num_test_classes,
        samples_per_class,
        input_dim,
        cluster_spread,
        center_scale,
        seed,
    };
    let (train, test) = memvir::data::gen_synthetic(&spec).map_err(to_py_err)?;
    Ok((
        (train.inputs.to_rows(), train.labels),
        (test.inputs.to_rows(), test.labels),
    ))
}

/// The virtual-class queue: snapshots of (class weights, embeddings,
/// labels) from past steps, re-labeled and handed back as extra classes
/// under the warm-up + step-pacing schedule.
#[pyclass]
struct MemVirQueue {
    state: MemVirState,
    cfg: MemVirConfig,
}

#[pymethods]
impl MemVirQueue {
    #[new]
    fn new(mode: &str, n_steps: usize, margin: usize, warmup_steps: usize) -> PyResult<Self> {
        Ok(MemVirQueue {
            state: MemVirState::new(),
            cfg: MemVirConfig {
                mode: parse_mode(mode)?,
                n_steps,
                margin,
                warmup_steps,
            },
        })
    }

    /// Training steps taken so far.
    fn step(&self) -> usize {
        self.state.step()
    }

    fn queue_len(&self) -> usize {
        self.state.queue_len()
    }

    fn capacity(&self) -> usize {
        self.cfg.capacity()
    }

    /// One step of the queue protocol: when active, selects past
    /// snapshots, returns the extended (embedding rows, labels, weight
    /// columns, k) and then enqueues copies of the inputs; during warm-up
    /// or in baseline mode the inputs pass through with k = 0.
    fn extend(
        &mut self,
        embeddings: Vec<Vec<f64>>,
        labels: Vec<usize>,
        weight_columns: Vec<Vec<f64>>,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, usize)> {
        let x = matrix_from_rows(embeddings)?;
        let w = matrix_from_columns(weight_columns)?;
        let num_classes = w.cols();
        if self.cfg.active_at(self.state.step()) {
            let virt =
                memvir::memvir::select_virtual(&self.state, &self.cfg, num_classes)
                    .map_err(to_py_err)?;
            let (xe, we, ye) = memvir::memvir::assemble_extended_batch(&x, &labels, &w, &virt)
                .map_err(to_py_err)?;
            self.state.enqueue_step(self.cfg.capacity(), &w, &x, &labels);
            Ok((xe.to_rows(), ye, matrix_to_columns(&we), virt.k))
        } else {
            self.state.advance();
            Ok((x.to_rows(), labels, matrix_to_columns(&w), 0))
        }
    }
}

/// Train per a JSON run config, writing metrics.jsonl, difficulty.csv,
/// checkpoint.json, embeddings.csv and run.json under `out_dir`. Returns
/// the final metrics record as a JSON string.
#[pyfunction]
fn train(config_json: &str, out_dir: &str) -> PyResult<String> {
    let cfg: memvir::config::RunConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(to_py_err)?;
    let outcome =
        memvir::commands::train_and_write(&cfg, std::path::Path::new(out_dir)).map_err(to_py_err)?;
    let last = outcome
        .metrics
        .last()
        .ok_or_else(|| PyValueError::new_err("run produced no metrics"))?;
    serde_json::to_string(last).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Evaluate a checkpoint on a feature CSV; returns the EvalReport JSON.
#[pyfunction]
fn eval_checkpoint(checkpoint: &str, data: &str) -> PyResult<String> {
    let report = memvir::commands::cmd_eval(
        std::path::Path::new(checkpoint),
        std::path::Path::new(data),
    )
    .map_err(to_py_err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Finite-difference check of every loss variant; returns
/// (passed, table_text).
#[pyfunction]
#[pyo3(signature = (instances=20))]
fn gradcheck(instances: usize) -> PyResult<(bool, String)> {
    let report = memvir::commands::cmd_gradcheck(None, instances).map_err(to_py_err)?;
    Ok((report.passed(), report.table()))
}

#[pymodule]
fn memvir_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(stable_log_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_class_count, m)?)?;
    m.add_function(wrap_pyfunction!(loss_forward, m)?)?;
    m.add_function(wrap_pyfunction!(grad_decompose, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(eval_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<MemVirQueue>()?;
    Ok(())
}
