//! Python bindings: models, scheme-aware logits, run reports and the small
//! numeric helpers used to inspect them.

use parctx_core::cli::config::RunConfig;
use parctx_core::cli::runner;
use parctx_core::cli::train::train_recall_model;
use parctx_core::engine::{encode_context, query_forward, two_pass_forward, QuerySelection, SchemeConfig};
use parctx_core::layout::{assign_positions, theoretical_pair_count, SegmentedContext};
use parctx_core::model::{self, decode_tokens, encode_text, load_checkpoint, save_checkpoint, ModelConfig, BOS};
use parctx_core::selection::{Aggregation, SelectionConfig};
use parctx_core::stats::{attention_entropy, NoObserver};
use parctx_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn config_from(settings: Option<Vec<(String, String)>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in settings.unwrap_or_default() {
        cfg.set(&k, &v).map_err(py_err)?;
    }
    Ok(cfg)
}

#[pyclass(frozen, name = "Model", module = "parctx")]
struct PyModel(model::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (model_dim=128, layers=2, heads=4, mlp_dim=512, seed=0))]
    fn new(model_dim: usize, layers: usize, heads: usize, mlp_dim: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig { model_dim, layers, heads, mlp_dim, seed, ..ModelConfig::reference() };
        model::Model::init(cfg).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_checkpoint(path).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.0, path).map_err(py_err)
    }

    fn digest(&self) -> String {
        self.0.digest()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    /// Full-attention logits for `[BOS] + text`, one row per token.
    fn forward_logits(&self, text: &str) -> Vec<Vec<f32>> {
        let mut tokens = vec![BOS];
        tokens.extend(encode_text(text));
        model::forward_logits(&self.0, &tokens).chunks(model::VOCAB).map(<[f32]>::to_vec).collect()
    }

    /// Query logits with the context pieces encoded in parallel. A sink text
    /// becomes the shared prefix; selection is on when `select_k` is given.
    #[pyo3(signature = (pieces, query, sink=None, select_k=None, aggr="ht"))]
    fn parallel_logits(
        &self,
        pieces: Vec<String>,
        query: &str,
        sink: Option<&str>,
        select_k: Option<usize>,
        aggr: &str,
    ) -> PyResult<Vec<Vec<f32>>> {
        let aggregation = Aggregation::parse(aggr).map_err(py_err)?;
        let (sink_tokens, piece_tokens) = match sink {
            Some(s) => {
                let mut t = vec![BOS];
                t.extend(encode_text(s));
                (t, pieces.iter().map(|p| encode_text(p)).collect())
            }
            None => (Vec::new(), pieces.iter().map(|p| [vec![BOS], encode_text(p)].concat()).collect()),
        };
        let ctx = SegmentedContext::new(sink_tokens, piece_tokens, encode_text(query)).map_err(py_err)?;
        let sel = select_k.map(|k| SelectionConfig { k, aggregation, ..SelectionConfig::default() });
        let scheme = SchemeConfig::parallel(pieces.len()).with_sink(sink.is_some()).with_selection(sel);
        let pm = assign_positions(&ctx, scheme.position_mode).map_err(py_err)?;
        let mut cache = encode_context(&self.0, &ctx, &pm, &scheme, &mut NoObserver).map_err(py_err)?;
        let qpos = &pm.positions[ctx.query_range()];
        let out = match sel {
            Some(sc) if sc.aggregation.spans_layers() => {
                two_pass_forward(&self.0, &mut cache, &ctx.query_tokens, qpos, &sc, &mut NoObserver).map(|r| r.0)
            }
            Some(sc) => query_forward(&self.0, &mut cache, &ctx.query_tokens, qpos, &QuerySelection::PerLayer(sc), &mut NoObserver),
            None => query_forward(&self.0, &mut cache, &ctx.query_tokens, qpos, &QuerySelection::Off, &mut NoObserver),
        }
        .map_err(py_err)?;
        Ok(out.logits)
    }
}

/// Runs one experiment and returns its report as a JSON line.
#[pyfunction]
#[pyo3(signature = (model, settings=None))]
fn run_experiment(model: &PyModel, settings: Option<Vec<(String, String)>>) -> PyResult<String> {
    let cfg = config_from(settings)?;
    let out = runner::run_experiment(&model.0, &cfg).map_err(py_err)?;
    out.report.to_json_line().map_err(py_err)
}

/// Pair counts and layout summary without running a model.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn dry_run(settings: Option<Vec<(String, String)>>) -> PyResult<String> {
    let cfg = config_from(settings)?;
    let report = runner::dry_run(&cfg).map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| py_err(e.into()))
}

/// Trains a recall model; returns it with the `(step, loss)` curve.
#[pyfunction]
#[pyo3(signature = (settings=None))]
fn train_recall(py: Python<'_>, settings: Option<Vec<(String, String)>>) -> PyResult<(PyModel, Vec<(usize, f64)>)> {
    let cfg = config_from(settings)?;
    let (m, outcome) = py.detach(|| train_recall_model(&cfg)).map_err(py_err)?;
    Ok((PyModel(m), outcome.curve))
}

#[pyfunction(name = "attention_entropy")]
fn entropy(p: Vec<f32>) -> PyResult<f64> {
    attention_entropy(&p).map_err(py_err)
}

#[pyfunction]
fn pair_count(n: u64, p: u64) -> PyResult<u64> {
    theoretical_pair_count(n, p).map_err(py_err)
}

#[pyfunction]
fn decode(tokens: Vec<u32>) -> String {
    decode_tokens(&tokens)
}

#[pymodule]
fn parctx(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(dry_run, m)?)?;
    m.add_function(wrap_pyfunction!(train_recall, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(pair_count, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    Ok(())
}
