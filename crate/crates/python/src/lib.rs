//! Python bindings. Structured results come back as plain dicts and lists.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde_json::Value;

use anchorlens::pipeline::{
    run_score_pipeline, BackendSelection, Metric, PipelineConfig, PipelineInput,
};
use anchorlens::report::aggregate_report as aggregate;
use anchorlens::skeleton::{
    capacity_bound as bound, lint_skeleton_with, parse_skeleton as parse, LintConfig,
};
use anchorlens::zones::{build_condition as build, mask_content_words as mask, FunctionWords};
use anchorlens::{ConditionKind, FunctionalTag, Method, Skeleton, ZoneModel};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_bound_py_any(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            Ok(list.into_any())
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            Ok(dict.into_any())
        }
    }
}

fn serialize<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(err)?)
}

/// Returns `{lcs_len, answer_len, a_lex}`.
#[pyfunction]
fn lexical_anchoring<'py>(
    py: Python<'py>,
    trace: &str,
    answer: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let r = anchorlens::lexical_anchoring(trace, answer).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("lcs_len", r.lcs_len)?;
    dict.set_item("answer_len", r.answer_len)?;
    dict.set_item("a_lex", r.a_lex)?;
    Ok(dict.into_any())
}

#[pyfunction]
fn lcs_length(a: Vec<String>, b: Vec<String>) -> usize {
    anchorlens::lcs_length(&a, &b)
}

/// Full breakdown for a raw per-step density sequence.
#[pyfunction]
#[pyo3(signature = (densities, tau_g = anchorlens::DEFAULT_TAU_G))]
fn entropic_breakdown<'py>(
    py: Python<'py>,
    densities: Vec<f64>,
    tau_g: f64,
) -> PyResult<Bound<'py, PyAny>> {
    serialize(
        py,
        &anchorlens::entropic_breakdown(&densities, tau_g).map_err(err)?,
    )
}

#[pyfunction]
fn capacity_bound(n: u64, tag_count: u64, epsilon: f64) -> PyResult<f64> {
    bound(n, tag_count, epsilon).map_err(err)
}

/// `[(index, tag, summary), ...]`
#[pyfunction]
fn parse_skeleton(text: &str) -> PyResult<Vec<(usize, String, String)>> {
    let s = parse(text).map_err(err)?;
    Ok(s.steps()
        .iter()
        .map(|st| (st.index, st.tag.to_string(), st.summary.clone()))
        .collect())
}

#[pyfunction]
fn render_skeleton(steps: Vec<(String, String)>) -> PyResult<String> {
    let parts = steps
        .into_iter()
        .map(|(tag, summary)| match tag.parse::<FunctionalTag>() {
            Ok(t) => Ok((t, summary)),
            Err(()) => Err(err(format!("unknown tag `{tag}`"))),
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(Skeleton::from_parts(parts).map_err(err)?.render())
}

#[pyfunction]
#[pyo3(signature = (text, answer = "", max_words = 20))]
fn lint_skeleton<'py>(
    py: Python<'py>,
    text: &str,
    answer: &str,
    max_words: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = LintConfig {
        max_words,
        ..LintConfig::default()
    };
    serialize(
        py,
        &lint_skeleton_with(&parse(text).map_err(err)?, answer, &cfg).violations,
    )
}

#[pyfunction]
#[pyo3(signature = (kind, answer = None, own_cot = None))]
fn build_condition(kind: &str, answer: Option<&str>, own_cot: Option<&str>) -> PyResult<String> {
    let kind: ConditionKind = kind.parse().map_err(err)?;
    build(kind, own_cot, answer, FunctionWords::builtin()).map_err(err)
}

#[pyfunction]
fn mask_content_words(text: &str) -> String {
    mask(text, FunctionWords::builtin())
}

/// Zone name for a raw `(a_ent, a_prob)` point under a saved model.
#[pyfunction]
fn classify(model_path: PathBuf, a_ent: f64, a_prob: f64) -> PyResult<String> {
    let model = ZoneModel::load(&model_path).map_err(err)?;
    Ok(model
        .classify_point((a_ent, a_prob))
        .map_err(err)?
        .to_string())
}

/// Runs the scoring pipeline and returns its summary.
#[pyfunction]
#[pyo3(signature = (input, output_dir, methods = vec!["NEU".to_string(), "SUP".to_string(), "AUG_SUP".to_string(), "SSR".to_string()], metrics = vec!["lex".to_string()], pairs = false, toy_model = None, replay = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn score<'py>(
    py: Python<'py>,
    input: PathBuf,
    output_dir: PathBuf,
    methods: Vec<String>,
    metrics: Vec<String>,
    pairs: bool,
    toy_model: Option<PathBuf>,
    replay: Option<PathBuf>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let input = if pairs {
        PipelineInput::Pairs(input)
    } else {
        PipelineInput::Traces(input)
    };
    let mut cfg = PipelineConfig::new(input, output_dir);
    cfg.methods = methods
        .iter()
        .map(|m| m.parse::<Method>().map_err(err))
        .collect::<PyResult<_>>()?;
    cfg.metrics = metrics
        .iter()
        .map(|m| m.parse::<Metric>().map_err(err))
        .collect::<PyResult<BTreeSet<_>>>()?;
    cfg.seed = seed;
    cfg.backend = match (toy_model, replay) {
        (Some(model), None) => BackendSelection::Toy {
            model,
            record: None,
        },
        (None, Some(path)) => BackendSelection::Replay { path },
        (None, None) => BackendSelection::None,
        (Some(_), Some(_)) => return Err(err("pass either toy_model or replay, not both")),
    };
    let outcome = py.detach(|| run_score_pipeline(&cfg)).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("output", outcome.output.to_string_lossy().to_string())?;
    dict.set_item("total", outcome.summary.total)?;
    dict.set_item("succeeded", outcome.summary.succeeded)?;
    dict.set_item("failed", outcome.summary.failed)?;
    Ok(dict.into_any())
}

/// Markdown table for a scored JSONL file.
#[pyfunction]
#[pyo3(signature = (scores_path, baseline = "NEU", scale_factor = 100.0))]
fn report_markdown(scores_path: PathBuf, baseline: &str, scale_factor: f64) -> PyResult<String> {
    let records = anchorlens::pipeline::load_scored(&scores_path).map_err(err)?;
    let baseline: Method = baseline.parse().map_err(err)?;
    Ok(aggregate(&records, scale_factor, baseline)
        .map_err(err)?
        .to_markdown())
}

#[pymodule]
#[pyo3(name = "anchorlens")]
fn anchorlens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(lexical_anchoring, m)?)?;
    m.add_function(wrap_pyfunction!(lcs_length, m)?)?;
    m.add_function(wrap_pyfunction!(entropic_breakdown, m)?)?;
    m.add_function(wrap_pyfunction!(capacity_bound, m)?)?;
    m.add_function(wrap_pyfunction!(parse_skeleton, m)?)?;
    m.add_function(wrap_pyfunction!(render_skeleton, m)?)?;
    m.add_function(wrap_pyfunction!(lint_skeleton, m)?)?;
    m.add_function(wrap_pyfunction!(build_condition, m)?)?;
    m.add_function(wrap_pyfunction!(mask_content_words, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(report_markdown, m)?)?;
    Ok(())
}
