//! Python bindings: corpora, synthetic data, toy scorers and the ablation
//! protocols.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use probe::ablation::{self, EvalOptions, SweepConfig};
use probe::cli::ScorerArtifact;
use probe::corpus::{self, ContextKind, CorpusFormat};
use probe::scorer::{
    self, Condition, ContextMode, Ensemble, ExternalScorer, OptionDistribution, ScoreRequest,
    ScorerError, ToyScorer, ToyScorerParams, TrainConfig,
};
use probe::synth::{self, PositionProfile, SynthSpec};
use probe::textproc::{self, ExtractMode, ExtractSpec, SourceKind, TokenSeq};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

#[pyclass(name = "McqItem", frozen, skip_from_py_object, module = "compre_probe")]
#[derive(Clone)]
struct PyMcqItem {
    inner: corpus::McqItem,
}

#[pymethods]
impl PyMcqItem {
    #[new]
    #[pyo3(signature = (id, context, question, options, answer_index, context_kind = "passage"))]
    fn new(
        id: String,
        context: String,
        question: String,
        options: Vec<String>,
        answer_index: usize,
        context_kind: &str,
    ) -> PyResult<Self> {
        let inner = corpus::McqItem {
            id,
            context,
            context_kind: context_kind.parse::<ContextKind>().map_err(value_err)?,
            question,
            options,
            answer_index,
            meta: BTreeMap::new(),
        };
        if let Some((field, reason)) = inner.check().into_iter().next() {
            return Err(value_err(format!("{field}: {reason}")));
        }
        Ok(PyMcqItem { inner })
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn context(&self) -> &str {
        &self.inner.context
    }

    #[getter]
    fn context_kind(&self) -> &'static str {
        self.inner.context_kind.as_str()
    }

    #[getter]
    fn question(&self) -> &str {
        &self.inner.question
    }

    #[getter]
    fn options(&self) -> Vec<String> {
        self.inner.options.clone()
    }

    #[getter]
    fn answer_index(&self) -> usize {
        self.inner.answer_index
    }

    #[getter]
    fn meta(&self) -> BTreeMap<String, String> {
        self.inner.meta.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "McqItem(id={:?}, options={}, answer_index={})",
            self.inner.id,
            self.inner.options.len(),
            self.inner.answer_index
        )
    }
}

#[pyclass(name = "Corpus", frozen, skip_from_py_object, module = "compre_probe")]
#[derive(Clone)]
struct PyCorpus {
    inner: Arc<corpus::Corpus>,
}

#[pymethods]
impl PyCorpus {
    #[new]
    fn new(name: String, items: Vec<PyRef<'_, PyMcqItem>>) -> PyResult<Self> {
        let items = items.iter().map(|i| i.inner.clone()).collect();
        let c = corpus::Corpus::new(name, items)
            .validated()
            .map_err(value_err)?;
        Ok(PyCorpus { inner: Arc::new(c) })
    }

    /// Loads `path` in one of canonical_jsonl, race_dir, dream_json, debater_csv.
    #[staticmethod]
    #[pyo3(signature = (path, format = "canonical_jsonl", keep_speakers = true))]
    fn load(path: PathBuf, format: &str, keep_speakers: bool) -> PyResult<Self> {
        let format: CorpusFormat = format.parse().map_err(value_err)?;
        let c = corpus::load_corpus_with(&path, format, &corpus::LoadOptions { keep_speakers })
            .map_err(value_err)?;
        Ok(PyCorpus { inner: Arc::new(c) })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn items(&self) -> Vec<PyMcqItem> {
        self.inner
            .items
            .iter()
            .map(|i| PyMcqItem { inner: i.clone() })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn write_jsonl(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_jsonl(&path).map_err(value_err)
    }

    /// Invariant violations as `(item_id, rule, detail)` tuples.
    fn validate(&self) -> Vec<(String, String, String)> {
        corpus::validate(&self.inner)
            .into_iter()
            .map(|v| (v.item_id, v.rule, v.detail))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(name={:?}, items={})",
            self.inner.name,
            self.inner.len()
        )
    }
}

/// Shares one scorer between Python handles and ensembles.
struct Shared(Arc<dyn scorer::Scorer>);

impl scorer::Scorer for Shared {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn max_len(&self) -> usize {
        self.0.max_len()
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest<'_>],
    ) -> Result<Vec<OptionDistribution>, ScorerError> {
        self.0.score_batch(requests)
    }
}

#[pyclass(name = "Scorer", frozen, skip_from_py_object, module = "compre_probe")]
#[derive(Clone)]
struct PyScorer {
    inner: Arc<dyn scorer::Scorer>,
    /// Toy parameters, when the scorer is one toy model or a flat ensemble
    /// of them.
    params: Option<Vec<ToyScorerParams>>,
}

impl PyScorer {
    fn from_params(members: Vec<ToyScorerParams>) -> PyResult<Self> {
        let mut boxed: Vec<Box<dyn scorer::Scorer>> = Vec::with_capacity(members.len());
        for p in &members {
            boxed.push(Box::new(ToyScorer::new(p.clone()).map_err(value_err)?));
        }
        let inner: Arc<dyn scorer::Scorer> = if boxed.len() == 1 {
            Arc::from(boxed.pop().expect("one member"))
        } else {
            Arc::new(Ensemble::new(boxed).map_err(value_err)?)
        };
        Ok(PyScorer {
            inner,
            params: Some(members),
        })
    }
}

#[pymethods]
impl PyScorer {
    /// Reads a scorer artifact written by `train` or `save`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(value_err)?;
        let artifact: ScorerArtifact = serde_json::from_str(&text).map_err(value_err)?;
        Self::from_params(artifact.members)
    }

    /// Remote scorer speaking the JSON batch protocol over HTTP.
    #[staticmethod]
    #[pyo3(signature = (url, timeout_s = 60.0))]
    fn http(url: String, timeout_s: f64) -> Self {
        PyScorer {
            inner: Arc::new(ExternalScorer::http(
                url,
                Duration::from_secs_f64(timeout_s),
            )),
            params: None,
        }
    }

    /// Averages the members' distributions.
    #[staticmethod]
    fn ensemble(members: Vec<PyRef<'_, PyScorer>>) -> PyResult<Self> {
        let params = members
            .iter()
            .map(|m| match &m.params {
                Some(p) if p.len() == 1 => Some(p[0].clone()),
                _ => None,
            })
            .collect::<Option<Vec<_>>>();
        let boxed: Vec<Box<dyn scorer::Scorer>> = members
            .iter()
            .map(|m| Box::new(Shared(m.inner.clone())) as Box<dyn scorer::Scorer>)
            .collect();
        Ok(PyScorer {
            inner: Arc::new(Ensemble::new(boxed).map_err(value_err)?),
            params,
        })
    }

    /// A literal keyword matcher for synthetic corpora.
    #[staticmethod]
    fn keyword_matcher() -> Self {
        PyScorer {
            inner: Arc::new(synth::KeywordMatcher),
            params: None,
        }
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let members = self
            .params
            .clone()
            .ok_or_else(|| value_err("only toy scorers can be saved"))?;
        let text = serde_json::to_string(&ScorerArtifact { members }).map_err(value_err)?;
        std::fs::write(&path, text + "\n").map_err(value_err)
    }

    /// Option probabilities for one item.
    #[pyo3(signature = (item, mode = "standard", tau = None, extract = "beginning", seed = 0))]
    fn score(
        &self,
        item: PyRef<'_, PyMcqItem>,
        mode: &str,
        tau: Option<u32>,
        extract: &str,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let cond = condition(mode, tau, extract, seed)?;
        scorer::score_options(self.inner.as_ref(), &item.inner, &cond)
            .map(|d| d.probs().to_vec())
            .map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!("Scorer({:?})", self.inner.id())
    }
}

fn condition(mode: &str, tau: Option<u32>, extract: &str, seed: u64) -> PyResult<Condition> {
    let mode: ContextMode = mode.parse().map_err(value_err)?;
    match (mode, tau) {
        (ContextMode::ContextFree, Some(_)) => Err(value_err("tau only applies to standard mode")),
        (ContextMode::ContextFree, None) => Ok(Condition::context_free()),
        (ContextMode::Standard, None) => Ok(Condition::full_context()),
        (ContextMode::Standard, Some(tau)) => {
            let mode: ExtractMode = extract.parse().map_err(value_err)?;
            Ok(Condition::partial(
                ExtractSpec::new(tau, mode, seed).map_err(value_err)?,
            ))
        }
    }
}

#[pyclass(name = "Evaluation", frozen, module = "compre_probe")]
struct PyEvaluation {
    #[pyo3(get)]
    accuracy: f64,
    #[pyo3(get)]
    item_ids: Vec<String>,
    #[pyo3(get)]
    predictions: Vec<usize>,
    #[pyo3(get)]
    correct: Vec<bool>,
    #[pyo3(get)]
    probs: Vec<Vec<f64>>,
}

#[pymethods]
impl PyEvaluation {
    fn __repr__(&self) -> String {
        format!(
            "Evaluation(accuracy={:.3}, n={})",
            self.accuracy,
            self.correct.len()
        )
    }
}

/// Trains toy scorer(s); `ensemble` members use seeds `seed`, `seed + 1`, ...
#[pyfunction]
#[pyo3(signature = (
    corpus, mode = "standard", epochs = 20, learning_rate = 0.05, batch_size = 16,
    embed_dim = 32, max_len = 512, init_scale = 2.0, seed = 0, ensemble = 1
))]
#[allow(clippy::too_many_arguments)]
fn train_toy(
    py: Python<'_>,
    corpus: PyRef<'_, PyCorpus>,
    mode: &str,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    embed_dim: usize,
    max_len: usize,
    init_scale: f64,
    seed: u64,
    ensemble: usize,
) -> PyResult<PyScorer> {
    let mode: ContextMode = mode.parse().map_err(value_err)?;
    let corpus = corpus.inner.clone();
    let members = py.detach(move || {
        (0..ensemble.max(1) as u64)
            .map(|m| {
                let cfg = TrainConfig {
                    epochs,
                    learning_rate,
                    batch_size,
                    seed: seed.wrapping_add(m),
                    max_len,
                    embed_dim,
                    init_scale,
                };
                scorer::train_toy(&corpus, &cfg, mode).map(|(p, _)| p)
            })
            .collect::<Result<Vec<_>, _>>()
    });
    PyScorer::from_params(members.map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (
    size = 1000, n_options = 4, leak_rate = 0.0, position_profile = "uniform",
    context_len = 30, vocab_size = 400, seed = 0
))]
fn generate_synth(
    size: usize,
    n_options: usize,
    leak_rate: f64,
    position_profile: &str,
    context_len: usize,
    vocab_size: usize,
    seed: u64,
) -> PyResult<PyCorpus> {
    let spec = SynthSpec {
        size,
        n_options,
        leak_rate,
        position_profile: position_profile
            .parse::<PositionProfile>()
            .map_err(value_err)?,
        context_len,
        vocab_size,
        seed,
    };
    let c = synth::generate(&spec).map_err(value_err)?;
    Ok(PyCorpus { inner: Arc::new(c) })
}

/// Accuracy of an ideal keyword matcher without context: λ + (1 − λ)/N.
#[pyfunction]
fn oracle_context_free_accuracy(leak_rate: f64, n_options: usize) -> f64 {
    synth::oracle_context_free_accuracy(&SynthSpec {
        leak_rate,
        n_options,
        ..SynthSpec::default()
    })
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    textproc::tokenize(text)
}

/// Contiguous τ% window of an already tokenized context.
#[pyfunction]
#[pyo3(signature = (tokens, tau, mode = "beginning", seed = 0, item_id = ""))]
fn extract_context(
    tokens: Vec<String>,
    tau: u32,
    mode: &str,
    seed: u64,
    item_id: &str,
) -> PyResult<Vec<String>> {
    let spec = ExtractSpec::new(tau, mode.parse().map_err(value_err)?, seed).map_err(value_err)?;
    textproc::extract_context(&TokenSeq::new(tokens, SourceKind::Context), &spec, item_id)
        .map(|t| t.tokens)
        .map_err(value_err)
}

#[pyfunction]
fn softmax(scores: Vec<f64>) -> Vec<f64> {
    scorer::softmax(&scores)
}

fn eval_options(batch_size: usize, parallelism: usize) -> EvalOptions {
    EvalOptions {
        batch_size,
        parallelism,
    }
}

#[pyfunction]
#[pyo3(signature = (
    scorer, corpus, mode = "standard", tau = None, extract = "beginning", seed = 0,
    batch_size = 64, parallelism = 1
))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    scorer: PyRef<'_, PyScorer>,
    corpus: PyRef<'_, PyCorpus>,
    mode: &str,
    tau: Option<u32>,
    extract: &str,
    seed: u64,
    batch_size: usize,
    parallelism: usize,
) -> PyResult<PyEvaluation> {
    let cond = condition(mode, tau, extract, seed)?;
    let (s, c) = (scorer.inner.clone(), corpus.inner.clone());
    let opts = eval_options(batch_size, parallelism);
    let eval = py
        .detach(move || ablation::evaluate(s.as_ref(), &c, &cond, &opts))
        .map_err(runtime_err)?;
    Ok(PyEvaluation {
        accuracy: eval.accuracy,
        item_ids: eval.records.iter().map(|r| r.item_id.clone()).collect(),
        predictions: eval.records.iter().map(|r| r.predicted).collect(),
        correct: eval.records.iter().map(|r| r.correct).collect(),
        probs: eval
            .records
            .iter()
            .map(|r| r.probs.probs().to_vec())
            .collect(),
    })
}

/// `(tau, accuracy)` pairs; the grid defaults to 0, 10, ..., 100.
#[pyfunction]
#[pyo3(signature = (scorer, corpus, taus = None, extract = "beginning", seed = 0, repetitions = 1, parallelism = 1))]
#[allow(clippy::too_many_arguments)]
fn sweep_tau(
    py: Python<'_>,
    scorer: PyRef<'_, PyScorer>,
    corpus: PyRef<'_, PyCorpus>,
    taus: Option<Vec<u32>>,
    extract: &str,
    seed: u64,
    repetitions: usize,
    parallelism: usize,
) -> PyResult<Vec<(u32, f64)>> {
    let cfg = SweepConfig {
        taus: taus.unwrap_or_else(ablation::default_taus),
        mode: extract.parse().map_err(value_err)?,
        seed,
        repetitions,
    };
    let (s, c) = (scorer.inner.clone(), corpus.inner.clone());
    let opts = eval_options(64, parallelism);
    let sweep = py
        .detach(move || ablation::sweep_tau(s.as_ref(), &c, &cfg, &opts))
        .map_err(runtime_err)?;
    Ok(sweep
        .curve
        .points
        .iter()
        .map(|p| (p.tau, p.accuracy))
        .collect())
}

/// Accuracy per extract position (`beginning`, `random_window`, `end`).
#[pyfunction]
#[pyo3(signature = (scorer, corpus, tau = 20, seed = 0, repetitions = 1))]
fn positional_study(
    py: Python<'_>,
    scorer: PyRef<'_, PyScorer>,
    corpus: PyRef<'_, PyCorpus>,
    tau: u32,
    seed: u64,
    repetitions: usize,
) -> PyResult<BTreeMap<String, f64>> {
    let (s, c) = (scorer.inner.clone(), corpus.inner.clone());
    let study = py
        .detach(move || {
            ablation::positional_study(
                s.as_ref(),
                &c,
                tau,
                seed,
                repetitions,
                &EvalOptions::default(),
            )
        })
        .map_err(runtime_err)?;
    Ok(study
        .rows
        .iter()
        .map(|r| (r.mode.as_str().to_string(), r.accuracy))
        .collect())
}

/// Standard, context-free and random accuracy plus effective option count,
/// one dict per corpus.
#[pyfunction]
fn world_knowledge_report(
    py: Python<'_>,
    standard: PyRef<'_, PyScorer>,
    context_free: PyRef<'_, PyScorer>,
    corpora: Vec<PyRef<'_, PyCorpus>>,
) -> PyResult<Vec<BTreeMap<String, Py<PyAny>>>> {
    let (s, cf) = (standard.inner.clone(), context_free.inner.clone());
    let corpora: Vec<corpus::Corpus> = corpora.iter().map(|c| (*c.inner).clone()).collect();
    let report = py
        .detach(move || {
            ablation::world_knowledge_report(
                s.as_ref(),
                cf.as_ref(),
                &corpora,
                &EvalOptions::default(),
            )
        })
        .map_err(runtime_err)?;
    report
        .rows
        .iter()
        .map(|r| {
            let mut m = BTreeMap::new();
            m.insert(
                "corpus".to_string(),
                r.corpus.clone().into_pyobject(py)?.into_any().unbind(),
            );
            for (k, v) in [
                ("standard", r.standard_acc),
                ("context_free", r.context_free_acc),
                ("random", r.random_baseline),
                ("effective_options", r.effective_options),
            ] {
                m.insert(k.to_string(), v.into_pyobject(py)?.into_any().unbind());
            }
            Ok(m)
        })
        .collect()
}

/// Per-item `(item_id, label, tau_star)` with label zero, partial or full.
#[pyfunction]
#[pyo3(signature = (standard, context_free, corpus, seed = 0))]
fn classify(
    py: Python<'_>,
    standard: PyRef<'_, PyScorer>,
    context_free: PyRef<'_, PyScorer>,
    corpus: PyRef<'_, PyCorpus>,
    seed: u64,
) -> PyResult<Vec<(String, String, Option<u32>)>> {
    let (s, cf, c) = (
        standard.inner.clone(),
        context_free.inner.clone(),
        corpus.inner.clone(),
    );
    let labels = py
        .detach(move || {
            let opts = EvalOptions::default();
            let cfg = SweepConfig {
                seed,
                ..SweepConfig::default()
            };
            let sweep = ablation::sweep_tau(s.as_ref(), &c, &cfg, &opts)?;
            let free = ablation::evaluate(cf.as_ref(), &c, &Condition::context_free(), &opts)?;
            ablation::classify_corpus(&sweep, &free)
        })
        .map_err(runtime_err)?;
    Ok(labels
        .into_iter()
        .map(|l| {
            let (name, tau) = match l.label {
                ablation::Comprehension::Zero => ("zero", None),
                ablation::Comprehension::Partial { tau } => ("partial", Some(tau)),
                ablation::Comprehension::Full { .. } => ("full", None),
            };
            (l.item_id, name.to_string(), tau)
        })
        .collect())
}

/// Runs the command-line interface with `argv` and returns its exit code.
#[pyfunction]
fn cli_main(py: Python<'_>, argv: Vec<String>) -> i32 {
    py.detach(move || probe::cli::cli_main(&argv))
}

#[pymodule]
fn compre_probe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMcqItem>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyScorer>()?;
    m.add_class::<PyEvaluation>()?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synth, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_context_free_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(extract_context, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_tau, m)?)?;
    m.add_function(wrap_pyfunction!(positional_study, m)?)?;
    m.add_function(wrap_pyfunction!(world_knowledge_report, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(cli_main, m)?)?;
    Ok(())
}
