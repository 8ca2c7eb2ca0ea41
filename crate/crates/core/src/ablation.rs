//! Evaluation protocols: plain accuracy, τ sweeps, the positional study, the
//! world-knowledge comparison and per-question comprehension labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::scorer::{predict, Condition, OptionDistribution, ScoreRequest, Scorer, ScorerError};
use crate::textproc::{ExtractMode, ExtractSpec, TextError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("corpus `{0}` is empty")]
    EmptyCorpus(String),
    #[error("scorer failed after {completed} of {total} items: {source}")]
    Scorer {
        completed: usize,
        total: usize,
        #[source]
        source: ScorerError,
    },
    #[error(transparent)]
    Extract(#[from] TextError),
    #[error("tau grid must be sorted, strictly increasing and within [0, 100]: {0:?}")]
    BadGrid(Vec<u32>),
    #[error("records do not cover tau {missing:?} of the default grid")]
    IncompleteGrid { missing: Vec<u32> },
    #[error("no corpora given")]
    NoCorpora,
}

/// The τ grid at 10% steps.
pub fn default_taus() -> Vec<u32> {
    (0..=100).step_by(10).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Items per `score_batch` call.
    pub batch_size: usize,
    /// Worker threads; 1 scores batches sequentially.
    pub parallelism: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 64,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub condition: Condition,
    pub probs: OptionDistribution,
    pub predicted: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub records: Vec<EvalRecord>,
}

impl Evaluation {
    pub fn n_correct(&self) -> usize {
        self.records.iter().filter(|r| r.correct).count()
    }
}

/// Accuracy of `scorer` on `corpus` under `condition`, with one record per item
/// in corpus order.
pub fn evaluate(
    scorer: &dyn Scorer,
    corpus: &Corpus,
    condition: &Condition,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus(corpus.name.clone()));
    }
    let total = corpus.len();
    let batch_size = opts.batch_size.max(1);
    let chunks: Vec<_> = corpus.items.chunks(batch_size).collect();
    let score_chunk = |chunk: &&[crate::corpus::McqItem]| -> Result<Vec<EvalRecord>, ScorerError> {
        let requests = chunk
            .iter()
            .map(|item| ScoreRequest::new(item, condition, scorer.max_len()))
            .collect::<Result<Vec<_>, _>>()?;
        let dists = scorer.score_batch(&requests)?;
        if dists.len() != chunk.len() {
            return Err(ScorerError::Protocol {
                ids: chunk.iter().map(|i| i.id.clone()).collect(),
                message: format!(
                    "expected {} distributions, got {}",
                    chunk.len(),
                    dists.len()
                ),
            });
        }
        Ok(chunk
            .iter()
            .zip(dists)
            .map(|(item, probs)| {
                let predicted = predict(&probs);
                EvalRecord {
                    item_id: item.id.clone(),
                    condition: *condition,
                    probs,
                    predicted,
                    correct: predicted == item.answer_index,
                }
            })
            .collect())
    };
    let results: Vec<Result<Vec<EvalRecord>, ScorerError>> = if opts.parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| chunks.par_iter().map(score_chunk).collect())
    } else {
        let mut out = Vec::with_capacity(chunks.len());
        for chunk in &chunks {
            let r = score_chunk(chunk);
            let failed = r.is_err();
            out.push(r);
            if failed {
                break;
            }
        }
        out
    };
    let mut records = Vec::with_capacity(total);
    for r in results {
        match r {
            Ok(batch) => records.extend(batch),
            Err(source) => {
                return Err(EvalError::Scorer {
                    completed: records.len(),
                    total,
                    source,
                })
            }
        }
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(Evaluation {
        accuracy: correct as f64 / total as f64,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: u32,
    pub accuracy: f64,
    pub n: usize,
}

/// Accuracy as a function of τ for one corpus, scorer and extract mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub corpus: String,
    pub scorer: String,
    pub mode: ExtractMode,
    pub points: Vec<CurvePoint>,
}

impl AblationCurve {
    pub fn accuracy_at(&self, tau: u32) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.tau == tau)
            .map(|p| p.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub taus: Vec<u32>,
    pub mode: ExtractMode,
    pub seed: u64,
    /// Random-window draws averaged per point; ignored for fixed windows.
    pub repetitions: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            taus: default_taus(),
            mode: ExtractMode::Beginning,
            seed: 0,
            repetitions: 1,
        }
    }
}

impl SweepConfig {
    fn seeds(&self) -> Vec<u64> {
        let reps = match self.mode {
            ExtractMode::RandomWindow => self.repetitions.max(1),
            _ => 1,
        };
        (0..reps as u64)
            .map(|r| self.seed.wrapping_add(r))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub curve: AblationCurve,
    /// Records per τ point, in grid order; repetitions are concatenated.
    pub records: Vec<Vec<EvalRecord>>,
}

fn check_grid(taus: &[u32]) -> Result<(), EvalError> {
    let sorted = taus.windows(2).all(|w| w[0] < w[1]);
    if taus.is_empty() || !sorted || taus.iter().any(|t| *t > 100) {
        return Err(EvalError::BadGrid(taus.to_vec()));
    }
    Ok(())
}

/// Runs one standard-mode evaluation per τ with the given extract mode.
pub fn sweep_tau(
    scorer: &dyn Scorer,
    corpus: &Corpus,
    cfg: &SweepConfig,
    opts: &EvalOptions,
) -> Result<Sweep, EvalError> {
    check_grid(&cfg.taus)?;
    let seeds = cfg.seeds();
    let mut points = Vec::with_capacity(cfg.taus.len());
    let mut records = Vec::with_capacity(cfg.taus.len());
    for &tau in &cfg.taus {
        let mut acc_sum = 0.0;
        let mut recs = Vec::new();
        for &seed in &seeds {
            let cond = Condition::partial(ExtractSpec::new(tau, cfg.mode, seed)?);
            let eval = evaluate(scorer, corpus, &cond, opts)?;
            acc_sum += eval.accuracy;
            recs.extend(eval.records);
        }
        points.push(CurvePoint {
            tau,
            accuracy: acc_sum / seeds.len() as f64,
            n: corpus.len(),
        });
        records.push(recs);
    }
    Ok(Sweep {
        curve: AblationCurve {
            corpus: corpus.name.clone(),
            scorer: scorer.id().to_string(),
            mode: cfg.mode,
            points,
        },
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionalRow {
    pub mode: ExtractMode,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalStudy {
    pub corpus: String,
    pub tau: u32,
    /// Beginning, random window, end.
    pub rows: Vec<PositionalRow>,
    pub records: Vec<EvalRecord>,
}

impl PositionalStudy {
    pub fn accuracy(&self, mode: ExtractMode) -> f64 {
        self.rows
            .iter()
            .find(|r| r.mode == mode)
            .map(|r| r.accuracy)
            .expect("all three modes are present")
    }
}

/// Accuracy with a τ% window taken from the beginning, a random offset and
/// the end of each context.
pub fn positional_study(
    scorer: &dyn Scorer,
    corpus: &Corpus,
    tau: u32,
    seed: u64,
    repetitions: usize,
    opts: &EvalOptions,
) -> Result<PositionalStudy, EvalError> {
    let mut rows = Vec::with_capacity(3);
    let mut records = Vec::new();
    for mode in ExtractMode::ALL {
        let cfg = SweepConfig {
            taus: vec![tau],
            mode,
            seed,
            repetitions,
        };
        let sweep = sweep_tau(scorer, corpus, &cfg, opts)?;
        rows.push(PositionalRow {
            mode,
            accuracy: sweep.curve.points[0].accuracy,
        });
        records.extend(sweep.records.into_iter().flatten());
    }
    Ok(PositionalStudy {
        corpus: corpus.name.clone(),
        tau,
        rows,
        records,
    })
}

/// Mean over items of `1 / N`.
pub fn random_baseline(corpus: &Corpus) -> f64 {
    if corpus.is_empty() {
        return f64::NAN;
    }
    corpus
        .items
        .iter()
        .map(|i| 1.0 / i.n_options() as f64)
        .sum::<f64>()
        / corpus.len() as f64
}

/// Reciprocal of context-free accuracy.
pub fn effective_options(context_free_accuracy: f64) -> f64 {
    1.0 / context_free_accuracy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldKnowledgeRow {
    pub corpus: String,
    pub standard_acc: f64,
    pub context_free_acc: f64,
    pub random_baseline: f64,
    pub effective_options: f64,
}

impl WorldKnowledgeRow {
    pub fn new(
        corpus: impl Into<String>,
        standard_acc: f64,
        context_free_acc: f64,
        random: f64,
    ) -> Self {
        WorldKnowledgeRow {
            corpus: corpus.into(),
            standard_acc,
            context_free_acc,
            random_baseline: random,
            effective_options: effective_options(context_free_acc),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldKnowledgeReport {
    pub rows: Vec<WorldKnowledgeRow>,
    /// Per corpus: (standard records, context-free records).
    pub records: Vec<(Vec<EvalRecord>, Vec<EvalRecord>)>,
}

/// Full-context accuracy of `standard` against accuracy of `context_free` with
/// the context omitted, per corpus.
pub fn world_knowledge_report(
    standard: &dyn Scorer,
    context_free: &dyn Scorer,
    corpora: &[Corpus],
    opts: &EvalOptions,
) -> Result<WorldKnowledgeReport, EvalError> {
    if corpora.is_empty() {
        return Err(EvalError::NoCorpora);
    }
    let mut rows = Vec::with_capacity(corpora.len());
    let mut records = Vec::with_capacity(corpora.len());
    for corpus in corpora {
        let std_eval = evaluate(standard, corpus, &Condition::full_context(), opts)?;
        let cf_eval = evaluate(context_free, corpus, &Condition::context_free(), opts)?;
        rows.push(WorldKnowledgeRow::new(
            corpus.name.clone(),
            std_eval.accuracy,
            cf_eval.accuracy,
            random_baseline(corpus),
        ));
        records.push((std_eval.records, cf_eval.records));
    }
    Ok(WorldKnowledgeReport { rows, records })
}

/// How much of its context a question needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "snake_case")]
pub enum Comprehension {
    /// Answerable from the question and options alone.
    Zero,
    /// Stably answerable from `tau`% of the context onwards.
    Partial { tau: u32 },
    /// Needs the whole context. `answered` is false when the scorer never got
    /// it right at any τ.
    Full { answered: bool },
}

impl Comprehension {
    pub fn label(&self) -> String {
        match self {
            Comprehension::Zero => "zero".to_string(),
            Comprehension::Partial { tau } => format!("partial({tau})"),
            Comprehension::Full { answered: true } => "full".to_string(),
            Comprehension::Full { answered: false } => "full(unanswered)".to_string(),
        }
    }

    /// Position on the zero .. full scale; smaller needs less context.
    pub fn rank(&self) -> u32 {
        match self {
            Comprehension::Zero => 0,
            Comprehension::Partial { tau } => 1 + tau,
            Comprehension::Full { .. } => 200,
        }
    }
}

/// Labels one question from its per-τ correctness and its context-free
/// correctness. `points` must include every τ of the default grid.
pub fn classify_question(
    points: &[(u32, bool)],
    context_free_correct: bool,
) -> Result<Comprehension, EvalError> {
    let mut pts = points.to_vec();
    pts.sort_by_key(|p| p.0);
    pts.dedup_by_key(|p| p.0);
    let missing: Vec<u32> = default_taus()
        .into_iter()
        .filter(|t| !pts.iter().any(|p| p.0 == *t))
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::IncompleteGrid { missing });
    }
    if context_free_correct && pts.iter().all(|p| p.1) {
        return Ok(Comprehension::Zero);
    }
    // Smallest τ from which every larger point is correct.
    let mut tau_star = None;
    for &(tau, correct) in pts.iter().rev() {
        if !correct {
            break;
        }
        tau_star = Some(tau);
    }
    Ok(match tau_star {
        Some(t) if t < 100 => Comprehension::Partial { tau: t },
        Some(_) => Comprehension::Full { answered: true },
        None => Comprehension::Full {
            answered: pts.iter().any(|p| p.1),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionLabel {
    pub item_id: String,
    pub label: Comprehension,
}

/// Labels every item of a sweep over the default grid.
pub fn classify_corpus(
    sweep: &Sweep,
    context_free: &Evaluation,
) -> Result<Vec<QuestionLabel>, EvalError> {
    let taus: Vec<u32> = sweep.curve.points.iter().map(|p| p.tau).collect();
    let n = context_free.records.len();
    let mut out = Vec::with_capacity(n);
    for (i, cf) in context_free.records.iter().enumerate() {
        let points: Vec<(u32, bool)> = taus
            .iter()
            .zip(&sweep.records)
            .map(|(tau, recs)| (*tau, recs[i].correct))
            .collect();
        debug_assert!(sweep.records.iter().all(|r| r[i].item_id == cf.item_id));
        out.push(QuestionLabel {
            item_id: cf.item_id.clone(),
            label: classify_question(&points, cf.correct)?,
        });
    }
    Ok(out)
}
