//! Multiple-choice scorers.
//!
//! Every scorer encodes each option separately with shared parameters, emits
//! one scalar per option and softmaxes across the item's options. The number of
//! options can therefore differ between training and inference.

mod ensemble;
mod external;
mod toy;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::McqItem;
use crate::textproc::{prepare_context, ExtractSpec, TextError, TokenSeq, DEFAULT_MAX_LEN};

pub use ensemble::{ensemble_score, Ensemble};
pub use external::{
    external_score, match_response, ExternalScorer, WireItem, WireRequest, WireResponse, WireScore,
    WIRE_TOLERANCE,
};
pub use toy::{
    grad_check, grad_check_against, train_toy, Gradients, ToyScorer, ToyScorerParams, TrainConfig,
    TrainReport, GRAD_CHECK_MIN_COORDS,
};

/// Tolerance for a distribution to count as normalized.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ScorerError {
    #[error("item `{item}`: {source}")]
    Input {
        item: String,
        #[source]
        source: TextError,
    },
    #[error("scorer transport failed for items {ids:?}: {message}")]
    Transport { ids: Vec<String>, message: String },
    #[error("scorer timed out for items {ids:?}")]
    Timeout { ids: Vec<String> },
    #[error("scorer protocol violation for items {ids:?}: {message}")]
    Protocol { ids: Vec<String>, message: String },
    #[error("item `{id}`: probabilities sum to {sum}, outside tolerance")]
    Normalization { id: String, sum: f64 },
    #[error("item `{id}`: remote scorer error: {message}")]
    Remote { id: String, message: String },
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("malformed scorer parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Standard,
    ContextFree,
}

impl ContextMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContextMode::Standard => "standard",
            ContextMode::ContextFree => "context_free",
        }
    }
}

impl FromStr for ContextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(ContextMode::Standard),
            "context_free" | "context-free" => Ok(ContextMode::ContextFree),
            other => Err(format!(
                "unknown context mode `{other}` (expected standard or context_free)"
            )),
        }
    }
}

/// How an item is presented to a scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub context_mode: ContextMode,
    pub extract: Option<ExtractSpec>,
}

impl Condition {
    pub fn full_context() -> Self {
        Condition {
            context_mode: ContextMode::Standard,
            extract: None,
        }
    }

    pub fn context_free() -> Self {
        Condition {
            context_mode: ContextMode::ContextFree,
            extract: None,
        }
    }

    pub fn partial(extract: ExtractSpec) -> Self {
        Condition {
            context_mode: ContextMode::Standard,
            extract: Some(extract),
        }
    }
}

/// Probabilities over an item's options, in option order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OptionDistribution {
    probs: Vec<f64>,
}

impl OptionDistribution {
    /// Accepts `probs` if every entry is in [0, 1] and the sum is within
    /// `tolerance` of 1; the result is renormalized exactly.
    pub fn from_probs(probs: Vec<f64>, tolerance: f64) -> Result<Self, f64> {
        let sum: f64 = probs.iter().sum();
        let in_range = probs
            .iter()
            .all(|p| p.is_finite() && (0.0..=1.0 + tolerance).contains(p));
        if probs.is_empty() || !in_range || !sum.is_finite() || (sum - 1.0).abs() > tolerance {
            return Err(sum);
        }
        Ok(OptionDistribution {
            probs: probs.into_iter().map(|p| (p / sum).min(1.0)).collect(),
        })
    }

    pub fn from_scores(scores: &[f64]) -> Self {
        OptionDistribution {
            probs: softmax(scores),
        }
    }

    pub fn uniform(n: usize) -> Self {
        OptionDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, hot: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[hot] = 1.0;
        OptionDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Element-wise mean. All inputs must have the same length.
    pub fn mean(dists: &[OptionDistribution]) -> Self {
        let n = dists[0].len();
        let k = dists.len() as f64;
        let mut probs = vec![0.0; n];
        for d in dists {
            assert_eq!(d.len(), n, "distributions differ in length");
            for (acc, p) in probs.iter_mut().zip(&d.probs) {
                *acc += p;
            }
        }
        for p in &mut probs {
            *p /= k;
        }
        OptionDistribution { probs }
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Argmax; ties go to the lowest index.
pub fn predict(dist: &OptionDistribution) -> usize {
    let mut best = 0;
    for (i, p) in dist.probs.iter().enumerate() {
        if *p > dist.probs[best] {
            best = i;
        }
    }
    best
}

/// One item as a scorer sees it. `context` is `None` for context-free
/// presentation; otherwise it holds the already truncated and extracted
/// context tokens.
#[derive(Debug, Clone)]
pub struct ScoreRequest<'a> {
    pub item: &'a McqItem,
    pub context: Option<TokenSeq>,
}

impl<'a> ScoreRequest<'a> {
    pub fn new(
        item: &'a McqItem,
        condition: &Condition,
        max_len: usize,
    ) -> Result<Self, ScorerError> {
        let context = match condition.context_mode {
            ContextMode::ContextFree => None,
            ContextMode::Standard => Some(
                prepare_context(item, condition.extract.as_ref(), max_len).map_err(|source| {
                    ScorerError::Input {
                        item: item.id.clone(),
                        source,
                    }
                })?,
            ),
        };
        Ok(ScoreRequest { item, context })
    }
}

pub trait Scorer: Send + Sync {
    fn id(&self) -> &str;

    /// Input length limit used when preparing contexts for this scorer.
    fn max_len(&self) -> usize {
        DEFAULT_MAX_LEN
    }

    /// One distribution per request, in request order.
    fn score_batch(
        &self,
        requests: &[ScoreRequest<'_>],
    ) -> Result<Vec<OptionDistribution>, ScorerError>;
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn max_len(&self) -> usize {
        (**self).max_len()
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest<'_>],
    ) -> Result<Vec<OptionDistribution>, ScorerError> {
        (**self).score_batch(requests)
    }
}

/// Scores one item under `condition`.
pub fn score_options(
    scorer: &dyn Scorer,
    item: &McqItem,
    condition: &Condition,
) -> Result<OptionDistribution, ScorerError> {
    let req = ScoreRequest::new(item, condition, scorer.max_len())?;
    let mut out = scorer.score_batch(std::slice::from_ref(&req))?;
    out.pop().ok_or_else(|| ScorerError::Protocol {
        ids: vec![item.id.clone()],
        message: "scorer returned no distribution".to_string(),
    })
}
