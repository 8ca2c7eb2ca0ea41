//! Synthetic corpora with planted world-knowledge leakage and a controlled
//! position for the answer-bearing context token.
//!
//! Every item gets one keyword per option, drawn without replacement from a
//! keyword pool that is disjoint from the filler pool. The gold option's
//! keyword is planted once in the context (where depends on
//! [`PositionProfile`]) and, with probability `leak_rate`, in the question.
//! Distractor keywords never occur outside their option.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextKind, Corpus, McqItem};
use crate::scorer::{OptionDistribution, ScoreRequest, Scorer, ScorerError};
use crate::textproc::{tokenize, window_len};

/// Share of the context that counts as "front" or "end".
pub const PROFILE_WINDOW_PERCENT: u32 = 20;

const QUESTION_HEAD: [&str; 3] = ["Which", "word", "fits"];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("vocab_size {vocab_size} cannot hold {needed} distinct keywords plus filler")]
    VocabTooSmall { vocab_size: usize, needed: usize },
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionProfile {
    Front,
    Uniform,
    End,
}

impl FromStr for PositionProfile {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "front" => Ok(PositionProfile::Front),
            "uniform" => Ok(PositionProfile::Uniform),
            "end" => Ok(PositionProfile::End),
            other => Err(SynthError::InvalidSpec(format!(
                "unknown position profile `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub n_options: usize,
    pub leak_rate: f64,
    pub position_profile: PositionProfile,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 1000,
            n_options: 4,
            leak_rate: 0.0,
            position_profile: PositionProfile::Uniform,
            context_len: 30,
            vocab_size: 400,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn check(&self) -> Result<(), SynthError> {
        if self.n_options < 2 {
            return Err(SynthError::InvalidSpec(
                "n_options must be at least 2".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.leak_rate) {
            return Err(SynthError::InvalidSpec(format!(
                "leak_rate {} outside [0, 1]",
                self.leak_rate
            )));
        }
        if self.context_len < 10 {
            return Err(SynthError::InvalidSpec(format!(
                "context_len {} below 10",
                self.context_len
            )));
        }
        let (keywords, fillers) = self.pool_sizes();
        if keywords < self.n_options || fillers == 0 {
            return Err(SynthError::VocabTooSmall {
                vocab_size: self.vocab_size,
                needed: self.n_options,
            });
        }
        Ok(())
    }

    /// (keyword pool, filler pool). Half the vocabulary is keywords.
    pub fn pool_sizes(&self) -> (usize, usize) {
        let keywords = self.vocab_size / 2;
        (keywords, self.vocab_size - keywords)
    }

    /// Token positions the gold keyword may occupy in a context.
    pub fn planting_range(&self) -> std::ops::Range<usize> {
        let len = self.context_len;
        let w = window_len(PROFILE_WINDOW_PERCENT, len);
        match self.position_profile {
            PositionProfile::Front => 0..w,
            PositionProfile::End => len - w..len,
            PositionProfile::Uniform => 0..len,
        }
    }
}

pub fn keyword_token(i: usize) -> String {
    format!("kw{i}")
}

pub fn filler_token(i: usize) -> String {
    format!("fl{i}")
}

pub fn is_keyword(token: &str) -> bool {
    token
        .strip_prefix("kw")
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

pub fn generate(spec: &SynthSpec) -> Result<Corpus, SynthError> {
    spec.check()?;
    let (n_keywords, n_fillers) = spec.pool_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let keywords: Vec<String> = sample(&mut rng, n_keywords, spec.n_options)
            .into_iter()
            .map(keyword_token)
            .collect();
        let gold = rng.random_range(0..spec.n_options);
        let leaked = rng.random_bool(spec.leak_rate);
        let position = rng.random_range(spec.planting_range());
        let mut context: Vec<String> = (0..spec.context_len)
            .map(|_| filler_token(rng.random_range(0..n_fillers)))
            .collect();
        context[position] = keywords[gold].clone();

        let mut question: Vec<&str> = QUESTION_HEAD.to_vec();
        if leaked {
            question.push(&keywords[gold]);
        }
        question.push("?");

        let mut meta = BTreeMap::new();
        meta.insert("dataset".to_string(), "synth".to_string());
        meta.insert("leaked".to_string(), leaked.to_string());
        meta.insert("keyword_position".to_string(), position.to_string());
        items.push(McqItem {
            id: format!("synth-{:x}-{i:05}", spec.seed),
            context: context.join(" "),
            context_kind: ContextKind::Passage,
            question: question.join(" "),
            options: keywords,
            answer_index: gold,
            meta,
        });
    }
    let name = format!(
        "synth-{}-n{}-l{}",
        match spec.position_profile {
            PositionProfile::Front => "front",
            PositionProfile::Uniform => "uniform",
            PositionProfile::End => "end",
        },
        spec.n_options,
        spec.leak_rate
    );
    Ok(Corpus::new(name, items))
}

/// Writes the corpus as canonical JSONL and the spec next to it as
/// `<stem>.spec.json`.
pub fn write_with_spec(spec: &SynthSpec, corpus: &Corpus, path: &Path) -> Result<(), SynthError> {
    fs::write(path, corpus.to_jsonl())?;
    let spec_path = path.with_extension("spec.json");
    fs::write(
        spec_path,
        serde_json::to_string_pretty(spec).expect("spec serializes") + "\n",
    )?;
    Ok(())
}

/// Accuracy of an ideal keyword-matching answerer that sees only the question.
pub fn oracle_context_free_accuracy(spec: &SynthSpec) -> f64 {
    spec.leak_rate + (1.0 - spec.leak_rate) / spec.n_options as f64
}

/// Literal keyword matching: the first option whose text occurs as a token in
/// the visible context or question. `None` when no option matches.
pub fn keyword_match(item: &McqItem, visible: &[String]) -> Option<usize> {
    let question = tokenize(&item.question);
    item.options
        .iter()
        .position(|opt| visible.iter().any(|t| t == opt) || question.iter().any(|t| t == opt))
}

/// [`keyword_match`] wrapped as a scorer: one-hot on the matched option,
/// uniform when nothing matches.
#[derive(Debug, Default, Clone)]
pub struct KeywordMatcher;

impl Scorer for KeywordMatcher {
    fn id(&self) -> &str {
        "keyword-matcher"
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest<'_>],
    ) -> Result<Vec<OptionDistribution>, ScorerError> {
        Ok(requests
            .iter()
            .map(|req| {
                let n = req.item.n_options();
                let visible = req.context.as_ref().map_or(&[][..], |c| &c.tokens[..]);
                match keyword_match(req.item, visible) {
                    Some(j) => OptionDistribution::one_hot(n, j),
                    None => OptionDistribution::uniform(n),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate;

    fn spec(leak: f64, profile: PositionProfile) -> SynthSpec {
        SynthSpec {
            size: 200,
            leak_rate: leak,
            position_profile: profile,
            seed: 9,
            ..SynthSpec::default()
        }
    }

    fn keyword_in_question(item: &McqItem) -> bool {
        tokenize(&item.question)
            .iter()
            .any(|t| *t == item.options[item.answer_index])
    }

    #[test]
    fn full_leak_puts_keyword_in_every_question() {
        for profile in [
            PositionProfile::Front,
            PositionProfile::Uniform,
            PositionProfile::End,
        ] {
            let c = generate(&spec(1.0, profile)).unwrap();
            assert!(c.items.iter().all(keyword_in_question));
        }
    }

    #[test]
    fn no_leak_front_profile() {
        let s = spec(0.0, PositionProfile::Front);
        let c = generate(&s).unwrap();
        let front = window_len(20, s.context_len);
        for item in &c.items {
            assert!(!keyword_in_question(item));
            let ctx = tokenize(&item.context);
            assert!(ctx[..front].contains(&item.options[item.answer_index]));
        }
    }

    #[test]
    fn end_profile_plants_in_last_fifth() {
        let s = spec(0.0, PositionProfile::End);
        let c = generate(&s).unwrap();
        let w = window_len(20, s.context_len);
        for item in &c.items {
            let ctx = tokenize(&item.context);
            let pos = ctx
                .iter()
                .position(|t| *t == item.options[item.answer_index])
                .unwrap();
            assert!(pos >= s.context_len - w);
        }
    }

    #[test]
    fn distractors_absent_from_context_and_question() {
        let c = generate(&spec(0.5, PositionProfile::Uniform)).unwrap();
        for item in &c.items {
            let ctx = tokenize(&item.context);
            let q = tokenize(&item.question);
            for (j, opt) in item.options.iter().enumerate() {
                let in_ctx = ctx.iter().filter(|t| *t == opt).count();
                if j == item.answer_index {
                    assert_eq!(in_ctx, 1);
                } else {
                    assert_eq!(in_ctx, 0);
                    assert!(!q.contains(opt));
                }
            }
        }
    }

    #[test]
    fn leak_fraction_near_rate() {
        let s = SynthSpec {
            size: 1000,
            leak_rate: 0.5,
            ..SynthSpec::default()
        };
        let c = generate(&s).unwrap();
        let leaked = c.items.iter().filter(|i| keyword_in_question(i)).count();
        let frac = leaked as f64 / 1000.0;
        assert!((frac - 0.5).abs() <= 0.04, "leak fraction {frac}");
    }

    #[test]
    fn generated_corpus_is_valid_and_reproducible() {
        let s = spec(0.3, PositionProfile::Uniform);
        let a = generate(&s).unwrap();
        assert!(validate(&a).is_empty());
        assert_eq!(a.to_jsonl(), generate(&s).unwrap().to_jsonl());
        let other = generate(&SynthSpec { seed: 10, ..s }).unwrap();
        assert_ne!(a.to_jsonl(), other.to_jsonl());
    }

    #[test]
    fn vocab_too_small() {
        let s = SynthSpec {
            vocab_size: 6,
            n_options: 4,
            ..SynthSpec::default()
        };
        assert!(matches!(
            generate(&s),
            Err(SynthError::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate(&SynthSpec {
            context_len: 9,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            leak_rate: 1.5,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            n_options: 1,
            ..SynthSpec::default()
        })
        .is_err());
    }

    #[test]
    fn oracle_values() {
        let mut s = SynthSpec {
            leak_rate: 0.0,
            ..SynthSpec::default()
        };
        assert_eq!(oracle_context_free_accuracy(&s), 0.25);
        s.leak_rate = 1.0;
        assert_eq!(oracle_context_free_accuracy(&s), 1.0);
        s.leak_rate = 0.5;
        assert_eq!(oracle_context_free_accuracy(&s), 0.625);
    }

    #[test]
    fn oracle_matches_monte_carlo_keyword_matcher() {
        // Context-free literal matcher: picks the leaked keyword, otherwise
        // guesses uniformly with its own RNG.
        let s = SynthSpec {
            size: 4000,
            leak_rate: 0.5,
            seed: 3,
            ..SynthSpec::default()
        };
        let c = generate(&s).unwrap();
        let mut guess_rng = ChaCha8Rng::seed_from_u64(77);
        let correct = c
            .items
            .iter()
            .filter(|item| {
                let pick = keyword_match(item, &[])
                    .unwrap_or_else(|| guess_rng.random_range(0..item.n_options()));
                pick == item.answer_index
            })
            .count();
        let acc = correct as f64 / c.len() as f64;
        assert!((acc - 0.625).abs() < 0.025, "monte-carlo accuracy {acc}");
    }
}
