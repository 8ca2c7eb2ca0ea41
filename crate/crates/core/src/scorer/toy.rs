//! A small trainable scorer: mean-pooled token embeddings, one `tanh` mixing
//! layer and a scalar head, all shared across options.
//!
//! For one option with assembled token ids `t_1..t_L`:
//!
//! ```text
//! h = (1/L) * sum_j E[t_j]
//! z = tanh(W h + b)
//! s = v . z + c
//! ```
//!
//! The item's option scores go through a softmax and training minimizes the
//! cross-entropy against the gold index with plain minibatch SGD.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Condition, ContextMode, OptionDistribution, ScoreRequest, Scorer, ScorerError};
use crate::corpus::{Corpus, McqItem};
use crate::textproc::{assemble_input, AssembledInput, TokenSeq, CLS, DEFAULT_MAX_LEN, SEP};

pub const UNK: &str = "[UNK]";

/// Coordinates sampled by [`grad_check`].
pub const GRAD_CHECK_MIN_COORDS: usize = 64;

/// Denominator floor for the relative error in [`grad_check`], so that
/// coordinates with an exactly zero gradient compare on absolute error.
const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_len: usize,
    pub embed_dim: usize,
    /// Standard deviation of the initial embedding entries. Mean pooling
    /// divides by the input length, so small values leave the tanh layer
    /// almost linear and token matches never become visible to the head.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
            embed_dim: 32,
            init_scale: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), ScorerError> {
        if self.epochs == 0 {
            return Err(ScorerError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ScorerError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ScorerError::Config("batch_size must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(ScorerError::Config("embed_dim must be at least 1".into()));
        }
        if self.max_len < 4 {
            return Err(ScorerError::Config("max_len must be at least 4".into()));
        }
        Ok(())
    }
}

/// Parameters of the toy scorer. Row-major matrices; `vocab[0]` is the
/// unknown-token bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorerParams {
    pub vocab: Vec<String>,
    pub embed_dim: usize,
    /// `vocab.len() x embed_dim`
    pub embedding: Vec<f64>,
    /// `embed_dim x embed_dim`
    pub enc_weight: Vec<f64>,
    pub enc_bias: Vec<f64>,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
    pub max_len: usize,
    pub context_mode: ContextMode,
    pub seed: u64,
}

impl ToyScorerParams {
    /// All-zero parameters over `vocab` (an `[UNK]` entry is prepended if missing).
    pub fn zeros(vocab: Vec<String>, embed_dim: usize) -> Self {
        let vocab = with_unk(vocab);
        ToyScorerParams {
            embedding: vec![0.0; vocab.len() * embed_dim],
            vocab,
            embed_dim,
            enc_weight: vec![0.0; embed_dim * embed_dim],
            enc_bias: vec![0.0; embed_dim],
            head_weight: vec![0.0; embed_dim],
            head_bias: 0.0,
            max_len: DEFAULT_MAX_LEN,
            context_mode: ContextMode::Standard,
            seed: 0,
        }
    }

    /// Gaussian parameters with standard deviation `scale` everywhere.
    pub fn random(vocab: Vec<String>, embed_dim: usize, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(vocab, embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("valid scale");
        for x in p
            .embedding
            .iter_mut()
            .chain(p.enc_weight.iter_mut())
            .chain(p.enc_bias.iter_mut())
            .chain(p.head_weight.iter_mut())
        {
            *x = normal.sample(&mut rng);
        }
        p.head_bias = normal.sample(&mut rng);
        p.seed = seed;
        p
    }

    fn init(vocab: Vec<String>, cfg: &TrainConfig, mode: ContextMode) -> Self {
        let d = cfg.embed_dim;
        let mut p = Self::zeros(vocab, d);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let emb = Normal::new(0.0, cfg.init_scale).expect("valid init scale");
        let dense = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid scale");
        for x in &mut p.embedding {
            *x = emb.sample(&mut rng);
        }
        for x in p.enc_weight.iter_mut().chain(p.head_weight.iter_mut()) {
            *x = dense.sample(&mut rng);
        }
        p.max_len = cfg.max_len;
        p.context_mode = mode;
        p.seed = cfg.seed;
        p
    }

    pub fn check(&self) -> Result<(), ScorerError> {
        let d = self.embed_dim;
        let bad = |what: &str| Err(ScorerError::Params(what.to_string()));
        if self.vocab.first().map(String::as_str) != Some(UNK) {
            return bad("vocab must start with [UNK]");
        }
        if self.embedding.len() != self.vocab.len() * d {
            return bad("embedding shape does not match vocab x embed_dim");
        }
        if self.enc_weight.len() != d * d || self.enc_bias.len() != d || self.head_weight.len() != d
        {
            return bad("encoder or head shape does not match embed_dim");
        }
        let all_finite = self
            .embedding
            .iter()
            .chain(&self.enc_weight)
            .chain(&self.enc_bias)
            .chain(&self.head_weight)
            .chain(std::iter::once(&self.head_bias))
            .all(|x| x.is_finite());
        if !all_finite {
            return bad("non-finite parameter");
        }
        Ok(())
    }
}

fn with_unk(mut vocab: Vec<String>) -> Vec<String> {
    if vocab.first().map(String::as_str) != Some(UNK) {
        vocab.retain(|t| t != UNK);
        vocab.insert(0, UNK.to_string());
    }
    vocab
}

/// Gradient buffers laid out like [`ToyScorerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Vec<f64>,
    pub enc_weight: Vec<f64>,
    pub enc_bias: Vec<f64>,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

impl Gradients {
    pub fn zeros(p: &ToyScorerParams) -> Self {
        Gradients {
            embedding: vec![0.0; p.embedding.len()],
            enc_weight: vec![0.0; p.enc_weight.len()],
            enc_bias: vec![0.0; p.enc_bias.len()],
            head_weight: vec![0.0; p.head_weight.len()],
            head_bias: 0.0,
        }
    }

    fn clear(&mut self) {
        for x in self
            .embedding
            .iter_mut()
            .chain(&mut self.enc_weight)
            .chain(&mut self.enc_bias)
            .chain(&mut self.head_weight)
        {
            *x = 0.0;
        }
        self.head_bias = 0.0;
    }

    /// Flat view in the same order as [`param_mut`].
    pub fn get(&self, flat: usize) -> f64 {
        let mut i = flat;
        for part in [
            &self.embedding,
            &self.enc_weight,
            &self.enc_bias,
            &self.head_weight,
        ] {
            if i < part.len() {
                return part[i];
            }
            i -= part.len();
        }
        assert_eq!(i, 0, "flat index out of range");
        self.head_bias
    }

    pub fn get_mut(&mut self, flat: usize) -> &mut f64 {
        let mut i = flat;
        for part in [
            &mut self.embedding,
            &mut self.enc_weight,
            &mut self.enc_bias,
            &mut self.head_weight,
        ] {
            if i < part.len() {
                return &mut part[i];
            }
            i -= part.len();
        }
        assert_eq!(i, 0, "flat index out of range");
        &mut self.head_bias
    }
}

fn param_mut(p: &mut ToyScorerParams, flat: usize) -> &mut f64 {
    let mut i = flat;
    for part in [
        &mut p.embedding,
        &mut p.enc_weight,
        &mut p.enc_bias,
        &mut p.head_weight,
    ] {
        if i < part.len() {
            return &mut part[i];
        }
        i -= part.len();
    }
    assert_eq!(i, 0, "flat index out of range");
    &mut p.head_bias
}

fn sgd_step(p: &mut ToyScorerParams, g: &Gradients, step: f64) {
    let pairs = [
        (&mut p.embedding, &g.embedding),
        (&mut p.enc_weight, &g.enc_weight),
        (&mut p.enc_bias, &g.enc_bias),
        (&mut p.head_weight, &g.head_weight),
    ];
    for (params, grads) in pairs {
        for (x, dx) in params.iter_mut().zip(grads) {
            *x -= step * dx;
        }
    }
    p.head_bias -= step * g.head_bias;
}

/// Per-option activations kept for the backward pass.
struct OptionPass {
    ids: Vec<usize>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    score: f64,
}

/// Inference-ready toy scorer.
#[derive(Debug, Clone)]
pub struct ToyScorer {
    params: ToyScorerParams,
    index: HashMap<String, usize>,
    id: String,
}

impl ToyScorer {
    pub fn new(params: ToyScorerParams) -> Result<Self, ScorerError> {
        params.check()?;
        let index = params
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let id = format!("toy-{}-s{}", params.context_mode.as_str(), params.seed);
        Ok(ToyScorer { params, index, id })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn params(&self) -> &ToyScorerParams {
        &self.params
    }

    pub fn into_params(self) -> ToyScorerParams {
        self.params
    }

    fn token_ids(&self, input: &AssembledInput) -> Vec<usize> {
        input
            .tokens
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(0))
            .collect()
    }

    /// Token ids of every option's assembled input.
    fn encode(
        &self,
        item: &McqItem,
        context: Option<&TokenSeq>,
    ) -> Result<Vec<Vec<usize>>, ScorerError> {
        (0..item.n_options())
            .map(|i| {
                assemble_input(item, i, context, self.params.max_len)
                    .map(|a| self.token_ids(&a))
                    .map_err(|source| ScorerError::Input {
                        item: item.id.clone(),
                        source,
                    })
            })
            .collect()
    }

    fn forward(&self, ids: Vec<usize>) -> OptionPass {
        let p = &self.params;
        let d = p.embed_dim;
        let mut pooled = vec![0.0; d];
        for &t in &ids {
            for (acc, e) in pooled.iter_mut().zip(&p.embedding[t * d..(t + 1) * d]) {
                *acc += e;
            }
        }
        let inv = 1.0 / ids.len().max(1) as f64;
        for x in &mut pooled {
            *x *= inv;
        }
        let hidden: Vec<f64> = (0..d)
            .map(|r| {
                let row = &p.enc_weight[r * d..(r + 1) * d];
                let u: f64 =
                    row.iter().zip(&pooled).map(|(w, h)| w * h).sum::<f64>() + p.enc_bias[r];
                u.tanh()
            })
            .collect();
        let score = hidden
            .iter()
            .zip(&p.head_weight)
            .map(|(z, v)| z * v)
            .sum::<f64>()
            + p.head_bias;
        OptionPass {
            ids,
            pooled,
            hidden,
            score,
        }
    }

    pub fn option_scores(
        &self,
        item: &McqItem,
        context: Option<&TokenSeq>,
    ) -> Result<Vec<f64>, ScorerError> {
        Ok(self
            .encode(item, context)?
            .into_iter()
            .map(|ids| self.forward(ids).score)
            .collect())
    }

    /// Cross-entropy of one item; accumulates gradients into `grads` if given.
    fn loss_on_ids(
        &self,
        option_ids: &[Vec<usize>],
        answer: usize,
        grads: Option<&mut Gradients>,
    ) -> f64 {
        let passes: Vec<OptionPass> = option_ids
            .iter()
            .map(|ids| self.forward(ids.clone()))
            .collect();
        let scores: Vec<f64> = passes.iter().map(|p| p.score).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
        let loss = log_sum - scores[answer];
        let Some(g) = grads else {
            return loss;
        };
        let p = &self.params;
        let d = p.embed_dim;
        let mut d_hidden = vec![0.0; d];
        let mut d_pooled = vec![0.0; d];
        for (i, pass) in passes.iter().enumerate() {
            let prob = (pass.score - log_sum).exp();
            let d_score = prob - if i == answer { 1.0 } else { 0.0 };
            g.head_bias += d_score;
            for (m, (&z, &v)) in pass.hidden.iter().zip(&p.head_weight).enumerate() {
                g.head_weight[m] += d_score * z;
                d_hidden[m] = d_score * v * (1.0 - z * z);
            }
            d_pooled.iter_mut().for_each(|x| *x = 0.0);
            for (r, du) in d_hidden.iter().enumerate() {
                g.enc_bias[r] += du;
                let w_row = &p.enc_weight[r * d..(r + 1) * d];
                let g_row = &mut g.enc_weight[r * d..(r + 1) * d];
                for c in 0..d {
                    g_row[c] += du * pass.pooled[c];
                    d_pooled[c] += du * w_row[c];
                }
            }
            let inv = 1.0 / pass.ids.len().max(1) as f64;
            for &t in &pass.ids {
                for (ge, dh) in g.embedding[t * d..(t + 1) * d].iter_mut().zip(&d_pooled) {
                    *ge += dh * inv;
                }
            }
        }
        loss
    }

    /// Loss of `item` under `condition`, plus its gradient.
    pub fn loss_and_grad(
        &self,
        item: &McqItem,
        condition: &Condition,
    ) -> Result<(f64, Gradients), ScorerError> {
        let req = ScoreRequest::new(item, condition, self.params.max_len)?;
        let ids = self.encode(item, req.context.as_ref())?;
        let mut g = Gradients::zeros(&self.params);
        let loss = self.loss_on_ids(&ids, item.answer_index, Some(&mut g));
        Ok((loss, g))
    }

    pub fn loss(&self, item: &McqItem, condition: &Condition) -> Result<f64, ScorerError> {
        let req = ScoreRequest::new(item, condition, self.params.max_len)?;
        let ids = self.encode(item, req.context.as_ref())?;
        Ok(self.loss_on_ids(&ids, item.answer_index, None))
    }
}

impl Scorer for ToyScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_len(&self) -> usize {
        self.params.max_len
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest<'_>],
    ) -> Result<Vec<OptionDistribution>, ScorerError> {
        requests
            .iter()
            .map(|req| {
                self.option_scores(req.item, req.context.as_ref())
                    .map(|s| OptionDistribution::from_scores(&s))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training cross-entropy per epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

fn training_condition(mode: ContextMode) -> Condition {
    match mode {
        ContextMode::Standard => Condition::full_context(),
        ContextMode::ContextFree => Condition::context_free(),
    }
}

/// Vocabulary in first-occurrence order over the training inputs, after the
/// `[UNK]`, `[CLS]` and `[SEP]` entries.
fn build_vocab(inputs: &[Vec<AssembledInput>]) -> Vec<String> {
    let mut vocab = vec![UNK.to_string(), CLS.to_string(), SEP.to_string()];
    let mut seen: HashMap<&str, ()> = vocab.iter().map(|t| (t.as_str(), ())).collect();
    let mut fresh = Vec::new();
    for input in inputs.iter().flatten() {
        for t in &input.tokens {
            if seen.insert(t.as_str(), ()).is_none() {
                fresh.push(t.clone());
            }
        }
    }
    vocab.extend(fresh);
    vocab
}

/// Trains a toy scorer with minibatch SGD on cross-entropy. Deterministic for a
/// fixed `cfg.seed`.
pub fn train_toy(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mode: ContextMode,
) -> Result<(ToyScorerParams, TrainReport), ScorerError> {
    cfg.check()?;
    if corpus.is_empty() {
        return Err(ScorerError::EmptyCorpus);
    }
    if let Some(bad) = corpus.items.iter().find(|i| !i.check().is_empty()) {
        return Err(ScorerError::Config(format!(
            "training item `{}` violates item invariants",
            bad.id
        )));
    }
    let condition = training_condition(mode);
    let assembled: Vec<Vec<AssembledInput>> = corpus
        .items
        .iter()
        .map(|item| {
            let req = ScoreRequest::new(item, &condition, cfg.max_len)?;
            (0..item.n_options())
                .map(|i| {
                    assemble_input(item, i, req.context.as_ref(), cfg.max_len).map_err(|source| {
                        ScorerError::Input {
                            item: item.id.clone(),
                            source,
                        }
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let vocab = build_vocab(&assembled);
    let mut scorer = ToyScorer::new(ToyScorerParams::init(vocab, cfg, mode))?;
    let encoded: Vec<Vec<Vec<usize>>> = assembled
        .iter()
        .map(|opts| opts.iter().map(|a| scorer.token_ids(a)).collect())
        .collect();

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    // Separate stream from initialization so shuffles do not shift when the
    // parameter count changes.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut grads = Gradients::zeros(&scorer.params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                total +=
                    scorer.loss_on_ids(&encoded[i], corpus.items[i].answer_index, Some(&mut grads));
            }
            let step = cfg.learning_rate / batch.len() as f64;
            sgd_step(&mut scorer.params, &grads, step);
        }
        epoch_losses.push(total / corpus.len() as f64);
    }
    scorer.params.check()?;
    Ok((scorer.into_params(), TrainReport { epoch_losses }))
}

/// Largest relative error between the analytic gradient and central finite
/// differences, over coordinates sampled from the embedding rows the item
/// uses, the encoder and the head.
pub fn grad_check(
    params: &ToyScorerParams,
    item: &McqItem,
    condition: &Condition,
    epsilon: f64,
) -> Result<f64, ScorerError> {
    let scorer = ToyScorer::new(params.clone())?;
    let (_, analytic) = scorer.loss_and_grad(item, condition)?;
    grad_check_against(params, item, condition, epsilon, &analytic)
}

/// As [`grad_check`], but against a caller-supplied gradient.
pub fn grad_check_against(
    params: &ToyScorerParams,
    item: &McqItem,
    condition: &Condition,
    epsilon: f64,
    analytic: &Gradients,
) -> Result<f64, ScorerError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(ScorerError::Config(format!(
            "epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    let base = ToyScorer::new(params.clone())?;
    let req = ScoreRequest::new(item, condition, params.max_len)?;
    let ids = base.encode(item, req.context.as_ref())?;
    let mut used_rows: Vec<usize> = ids.iter().flatten().copied().collect();
    used_rows.sort_unstable();
    used_rows.dedup();

    let d = params.embed_dim;
    let emb_len = params.embedding.len();
    let w_off = emb_len;
    let b_off = w_off + d * d;
    let v_off = b_off + d;
    let c_off = v_off + d;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x67c4_3a11);
    let mut coords = Vec::with_capacity(GRAD_CHECK_MIN_COORDS);
    for _ in 0..24 {
        let row = used_rows[rng.random_range(0..used_rows.len())];
        coords.push(row * d + rng.random_range(0..d));
    }
    for _ in 0..20 {
        coords.push(w_off + rng.random_range(0..d * d));
    }
    for _ in 0..8 {
        coords.push(b_off + rng.random_range(0..d));
    }
    for _ in 0..11 {
        coords.push(v_off + rng.random_range(0..d));
    }
    coords.push(c_off);

    let mut probe = base.clone();
    let mut worst: f64 = 0.0;
    for k in coords {
        let orig = *param_mut(&mut probe.params, k);
        *param_mut(&mut probe.params, k) = orig + epsilon;
        let plus = probe.loss_on_ids(&ids, item.answer_index, None);
        *param_mut(&mut probe.params, k) = orig - epsilon;
        let minus = probe.loss_on_ids(&ids, item.answer_index, None);
        *param_mut(&mut probe.params, k) = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let exact = analytic.get(k);
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
