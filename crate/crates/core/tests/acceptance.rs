//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use compre_probe::ablation::{
    evaluate, positional_study, random_baseline, sweep_tau, EvalOptions, SweepConfig,
};
use compre_probe::corpus::{Corpus, McqItem};
use compre_probe::scorer::{
    grad_check, score_options, train_toy, Condition, ContextMode, Ensemble, Scorer, ToyScorer,
    ToyScorerParams, TrainConfig, NORM_TOLERANCE,
};
use compre_probe::synth::{generate, oracle_context_free_accuracy, PositionProfile, SynthSpec};
use compre_probe::textproc::{
    extract_context, tokenize, ExtractMode, ExtractSpec, SourceKind, TokenSeq, CLS, SEP,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Training setup used wherever a criterion needs a scorer that has learned
/// the synthetic task. Larger steps than the library default; the default
/// learning rate needs many more epochs on standard-mode inputs.
fn learner(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        learning_rate: 0.3,
        batch_size: 16,
        seed,
        embed_dim: 32,
        init_scale: 2.0,
        ..TrainConfig::default()
    }
}

fn synth(
    size: usize,
    n: usize,
    leak: f64,
    profile: PositionProfile,
    len: usize,
    seed: u64,
) -> Corpus {
    generate(&SynthSpec {
        size,
        n_options: n,
        leak_rate: leak,
        position_profile: profile,
        context_len: len,
        vocab_size: 400,
        seed,
    })
    .expect("valid synth spec")
}

/// Standard-mode training corpus mixing several passage lengths, so the
/// scorer sees short inputs like the ones truncation produces.
fn mixed_length_corpus(profile: PositionProfile, seed: u64) -> Corpus {
    let mut items = Vec::new();
    for (i, len) in [10, 15, 20, 25, 30, 35, 40].into_iter().enumerate() {
        items.extend(synth(3000, 4, 0.0, profile, len, seed * 100 + i as u64).items);
    }
    Corpus::new("mixed", items)
}

fn vocab_of(corpus: &Corpus) -> Vec<String> {
    let mut vocab = vec![CLS.to_string(), SEP.to_string()];
    for item in &corpus.items {
        let texts = std::iter::once(&item.context)
            .chain(std::iter::once(&item.question))
            .chain(item.options.iter());
        for t in texts.flat_map(|s| tokenize(s)) {
            if !vocab.contains(&t) {
                vocab.push(t);
            }
        }
    }
    vocab
}

fn permuted(item: &McqItem, perm: &[usize]) -> McqItem {
    let mut out = item.clone();
    out.options = perm.iter().map(|&p| item.options[p].clone()).collect();
    out.answer_index = perm.iter().position(|&p| p == item.answer_index).unwrap();
    out
}

fn softmax_validity() -> Outcome {
    let start = Instant::now();
    let mut items = Vec::new();
    for n in 2..=5 {
        items.extend(synth(250, n, 0.3, PositionProfile::Uniform, 30, 40 + n as u64).items);
    }
    let corpus = Corpus::new("mixed-n", items);
    let scorer = ToyScorer::new(ToyScorerParams::random(vocab_of(&corpus), 16, 3, 1.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_sum = 0.0f64;
    let mut perm_failures = 0;
    for item in &corpus.items {
        let cond = if rng.random_bool(0.5) {
            Condition::full_context()
        } else {
            Condition::context_free()
        };
        let d = score_options(&scorer, item, &cond).unwrap();
        let sum: f64 = d.probs().iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        if d.probs().iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            worst_sum = f64::INFINITY;
        }
        let mut perm: Vec<usize> = (0..item.n_options()).collect();
        perm.shuffle(&mut rng);
        let pd = score_options(&scorer, &permuted(item, &perm), &cond).unwrap();
        let ok = perm
            .iter()
            .enumerate()
            .all(|(i, &p)| (pd.probs()[i] - d.probs()[p]).abs() < 1e-12);
        if !ok {
            perm_failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_sum <= NORM_TOLERANCE && perm_failures == 0 && secs < 10.0,
        format!(
            "{} items, max |sum-1| {worst_sum:.2e}, {perm_failures} permutation mismatches, {secs:.2}s",
            corpus.len()
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let corpus = synth(6, 4, 0.5, PositionProfile::Uniform, 20, 9);
    let vocab = vocab_of(&corpus);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (i, item) in corpus.items.iter().enumerate() {
        let params = ToyScorerParams::random(vocab.clone(), 8, i as u64, 0.5);
        for cond in [
            Condition::full_context(),
            Condition::context_free(),
            Condition::partial(ExtractSpec::new(40, ExtractMode::RandomWindow, 2).unwrap()),
        ] {
            worst = worst.max(grad_check(&params, item, &cond, 1e-4).unwrap());
            checks += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 5.0,
        format!("{checks} checks of 64 coordinates, max relative error {worst:.2e}, {secs:.2}s"),
    )
}

fn truncation_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    for c in 0..500 {
        let len = rng.random_range(0..400);
        let ctx = TokenSeq::new(
            (0..len)
                .map(|_| format!("w{}", rng.random_range(0..50)))
                .collect(),
            SourceKind::Context,
        );
        let id = format!("ctx-{c}");
        let ext = |tau, mode| {
            extract_context(&ctx, &ExtractSpec::new(tau, mode, 7).unwrap(), &id).unwrap()
        };
        for mode in ExtractMode::ALL {
            if ext(100, mode) != ctx {
                failures.push(format!("{id}: tau 100 {mode:?} not identity"));
            }
            if !ext(0, mode).is_empty() {
                failures.push(format!("{id}: tau 0 {mode:?} not empty"));
            }
        }
        let mut prev: Option<TokenSeq> = None;
        for tau in 0..=100u32 {
            let expected = (tau as f64 * len as f64 / 100.0).round() as usize;
            for mode in ExtractMode::ALL {
                let e = ext(tau, mode);
                if e.len() != expected {
                    failures.push(format!(
                        "{id}: tau {tau} {mode:?} len {} != {expected}",
                        e.len()
                    ));
                }
                let window_ok =
                    (0..=len - e.len()).any(|s| ctx.tokens[s..s + e.len()] == e.tokens[..]);
                if !window_ok {
                    failures.push(format!("{id}: tau {tau} {mode:?} not contiguous"));
                }
            }
            let b = ext(tau, ExtractMode::Beginning);
            if let Some(p) = &prev {
                if !b.tokens.starts_with(&p.tokens) {
                    failures.push(format!(
                        "{id}: beginning tau {tau} does not extend tau {}",
                        tau - 1
                    ));
                }
            }
            prev = Some(b);
        }
        // Every pair, not only neighbours.
        let grid: Vec<TokenSeq> = (0..=10)
            .map(|t| ext(t * 10, ExtractMode::Beginning))
            .collect();
        for i in 0..grid.len() {
            for j in i..grid.len() {
                if !grid[j].tokens.starts_with(&grid[i].tokens) {
                    failures.push(format!(
                        "{id}: prefix order broken between grid {i} and {j}"
                    ));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 5.0,
        match failures.first() {
            None => format!("500 contexts, all identities hold, {secs:.2}s"),
            Some(f) => format!("{} failures, first: {f}; {secs:.2}s", failures.len()),
        },
    )
}

fn sweep_consistency() -> Outcome {
    let corpus = synth(200, 4, 0.3, PositionProfile::Uniform, 30, 21);
    let (params, _) = train_toy(
        &corpus,
        &TrainConfig {
            epochs: 2,
            ..learner(1)
        },
        ContextMode::Standard,
    )
    .unwrap();
    let scorer = ToyScorer::new(params).unwrap();
    let opts = EvalOptions::default();
    let sweep = sweep_tau(&scorer, &corpus, &SweepConfig::default(), &opts).unwrap();
    let full = evaluate(&scorer, &corpus, &Condition::full_context(), &opts).unwrap();
    let at_100 = sweep.records.last().unwrap();
    let mismatches = at_100
        .iter()
        .zip(&full.records)
        .filter(|(a, b)| a.item_id != b.item_id || a.predicted != b.predicted || a.probs != b.probs)
        .count()
        + at_100.len().abs_diff(full.records.len());
    outcome(
        mismatches == 0 && sweep.curve.accuracy_at(100) == Some(full.accuracy),
        format!(
            "{} items, {mismatches} mismatches, accuracy {:.3} vs {:.3}",
            corpus.len(),
            sweep.curve.accuracy_at(100).unwrap(),
            full.accuracy
        ),
    )
}

fn chance_floor() -> Outcome {
    let corpus = synth(1000, 4, 0.0, PositionProfile::Uniform, 30, 31);
    let scorer = ToyScorer::new(ToyScorerParams::zeros(vocab_of(&corpus), 32)).unwrap();
    let acc = evaluate(
        &scorer,
        &corpus,
        &Condition::full_context(),
        &EvalOptions::default(),
    )
    .unwrap()
    .accuracy;
    outcome(
        (0.22..=0.28).contains(&acc),
        format!(
            "zeroed scorer accuracy {acc:.3} (band [0.22, 0.28], random {:.3})",
            random_baseline(&corpus)
        ),
    )
}

fn world_knowledge_recovery() -> (Outcome, Vec<ToyScorer>) {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    let mut scorers = Vec::new();
    for (k, leak) in [0.0, 0.5, 1.0].into_iter().enumerate() {
        let train = synth(2000, 4, leak, PositionProfile::Uniform, 30, 100 + k as u64);
        let test = synth(1000, 4, leak, PositionProfile::Uniform, 30, 200 + k as u64);
        let (params, _) = train_toy(&train, &learner(k as u64), ContextMode::ContextFree).unwrap();
        let scorer = ToyScorer::new(params).unwrap();
        let acc = evaluate(
            &scorer,
            &test,
            &Condition::context_free(),
            &EvalOptions::default(),
        )
        .unwrap()
        .accuracy;
        let oracle = oracle_context_free_accuracy(&SynthSpec {
            leak_rate: leak,
            ..SynthSpec::default()
        });
        pass &= (acc - oracle).abs() <= 0.05;
        parts.push(format!("λ={leak}: {acc:.3} vs {oracle:.3}"));
        scorers.push(scorer);
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    (
        outcome(pass, format!("{}; {secs:.1}s", parts.join(", "))),
        scorers,
    )
}

fn positional_ordering(front: &dyn Scorer, end: &dyn Scorer) -> Outcome {
    let opts = EvalOptions {
        parallelism: 4,
        ..EvalOptions::default()
    };
    let noise = 0.03;
    let mut pass = true;
    let mut parts = Vec::new();
    for (profile, scorer, name) in [
        (PositionProfile::Front, front, "front"),
        (PositionProfile::End, end, "end"),
    ] {
        let test = synth(1000, 4, 0.0, profile, 30, 300);
        let study = positional_study(scorer, &test, 20, 0, 5, &opts).unwrap();
        let b = study.accuracy(ExtractMode::Beginning);
        let r = study.accuracy(ExtractMode::RandomWindow);
        let e = study.accuracy(ExtractMode::End);
        // The end profile mirrors the front one.
        let (near, far) = if profile == PositionProfile::Front {
            (b, e)
        } else {
            (e, b)
        };
        pass &= near - far >= 0.15 && near + noise >= r && r + noise >= far;
        parts.push(format!("{name}: beginning {b:.3} random {r:.3} end {e:.3}"));
    }
    outcome(pass, parts.join("; "))
}

fn curve_shape(uniform: &dyn Scorer, front: &dyn Scorer) -> Outcome {
    let opts = EvalOptions {
        parallelism: 4,
        ..EvalOptions::default()
    };
    let cfg = SweepConfig::default();
    let u = sweep_tau(
        uniform,
        &synth(1000, 4, 0.0, PositionProfile::Uniform, 30, 400),
        &cfg,
        &opts,
    )
    .unwrap()
    .curve;
    let worst_drop = u
        .points
        .windows(2)
        .map(|w| w[0].accuracy - w[1].accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let f = sweep_tau(
        front,
        &synth(1000, 4, 0.0, PositionProfile::Front, 30, 401),
        &cfg,
        &opts,
    )
    .unwrap()
    .curve;
    let (at40, at100) = (f.accuracy_at(40).unwrap(), f.accuracy_at(100).unwrap());
    let fmt = |c: &compre_probe::ablation::AblationCurve| {
        c.points
            .iter()
            .map(|p| format!("{:.2}", p.accuracy))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        worst_drop <= 0.03 && (at100 - at40).abs() <= 0.02,
        format!(
            "uniform [{}] worst drop {worst_drop:.3}; front [{}] |acc(100)-acc(40)| {:.3}",
            fmt(&u),
            fmt(&f),
            (at100 - at40).abs()
        ),
    )
}

fn variable_option_count(four_option: &ToyScorer) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [3, 2] {
        let test = synth(1000, n, 1.0, PositionProfile::Uniform, 30, 500 + n as u64);
        match evaluate(
            four_option,
            &test,
            &Condition::context_free(),
            &EvalOptions::default(),
        ) {
            Ok(e) => {
                let random = random_baseline(&test);
                pass &= e.accuracy > random;
                parts.push(format!("N={n}: {:.3} (random {random:.3})", e.accuracy));
            }
            Err(err) => {
                pass = false;
                parts.push(format!("N={n}: error {err}"));
            }
        }
    }
    outcome(pass, parts.join(", "))
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_compre-probe"))
        .args(args)
        .env_remove("COMPRE_PROBE_SEED")
        .output()
        .expect("binary runs");
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    let (train, test, model) = (p("train.jsonl"), p("test.jsonl"), p("model.json"));
    run_cli(&[
        "synth",
        "--out",
        &train,
        "--size",
        "600",
        "--profile",
        "front",
        "--seed",
        "3",
    ]);
    run_cli(&[
        "synth",
        "--out",
        &test,
        "--size",
        "200",
        "--profile",
        "front",
        "--seed",
        "4",
    ]);
    run_cli(&[
        "train",
        "--corpus",
        &train,
        "--out",
        &model,
        "--epochs",
        "3",
        "--ensemble",
        "2",
    ]);
    let runs: Vec<(String, Vec<&str>)> = vec![
        (
            p("curve.csv"),
            vec![
                "sweep",
                "--corpus",
                &test,
                "--scorer",
                &model,
                "--mode",
                "random_window",
                "--repetitions",
                "2",
            ],
        ),
        (
            p("pos.csv"),
            vec!["positional", "--corpus", &test, "--scorer", &model],
        ),
        (
            p("wk.csv"),
            vec![
                "wkreport",
                "--corpus",
                &test,
                "--standard",
                &model,
                "--context-free",
                &model,
            ],
        ),
        (
            p("labels.csv"),
            vec![
                "classify",
                "--corpus",
                &test,
                "--standard",
                &model,
                "--context-free",
                &model,
            ],
        ),
    ];
    let mut compared = 0;
    let mut differing = Vec::new();
    for (out, args) in &runs {
        let mut argv = args.clone();
        argv.extend(["--out", out.as_str()]);
        run_cli(&argv);
        let first = std::fs::read(out).unwrap();
        let manifest = format!("{}.manifest.json", out.trim_end_matches(".csv"));
        assert!(Path::new(&manifest).exists(), "{manifest} missing");
        std::fs::remove_file(out).unwrap();
        run_cli(&["rerun", "--manifest", &manifest]);
        compared += 1;
        if std::fs::read(out).unwrap() != first {
            differing.push(out.clone());
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "{compared} CSV outputs re-run from manifests, {} differ {differing:?}",
            differing.len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name, o: Outcome| {
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((name, o));
    };
    record("softmax validity", softmax_validity());
    record("gradient correctness", gradient_correctness());
    record("truncation identities", truncation_identities());
    record("sweep consistency", sweep_consistency());
    record("chance floor", chance_floor());
    let (wk, context_free) = world_knowledge_recovery();
    record("world-knowledge recovery", wk);

    // Three-member ensembles: single toy models wobble by a couple of points
    // from one τ to the next.
    let train = |profile, seed: u64| {
        let corpus = mixed_length_corpus(profile, seed);
        let members: Vec<Box<dyn Scorer>> = (0..3)
            .map(|m| {
                let (params, _) =
                    train_toy(&corpus, &learner(seed * 10 + m), ContextMode::Standard).unwrap();
                Box::new(ToyScorer::new(params).unwrap()) as Box<dyn Scorer>
            })
            .collect();
        Ensemble::new(members).unwrap()
    };
    let front = train(PositionProfile::Front, 1);
    let end = train(PositionProfile::End, 2);
    let uniform = train(PositionProfile::Uniform, 3);
    record("positional ordering", positional_ordering(&front, &end));
    record("curve shape", curve_shape(&uniform, &front));
    record(
        "variable option count",
        variable_option_count(&context_free[2]),
    );
    record("determinism", determinism());

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.1?}",
        results.len() - failed,
        Duration::from_secs_f64(start.elapsed().as_secs_f64())
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
