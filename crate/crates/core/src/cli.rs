//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 scorer
//! or protocol error. Option values resolve as CLI flag, then the `--config`
//! file, then built-in defaults; the seed additionally falls back to
//! `COMPRE_PROBE_SEED` before the default.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::ablation::{
    classify_corpus, default_taus, evaluate, positional_study, sweep_tau, world_knowledge_report,
    EvalError, EvalOptions, SweepConfig,
};
use crate::corpus::{load_corpus_with, Corpus, CorpusError, CorpusFormat, LoadOptions};
use crate::report::{
    emit_curve_csv, emit_curve_svg, emit_labels_csv, emit_positional_table,
    emit_world_knowledge_csv, records_jsonl, sibling, write_records_jsonl, CorpusFingerprint,
    PositionalColumn, ReportError, RunManifest,
};
use crate::scorer::{
    train_toy, Condition, ContextMode, Ensemble, ExternalScorer, Scorer, ScorerError, ToyScorer,
    ToyScorerParams, TrainConfig,
};
use crate::synth::{generate, write_with_spec, PositionProfile, SynthError, SynthSpec};
use crate::textproc::{ExtractMode, ExtractSpec, TextError};

pub const SEED_ENV: &str = "COMPRE_PROBE_SEED";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Scorer(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Scorer(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Scorer(m) => write!(f, "scorer error: {m}"),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::UnknownFormat(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ScorerError> for CliError {
    fn from(e: ScorerError) -> Self {
        match e {
            ScorerError::Params(_) | ScorerError::EmptyCorpus | ScorerError::Input { .. } => {
                CliError::Data(e.to_string())
            }
            ScorerError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Scorer(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Scorer { .. } => CliError::Scorer(e.to_string()),
            EvalError::BadGrid(_) | EvalError::Extract(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "compre-probe",
    version,
    about = "Measure how much of its context a multiple-choice question needs"
)]
struct Cli {
    /// Flat `key = value` file supplying defaults for any long option.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Convert a dataset into canonical JSONL.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus with planted leakage.
    Synth(SynthArgs),
    /// Train toy scorer(s) on a corpus.
    Train(TrainArgs),
    /// Evaluate a scorer under one condition.
    Eval(EvalArgs),
    /// Accuracy as a function of the retained context percentage.
    Sweep(SweepArgs),
    /// Beginning / random / end extract comparison at a fixed percentage.
    Positional(PositionalArgs),
    /// Standard vs context-free accuracy per corpus.
    Wkreport(WkArgs),
    /// Per-question zero / partial / full comprehension labels.
    Classify(ClassifyArgs),
    /// Re-run the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    format: String,
    #[arg(long)]
    out: PathBuf,
    /// Drop `<speaker>:` prefixes from dialogue turns.
    #[arg(long)]
    drop_speakers: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    options: Option<usize>,
    #[arg(long)]
    leak: Option<f64>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Corpus file (repeatable where several corpora make sense).
    #[arg(long = "corpus", required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value = "canonical_jsonl")]
    format: String,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "canonical_jsonl")]
    format: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independently seeded members.
    #[arg(long)]
    ensemble: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Toy params file, `http://` URL or `cmd:<program> [args]`; repeat for an ensemble.
    #[arg(long, required = true)]
    scorer: Vec<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    tau: Option<u32>,
    #[arg(long)]
    extract: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, required = true)]
    scorer: Vec<String>,
    /// beginning, end or random_window.
    #[arg(long, alias = "extract")]
    mode: Option<String>,
    /// Comma-separated τ list; defaults to 0,10,...,100.
    #[arg(long)]
    taus: Option<String>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct PositionalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Column label per corpus; defaults to the corpus name.
    #[arg(long)]
    label: Vec<String>,
    #[arg(long, required = true)]
    scorer: Vec<String>,
    #[arg(long)]
    tau: Option<u32>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct WkArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, required = true)]
    standard: Vec<String>,
    #[arg(long = "context-free", required = true)]
    context_free: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, required = true)]
    standard: Vec<String>,
    #[arg(long = "context-free", required = true)]
    context_free: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Values from a flat `key = value` config file. Keys are long option names;
/// underscores and dashes are interchangeable.
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key = value", n + 1))?;
            values.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(CliError::Usage)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Resolves option values and records them for the manifest.
struct Resolver {
    config: ConfigFile,
    snapshot: BTreeMap<String, String>,
}

impl Resolver {
    fn value<T: FromStr + ToString>(
        &mut self,
        key: &str,
        cli: Option<T>,
        default: T,
    ) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = match cli {
            Some(v) => v,
            None => match self.config.get(key) {
                Some(raw) => raw
                    .parse()
                    .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))?,
                None => default,
            },
        };
        self.snapshot.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn seed(&mut self, cli: Option<u64>) -> Result<u64, CliError> {
        let fallback = match std::env::var(SEED_ENV) {
            Ok(raw) => raw
                .trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("{SEED_ENV}: {e}")))?,
            Err(_) => 0,
        };
        self.value("seed", cli, fallback)
    }

    fn eval_options(&mut self, run: &RunArgs) -> Result<EvalOptions, CliError> {
        let d = EvalOptions::default();
        Ok(EvalOptions {
            batch_size: self.value("batch", run.batch, d.batch_size)?,
            parallelism: self.value("parallelism", run.parallelism, d.parallelism)?,
        })
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn load_corpora(args: &CorpusArgs, manifest: &mut RunManifest) -> Result<Vec<Corpus>, CliError> {
    let format: CorpusFormat = args.format.parse()?;
    args.corpus
        .iter()
        .map(|p| load_one(p, format, manifest))
        .collect()
}

fn load_one(
    path: &Path,
    format: CorpusFormat,
    manifest: &mut RunManifest,
) -> Result<Corpus, CliError> {
    let corpus = load_corpus_with(path, format, &LoadOptions::default())?.validated()?;
    if corpus.is_empty() {
        return Err(CliError::Data(format!(
            "{}: corpus is empty",
            path.display()
        )));
    }
    manifest.corpora.push(CorpusFingerprint {
        path: path.display().to_string(),
        name: corpus.name.clone(),
        items: corpus.len(),
        sha256: corpus.fingerprint(),
    });
    Ok(corpus)
}

/// On-disk scorer artifact written by `train`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScorerArtifact {
    pub members: Vec<ToyScorerParams>,
}

fn open_scorer(
    specs: &[String],
    timeout: Duration,
    manifest: &mut RunManifest,
) -> Result<Box<dyn Scorer>, CliError> {
    let mut members: Vec<Box<dyn Scorer>> = Vec::new();
    for spec in specs {
        if spec.starts_with("http://") || spec.starts_with("https://") {
            members.push(Box::new(ExternalScorer::http(spec.clone(), timeout)));
        } else if let Some(cmd) = spec.strip_prefix("cmd:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| CliError::Usage("empty cmd: scorer".to_string()))?;
            let args: Vec<String> = parts.collect();
            members.push(Box::new(ExternalScorer::spawn(&program, &args, timeout)?));
        } else {
            let text =
                fs::read_to_string(spec).map_err(|e| CliError::Data(format!("{spec}: {e}")))?;
            let artifact: ScorerArtifact = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{spec}: not a scorer artifact: {e}")))?;
            if artifact.members.is_empty() {
                return Err(CliError::Data(format!("{spec}: artifact has no members")));
            }
            for params in artifact.members {
                members.push(Box::new(ToyScorer::new(params)?));
            }
        }
    }
    let scorer: Box<dyn Scorer> = if members.len() == 1 {
        members.pop().expect("one member")
    } else {
        Box::new(Ensemble::new(members)?)
    };
    manifest.scorers.push(scorer.id().to_string());
    Ok(scorer)
}

fn parse_taus(raw: &str) -> Result<Vec<u32>, CliError> {
    raw.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(usage))
        .collect()
}

fn finish(manifest: &mut RunManifest, resolver: Resolver, out: &Path) -> Result<(), CliError> {
    manifest.config = resolver.snapshot;
    manifest.write(&sibling(out, "manifest.json"))?;
    Ok(())
}

/// Parses `argv` (without the program name) and runs the command.
pub fn run(argv: &[String]) -> Result<(), CliError> {
    let os: Vec<OsString> = std::iter::once(OsString::from("compre-probe"))
        .chain(argv.iter().map(OsString::from))
        .collect();
    let cli = Cli::try_parse_from(os).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::Usage(String::new())
        }
        _ => CliError::Usage(
            e.render()
                .to_string()
                .trim_start_matches("error: ")
                .to_string(),
        ),
    })?;
    let config = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut resolver = Resolver {
        config,
        snapshot: BTreeMap::new(),
    };
    let mut manifest = RunManifest::new(argv.to_vec());
    match cli.command {
        Cmd::Ingest(a) => {
            let format: CorpusFormat = a.format.parse()?;
            let opts = LoadOptions {
                keep_speakers: !a.drop_speakers,
            };
            let corpus = load_corpus_with(&a.input, format, &opts)?.validated()?;
            corpus.write_jsonl(&a.out)?;
            manifest.corpora.push(CorpusFingerprint {
                path: a.out.display().to_string(),
                name: corpus.name.clone(),
                items: corpus.len(),
                sha256: corpus.fingerprint(),
            });
            manifest.artifacts.push(a.out.display().to_string());
            println!("{} items -> {}", corpus.len(), a.out.display());
            finish(&mut manifest, resolver, &a.out)
        }
        Cmd::Synth(a) => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                size: resolver.value("size", a.size, d.size)?,
                n_options: resolver.value("options", a.options, d.n_options)?,
                leak_rate: resolver.value("leak", a.leak, d.leak_rate)?,
                position_profile: resolver
                    .value("profile", a.profile, "uniform".to_string())?
                    .parse::<PositionProfile>()
                    .map_err(usage)?,
                context_len: resolver.value("context-len", a.context_len, d.context_len)?,
                vocab_size: resolver.value("vocab", a.vocab, d.vocab_size)?,
                seed: resolver.seed(a.seed)?,
            };
            let corpus = generate(&spec)?;
            write_with_spec(&spec, &corpus, &a.out)?;
            manifest.seeds.push(spec.seed);
            manifest.artifacts.push(a.out.display().to_string());
            println!("{} items -> {}", corpus.len(), a.out.display());
            finish(&mut manifest, resolver, &a.out)
        }
        Cmd::Train(a) => {
            let format: CorpusFormat = a.format.parse()?;
            let corpus = load_one(&a.corpus, format, &mut manifest)?;
            let d = TrainConfig::default();
            let mode: ContextMode = resolver
                .value("mode", a.mode, "standard".to_string())?
                .parse()
                .map_err(CliError::Usage)?;
            let seed = resolver.seed(a.seed)?;
            let cfg = TrainConfig {
                epochs: resolver.value("epochs", a.epochs, d.epochs)?,
                learning_rate: resolver.value("lr", a.lr, d.learning_rate)?,
                batch_size: resolver.value("batch-size", a.batch_size, d.batch_size)?,
                seed,
                max_len: resolver.value("max-len", a.max_len, d.max_len)?,
                embed_dim: resolver.value("embed-dim", a.embed_dim, d.embed_dim)?,
                init_scale: resolver.value("init-scale", a.init_scale, d.init_scale)?,
            };
            let k = resolver.value("ensemble", a.ensemble, 1usize)?.max(1);
            let mut members = Vec::with_capacity(k);
            for m in 0..k as u64 {
                let member_cfg = TrainConfig {
                    seed: seed.wrapping_add(m),
                    ..cfg.clone()
                };
                let (params, report) = train_toy(&corpus, &member_cfg, mode)?;
                eprintln!(
                    "member {m}: seed {} final loss {:.4}",
                    member_cfg.seed,
                    report.epoch_losses.last().copied().unwrap_or(f64::NAN)
                );
                manifest.seeds.push(member_cfg.seed);
                members.push(params);
            }
            let artifact = ScorerArtifact { members };
            fs::write(
                &a.out,
                serde_json::to_string(&artifact).expect("artifact serializes") + "\n",
            )
            .map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
            manifest.artifacts.push(a.out.display().to_string());
            finish(&mut manifest, resolver, &a.out)
        }
        Cmd::Eval(a) => {
            let corpus = load_corpora(&a.corpus, &mut manifest)?.remove(0);
            let timeout =
                Duration::from_millis(resolver.value("timeout-ms", a.run.timeout_ms, 60_000)?);
            let scorer = open_scorer(&a.scorer, timeout, &mut manifest)?;
            let opts = resolver.eval_options(&a.run)?;
            let mode: ContextMode = resolver
                .value("mode", a.mode, "standard".to_string())?
                .parse()
                .map_err(CliError::Usage)?;
            let condition = match (mode, a.tau) {
                (ContextMode::ContextFree, Some(_)) => {
                    return Err(CliError::Usage(
                        "--tau only applies to standard mode".to_string(),
                    ))
                }
                (ContextMode::ContextFree, None) => Condition::context_free(),
                (ContextMode::Standard, None) => Condition::full_context(),
                (ContextMode::Standard, Some(tau)) => {
                    let extract: ExtractMode = resolver
                        .value("extract", a.extract, "beginning".to_string())?
                        .parse()?;
                    let seed = resolver.seed(a.run.seed)?;
                    manifest.seeds.push(seed);
                    resolver.snapshot.insert("tau".into(), tau.to_string());
                    Condition::partial(ExtractSpec::new(tau, extract, seed)?)
                }
            };
            let eval = evaluate(scorer.as_ref(), &corpus, &condition, &opts)?;
            write_records_jsonl(&eval.records, &a.out)?;
            manifest.artifacts.push(a.out.display().to_string());
            println!(
                "accuracy {:.3} ({} / {})",
                eval.accuracy,
                eval.n_correct(),
                corpus.len()
            );
            finish(&mut manifest, resolver, &a.out)
        }
        Cmd::Sweep(a) => {
            let corpora = load_corpora(&a.corpus, &mut manifest)?;
            let timeout =
                Duration::from_millis(resolver.value("timeout-ms", a.run.timeout_ms, 60_000)?);
            let scorer = open_scorer(&a.scorer, timeout, &mut manifest)?;
            let opts = resolver.eval_options(&a.run)?;
            let mode: ExtractMode = resolver
                .value("mode", a.mode, "beginning".to_string())?
                .parse()?;
            let taus = match resolver.value("taus", a.taus, String::new())? {
                s if s.is_empty() => default_taus(),
                s => parse_taus(&s)?,
            };
            let cfg = SweepConfig {
                taus,
                mode,
                seed: resolver.seed(a.run.seed)?,
                repetitions: resolver.value("repetitions", a.repetitions, 1)?,
            };
            manifest.seeds.push(cfg.seed);
            let mut curves = Vec::with_capacity(corpora.len());
            let mut all_records = Vec::new();
            for corpus in &corpora {
                let sweep = sweep_tau(scorer.as_ref(), corpus, &cfg, &opts)?;
                all_records.extend(sweep.records.into_iter().flatten());
                curves.push(sweep.curve);
            }
            if curves.len() == 1 {
                emit_curve_csv(&curves[0], &a.out)?;
                manifest.artifacts.push(a.out.display().to_string());
            } else {
                for c in &curves {
                    let path = sibling(&a.out, &format!("{}.csv", c.corpus));
                    emit_curve_csv(c, &path)?;
                    manifest.artifacts.push(path.display().to_string());
                }
            }
            if let Some(svg) = &a.svg {
                emit_curve_svg(&curves, svg)?;
                manifest.artifacts.push(svg.display().to_string());
            }
            let rec_path = sibling(&a.out, "records.jsonl");
            write_records_jsonl(&all_records, &rec_path)?;
            manifest.artifacts.push(rec_path.display().to_string());
            for c in &curves {
                for p in &c.points {
                    println!("{} tau={:>3} accuracy={:.3}", c.corpus, p.tau, p.accuracy);
                }
            }
            finish(&mut manifest, resolver, &a.out)
        }
        Cmd::Positional(a) => {
            let corpora = load_corpora(&a.corpus, &mut manifest)?;
            if !a.label.is_empty() && a.label.len() != corpora.len() {
                return Err(CliError::Usage(
                    "give one --label per --corpus or none".to_string(),
                ));
            }
            let timeout =
                Duration::from_millis(resolver.value("timeout-ms", a.run.timeout_ms, 60_000)?);
            let scorer = open_scorer(&a.scorer, timeout, &mut manifest)?;
            let opts = resolver.eval_options(&a.run)?;
            let tau = resolver.value("tau", a.tau, 20)?;
            let seed = resolver.seed(a.run.seed)?;
            let reps = resolver.value("repetitions", a.repetitions, 1)?;
            manifest.seeds.push(seed);
            let mut columns = Vec::new();
            let mut records = Vec::new();
            for (i, corpus) in corpora.iter().enumerate() {
                let study = positional_study(scorer.as_ref(), corpus, tau, seed, reps, &opts)?;
                columns.push(PositionalColumn {
                    label: a
                        .label
                        .get(i)
                        .cloned()
                        .unwrap_or_else(|| corpus.name.clone()),
                    rows: study.rows,
                });
                records.extend(study.records);
            }
            emit_positional_table(&columns, &a.out)?;
            let rec_path = sibling(&a.out, "records.jsonl");
            write_records_jsonl(&records, &rec_path)?;
            manifest.artifacts.push(a.out.display().to_string());
            manifest.artifacts.push(rec_path.display().to_string());
            print!("{}", fs::read_to_string(&a.out).unwrap_or_default());
            finish(&mut manifest, resolver, &a.out)
        }
        Cmd::Wkreport(a) => {
            let corpora = load_corpora(&a.corpus, &mut manifest)?;
            let timeout =
                Duration::from_millis(resolver.value("timeout-ms", a.run.timeout_ms, 60_000)?);
            let standard = open_scorer(&a.standard, timeout, &mut manifest)?;
            let context_free = open_scorer(&a.context_free, timeout, &mut manifest)?;
            let opts = resolver.eval_options(&a.run)?;
            let report =
                world_knowledge_report(standard.as_ref(), context_free.as_ref(), &corpora, &opts)?;
            emit_world_knowledge_csv(&report, &a.out)?;
            let records: Vec<_> = report
                .records
                .iter()
                .flat_map(|(s, c)| s.iter().chain(c.iter()).cloned())
                .collect();
            let rec_path = sibling(&a.out, "records.jsonl");
            write_records_jsonl(&records, &rec_path)?;
            manifest.artifacts.push(a.out.display().to_string());
            manifest.artifacts.push(rec_path.display().to_string());
            print!("{}", fs::read_to_string(&a.out).unwrap_or_default());
            finish(&mut manifest, resolver, &a.out)
        }
        Cmd::Classify(a) => {
            let corpus = load_corpora(&a.corpus, &mut manifest)?.remove(0);
            let timeout =
                Duration::from_millis(resolver.value("timeout-ms", a.run.timeout_ms, 60_000)?);
            let standard = open_scorer(&a.standard, timeout, &mut manifest)?;
            let context_free = open_scorer(&a.context_free, timeout, &mut manifest)?;
            let opts = resolver.eval_options(&a.run)?;
            let cfg = SweepConfig {
                seed: resolver.seed(a.run.seed)?,
                ..SweepConfig::default()
            };
            manifest.seeds.push(cfg.seed);
            let sweep = sweep_tau(standard.as_ref(), &corpus, &cfg, &opts)?;
            let cf = evaluate(
                context_free.as_ref(),
                &corpus,
                &Condition::context_free(),
                &opts,
            )?;
            let labels = classify_corpus(&sweep, &cf)?;
            emit_labels_csv(&labels, &a.out)?;
            let mut rec = records_jsonl(&cf.records);
            for r in &sweep.records {
                rec.push_str(&records_jsonl(r));
            }
            let rec_path = sibling(&a.out, "records.jsonl");
            fs::write(&rec_path, rec).map_err(|e| CliError::Data(e.to_string()))?;
            manifest.artifacts.push(a.out.display().to_string());
            manifest.artifacts.push(rec_path.display().to_string());
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for l in &labels {
                let key = match l.label {
                    crate::ablation::Comprehension::Zero => "zero",
                    crate::ablation::Comprehension::Partial { .. } => "partial",
                    crate::ablation::Comprehension::Full { .. } => "full",
                };
                *counts.entry(key).or_default() += 1;
            }
            println!("{counts:?}");
            finish(&mut manifest, resolver, &a.out)
        }
        Cmd::Rerun(a) => {
            let recorded = RunManifest::read(&a.manifest)?;
            if recorded.command.first().map(String::as_str) == Some("rerun") {
                return Err(CliError::Usage("manifest records a rerun".to_string()));
            }
            for fp in &recorded.corpora {
                if recorded.command.first().map(String::as_str) == Some("ingest") {
                    break;
                }
                let path = Path::new(&fp.path);
                let format = corpus_format_of(&recorded.command)?;
                let corpus = load_corpus_with(path, format, &LoadOptions::default())?;
                if corpus.fingerprint() != fp.sha256 {
                    return Err(CliError::Data(format!(
                        "{}: corpus changed since the manifest was written",
                        fp.path
                    )));
                }
            }
            run(&with_config_snapshot(&recorded))
        }
    }
}

fn corpus_format_of(command: &[String]) -> Result<CorpusFormat, CliError> {
    let pos = command.iter().position(|a| a == "--format");
    match pos.and_then(|i| command.get(i + 1)) {
        Some(f) => Ok(f.parse()?),
        None => Ok(CorpusFormat::CanonicalJsonl),
    }
}

/// The recorded argv with every resolved config value pinned as a flag, so a
/// rerun does not depend on the environment or the config file.
fn with_config_snapshot(m: &RunManifest) -> Vec<String> {
    let mut argv: Vec<String> = Vec::with_capacity(m.command.len());
    let mut it = m.command.iter().peekable();
    while let Some(arg) = it.next() {
        if arg == "--config" {
            it.next();
            continue;
        }
        argv.push(arg.clone());
    }
    for (key, value) in &m.config {
        let flag = format!("--{key}");
        if !argv.contains(&flag) {
            argv.push(flag);
            argv.push(value.clone());
        }
    }
    argv
}

/// Runs the CLI and maps the outcome to an exit code.
pub fn cli_main(argv: &[String]) -> i32 {
    match run(argv) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) if msg.is_empty() => {
            // --help / --version
            let os: Vec<OsString> = std::iter::once(OsString::from("compre-probe"))
                .chain(argv.iter().map(OsString::from))
                .collect();
            if let Err(e) = Cli::try_parse_from(os) {
                let _ = e.print();
            }
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
