//! Multiple-choice item model and dataset adapters.
//!
//! Every adapter normalizes into [`McqItem`]; the canonical JSONL layout is the
//! interchange format that the rest of the tool reads.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: record {index}: field `{field}`: {reason}")]
    Record {
        path: PathBuf,
        index: usize,
        field: String,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("unknown corpus format `{0}` (expected canonical_jsonl, race_dir, dream_json or debater_csv)")]
    UnknownFormat(String),
    #[error("dialogue has no turns")]
    EmptyDialogue,
    #[error("debate item needs a nonempty {0}")]
    EmptyDebateField(&'static str),
    #[error("corpus `{name}` failed validation: {violations:?}")]
    Invalid {
        name: String,
        violations: Vec<Violation>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Passage,
    Dialogue,
    SpeechManual,
    SpeechAsr,
}

impl ContextKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContextKind::Passage => "passage",
            ContextKind::Dialogue => "dialogue",
            ContextKind::SpeechManual => "speech_manual",
            ContextKind::SpeechAsr => "speech_asr",
        }
    }
}

impl FromStr for ContextKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "passage" => Ok(ContextKind::Passage),
            "dialogue" => Ok(ContextKind::Dialogue),
            "speech_manual" | "manual" => Ok(ContextKind::SpeechManual),
            "speech_asr" | "asr" => Ok(ContextKind::SpeechAsr),
            other => Err(format!("unknown context kind `{other}`")),
        }
    }
}

/// One multiple-choice question. Option order is significant: predictions are
/// indices into `options`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub context: String,
    pub context_kind: ContextKind,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl McqItem {
    pub fn n_options(&self) -> usize {
        self.options.len()
    }

    /// Invariant violations of this item alone (ids are checked at corpus level).
    pub fn check(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.id.is_empty() {
            out.push(("id", "id is empty".to_string()));
        }
        if self.options.len() < 2 {
            out.push((
                "options",
                format!("needs at least 2 options, found {}", self.options.len()),
            ));
        }
        if self.answer_index >= self.options.len() {
            out.push((
                "answer_index",
                format!(
                    "answer_index {} out of range for {} options",
                    self.answer_index,
                    self.options.len()
                ),
            ));
        }
        if self.question.trim().is_empty() {
            out.push(("question", "question is empty".to_string()));
        }
        for (i, opt) in self.options.iter().enumerate() {
            if opt.trim().is_empty() {
                out.push(("options", format!("option {i} is empty")));
            }
        }
        out
    }
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub item_id: String,
    pub rule: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.item_id, self.rule, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub items: Vec<McqItem>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, items: Vec<McqItem>) -> Self {
        Corpus {
            name: name.into(),
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Returns the corpus unchanged if it has no violations.
    pub fn validated(self) -> Result<Self, CorpusError> {
        let violations = validate(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(CorpusError::Invalid {
                name: self.name,
                violations,
            })
        }
    }

    /// Canonical JSONL encoding, one item per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("item serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }

    /// SHA-256 of the canonical JSONL encoding.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

/// Checks every item and corpus-level invariant. An empty list means the
/// corpus is valid.
pub fn validate(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (pos, item) in corpus.items.iter().enumerate() {
        for (rule, detail) in item.check() {
            out.push(Violation {
                item_id: item.id.clone(),
                rule: rule.to_string(),
                detail,
            });
        }
        if let Some(&prev) = first_seen.get(item.id.as_str()) {
            out.push(Violation {
                item_id: item.id.clone(),
                rule: "duplicate_id".to_string(),
                detail: format!("id appears at positions {prev} and {pos}"),
            });
        } else {
            first_seen.insert(&item.id, pos);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    CanonicalJsonl,
    RaceDir,
    DreamJson,
    DebaterCsv,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical_jsonl" | "jsonl" => Ok(CorpusFormat::CanonicalJsonl),
            "race_dir" | "race" => Ok(CorpusFormat::RaceDir),
            "dream_json" | "dream" => Ok(CorpusFormat::DreamJson),
            "debater_csv" | "debater" => Ok(CorpusFormat::DebaterCsv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Keep `<speaker>: ` prefixes when concatenating dialogue turns.
    pub keep_speakers: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            keep_speakers: true,
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    load_corpus_with(path, format, &LoadOptions::default())
}

pub fn load_corpus_with(
    path: &Path,
    format: CorpusFormat,
    opts: &LoadOptions,
) -> Result<Corpus, CorpusError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    let items = match format {
        CorpusFormat::CanonicalJsonl => read_canonical_jsonl(path)?,
        CorpusFormat::RaceDir => read_race_dir(path)?,
        CorpusFormat::DreamJson => read_dream_json(path, opts)?,
        CorpusFormat::DebaterCsv => read_debater_csv(path)?,
    };
    check_ids(path, &items)?;
    Ok(Corpus::new(name, items))
}

fn check_ids(path: &Path, items: &[McqItem]) -> Result<(), CorpusError> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, item) in items.iter().enumerate() {
        if let Some(prev) = seen.insert(&item.id, i) {
            return Err(CorpusError::Record {
                path: path.to_path_buf(),
                index: i,
                field: "id".to_string(),
                reason: format!("duplicate id `{}` (first at record {prev})", item.id),
            });
        }
    }
    Ok(())
}

fn record_err(path: &Path, index: usize, field: &str, reason: impl Into<String>) -> CorpusError {
    CorpusError::Record {
        path: path.to_path_buf(),
        index,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn ensure_valid(path: &Path, index: usize, item: &McqItem) -> Result<(), CorpusError> {
    match item.check().into_iter().next() {
        Some((field, reason)) => Err(record_err(path, index, field, reason)),
        None => Ok(()),
    }
}

fn open(path: &Path) -> Result<fs::File, CorpusError> {
    fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const CANONICAL_KEYS: [&str; 7] = [
    "id",
    "context",
    "context_kind",
    "question",
    "options",
    "answer_index",
    "meta",
];

fn read_canonical_jsonl(path: &Path) -> Result<Vec<McqItem>, CorpusError> {
    let reader = BufReader::new(open(path)?);
    let mut items = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let index = items.len();
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| record_err(path, index, "<json>", e.to_string()))?;
        let item = item_from_value(path, index, value)?;
        ensure_valid(path, index, &item)?;
        items.push(item);
    }
    Ok(items)
}

fn item_from_value(path: &Path, index: usize, value: Value) -> Result<McqItem, CorpusError> {
    let Value::Object(mut obj) = value else {
        return Err(record_err(path, index, "<json>", "record is not an object"));
    };
    let str_field =
        |obj: &serde_json::Map<String, Value>, key: &str, required: bool| match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            None | Some(Value::Null) if !required => Ok(String::new()),
            None => Err(record_err(path, index, key, "missing")),
            Some(_) => Err(record_err(path, index, key, "expected a string")),
        };
    let id = str_field(&obj, "id", true)?;
    let context = str_field(&obj, "context", false)?;
    let question = str_field(&obj, "question", true)?;
    let context_kind = match obj.get("context_kind") {
        None | Some(Value::Null) => ContextKind::Passage,
        Some(Value::String(s)) => s
            .parse()
            .map_err(|e: String| record_err(path, index, "context_kind", e))?,
        Some(_) => return Err(record_err(path, index, "context_kind", "expected a string")),
    };
    let options = match obj.get("options") {
        Some(Value::Array(arr)) => arr
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Value::String(s) => Ok(s.clone()),
                _ => Err(record_err(
                    path,
                    index,
                    "options",
                    format!("option {i} is not a string"),
                )),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(record_err(path, index, "options", "expected an array")),
        None => return Err(record_err(path, index, "options", "missing")),
    };
    let answer_index = match obj.get("answer_index") {
        Some(v) => v.as_u64().ok_or_else(|| {
            record_err(
                path,
                index,
                "answer_index",
                "expected a nonnegative integer",
            )
        })? as usize,
        None => return Err(record_err(path, index, "answer_index", "missing")),
    };
    let mut meta = BTreeMap::new();
    match obj.remove("meta") {
        None | Some(Value::Null) => {}
        Some(Value::Object(m)) => {
            for (k, v) in m {
                meta.insert(k, value_to_string(v));
            }
        }
        Some(_) => return Err(record_err(path, index, "meta", "expected an object")),
    }
    for (k, v) in obj {
        if !CANONICAL_KEYS.contains(&k.as_str()) {
            meta.insert(k, value_to_string(v));
        }
    }
    Ok(McqItem {
        id,
        context,
        context_kind,
        question,
        options,
        answer_index,
        meta,
    })
}

fn value_to_string(v: Value) -> String {
    match v {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

/// RACE layout: a directory tree of JSON files, each holding one article with
/// parallel `questions`, `options` and `answers` (letters) arrays.
fn read_race_dir(root: &Path) -> Result<Vec<McqItem>, CorpusError> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut items = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file).map_err(|source| CorpusError::Io {
            path: file.clone(),
            source,
        })?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
            path: file.clone(),
            reason: e.to_string(),
        })?;
        let rel = file.strip_prefix(root).unwrap_or(&file);
        let level = rel
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned());
        let doc_id = doc
            .get("id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| rel.with_extension("").to_string_lossy().replace('/', "-"));
        let article = doc
            .get("article")
            .and_then(Value::as_str)
            .ok_or_else(|| record_err(&file, 0, "article", "missing or not a string"))?;
        let questions = doc
            .get("questions")
            .and_then(Value::as_array)
            .ok_or_else(|| record_err(&file, 0, "questions", "missing or not an array"))?;
        let options = doc
            .get("options")
            .and_then(Value::as_array)
            .ok_or_else(|| record_err(&file, 0, "options", "missing or not an array"))?;
        let answers = doc
            .get("answers")
            .and_then(Value::as_array)
            .ok_or_else(|| record_err(&file, 0, "answers", "missing or not an array"))?;
        if options.len() != questions.len() || answers.len() != questions.len() {
            return Err(CorpusError::Malformed {
                path: file.clone(),
                reason: "questions, options and answers differ in length".to_string(),
            });
        }
        for (q, question) in questions.iter().enumerate() {
            let question = question
                .as_str()
                .ok_or_else(|| record_err(&file, q, "questions", "not a string"))?;
            let opts = options[q]
                .as_array()
                .ok_or_else(|| record_err(&file, q, "options", "not an array"))?
                .iter()
                .map(|o| o.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| record_err(&file, q, "options", "non-string option"))?;
            let letter = answers[q]
                .as_str()
                .and_then(|s| s.trim().chars().next())
                .ok_or_else(|| record_err(&file, q, "answers", "not a letter"))?;
            if !letter.is_ascii_uppercase() {
                return Err(record_err(
                    &file,
                    q,
                    "answers",
                    format!("expected A-Z, found `{letter}`"),
                ));
            }
            let mut meta = BTreeMap::new();
            meta.insert("dataset".to_string(), "race".to_string());
            if let Some(level) = &level {
                meta.insert("level".to_string(), level.clone());
            }
            let item = McqItem {
                id: format!("{doc_id}-{q}"),
                context: article.to_string(),
                context_kind: ContextKind::Passage,
                question: question.to_string(),
                options: opts,
                answer_index: (letter as u8 - b'A') as usize,
                meta,
            };
            ensure_valid(&file, q, &item)?;
            items.push(item);
        }
    }
    Ok(items)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    };
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json" || e == "txt") {
            out.push(path);
        }
    }
    Ok(())
}

/// Joins dialogue turns into one context, one `<speaker>: <utterance>` line per
/// turn. An empty speaker yields the bare utterance.
pub fn build_dialogue_context<S: AsRef<str>, U: AsRef<str>>(
    turns: &[(S, U)],
) -> Result<String, CorpusError> {
    if turns.is_empty() {
        return Err(CorpusError::EmptyDialogue);
    }
    let lines: Vec<String> = turns
        .iter()
        .map(|(speaker, utterance)| {
            let (speaker, utterance) = (speaker.as_ref(), utterance.as_ref());
            if speaker.is_empty() {
                utterance.to_string()
            } else {
                format!("{speaker}: {utterance}")
            }
        })
        .collect();
    Ok(lines.join("\n"))
}

/// Splits a raw DREAM turn such as `"M: Hi there"` into speaker and utterance.
fn split_turn(turn: &str) -> (String, String) {
    match turn.split_once(':') {
        Some((speaker, rest))
            if !speaker.is_empty()
                && speaker.len() <= 24
                && !speaker.contains(char::is_whitespace) =>
        {
            (speaker.to_string(), rest.trim_start().to_string())
        }
        _ => (String::new(), turn.to_string()),
    }
}

fn read_dream_json(path: &Path, opts: &LoadOptions) -> Result<Vec<McqItem>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let groups = doc.as_array().ok_or_else(|| CorpusError::Malformed {
        path: path.to_path_buf(),
        reason: "expected a top-level array of dialogue groups".to_string(),
    })?;
    let mut items = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let parts = group
            .as_array()
            .ok_or_else(|| record_err(path, g, "group", "expected [turns, questions, id]"))?;
        let turns = parts
            .first()
            .and_then(Value::as_array)
            .ok_or_else(|| record_err(path, g, "turns", "missing or not an array"))?
            .iter()
            .map(|t| t.as_str().map(split_turn))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| record_err(path, g, "turns", "non-string turn"))?;
        let turns: Vec<(String, String)> = if opts.keep_speakers {
            turns
        } else {
            turns.into_iter().map(|(_, u)| (String::new(), u)).collect()
        };
        let context = build_dialogue_context(&turns)
            .map_err(|e| record_err(path, g, "turns", e.to_string()))?;
        let questions = parts
            .get(1)
            .and_then(Value::as_array)
            .ok_or_else(|| record_err(path, g, "questions", "missing or not an array"))?;
        let dialogue_id = parts
            .get(2)
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("dialogue{g}"));
        for (q, entry) in questions.iter().enumerate() {
            let question = entry
                .get("question")
                .and_then(Value::as_str)
                .ok_or_else(|| record_err(path, g, "question", "missing or not a string"))?;
            let choices = entry
                .get("choice")
                .and_then(Value::as_array)
                .ok_or_else(|| record_err(path, g, "choice", "missing or not an array"))?
                .iter()
                .map(|c| c.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| record_err(path, g, "choice", "non-string choice"))?;
            let answer = entry
                .get("answer")
                .and_then(Value::as_str)
                .ok_or_else(|| record_err(path, g, "answer", "missing or not a string"))?;
            let answer_index = choices.iter().position(|c| c == answer).ok_or_else(|| {
                record_err(
                    path,
                    g,
                    "answer",
                    format!("`{answer}` is not among the choices"),
                )
            })?;
            let mut meta = BTreeMap::new();
            meta.insert("dataset".to_string(), "dream".to_string());
            meta.insert("dialogue_id".to_string(), dialogue_id.clone());
            let item = McqItem {
                id: format!("{dialogue_id}-{q}"),
                context: context.clone(),
                context_kind: ContextKind::Dialogue,
                question: question.to_string(),
                options: choices,
                answer_index,
                meta,
            };
            ensure_valid(path, g, &item)?;
            items.push(item);
        }
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Pro,
    Con,
}

impl FromStr for Stance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pro" | "for" => Ok(Stance::Pro),
            "con" | "against" => Ok(Stance::Con),
            other => Err(format!("unknown stance `{other}`")),
        }
    }
}

pub const DEBATE_OPTIONS: [&str; 2] = ["for", "against"];

/// Recasts one debate speech as a two-option listening question.
pub fn build_debate_item(
    id: impl Into<String>,
    speech: &str,
    topic: &str,
    stance: Stance,
    kind: ContextKind,
) -> Result<McqItem, CorpusError> {
    if speech.trim().is_empty() {
        return Err(CorpusError::EmptyDebateField("speech"));
    }
    if topic.trim().is_empty() {
        return Err(CorpusError::EmptyDebateField("topic"));
    }
    let mut meta = BTreeMap::new();
    meta.insert("dataset".to_string(), "debater".to_string());
    meta.insert("topic".to_string(), topic.to_string());
    Ok(McqItem {
        id: id.into(),
        context: speech.to_string(),
        context_kind: kind,
        question: format!("Is the speaker arguing for or against the topic: {topic}?"),
        options: DEBATE_OPTIONS.iter().map(|s| s.to_string()).collect(),
        answer_index: match stance {
            Stance::Pro => 0,
            Stance::Con => 1,
        },
        meta,
    })
}

fn read_debater_csv(path: &Path) -> Result<Vec<McqItem>, CorpusError> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(speech_col), Some(topic_col), Some(stance_col)) =
        (col("speech"), col("topic"), col("stance"))
    else {
        return Err(CorpusError::Malformed {
            path: path.to_path_buf(),
            reason: "debater csv needs columns speech, topic, stance (and optionally kind, id)"
                .to_string(),
        });
    };
    let kind_col = col("kind");
    let id_col = col("id");
    let mut items = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| record_err(path, index, "<csv>", e.to_string()))?;
        let get = |c: usize| record.get(c).unwrap_or("");
        let stance: Stance = get(stance_col)
            .parse()
            .map_err(|e: String| record_err(path, index, "stance", e))?;
        let kind = match kind_col.map(get) {
            None | Some("") => ContextKind::SpeechManual,
            Some(k) => k
                .parse()
                .map_err(|e: String| record_err(path, index, "kind", e))?,
        };
        let id = match id_col.map(get) {
            Some(id) if !id.is_empty() => id.to_string(),
            _ => format!("debater-{index}"),
        };
        let item =
            build_debate_item(id, get(speech_col), get(topic_col), stance, kind).map_err(|e| {
                match e {
                    CorpusError::EmptyDebateField(field) => record_err(path, index, field, "empty"),
                    other => other,
                }
            })?;
        items.push(item);
    }
    Ok(items)
}
