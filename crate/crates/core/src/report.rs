//! File emitters for curves, tables, labels and record streams, plus the run
//! manifest written next to every output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::Comprehension;
use crate::ablation::{
    AblationCurve, EvalRecord, PositionalRow, QuestionLabel, WorldKnowledgeReport,
};
use crate::textproc::ExtractMode;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("nothing to report: {0}")]
    Empty(&'static str),
    #[error("positional column `{0}` lacks a row for every extract mode")]
    IncompleteColumn(String),
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut f = fs::File::create(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(contents.as_bytes())
        .map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// `path` with its extension replaced by `suffix` (e.g. `curve.csv` ->
/// `curve.records.jsonl`).
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

pub fn curve_csv(curve: &AblationCurve) -> String {
    let mut out = String::from("tau,accuracy,n\n");
    for p in &curve.points {
        out.push_str(&format!("{},{:.3},{}\n", p.tau, p.accuracy, p.n));
    }
    out
}

pub fn emit_curve_csv(curve: &AblationCurve, path: &Path) -> Result<(), ReportError> {
    write_file(path, &curve_csv(curve))
}

/// One column of the positional table, e.g. manual or ASR transcripts.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalColumn {
    pub label: String,
    pub rows: Vec<PositionalRow>,
}

fn mode_row_label(mode: ExtractMode) -> &'static str {
    match mode {
        ExtractMode::Beginning => "beginning",
        ExtractMode::RandomWindow => "random",
        ExtractMode::End => "end",
    }
}

pub fn positional_csv(columns: &[PositionalColumn]) -> Result<String, ReportError> {
    if columns.is_empty() {
        return Err(ReportError::Empty("positional table has no columns"));
    }
    let mut out = String::from("extract");
    for c in columns {
        out.push(',');
        out.push_str(&c.label);
    }
    out.push('\n');
    for mode in ExtractMode::ALL {
        out.push_str(mode_row_label(mode));
        for c in columns {
            let row = c
                .rows
                .iter()
                .find(|r| r.mode == mode)
                .ok_or_else(|| ReportError::IncompleteColumn(c.label.clone()))?;
            out.push(',');
            out.push_str(&pct(row.accuracy));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Beginning / random / end rows with one accuracy column (in percent) per
/// transcript kind or corpus.
pub fn emit_positional_table(columns: &[PositionalColumn], path: &Path) -> Result<(), ReportError> {
    write_file(path, &positional_csv(columns)?)
}

pub fn world_knowledge_csv(report: &WorldKnowledgeReport) -> Result<String, ReportError> {
    if report.rows.is_empty() {
        return Err(ReportError::Empty("world-knowledge report has no rows"));
    }
    let mut out = String::from("corpus,Standard,Context-free,Random,effective_options\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            r.corpus,
            pct(r.standard_acc),
            pct(r.context_free_acc),
            pct(r.random_baseline),
            r.effective_options
        ));
    }
    Ok(out)
}

pub fn emit_world_knowledge_csv(
    report: &WorldKnowledgeReport,
    path: &Path,
) -> Result<(), ReportError> {
    write_file(path, &world_knowledge_csv(report)?)
}

pub fn labels_csv(labels: &[QuestionLabel]) -> String {
    let mut out = String::from("item_id,label,tau_star\n");
    for l in labels {
        let tau = match l.label {
            Comprehension::Zero => "0".to_string(),
            Comprehension::Partial { tau } => tau.to_string(),
            Comprehension::Full { .. } => String::new(),
        };
        let kind = match l.label {
            Comprehension::Zero => "zero",
            Comprehension::Partial { .. } => "partial",
            Comprehension::Full { answered: true } => "full",
            Comprehension::Full { answered: false } => "full_unanswered",
        };
        out.push_str(&format!("{},{kind},{tau}\n", l.item_id));
    }
    out
}

pub fn emit_labels_csv(labels: &[QuestionLabel], path: &Path) -> Result<(), ReportError> {
    write_file(path, &labels_csv(labels))
}

pub fn records_jsonl(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_records_jsonl(records: &[EvalRecord], path: &Path) -> Result<(), ReportError> {
    write_file(path, &records_jsonl(records))
}

/// Plain SVG line chart of one or more curves, accuracy against τ.
pub fn curve_svg(curves: &[AblationCurve]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    let x = |tau: u32| PAD + (W - 2.0 * PAD) * tau as f64 / 100.0;
    let y = |acc: f64| H - PAD - (H - 2.0 * PAD) * acc;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    s.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<path d=\"M{PAD} {PAD} V{} H{}\" stroke=\"black\" fill=\"none\"/>\n",
        H - PAD,
        W - PAD
    ));
    for t in (0..=100).step_by(20) {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{t}</text>\n",
            x(t),
            H - PAD + 14.0
        ));
    }
    for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{a:.2}</text>\n",
            PAD - 4.0,
            y(a) + 3.0
        ));
    }
    for (i, c) in curves.iter().enumerate() {
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.tau), y(p.accuracy)))
            .collect();
        let color = COLORS[i % COLORS.len()];
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"{color}\">{} ({})</text>\n",
            PAD + 6.0,
            PAD + 12.0 * (i as f64 + 1.0),
            c.corpus,
            c.mode.as_str()
        ));
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_curve_svg(curves: &[AblationCurve], path: &Path) -> Result<(), ReportError> {
    write_file(path, &curve_svg(curves))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFingerprint {
    pub path: String,
    pub name: String,
    pub items: usize,
    pub sha256: String,
}

/// Everything needed to re-run a command and get the same bytes out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// argv after the program name.
    pub command: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub corpora: Vec<CorpusFingerprint>,
    pub scorers: Vec<String>,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: Vec<String>) -> Self {
        RunManifest {
            command,
            config: BTreeMap::new(),
            corpora: Vec::new(),
            scorers: Vec::new(),
            seeds: Vec::new(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn write(&mut self, path: &Path) -> Result<(), ReportError> {
        self.finished_at = chrono::Utc::now().to_rfc3339();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, &(json + "\n"))
    }

    pub fn read(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ReportError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::{CurvePoint, WorldKnowledgeRow};

    fn curve(n_points: usize) -> AblationCurve {
        AblationCurve {
            corpus: "c".into(),
            scorer: "s".into(),
            mode: ExtractMode::Beginning,
            points: (0..n_points)
                .map(|i| CurvePoint {
                    tau: (i * 10) as u32,
                    accuracy: 0.25 + 0.05 * i as f64,
                    n: 200,
                })
                .collect(),
        }
    }

    #[test]
    fn curve_csv_layout() {
        let one = curve_csv(&curve(1));
        assert_eq!(one, "tau,accuracy,n\n0,0.250,200\n");
        let full = curve_csv(&curve(11));
        assert_eq!(full.lines().count(), 12);
        assert_eq!(full.lines().last().unwrap(), "100,0.750,200");
    }

    #[test]
    fn curve_file_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        emit_curve_csv(&curve(11), &a).unwrap();
        emit_curve_csv(&curve(11), &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    fn column(label: &str, b: f64, r: f64, e: f64) -> PositionalColumn {
        PositionalColumn {
            label: label.into(),
            rows: vec![
                PositionalRow {
                    mode: ExtractMode::End,
                    accuracy: e,
                },
                PositionalRow {
                    mode: ExtractMode::Beginning,
                    accuracy: b,
                },
                PositionalRow {
                    mode: ExtractMode::RandomWindow,
                    accuracy: r,
                },
            ],
        }
    }

    #[test]
    fn positional_table_rows_in_order() {
        let csv = positional_csv(&[column("manual", 0.645, 0.58, 0.525)]).unwrap();
        assert_eq!(
            csv,
            "extract,manual\nbeginning,64.5\nrandom,58.0\nend,52.5\n"
        );
    }

    #[test]
    fn positional_table_two_columns() {
        let csv = positional_csv(&[
            column("manual", 0.645, 0.58, 0.525),
            column("asr", 0.655, 0.57, 0.555),
        ])
        .unwrap();
        assert_eq!(
            csv,
            "extract,manual,asr\nbeginning,64.5,65.5\nrandom,58.0,57.0\nend,52.5,55.5\n"
        );
    }

    #[test]
    fn positional_table_empty_is_error() {
        assert!(matches!(positional_csv(&[]), Err(ReportError::Empty(_))));
        let partial = PositionalColumn {
            label: "x".into(),
            rows: vec![],
        };
        assert!(matches!(
            positional_csv(&[partial]),
            Err(ReportError::IncompleteColumn(_))
        ));
    }

    #[test]
    fn world_knowledge_layout() {
        let report = WorldKnowledgeReport {
            rows: vec![
                WorldKnowledgeRow::new("RACE++", 0.868, 0.591, 0.25),
                WorldKnowledgeRow::new("DREAM", 0.860, 0.461, 1.0 / 3.0),
            ],
            records: vec![],
        };
        let csv = world_knowledge_csv(&report).unwrap();
        assert_eq!(
            csv,
            "corpus,Standard,Context-free,Random,effective_options\n\
             RACE++,86.8,59.1,25.0,1.692\n\
             DREAM,86.0,46.1,33.3,2.169\n"
        );
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(
            sibling(Path::new("out/curve.csv"), "records.jsonl"),
            PathBuf::from("out/curve.records.jsonl")
        );
        assert_eq!(
            sibling(Path::new("table"), "manifest.json"),
            PathBuf::from("table.manifest.json")
        );
    }

    #[test]
    fn svg_has_one_polyline_per_curve() {
        let svg = curve_svg(&[curve(11), curve(3)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
    }
}
