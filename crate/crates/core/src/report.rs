//! Report tables: CSV, markdown, and deltas against the published values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Published reference values, bundled at build time.
pub const PAPER_REFERENCE_JSON: &str = include_str!("../data/paper_reference.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRef {
    pub mode: String,
    pub augmentations: usize,
    pub voting: bool,
    pub pass_at_1: String,
    pub correct: usize,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRef {
    pub condition: String,
    pub id_input: String,
    pub pass_at_1: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRef {
    pub depth: usize,
    pub label: String,
    pub pass_at_1: String,
    pub relative: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRef {
    pub train_loss: f64,
    pub train_accuracy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetricsRef {
    pub step: usize,
    pub nominal_schedule: usize,
    pub aug0: TrainRef,
    pub aug1000: TrainRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRef {
    pub pass_at_1: String,
    pub pass_at_1000: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetricsRef {
    pub aug0: EvalRef,
    pub aug1000: EvalRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRef {
    pub model: String,
    pub peak_memory: String,
    pub throughput: String,
    pub latency: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperReference {
    pub benchmark: String,
    pub ensemble: Vec<EnsembleRef>,
    pub id_ablation: Vec<AblationRef>,
    pub trajectory: Vec<TrajectoryRef>,
    pub train_metrics: TrainMetricsRef,
    pub eval_metrics: EvalMetricsRef,
    pub efficiency: Vec<EfficiencyRef>,
}

impl PaperReference {
    pub fn bundled() -> Self {
        serde_json::from_str(PAPER_REFERENCE_JSON).expect("bundled reference parses")
    }
}

/// Parses `"40.00%"` into `40.0`.
pub fn parse_percent(s: &str) -> Option<f64> {
    s.trim().strip_suffix('%')?.trim().parse().ok()
}

/// Signed difference in percentage points, e.g. `-12.50 pp`.
pub fn delta_pp(ours: &str, paper: &str) -> String {
    match (parse_percent(ours), parse_percent(paper)) {
        (Some(a), Some(b)) => format!("{:+.2} pp", a - b),
        _ => "n/a".into(),
    }
}

/// A rectangular table of rendered cells.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        assert_eq!(row.len(), self.headers.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_markdown(&self) -> String {
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let mut s = line(&self.headers);
        s.push_str(&line(&self.headers.iter().map(|_| "---".to_string()).collect::<Vec<_>>()));
        for r in &self.rows {
            s.push_str(&line(r));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Writes `<stem>.csv`, `<stem>.md` and `<stem>.json` into `dir`.
pub fn write_bundle(
    dir: &Path,
    stem: &str,
    csv_table: &Table,
    markdown: &str,
    json: &serde_json::Value,
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), csv_table.to_csv())?;
    fs::write(dir.join(format!("{stem}.md")), markdown)?;
    fs::write(dir.join(format!("{stem}.json")), format!("{json:#}\n"))
}
