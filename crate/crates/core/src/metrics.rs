//! Exact-match scoring, Pass@1 and Pass@k over fixed sample sets.
//!
//! Fractions are kept as integer counts; percentages are rendered from those
//! counts with integer rounding so 160/400 always prints `40.00%`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc_data::{Grid, Task};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("{predictions} predictions for {tests} test inputs")]
    ArityMismatch { predictions: usize, tests: usize },
    #[error("no tasks to score")]
    EmptyDataset,
    #[error("task {task} has {found} samples, expected {expected}")]
    RaggedSamples { task: usize, expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    PassAt1,
    PassAtK(usize),
}

impl MetricName {
    pub fn label(&self) -> String {
        match self {
            MetricName::PassAt1 => "pass_at_1".into(),
            MetricName::PassAtK(k) => format!("pass_at_{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    pub metric: MetricName,
    pub correct: usize,
    pub n_tasks: usize,
    pub mode: String,
    pub seed: u64,
}

impl PassReport {
    pub fn value(&self) -> f64 {
        self.correct as f64 / self.n_tasks as f64
    }

    /// Percentage with two decimals, rounded half-up from the exact fraction.
    pub fn percent(&self) -> String {
        format_percent(self.correct, self.n_tasks)
    }
}

/// `num / den` as a percentage with two decimals, e.g. `40.00%`.
pub fn format_percent(num: usize, den: usize) -> String {
    if den == 0 {
        return "n/a".into();
    }
    let (num, den) = (num as u128, den as u128);
    let hundredths = (num * 20_000 + den) / (2 * den);
    format!("{}.{:02}%", hundredths / 100, hundredths % 100)
}

/// True when every test prediction equals its ground truth in shape and cells.
pub fn exact_match_task(preds: &[Grid], task: &Task) -> Result<bool, MetricError> {
    if preds.len() != task.tests.len() {
        return Err(MetricError::ArityMismatch { predictions: preds.len(), tests: task.tests.len() });
    }
    Ok(preds.iter().zip(&task.tests).all(|(p, t)| *p == t.output))
}

pub fn pass_at_1(results: &[bool], mode: &str, seed: u64) -> Result<PassReport, MetricError> {
    if results.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    Ok(PassReport {
        metric: MetricName::PassAt1,
        correct: results.iter().filter(|&&r| r).count(),
        n_tasks: results.len(),
        mode: mode.to_string(),
        seed,
    })
}

/// Pass@k directly over raw samples, no aggregation.
///
/// `sample_sets[task][test][sample]`; a task passes when some sample index is
/// correct for all of its test inputs at once.
pub fn pass_at_k(
    sample_sets: &[Vec<Vec<Grid>>],
    tasks: &[Task],
    mode: &str,
    seed: u64,
) -> Result<PassReport, MetricError> {
    if sample_sets.is_empty() {
        return Err(MetricError::EmptyDataset);
    }
    if sample_sets.len() != tasks.len() {
        return Err(MetricError::ArityMismatch { predictions: sample_sets.len(), tests: tasks.len() });
    }
    let k = sample_sets[0].first().map_or(0, Vec::len);
    let mut correct = 0;
    for (i, (per_test, task)) in sample_sets.iter().zip(tasks).enumerate() {
        if per_test.len() != task.tests.len() {
            return Err(MetricError::ArityMismatch { predictions: per_test.len(), tests: task.tests.len() });
        }
        if let Some(bad) = per_test.iter().find(|s| s.len() != k) {
            return Err(MetricError::RaggedSamples { task: i, expected: k, found: bad.len() });
        }
        let hit = (0..k).any(|s| per_test.iter().zip(&task.tests).all(|(samples, t)| samples[s] == t.output));
        correct += usize::from(hit);
    }
    Ok(PassReport { metric: MetricName::PassAtK(k), correct, n_tasks: tasks.len(), mode: mode.to_string(), seed })
}
