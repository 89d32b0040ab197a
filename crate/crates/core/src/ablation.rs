//! Puzzle-identity perturbation and recursion-depth trajectory experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arc_data::{Dataset, PuzzleIdVocabulary};
use crate::ensemble::{self, DatasetEvaluation, EnsembleError, EvaluationMode};
use crate::metrics::{format_percent, PassReport};
use crate::model::GridPredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IdCondition {
    Correct,
    Blank,
    RandomMismatch { seed: u64 },
}

impl IdCondition {
    pub fn label(&self) -> &'static str {
        match self {
            IdCondition::Correct => "correct",
            IdCondition::Blank => "blank",
            IdCondition::RandomMismatch { .. } => "random_mismatch",
        }
    }
}

/// True id tokens of every task, in dataset order.
pub fn true_tokens(dataset: &Dataset, vocab: &PuzzleIdVocabulary) -> Result<Vec<usize>, EnsembleError> {
    dataset
        .tasks
        .iter()
        .map(|t| vocab.token(&t.puzzle_key).ok_or_else(|| EnsembleError::UnknownPuzzle(t.puzzle_key.clone())))
        .collect()
}

/// Uniform random cyclic permutation (Sattolo): `perm[i] != i` for all `i`
/// when `n >= 2`.
fn sattolo(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    perm
}

/// Id token each task is evaluated with under `condition`.
///
/// RandomMismatch hands every task the token of another task in the dataset.
/// A single-task dataset borrows any other vocabulary entry instead.
pub fn resolve_tokens(
    condition: &IdCondition,
    dataset: &Dataset,
    vocab: &PuzzleIdVocabulary,
) -> Result<Vec<usize>, EnsembleError> {
    let truth = true_tokens(dataset, vocab)?;
    match *condition {
        IdCondition::Correct => Ok(truth),
        IdCondition::Blank => Ok(vec![PuzzleIdVocabulary::BLANK_TOKEN; truth.len()]),
        IdCondition::RandomMismatch { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if truth.len() == 1 {
                let others: Vec<usize> = vocab.entries().values().copied().filter(|&t| t != truth[0]).collect();
                if others.is_empty() {
                    return Err(EnsembleError::InvalidMode("no mismatching id token available".into()));
                }
                return Ok(vec![others[rng.random_range(0..others.len())]]);
            }
            let perm = sattolo(truth.len(), &mut rng);
            Ok(perm.iter().map(|&j| truth[j]).collect())
        }
    }
}

/// Evaluates the dataset under `condition`. `Correct` is exactly the plain
/// ensemble evaluation.
pub fn run_id_ablation(
    predictor: &dyn GridPredictor,
    dataset: &Dataset,
    vocab: &PuzzleIdVocabulary,
    mode: &EvaluationMode,
    condition: &IdCondition,
) -> Result<DatasetEvaluation, EnsembleError> {
    let tokens = resolve_tokens(condition, dataset, vocab)?;
    ensemble::evaluate_dataset(predictor, &dataset.tasks, &tokens, mode)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub depth: usize,
    pub report: PassReport,
    /// Correct-task count at the training depth, the denominator of the
    /// relative column.
    pub final_correct: usize,
}

impl TrajectoryRow {
    /// `100 * pass(t) / pass(T)` with one decimal, or `n/a` when pass(T) = 0.
    pub fn relative(&self) -> String {
        if self.final_correct == 0 {
            return "n/a".into();
        }
        let (num, den) = (self.report.correct as u128, self.final_correct as u128);
        let tenths = (num * 2000 + den) / (2 * den);
        format!("{}.{}%", tenths / 10, tenths % 10)
    }

    pub fn relative_value(&self) -> Option<f64> {
        (self.final_correct > 0).then(|| 100.0 * self.report.correct as f64 / self.final_correct as f64)
    }

    pub fn pass_percent(&self) -> String {
        format_percent(self.report.correct, self.report.n_tasks)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub training_depth: usize,
    pub max_depth: usize,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryReport {
    /// Rows for the listed depths only, in the listed order.
    pub fn select(&self, depths: &[usize]) -> Vec<&TrajectoryRow> {
        depths.iter().filter_map(|&d| self.rows.iter().find(|r| r.depth == d)).collect()
    }
}

/// Pass@1 at every depth `1..=max_depth` from one run per variant. The
/// relative column is measured against `mode.steps`, the training depth.
pub fn run_trajectory(
    predictor: &dyn GridPredictor,
    dataset: &Dataset,
    vocab: &PuzzleIdVocabulary,
    mode: &EvaluationMode,
    max_depth: usize,
) -> Result<TrajectoryReport, EnsembleError> {
    if max_depth < mode.steps {
        return Err(EnsembleError::InvalidMode(format!(
            "max_depth {max_depth} is below the training depth {}",
            mode.steps
        )));
    }
    let tokens = true_tokens(dataset, vocab)?;
    let evals = ensemble::evaluate_dataset_depths(predictor, &dataset.tasks, &tokens, mode, max_depth)?;
    let final_correct = evals[mode.steps - 1].report.correct;
    let rows = evals
        .into_iter()
        .enumerate()
        .map(|(i, e)| TrajectoryRow { depth: i + 1, report: e.report, final_correct })
        .collect();
    Ok(TrajectoryReport { training_depth: mode.steps, max_depth, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sattolo_has_no_fixed_points() {
        for n in 2..40 {
            for seed in 0..20 {
                let p = sattolo(n, &mut ChaCha8Rng::seed_from_u64(seed));
                assert!(p.iter().enumerate().all(|(i, &j)| i != j), "n={n} seed={seed}");
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn relative_column() {
        let report = |c| PassReport {
            metric: crate::metrics::MetricName::PassAt1,
            correct: c,
            n_tasks: 400,
            mode: "m".into(),
            seed: 0,
        };
        let row = TrajectoryRow { depth: 1, report: report(153), final_correct: 162 };
        assert_eq!(row.relative(), "94.4%");
        assert_eq!(row.pass_percent(), "38.25%");
        let full = TrajectoryRow { depth: 4, report: report(162), final_correct: 162 };
        assert_eq!(full.relative(), "100.0%");
        let none = TrajectoryRow { depth: 4, report: report(0), final_correct: 0 };
        assert_eq!(none.relative(), "n/a");
    }
}
