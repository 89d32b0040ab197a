//! Test-time augmentation fan-out, inverse mapping and majority voting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc_data::{Grid, Task};
use crate::augmentation::{self, Augmentation, CanvasGrid};
use crate::metrics::{self, MetricError};
use crate::model::{GridPredictor, ModelError};
use crate::seeds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("majority vote over an empty candidate set")]
    EmptyCandidateSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("puzzle `{0}` has no id token")]
    UnknownPuzzle(String),
    #[error("invalid evaluation mode: {0}")]
    InvalidMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluationKind {
    PaperMode { k: usize, vote: bool },
    SingleCanonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationMode {
    pub kind: EvaluationKind,
    pub seed: u64,
    pub steps: usize,
}

impl EvaluationMode {
    pub fn paper(k: usize, seed: u64, steps: usize) -> Self {
        Self { kind: EvaluationKind::PaperMode { k, vote: true }, seed, steps }
    }

    pub fn single(seed: u64, steps: usize) -> Self {
        Self { kind: EvaluationKind::SingleCanonical, seed, steps }
    }

    pub fn k(&self) -> usize {
        match self.kind {
            EvaluationKind::PaperMode { k, .. } => k,
            EvaluationKind::SingleCanonical => 1,
        }
    }

    pub fn votes(&self) -> bool {
        matches!(self.kind, EvaluationKind::PaperMode { vote: true, .. })
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            EvaluationKind::PaperMode { vote: true, .. } => "paper_mode",
            EvaluationKind::PaperMode { vote: false, .. } => "raw_samples",
            EvaluationKind::SingleCanonical => "single_canonical",
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.k() == 0 {
            return Err(EnsembleError::InvalidMode("K must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(EnsembleError::InvalidMode("steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidatePrediction {
    /// Already mapped back into the canonical frame.
    pub grid: Grid,
    pub source_aug: Augmentation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VoteTally {
    #[serde(serialize_with = "serialize_counts")]
    pub counts: BTreeMap<Grid, usize>,
    pub winner: Grid,
    /// Winner count minus runner-up count (the full count when unanimous).
    pub margin: usize,
}

fn serialize_counts<S: serde::Serializer>(counts: &BTreeMap<Grid, usize>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(counts.len()))?;
    for (g, c) in counts {
        map.serialize_entry(&g.serialize_key(), c)?;
    }
    map.end()
}

impl VoteTally {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Majority vote on exact canonical-frame grids. Ties go to the smallest
/// grid under `(height, width, cells)` order.
pub fn vote_grids<'a, I: IntoIterator<Item = &'a Grid>>(grids: I) -> Result<VoteTally, EnsembleError> {
    let mut counts: BTreeMap<Grid, usize> = BTreeMap::new();
    for g in grids {
        *counts.entry(g.clone()).or_default() += 1;
    }
    let mut best: Option<(&Grid, usize)> = None;
    let mut runner_up = 0;
    // Ascending key order, strict comparison: the first maximal key wins.
    for (g, &c) in &counts {
        match best {
            Some((_, bc)) if c <= bc => runner_up = runner_up.max(c),
            Some((_, bc)) => {
                runner_up = bc;
                best = Some((g, c));
            }
            None => best = Some((g, c)),
        }
    }
    let (winner, count) = best.ok_or(EnsembleError::EmptyCandidateSet)?;
    let winner = winner.clone();
    Ok(VoteTally { counts, winner, margin: count - runner_up })
}

pub fn majority_vote(candidates: &[CandidatePrediction]) -> Result<VoteTally, EnsembleError> {
    vote_grids(candidates.iter().map(|c| &c.grid))
}

/// Variant inputs for one test input: the identity first, then seeded samples.
/// Infeasible placements are resampled.
pub fn test_variants(task: &Task, test_index: usize, seed: u64, k: usize) -> Vec<(Augmentation, CanvasGrid)> {
    let input = CanvasGrid::at_origin(task.tests[test_index].input.clone());
    let bounds = task.max_extents();
    augmentation::variant_stream(seed, &task.puzzle_key, test_index, bounds, k)
        .into_iter()
        .map(|aug| {
            let mut aug = aug;
            let mut retry = 0u64;
            loop {
                match augmentation::apply(&aug, &input) {
                    Ok(placed) => return (aug, placed),
                    Err(_) => {
                        retry += 1;
                        aug = augmentation::sample(seeds::derive(aug.seed_tag, &[retry]), bounds);
                    }
                }
            }
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn fan_out<T, R, E>(items: &[T], f: impl Fn(&T) -> Result<R, E> + Sync + Send) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn fan_out<T, R, E>(items: &[T], f: impl Fn(&T) -> Result<R, E>) -> Result<Vec<R>, E> {
    items.iter().map(f).collect()
}

/// Runs `f` on a pool of `workers` threads (the global pool when `None`).
/// Results never depend on the worker count: fan-out collects in order.
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R>(_workers: Option<usize>, f: impl FnOnce() -> R) -> R {
    f()
}

/// Canonical-frame candidates for every test input and recursion depth:
/// `[test][depth - 1][variant]`. Each variant runs once at `max_depth`; the
/// shallower depths are read from its trace prefix.
pub fn collect_candidates(
    predictor: &dyn GridPredictor,
    task: &Task,
    id_token: usize,
    seed: u64,
    k: usize,
    max_depth: usize,
) -> Result<Vec<Vec<Vec<CandidatePrediction>>>, EnsembleError> {
    task.tests
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let variants = test_variants(task, i, seed, k);
            let per_variant = fan_out(&variants, |(aug, input)| {
                predictor.predict_steps(input, id_token, max_depth).map(|steps| {
                    steps
                        .iter()
                        .map(|g| CandidatePrediction { grid: augmentation::map_back(aug, g), source_aug: *aug })
                        .collect::<Vec<_>>()
                })
            })?;
            Ok((0..max_depth)
                .map(|d| per_variant.iter().map(|steps| steps[d].clone()).collect())
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestOutcome {
    pub prediction: Grid,
    pub tally: Option<VoteTally>,
    pub candidates: Vec<Grid>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskEvaluation {
    pub puzzle_key: String,
    pub id_token: usize,
    pub outcomes: Vec<TestOutcome>,
    pub correct: bool,
}

impl TaskEvaluation {
    pub fn predictions(&self) -> Vec<Grid> {
        self.outcomes.iter().map(|o| o.prediction.clone()).collect()
    }
}

fn outcome(candidates: Vec<CandidatePrediction>, vote: bool) -> Result<TestOutcome, EnsembleError> {
    let grids: Vec<Grid> = candidates.into_iter().map(|c| c.grid).collect();
    if vote {
        let tally = vote_grids(&grids)?;
        Ok(TestOutcome { prediction: tally.winner.clone(), tally: Some(tally), candidates: grids })
    } else {
        let first = grids.first().cloned().ok_or(EnsembleError::EmptyCandidateSet)?;
        Ok(TestOutcome { prediction: first, tally: None, candidates: grids })
    }
}

/// Evaluations of one task at every depth in `1..=max_depth`.
pub fn evaluate_task_depths(
    predictor: &dyn GridPredictor,
    task: &Task,
    id_token: usize,
    mode: &EvaluationMode,
    max_depth: usize,
) -> Result<Vec<TaskEvaluation>, EnsembleError> {
    mode.validate()?;
    let mut per_test = collect_candidates(predictor, task, id_token, mode.seed, mode.k(), max_depth)?;
    (0..max_depth)
        .map(|d| {
            let outcomes = per_test
                .iter_mut()
                .map(|depths| outcome(std::mem::take(&mut depths[d]), mode.votes()))
                .collect::<Result<Vec<_>, _>>()?;
            let preds: Vec<Grid> = outcomes.iter().map(|o| o.prediction.clone()).collect();
            Ok(TaskEvaluation {
                puzzle_key: task.puzzle_key.clone(),
                id_token,
                correct: metrics::exact_match_task(&preds, task)?,
                outcomes,
            })
        })
        .collect()
}

/// Fans a task out over `mode`'s variants at `mode.steps` and aggregates.
pub fn evaluate_task(
    predictor: &dyn GridPredictor,
    task: &Task,
    id_token: usize,
    mode: &EvaluationMode,
) -> Result<TaskEvaluation, EnsembleError> {
    let mut all = evaluate_task_depths(predictor, task, id_token, mode, mode.steps)?;
    Ok(all.pop().expect("steps >= 1"))
}

/// Evaluations of every task in a dataset plus the Pass@1 they add up to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEvaluation {
    pub tasks: Vec<TaskEvaluation>,
    pub report: metrics::PassReport,
}

impl DatasetEvaluation {
    fn from_tasks(tasks: Vec<TaskEvaluation>, mode: &EvaluationMode) -> Result<Self, EnsembleError> {
        let flags: Vec<bool> = tasks.iter().map(|t| t.correct).collect();
        let report = metrics::pass_at_1(&flags, mode.label(), mode.seed)?;
        Ok(Self { tasks, report })
    }

    pub fn records(&self, mode: &EvaluationMode, steps: usize) -> Vec<TaskResultRecord> {
        self.tasks.iter().map(|t| TaskResultRecord::new(t, mode, steps)).collect()
    }
}

fn check_tokens(tasks: &[Task], id_tokens: &[usize]) -> Result<(), EnsembleError> {
    if tasks.len() != id_tokens.len() {
        return Err(EnsembleError::InvalidMode(format!("{} id tokens for {} tasks", id_tokens.len(), tasks.len())));
    }
    Ok(())
}

/// Evaluates every task with its id token at `mode.steps`.
pub fn evaluate_dataset(
    predictor: &dyn GridPredictor,
    tasks: &[Task],
    id_tokens: &[usize],
    mode: &EvaluationMode,
) -> Result<DatasetEvaluation, EnsembleError> {
    check_tokens(tasks, id_tokens)?;
    let evals = tasks
        .iter()
        .zip(id_tokens)
        .map(|(t, &tok)| evaluate_task(predictor, t, tok, mode))
        .collect::<Result<Vec<_>, _>>()?;
    DatasetEvaluation::from_tasks(evals, mode)
}

/// Per-depth dataset evaluations for depths `1..=max_depth` from a single
/// forward pass per variant. Element `t - 1` is depth `t`.
pub fn evaluate_dataset_depths(
    predictor: &dyn GridPredictor,
    tasks: &[Task],
    id_tokens: &[usize],
    mode: &EvaluationMode,
    max_depth: usize,
) -> Result<Vec<DatasetEvaluation>, EnsembleError> {
    check_tokens(tasks, id_tokens)?;
    let mut per_depth: Vec<Vec<TaskEvaluation>> = vec![Vec::with_capacity(tasks.len()); max_depth];
    for (t, &tok) in tasks.iter().zip(id_tokens) {
        for (d, e) in evaluate_task_depths(predictor, t, tok, mode, max_depth)?.into_iter().enumerate() {
            per_depth[d].push(e);
        }
    }
    per_depth.into_iter().map(|evals| DatasetEvaluation::from_tasks(evals, mode)).collect()
}

/// One line of the per-task results file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResultRecord {
    pub puzzle_key: String,
    pub mode: String,
    pub k: usize,
    pub seed: u64,
    pub steps: usize,
    pub winners: Vec<Grid>,
    pub margins: Vec<Option<usize>>,
    pub correct: bool,
}

impl TaskResultRecord {
    pub fn new(eval: &TaskEvaluation, mode: &EvaluationMode, steps: usize) -> Self {
        Self {
            puzzle_key: eval.puzzle_key.clone(),
            mode: mode.label().to_string(),
            k: mode.k(),
            seed: mode.seed,
            steps,
            winners: eval.predictions(),
            margins: eval.outcomes.iter().map(|o| o.tally.as_ref().map(|t| t.margin)).collect(),
            correct: eval.correct,
        }
    }
}

/// Renders per-task records as JSON lines.
pub fn results_jsonl(records: &[TaskResultRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(cells: &[u8]) -> Grid {
        Grid::new(1, cells.len(), cells.to_vec()).unwrap()
    }

    #[test]
    fn unanimity() {
        let a = g(&[1, 2]);
        let t = vote_grids(std::iter::repeat_n(&a, 5)).unwrap();
        assert_eq!(t.winner, a);
        assert_eq!(t.margin, 5);
        assert_eq!(t.total(), 5);
    }

    #[test]
    fn plurality_and_tie_break() {
        let (a, b) = (g(&[3]), g(&[1]));
        let t = vote_grids([&a, &a, &b]).unwrap();
        assert_eq!(t.winner, a);
        assert_eq!(t.counts[&a], 2);
        assert_eq!(t.margin, 1);
        // {A, B} tie: smaller (height, width, cells) wins.
        let t = vote_grids([&a, &b]).unwrap();
        assert_eq!(t.winner, b);
        assert_eq!(t.margin, 0);
        let tall = Grid::new(2, 1, vec![0, 0]).unwrap();
        let wide = Grid::new(1, 2, vec![9, 9]).unwrap();
        assert_eq!(vote_grids([&tall, &wide]).unwrap().winner, wide);
    }

    #[test]
    fn empty_vote_is_an_error() {
        assert_eq!(majority_vote(&[]), Err(EnsembleError::EmptyCandidateSet));
    }

    #[test]
    fn mode_validation() {
        assert!(EvaluationMode::paper(0, 1, 4).validate().is_err());
        assert!(EvaluationMode::single(1, 0).validate().is_err());
        assert_eq!(EvaluationMode::single(1, 4).k(), 1);
        assert!(!EvaluationMode::single(1, 4).votes());
    }
}
