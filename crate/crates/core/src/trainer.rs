//! Training loop: deep-supervision SGD with momentum, periodic logging,
//! resumable checkpoints and early Pass@k evaluation.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc_data::{Dataset, Grid, PuzzleIdVocabulary, SplitLabel, Task};
use crate::augmentation::{self, AugmentedDataset, AugmentedRecord};
use crate::ensemble::{self, EnsembleError};
use crate::metrics::{self, PassReport};
use crate::model::{self, weights, Example, GridPredictor, ModelConfig, ModelError, Parameters};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("puzzle `{0}` is missing from the id vocabulary")]
    UnknownPuzzle(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Aug0,
    Aug1000,
}

impl Regime {
    pub fn n_per_pair(self) -> usize {
        match self {
            Regime::Aug0 => 0,
            Regime::Aug1000 => 1000,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Regime::Aug0 => "aug0",
            Regime::Aug1000 => "aug1000",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "aug0" => Some(Regime::Aug0),
            "aug1000" => Some(Regime::Aug1000),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub total_steps: usize,
    /// Schedule length the run is a prefix of; informational only with a
    /// constant learning rate.
    pub nominal_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub clip_norm: f32,
    pub seed: u64,
    pub log_every: usize,
    /// Probability that a training example sees the blank id token.
    pub blank_token_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Aug0,
            total_steps: 2000,
            nominal_steps: 2000,
            batch_size: 8,
            learning_rate: 0.2,
            momentum: 0.9,
            clip_norm: 1.0,
            seed: 0,
            log_every: 50,
            blank_token_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.blank_token_rate) {
            return bad("blank_token_rate must be in [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean batch loss since the previous entry.
    pub loss: f32,
    /// Mean batch exact-match rate at the final recursion step since the
    /// previous entry.
    pub batch_accuracy: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,batch_accuracy,elapsed_s\n");
        for e in &self.entries {
            s.push_str(&format!("{},{:.6},{:.4},{:.3}\n", e.step, e.loss, e.batch_accuracy, e.elapsed_s));
        }
        s
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub params: Parameters<f32>,
    pub velocity: Parameters<f32>,
    pub config: TrainConfig,
    pub step: usize,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: TrainConfig,
    model: ModelConfig,
    step: usize,
    rng_seed: u64,
    rng_word_pos: String,
}

impl CheckpointRecord {
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let err = |e: std::io::Error| TrainError::Checkpoint(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(err)?;
        weights::save(&self.params, &dir.join("weights.bin"))?;
        weights::save(&self.velocity, &dir.join("velocity.bin"))?;
        let side = Sidecar {
            config: self.config.clone(),
            model: self.params.config.clone(),
            step: self.step,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng_word_pos.to_string(),
        };
        let text = serde_json::to_string_pretty(&side).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("checkpoint.json"), text + "\n").map_err(err)
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let err = |e: std::io::Error| TrainError::Checkpoint(format!("{}: {e}", dir.display()));
        let text = fs::read_to_string(dir.join("checkpoint.json")).map_err(err)?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let params = weights::load(&dir.join("weights.bin"))?;
        let velocity = weights::load(&dir.join("velocity.bin"))?;
        if params.config != side.model || velocity.config != side.model {
            return Err(TrainError::Checkpoint("weights disagree with checkpoint.json".into()));
        }
        Ok(Self {
            params,
            velocity,
            config: side.config,
            step: side.step,
            rng_seed: side.rng_seed,
            rng_word_pos: side.rng_word_pos.parse().map_err(|_| TrainError::Checkpoint("bad rng position".into()))?,
        })
    }
}

/// Training tasks: demonstrations and tests of the training split plus the
/// demonstrations of the evaluation split. Evaluation test pairs never enter.
pub fn training_corpus(train: &Dataset, eval: Option<&Dataset>) -> Dataset {
    let mut tasks: Vec<Task> = train
        .tasks
        .iter()
        .map(|t| Task {
            puzzle_key: t.puzzle_key.clone(),
            demonstrations: t.demonstrations.iter().chain(&t.tests).cloned().collect(),
            tests: Vec::new(),
        })
        .collect();
    if let Some(eval) = eval {
        tasks.extend(eval.tasks.iter().map(|t| Task {
            puzzle_key: t.puzzle_key.clone(),
            demonstrations: t.demonstrations.clone(),
            tests: Vec::new(),
        }));
    }
    Dataset::from_tasks(tasks, SplitLabel::Train)
}

/// The record's target, cropped out of the canvas at its offset.
fn target_grid(rec: &AugmentedRecord) -> &Grid {
    &rec.output.grid
}

fn crop_at(g: &Grid, dy: usize, dx: usize, h: usize, w: usize) -> Option<Grid> {
    if g.height() < dy + h || g.width() < dx + w {
        return None;
    }
    let cells = (dy..dy + h).flat_map(|r| (dx..dx + w).map(move |c| (r, c))).map(|(r, c)| g.get(r, c)).collect();
    Grid::new(h, w, cells).ok()
}

/// Whether a decoded top-left canvas grid reproduces the record's target:
/// exact shape after removing the record's offset, and every cell equal.
pub fn record_exact_match(decoded: &Grid, rec: &AugmentedRecord) -> bool {
    let t = target_grid(rec);
    decoded.height() == rec.output.dy as usize + t.height()
        && decoded.width() == rec.output.dx as usize + t.width()
        && crop_at(decoded, rec.output.dy as usize, rec.output.dx as usize, t.height(), t.width()).as_ref() == Some(t)
}

/// Exact-match rate of the model on `records`, at its trained depth.
pub fn train_accuracy(
    params: &Parameters<f32>,
    records: &[AugmentedRecord],
    vocab: &PuzzleIdVocabulary,
) -> Result<f64, TrainError> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for chunk in records.chunks(8) {
        let inputs = chunk
            .iter()
            .map(|r| Ok((&r.input, token_of(vocab, &r.puzzle_key)?)))
            .collect::<Result<Vec<_>, TrainError>>()?;
        let decoded = model::decode_steps_batch(params, &inputs, params.config.n_cycles)?;
        hits += chunk.iter().zip(decoded).filter(|(r, d)| record_exact_match(d.last().expect("steps"), r)).count();
    }
    Ok(hits as f64 / records.len() as f64)
}

/// At most `max` records, a seeded subset in original order when there are more.
pub fn subsample(records: &[AugmentedRecord], max: usize, seed: u64) -> Vec<AugmentedRecord> {
    if records.len() <= max {
        return records.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, records.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| records[i].clone()).collect()
}

fn token_of(vocab: &PuzzleIdVocabulary, key: &str) -> Result<usize, TrainError> {
    vocab.token(key).ok_or_else(|| TrainError::UnknownPuzzle(key.to_string()))
}

/// Mutable training state. `train` and `resume` both drive it.
pub struct Trainer<'a> {
    pub state: CheckpointRecord,
    data: &'a AugmentedDataset,
    vocab: &'a PuzzleIdVocabulary,
    rng: ChaCha8Rng,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model_config: &ModelConfig,
        config: TrainConfig,
        data: &'a AugmentedDataset,
        vocab: &'a PuzzleIdVocabulary,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if model_config.id_vocab_size != vocab.size() {
            return Err(TrainError::InvalidConfig(format!(
                "model id table has {} rows, vocabulary needs {}",
                model_config.id_vocab_size,
                vocab.size()
            )));
        }
        let params = model::init_params::<f32>(model_config)?;
        let state = CheckpointRecord {
            velocity: Parameters::zeros(model_config),
            params,
            rng_seed: config.seed,
            rng_word_pos: 0,
            config,
            step: 0,
        };
        Self::from_checkpoint(state, data, vocab)
    }

    pub fn from_checkpoint(
        state: CheckpointRecord,
        data: &'a AugmentedDataset,
        vocab: &'a PuzzleIdVocabulary,
    ) -> Result<Self, TrainError> {
        if data.records.is_empty() {
            return Err(TrainError::InvalidConfig("no training records".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed);
        rng.set_word_pos(state.rng_word_pos);
        Ok(Self { state, data, vocab, rng, started: Instant::now() })
    }

    /// One optimizer step; returns the batch loss and exact-match rate.
    pub fn step(&mut self) -> Result<(f32, f64), TrainError> {
        let cfg = &self.state.config;
        let picks: Vec<(usize, bool)> = (0..cfg.batch_size)
            .map(|_| {
                let i = self.rng.random_range(0..self.data.records.len());
                let blank = cfg.blank_token_rate > 0.0 && self.rng.random_bool(cfg.blank_token_rate);
                (i, blank)
            })
            .collect();
        let batch = picks
            .iter()
            .map(|&(i, blank)| {
                let r = &self.data.records[i];
                let id_token = if blank { 0 } else { token_of(self.vocab, &r.puzzle_key)? };
                Ok(Example { input: &r.input, id_token, target: &r.output })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        let step = self.state.step + 1;
        let out = model::backward(&self.state.params, &batch, self.state.params.config.n_cycles).map_err(|e| match e {
            ModelError::NonFiniteGradient(_) => TrainError::NonFiniteLoss { step },
            other => other.into(),
        })?;
        if !out.loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let hits = picks
            .iter()
            .zip(&out.final_predictions)
            .filter(|((i, _), d)| record_exact_match(d, &self.data.records[*i]))
            .count();

        let mut grads = out.grads;
        let norm = grads.sum_of_squares().sqrt();
        if norm > cfg.clip_norm {
            grads.scale(cfg.clip_norm / norm);
        }
        self.state.velocity.scale(cfg.momentum);
        self.state.velocity.add_scaled(&grads, 1.0);
        self.state.params.add_scaled(&self.state.velocity, -cfg.learning_rate);
        self.state.step = step;
        self.state.rng_word_pos = self.rng.get_word_pos();
        Ok((out.loss, hits as f64 / picks.len() as f64))
    }

    /// Steps until `until_step`, logging every `log_every` steps and at the
    /// end. `stop` sees each logged entry and may end the run early.
    pub fn run_until(
        &mut self,
        until_step: usize,
        log: &mut TrainingLog,
        mut stop: impl FnMut(&Parameters<f32>, &LogEntry) -> bool,
    ) -> Result<(), TrainError> {
        let (mut loss_sum, mut acc_sum, mut window) = (0.0f64, 0.0f64, 0usize);
        while self.state.step < until_step {
            let (loss, acc) = self.step()?;
            loss_sum += f64::from(loss);
            acc_sum += acc;
            window += 1;
            let step = self.state.step;
            if step % self.state.config.log_every == 0 || step == until_step {
                let entry = LogEntry {
                    step,
                    loss: (loss_sum / window as f64) as f32,
                    batch_accuracy: acc_sum / window as f64,
                    elapsed_s: self.started.elapsed().as_secs_f64(),
                };
                (loss_sum, acc_sum, window) = (0.0, 0.0, 0);
                log::debug!("step {step} loss {:.4} acc {:.3}", entry.loss, entry.batch_accuracy);
                let done = stop(&self.state.params, &entry);
                log.entries.push(entry);
                if done {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Trains from a fresh initialization for `config.total_steps` steps.
pub fn train(
    model_config: &ModelConfig,
    config: TrainConfig,
    data: &AugmentedDataset,
    vocab: &PuzzleIdVocabulary,
) -> Result<(CheckpointRecord, TrainingLog), TrainError> {
    let total = config.total_steps;
    let mut t = Trainer::new(model_config, config, data, vocab)?;
    let mut log = TrainingLog::default();
    t.run_until(total, &mut log, |_, _| false)?;
    Ok((t.state, log))
}

/// Continues a checkpointed run up to `until_step`.
pub fn resume(
    checkpoint: CheckpointRecord,
    data: &AugmentedDataset,
    vocab: &PuzzleIdVocabulary,
    until_step: usize,
) -> Result<(CheckpointRecord, TrainingLog), TrainError> {
    let mut t = Trainer::from_checkpoint(checkpoint, data, vocab)?;
    let mut log = TrainingLog::default();
    t.run_until(until_step, &mut log, |_, _| false)?;
    Ok((t.state, log))
}

/// Pass@1 (first, canonical sample) and Pass@k over `k` raw samples, no voting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyEvaluation {
    pub pass_at_1: PassReport,
    pub pass_at_k: PassReport,
}

pub fn evaluate_early(
    predictor: &dyn GridPredictor,
    steps: usize,
    eval: &Dataset,
    vocab: &PuzzleIdVocabulary,
    k: usize,
    seed: u64,
) -> Result<EarlyEvaluation, TrainError> {
    if k == 0 || steps == 0 {
        return Err(TrainError::InvalidConfig("early evaluation needs k >= 1 and steps >= 1".into()));
    }
    let mut sample_sets = Vec::with_capacity(eval.len());
    let mut firsts = Vec::with_capacity(eval.len());
    for task in &eval.tasks {
        let token = token_of(vocab, &task.puzzle_key)?;
        let mut per_test = ensemble::collect_candidates(predictor, task, token, seed, k, steps)?;
        let samples: Vec<Vec<Grid>> = per_test
            .iter_mut()
            .map(|depths| depths.pop().expect("steps >= 1").into_iter().map(|c| c.grid).collect())
            .collect();
        let first: Vec<Grid> = samples.iter().map(|s| s[0].clone()).collect();
        firsts.push(metrics::exact_match_task(&first, task).map_err(EnsembleError::from)?);
        sample_sets.push(samples);
    }
    Ok(EarlyEvaluation {
        pass_at_1: metrics::pass_at_1(&firsts, "canonical_sample", seed).map_err(EnsembleError::from)?,
        pass_at_k: metrics::pass_at_k(&sample_sets, &eval.tasks, "raw_samples", seed).map_err(EnsembleError::from)?,
    })
}

/// Augmented training records for `regime` over the training corpus.
pub fn regime_records(corpus: &Dataset, regime: Regime, seed: u64) -> AugmentedDataset {
    augmentation::expand_dataset(corpus, regime.n_per_pair(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{Augmentation, CanvasGrid};

    fn rec(out: Grid, dy: i64, dx: i64) -> AugmentedRecord {
        AugmentedRecord {
            puzzle_key: "k".into(),
            pair_index: 0,
            augmentation: Augmentation::IDENTITY,
            input: CanvasGrid::at_origin(out.clone()),
            output: CanvasGrid::placed(out, dy, dx).unwrap(),
        }
    }

    #[test]
    fn exact_match_accounts_for_offset() {
        let t = Grid::from_rows(&[vec![1, 2]]).unwrap();
        assert!(record_exact_match(&t, &rec(t.clone(), 0, 0)));
        let shifted = Grid::from_rows(&[vec![0, 0, 0], vec![0, 1, 2]]).unwrap();
        assert!(record_exact_match(&shifted, &rec(t.clone(), 1, 1)));
        assert!(!record_exact_match(&shifted, &rec(t.clone(), 0, 0)));
        let too_wide = Grid::from_rows(&[vec![0, 0, 0, 0], vec![0, 1, 2, 0]]).unwrap();
        assert!(!record_exact_match(&too_wide, &rec(t, 1, 1)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f32::NAN, ..Default::default() }.validate().is_err());
        assert_eq!(Regime::parse("aug1000"), Some(Regime::Aug1000));
        assert_eq!(Regime::parse("aug7"), None);
    }

    #[test]
    fn corpus_excludes_eval_tests() {
        let spec = crate::synthetic::SynthSpec { n_tasks: 2, ..Default::default() };
        let train = crate::synthetic::synthetic_dataset(&spec, SplitLabel::Train, 1);
        let eval = crate::synthetic::synthetic_dataset(&spec, SplitLabel::Eval, 1);
        let corpus = training_corpus(&train, Some(&eval));
        assert_eq!(corpus.len(), 4);
        let pairs: usize = corpus.tasks.iter().map(|t| t.demonstrations.len()).sum();
        assert_eq!(pairs, 2 * 4 + 2 * 3);
        for t in &eval.tasks {
            let c = corpus.tasks.iter().find(|c| c.puzzle_key == t.puzzle_key).unwrap();
            assert!(!c.demonstrations.contains(&t.tests[0]));
        }
    }
}
