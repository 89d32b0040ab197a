//! Experiment configuration and the runners behind every CLI subcommand.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::ablation::{self, IdCondition};
use crate::arc_data::{self, Dataset, DataError, PuzzleIdVocabulary, SplitLabel};
use crate::augmentation::{AugmentError, AugmentedDataset};
use crate::ensemble::{self, EnsembleError, EvaluationMode};
use crate::metrics::format_percent;
use crate::model::{weights, ModelConfig, ModelError, Parameters};
use crate::profiler::{self, ProfileConfig, ProfileError};
use crate::report::{delta_pp, write_bundle, PaperReference, Table};
use crate::seeds;
use crate::synthetic::{self, SynthSpec};
use crate::trainer::{self, Regime, TrainConfig, TrainError};

pub const DATA_ROOT_ENV: &str = "TRM_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    EvalEnsemble,
    IdAblation,
    Trajectory,
    TrainDynamics,
    Profile,
    PrepareData,
    SynthData,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::EvalEnsemble => "eval-ensemble",
            Experiment::IdAblation => "id-ablation",
            Experiment::Trajectory => "trajectory",
            Experiment::TrainDynamics => "train-dynamics",
            Experiment::Profile => "profile",
            Experiment::PrepareData => "prepare-data",
            Experiment::SynthData => "synth-data",
        }
    }

    fn needs_weights(self) -> bool {
        matches!(self, Experiment::EvalEnsemble | Experiment::IdAblation | Experiment::Trajectory | Experiment::Profile)
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("writing reports to {path}: {message}")]
    Io { path: String, message: String },
}

impl ExperimentError {
    /// 2 for configuration problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 2,
            _ => 1,
        }
    }

    fn config(field: &str, message: impl Into<String>) -> Self {
        ExperimentError::Config { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSel {
    All,
    One(ConditionKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Correct,
    Blank,
    RandomMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeSel {
    Both,
    One(Regime),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Toy,
    PaperScale,
}

/// Fully resolved settings for one run. Defaults follow the published setup
/// where it is stated (K = 1000, 4 recursion steps, trajectory up to depth 6,
/// 2,500 training steps) and desk-scale choices elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub data_root: PathBuf,
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub k: usize,
    pub steps: usize,
    pub seed: u64,
    pub condition: ConditionSel,
    pub mismatch_seed: u64,
    pub max_depth: usize,
    pub depths: Vec<usize>,
    pub eval_limit: Option<usize>,
    /// Left out of reports: results never depend on it.
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
    pub regime: RegimeSel,
    pub train_steps: usize,
    pub nominal_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub clip_norm: f32,
    pub log_every: usize,
    pub blank_token_rate: f64,
    pub eval_k: usize,
    pub accuracy_samples: usize,
    pub model_preset: ModelPreset,
    pub d_model: Option<usize>,
    pub trunk_layers: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub n_cycles: Option<usize>,
    pub model_seed: u64,
    pub profile_batch: usize,
    pub n_samples: usize,
    pub warmup: usize,
    pub aug_seed: u64,
    pub synth_tasks: usize,
    pub synth_geometric: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        let data_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
        Self {
            experiment,
            data_root,
            train_dir: None,
            eval_dir: None,
            weights: None,
            output_dir: PathBuf::from("reports"),
            k: 1000,
            steps: 4,
            seed: 0,
            condition: ConditionSel::All,
            mismatch_seed: 1,
            max_depth: 6,
            depths: vec![1, 2, 3, 4, 6],
            eval_limit: None,
            workers: None,
            regime: RegimeSel::Both,
            train_steps: 2500,
            nominal_steps: 778_000,
            batch_size: 8,
            learning_rate: 0.2,
            momentum: 0.9,
            clip_norm: 1.0,
            log_every: 50,
            blank_token_rate: 0.0,
            eval_k: 1000,
            accuracy_samples: 512,
            model_preset: ModelPreset::Toy,
            d_model: None,
            trunk_layers: None,
            ffn_mult: None,
            n_cycles: None,
            model_seed: 0,
            profile_batch: 1,
            n_samples: 200,
            warmup: 2,
            aug_seed: 0,
            synth_tasks: 10,
            synth_geometric: true,
        }
    }

    /// Keys accepted by [`ExperimentConfig::set`], in documentation order.
    pub const KEYS: &'static [&'static str] = &[
        "data_root", "train_dir", "eval_dir", "weights", "output_dir", "k", "steps", "seed", "condition",
        "mismatch_seed", "max_depth", "depths", "eval_limit", "workers", "regime", "train_steps", "nominal_steps",
        "batch_size", "learning_rate", "momentum", "clip_norm", "log_every", "blank_token_rate", "eval_k",
        "accuracy_samples", "model_preset", "d_model", "trunk_layers", "ffn_mult", "n_cycles", "model_seed",
        "profile_batch", "n_samples", "warmup", "aug_seed", "synth_tasks", "synth_geometric",
    ];

    /// Sets one field from its textual value. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let key = key.trim().replace('-', "_");
        let field = key.as_str();
        let value = value.trim();
        fn num<T: FromStr>(field: &str, v: &str) -> Result<T, ExperimentError>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| ExperimentError::config(field, format!("`{v}`: {e}")))
        }
        match field {
            "data_root" => self.data_root = value.into(),
            "train_dir" => self.train_dir = Some(value.into()),
            "eval_dir" => self.eval_dir = Some(value.into()),
            "weights" => self.weights = Some(value.into()),
            "output_dir" => self.output_dir = value.into(),
            "k" => self.k = num(field, value)?,
            "steps" => self.steps = num(field, value)?,
            "seed" => self.seed = num(field, value)?,
            "condition" => {
                self.condition = match value {
                    "all" => ConditionSel::All,
                    "correct" => ConditionSel::One(ConditionKind::Correct),
                    "blank" => ConditionSel::One(ConditionKind::Blank),
                    "random_mismatch" | "random-mismatch" => ConditionSel::One(ConditionKind::RandomMismatch),
                    _ => return Err(ExperimentError::config(field, "expected all, correct, blank or random_mismatch")),
                }
            }
            "mismatch_seed" => self.mismatch_seed = num(field, value)?,
            "max_depth" => self.max_depth = num(field, value)?,
            "depths" => {
                self.depths = value
                    .trim_matches(|c| c == '[' || c == ']')
                    .split(',')
                    .map(|d| num(field, d.trim()))
                    .collect::<Result<_, _>>()?
            }
            "eval_limit" => self.eval_limit = Some(num(field, value)?),
            "workers" => self.workers = Some(num(field, value)?),
            "regime" => {
                self.regime = match value {
                    "both" => RegimeSel::Both,
                    other => RegimeSel::One(
                        Regime::parse(other).ok_or_else(|| ExperimentError::config(field, "expected both, aug0 or aug1000"))?,
                    ),
                }
            }
            "train_steps" => self.train_steps = num(field, value)?,
            "nominal_steps" => self.nominal_steps = num(field, value)?,
            "batch_size" => self.batch_size = num(field, value)?,
            "learning_rate" => self.learning_rate = num(field, value)?,
            "momentum" => self.momentum = num(field, value)?,
            "clip_norm" => self.clip_norm = num(field, value)?,
            "log_every" => self.log_every = num(field, value)?,
            "blank_token_rate" => self.blank_token_rate = num(field, value)?,
            "eval_k" => self.eval_k = num(field, value)?,
            "accuracy_samples" => self.accuracy_samples = num(field, value)?,
            "model_preset" => {
                self.model_preset = match value {
                    "toy" => ModelPreset::Toy,
                    "paper_scale" | "paper-scale" => ModelPreset::PaperScale,
                    _ => return Err(ExperimentError::config(field, "expected toy or paper_scale")),
                }
            }
            "d_model" => self.d_model = Some(num(field, value)?),
            "trunk_layers" => self.trunk_layers = Some(num(field, value)?),
            "ffn_mult" => self.ffn_mult = Some(num(field, value)?),
            "n_cycles" => self.n_cycles = Some(num(field, value)?),
            "model_seed" => self.model_seed = num(field, value)?,
            "profile_batch" => self.profile_batch = num(field, value)?,
            "n_samples" => self.n_samples = num(field, value)?,
            "warmup" => self.warmup = num(field, value)?,
            "aug_seed" => self.aug_seed = num(field, value)?,
            "synth_tasks" => self.synth_tasks = num(field, value)?,
            "synth_geometric" => self.synth_geometric = num(field, value)?,
            _ => return Err(ExperimentError::config(field, "unknown key")),
        }
        Ok(())
    }

    /// Applies a flat `key = value` document (TOML syntax, no tables).
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::config("config", format!("{}: {e}", path.display())))?;
        self.apply_document(&text)
    }

    pub fn apply_document(&mut self, text: &str) -> Result<(), ExperimentError> {
        let table: toml::Table = text.parse().map_err(|e| ExperimentError::config("config", format!("{e}")))?;
        for (key, value) in table {
            let rendered = match value {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                toml::Value::Array(items) => items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
                other => return Err(ExperimentError::config(&key, format!("unsupported value {other}"))),
            };
            self.set(&key, &rendered)?;
        }
        Ok(())
    }

    pub fn train_dir(&self) -> PathBuf {
        self.train_dir.clone().unwrap_or_else(|| self.data_root.join("training"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.eval_dir.clone().unwrap_or_else(|| self.data_root.join("evaluation"))
    }

    pub fn model_config(&self, id_vocab_size: usize) -> ModelConfig {
        let mut c = match self.model_preset {
            ModelPreset::Toy => ModelConfig::toy(id_vocab_size, self.model_seed),
            ModelPreset::PaperScale => ModelConfig { id_vocab_size, ..ModelConfig::paper_scale(self.model_seed) },
        };
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.trunk_layers = self.trunk_layers.unwrap_or(c.trunk_layers);
        c.ffn_mult = self.ffn_mult.unwrap_or(c.ffn_mult);
        c.n_cycles = self.n_cycles.unwrap_or(c.n_cycles);
        c
    }

    pub fn train_config(&self, regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            total_steps: self.train_steps,
            nominal_steps: self.nominal_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
            seed: self.seed,
            log_every: self.log_every,
            blank_token_rate: self.blank_token_rate,
        }
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(ExperimentError::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        let exists = |field: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ExperimentError::config(field, format!("path {} does not exist", p.display())))
            }
        };
        positive("k", self.k)?;
        positive("steps", self.steps)?;
        if let Some(w) = self.workers {
            positive("workers", w)?;
        }
        if let Some(n) = self.eval_limit {
            positive("eval_limit", n)?;
        }
        match self.experiment {
            Experiment::SynthData => positive("synth_tasks", self.synth_tasks)?,
            _ => {
                exists("train_dir", &self.train_dir())?;
                exists("eval_dir", &self.eval_dir())?;
            }
        }
        if self.experiment.needs_weights() {
            let w = self.weights.as_ref().ok_or_else(|| ExperimentError::config("weights", "required"))?;
            exists("weights", w)?;
        }
        if self.experiment == Experiment::Trajectory {
            if self.max_depth < self.steps {
                return Err(ExperimentError::config("max_depth", "must be at least `steps`"));
            }
            if let Some(d) = self.depths.iter().find(|&&d| d == 0 || d > self.max_depth) {
                return Err(ExperimentError::config("depths", format!("depth {d} outside 1..={}", self.max_depth)));
            }
        }
        if self.experiment == Experiment::TrainDynamics {
            positive("train_steps", self.train_steps)?;
            positive("eval_k", self.eval_k)?;
            positive("accuracy_samples", self.accuracy_samples)?;
            self.train_config(Regime::Aug0)
                .validate()
                .map_err(|e| ExperimentError::config("train", e.to_string()))?;
            self.model_config(2).validate().map_err(|e| ExperimentError::config("model", e.to_string()))?;
        }
        if self.experiment == Experiment::Profile {
            ProfileConfig { steps: self.steps, batch: self.profile_batch, n_samples: self.n_samples, warmup: self.warmup, workers: self.workers.unwrap_or(1), seed: self.seed }
                .validate()
                .map_err(|e| ExperimentError::config("n_samples", e.to_string()))?;
        }
        Ok(())
    }
}

/// What a run produced, for the CLI to print.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    /// Human-readable summary including deltas against the published tables.
    pub summary: String,
}

struct Inputs {
    train: Dataset,
    eval: Dataset,
    vocab: PuzzleIdVocabulary,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs, ExperimentError> {
    let train = arc_data::load_dataset(&cfg.train_dir(), SplitLabel::Train)?;
    let mut eval = arc_data::load_dataset(&cfg.eval_dir(), SplitLabel::Eval)?;
    let vocab = arc_data::build_vocabulary(&[&train, &eval])?;
    if let Some(n) = cfg.eval_limit {
        eval.tasks.truncate(n);
    }
    if eval.is_empty() {
        return Err(ExperimentError::config("eval_dir", "no evaluation tasks"));
    }
    Ok(Inputs { train, eval, vocab })
}

fn load_weights(cfg: &ExperimentConfig, vocab: &PuzzleIdVocabulary) -> Result<Parameters<f32>, ExperimentError> {
    let path = cfg.weights.as_ref().ok_or_else(|| ExperimentError::config("weights", "required"))?;
    let p = weights::load(path)?;
    if p.config.id_vocab_size != vocab.size() {
        return Err(ExperimentError::config(
            "weights",
            format!("id table has {} rows but the datasets define {}", p.config.id_vocab_size, vocab.size()),
        ));
    }
    Ok(p)
}

fn io_err(dir: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io { path: dir.display().to_string(), message: e.to_string() }
}

fn write_text(dir: &Path, name: &str, text: &str, files: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_err(dir))?;
    files.push(path);
    Ok(())
}

fn bundle(
    cfg: &ExperimentConfig,
    stem: &str,
    csv: &Table,
    markdown: &str,
    json: serde_json::Value,
    files: &mut Vec<PathBuf>,
) -> Result<(), ExperimentError> {
    write_bundle(&cfg.output_dir, stem, csv, markdown, &json).map_err(io_err(&cfg.output_dir))?;
    files.extend(["csv", "md", "json"].iter().map(|ext| cfg.output_dir.join(format!("{stem}.{ext}"))));
    Ok(())
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

/// Runs the configured experiment and writes its reports.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    ensemble::with_workers(cfg.workers, || match cfg.experiment {
        Experiment::EvalEnsemble => run_eval_ensemble(cfg),
        Experiment::IdAblation => run_id_ablation(cfg),
        Experiment::Trajectory => run_trajectory(cfg),
        Experiment::TrainDynamics => run_train_dynamics(cfg),
        Experiment::Profile => run_profile(cfg),
        Experiment::PrepareData => run_prepare_data(cfg),
        Experiment::SynthData => run_synth_data(cfg),
    })
}

fn run_eval_ensemble(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    let inputs = load_inputs(cfg)?;
    let p = load_weights(cfg, &inputs.vocab)?;
    let tokens = ablation::true_tokens(&inputs.eval, &inputs.vocab)?;
    let paper_mode = EvaluationMode::paper(cfg.k, cfg.seed, cfg.steps);
    let single = EvaluationMode::single(cfg.seed, cfg.steps);
    let paper_eval = ensemble::evaluate_dataset(&p, &inputs.eval.tasks, &tokens, &paper_mode)?;
    let single_eval = ensemble::evaluate_dataset(&p, &inputs.eval.tasks, &tokens, &single)?;

    let reference = PaperReference::bundled();
    let rows = [
        ("Paper mode (official)", cfg.k, true, &paper_eval.report),
        ("Single augmentation", 1, false, &single_eval.report),
    ];
    let mut md = Table::new(["Evaluation mode", "Augmentations", "Voting", "Pass@1"]);
    let mut csv = Table::new(["experiment", "mode", "augmentations", "voting", "pass_at_1", "correct", "n_tasks", "seed"]);
    let mut delta = Table::new(["Evaluation mode", "Pass@1 (ours)", "Pass@1 (published)", "Delta"]);
    for ((label, augs, vote, rep), r) in rows.iter().zip(&reference.ensemble) {
        md.push([label.to_string(), augs.to_string(), yes_no(*vote).into(), rep.percent()]);
        csv.push([
            "eval-ensemble".to_string(),
            label.to_string(),
            augs.to_string(),
            vote.to_string(),
            rep.percent(),
            rep.correct.to_string(),
            rep.n_tasks.to_string(),
            cfg.seed.to_string(),
        ]);
        delta.push([label.to_string(), rep.percent(), r.pass_at_1.clone(), delta_pp(&rep.percent(), &r.pass_at_1)]);
    }
    let markdown = format!(
        "## Test-time ensembling ({} tasks)\n\n{}\n### Against the published table\n\n{}",
        paper_eval.report.n_tasks,
        md.to_markdown(),
        delta.to_markdown()
    );
    let mut files = Vec::new();
    let json = json!({
        "experiment": cfg.experiment.name(),
        "config": cfg,
        "rows": rows.iter().map(|(label, augs, vote, rep)| json!({
            "mode": label, "augmentations": augs, "voting": vote,
            "pass_at_1": rep.percent(), "correct": rep.correct, "n_tasks": rep.n_tasks,
        })).collect::<Vec<_>>(),
        "reference": reference.ensemble,
    });
    bundle(cfg, "ensemble", &csv, &markdown, json, &mut files)?;
    let results = ensemble::results_jsonl(&paper_eval.records(&paper_mode, cfg.steps));
    write_text(&cfg.output_dir, "ensemble_results.jsonl", &results, &mut files)?;
    let results = ensemble::results_jsonl(&single_eval.records(&single, cfg.steps));
    write_text(&cfg.output_dir, "ensemble_single_results.jsonl", &results, &mut files)?;
    Ok(RunOutcome { files, summary: markdown })
}

fn condition_list(cfg: &ExperimentConfig) -> Vec<(ConditionKind, IdCondition)> {
    let all = [
        (ConditionKind::Correct, IdCondition::Correct),
        (ConditionKind::Blank, IdCondition::Blank),
        (ConditionKind::RandomMismatch, IdCondition::RandomMismatch { seed: cfg.mismatch_seed }),
    ];
    match cfg.condition {
        ConditionSel::All => all.to_vec(),
        ConditionSel::One(kind) => all.into_iter().filter(|(k, _)| *k == kind).collect(),
    }
}

fn run_id_ablation(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    let inputs = load_inputs(cfg)?;
    let p = load_weights(cfg, &inputs.vocab)?;
    let mode = EvaluationMode::paper(cfg.k, cfg.seed, cfg.steps);
    let reference = PaperReference::bundled();
    let mut md = Table::new(["Condition", "Puzzle ID input", "Pass@1"]);
    let mut csv = Table::new(["experiment", "condition", "pass_at_1", "correct", "n_tasks", "seed"]);
    let mut delta = Table::new(["Condition", "Pass@1 (ours)", "Pass@1 (published)", "Delta"]);
    let mut files = Vec::new();
    let mut rows_json = Vec::new();
    for (kind, condition) in condition_list(cfg) {
        let r = &reference.id_ablation[kind as usize];
        let tokens = ablation::resolve_tokens(&condition, &inputs.eval, &inputs.vocab)?;
        let eval = ensemble::evaluate_dataset(&p, &inputs.eval.tasks, &tokens, &mode)?;
        let rep = &eval.report;
        md.push([r.condition.clone(), r.id_input.clone(), rep.percent()]);
        csv.push([
            "id-ablation".to_string(),
            condition.label().to_string(),
            rep.percent(),
            rep.correct.to_string(),
            rep.n_tasks.to_string(),
            cfg.seed.to_string(),
        ]);
        delta.push([r.condition.clone(), rep.percent(), r.pass_at_1.clone(), delta_pp(&rep.percent(), &r.pass_at_1)]);
        rows_json.push(json!({
            "condition": condition, "pass_at_1": rep.percent(), "correct": rep.correct,
            "n_tasks": rep.n_tasks, "id_tokens": tokens,
        }));
        let results = ensemble::results_jsonl(&eval.records(&mode, cfg.steps));
        write_text(&cfg.output_dir, &format!("id_ablation_{}_results.jsonl", condition.label()), &results, &mut files)?;
    }
    let markdown = format!(
        "## Puzzle identity perturbations ({} tasks)\n\n{}\n### Against the published table\n\n{}",
        inputs.eval.len(),
        md.to_markdown(),
        delta.to_markdown()
    );
    let json = json!({
        "experiment": cfg.experiment.name(),
        "config": cfg,
        "rows": rows_json,
        "reference": reference.id_ablation,
    });
    bundle(cfg, "id_ablation", &csv, &markdown, json, &mut files)?;
    Ok(RunOutcome { files, summary: markdown })
}

fn depth_label(depth: usize, training_depth: usize) -> String {
    if depth > training_depth {
        format!("{depth} (extrapolated)")
    } else {
        depth.to_string()
    }
}

fn run_trajectory(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    let inputs = load_inputs(cfg)?;
    let p = load_weights(cfg, &inputs.vocab)?;
    let mode = EvaluationMode::paper(cfg.k, cfg.seed, cfg.steps);
    let report = ablation::run_trajectory(&p, &inputs.eval, &inputs.vocab, &mode, cfg.max_depth)?;
    let reference = PaperReference::bundled();
    let mut md = Table::new(["Recursion step t", "Pass@1", "Relative to final (%)"]);
    let mut csv = Table::new(["experiment", "depth", "pass_at_1", "correct", "n_tasks", "relative_to_final", "seed"]);
    let mut delta = Table::new(["Recursion step t", "Pass@1 (ours)", "Pass@1 (published)", "Delta"]);
    for row in report.select(&cfg.depths) {
        let label = depth_label(row.depth, report.training_depth);
        md.push([label.clone(), row.pass_percent(), row.relative()]);
        csv.push([
            "trajectory".to_string(),
            row.depth.to_string(),
            row.pass_percent(),
            row.report.correct.to_string(),
            row.report.n_tasks.to_string(),
            row.relative(),
            cfg.seed.to_string(),
        ]);
        let published = reference.trajectory.iter().find(|r| r.depth == row.depth);
        let paper = published.map_or("n/a".to_string(), |r| r.pass_at_1.clone());
        delta.push([label, row.pass_percent(), paper.clone(), delta_pp(&row.pass_percent(), &paper)]);
    }
    let markdown = format!(
        "## Pass@1 by recursion depth ({} tasks)\n\n{}\n### Against the published table\n\n{}",
        inputs.eval.len(),
        md.to_markdown(),
        delta.to_markdown()
    );
    let json = json!({
        "experiment": cfg.experiment.name(),
        "config": cfg,
        "training_depth": report.training_depth,
        "rows": report.select(&cfg.depths).iter().map(|r| json!({
            "depth": r.depth, "pass_at_1": r.pass_percent(), "correct": r.report.correct,
            "n_tasks": r.report.n_tasks, "relative_to_final": r.relative(), "final_correct": r.final_correct,
        })).collect::<Vec<_>>(),
        "reference": reference.trajectory,
    });
    let mut files = Vec::new();
    bundle(cfg, "trajectory", &csv, &markdown, json, &mut files)?;
    Ok(RunOutcome { files, summary: markdown })
}

fn regime_dir(cfg: &ExperimentConfig, regime: Regime) -> PathBuf {
    cfg.data_root.join(AugmentedDataset::dir_name(regime.n_per_pair()))
}

fn regime_records(cfg: &ExperimentConfig, inputs: &Inputs, regime: Regime) -> Result<AugmentedDataset, ExperimentError> {
    let dir = regime_dir(cfg, regime);
    if dir.join("manifest.json").exists() {
        return Ok(AugmentedDataset::read_dir(&dir)?);
    }
    log::info!("{} not prepared; building {} records in memory", dir.display(), regime.label());
    let corpus = trainer::training_corpus(&inputs.train, Some(&inputs.eval));
    Ok(trainer::regime_records(&corpus, regime, cfg.aug_seed))
}

struct RegimeResult {
    regime: Regime,
    final_loss: f32,
    accuracy_hits: usize,
    accuracy_total: usize,
    early: trainer::EarlyEvaluation,
}

fn run_train_dynamics(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    let inputs = load_inputs(cfg)?;
    let regimes = match cfg.regime {
        RegimeSel::Both => vec![Regime::Aug0, Regime::Aug1000],
        RegimeSel::One(r) => vec![r],
    };
    let model_cfg = cfg.model_config(inputs.vocab.size());
    let mut files = Vec::new();
    let mut results = Vec::new();
    for regime in regimes {
        let data = regime_records(cfg, &inputs, regime)?;
        let (ckpt, log) = trainer::train(&model_cfg, cfg.train_config(regime), &data, &inputs.vocab)?;
        let ckpt_dir = cfg.output_dir.join("checkpoints").join(regime.label());
        ckpt.save(&ckpt_dir)?;
        files.push(ckpt_dir);
        write_text(&cfg.output_dir, &format!("train_{}_log.csv", regime.label()), &log.to_csv(), &mut files)?;
        let probe = trainer::subsample(&data.records, cfg.accuracy_samples, seeds::derive(cfg.seed, &[7]));
        let acc = trainer::train_accuracy(&ckpt.params, &probe, &inputs.vocab)?;
        let early = trainer::evaluate_early(&ckpt.params, ckpt.params.config.n_cycles, &inputs.eval, &inputs.vocab, cfg.eval_k, cfg.seed)?;
        results.push(RegimeResult {
            regime,
            final_loss: log.entries.last().map_or(f32::NAN, |e| e.loss),
            accuracy_hits: (acc * probe.len() as f64).round() as usize,
            accuracy_total: probe.len(),
            early,
        });
    }

    let reference = PaperReference::bundled();
    let heading = |r: Regime| match r {
        Regime::Aug0 => "aug 0 (canonical)",
        Regime::Aug1000 => "aug 1000 (heavy)",
    };
    let mut header = vec!["Metric".to_string()];
    header.extend(results.iter().map(|r| heading(r.regime).to_string()));
    let mut train_md = Table::new(header.clone());
    let mut loss_row = vec!["Train loss".to_string()];
    loss_row.extend(results.iter().map(|r| format!("{:.4}", r.final_loss)));
    train_md.push(loss_row);
    let mut acc_row = vec!["Train accuracy".to_string()];
    acc_row.extend(results.iter().map(|r| format_percent(r.accuracy_hits, r.accuracy_total)));
    train_md.push(acc_row);

    let mut eval_md = Table::new(header);
    let mut p1 = vec!["Pass@1".to_string()];
    p1.extend(results.iter().map(|r| r.early.pass_at_1.percent()));
    eval_md.push(p1);
    let mut pk = vec![format!("Pass@{}", cfg.eval_k)];
    pk.extend(results.iter().map(|r| r.early.pass_at_k.percent()));
    eval_md.push(pk);

    let mut csv = Table::new([
        "experiment", "regime", "step", "train_loss", "train_accuracy", "accuracy_correct", "accuracy_total",
        "pass_at_1", "pass_at_1_correct", "pass_at_k", "pass_at_k_correct", "k", "n_tasks", "seed",
    ]);
    let mut delta = Table::new(["Regime", "Metric", "Ours", "Published", "Delta"]);
    for r in &results {
        let (tr, er) = match r.regime {
            Regime::Aug0 => (&reference.train_metrics.aug0, &reference.eval_metrics.aug0),
            Regime::Aug1000 => (&reference.train_metrics.aug1000, &reference.eval_metrics.aug1000),
        };
        let acc = format_percent(r.accuracy_hits, r.accuracy_total);
        csv.push([
            "train-dynamics".to_string(),
            r.regime.label().to_string(),
            cfg.train_steps.to_string(),
            format!("{:.4}", r.final_loss),
            acc.clone(),
            r.accuracy_hits.to_string(),
            r.accuracy_total.to_string(),
            r.early.pass_at_1.percent(),
            r.early.pass_at_1.correct.to_string(),
            r.early.pass_at_k.percent(),
            r.early.pass_at_k.correct.to_string(),
            cfg.eval_k.to_string(),
            r.early.pass_at_1.n_tasks.to_string(),
            cfg.seed.to_string(),
        ]);
        let label = heading(r.regime).to_string();
        delta.push([label.clone(), "Train loss".into(), format!("{:.4}", r.final_loss), format!("{:.4}", tr.train_loss), format!("{:+.4}", f64::from(r.final_loss) - tr.train_loss)]);
        delta.push([label.clone(), "Train accuracy".into(), acc.clone(), tr.train_accuracy.clone(), delta_pp(&acc, &tr.train_accuracy)]);
        let ours1 = r.early.pass_at_1.percent();
        delta.push([label.clone(), "Pass@1".into(), ours1.clone(), er.pass_at_1.clone(), delta_pp(&ours1, &er.pass_at_1)]);
        let oursk = r.early.pass_at_k.percent();
        delta.push([label, format!("Pass@{}", cfg.eval_k), oursk.clone(), er.pass_at_1000.clone(), delta_pp(&oursk, &er.pass_at_1000)]);
    }
    let markdown = format!(
        "## Training metrics at step {}\n\n{}\n## Evaluation metrics at step {} ({} tasks)\n\n{}\n### Against the published tables\n\n{}",
        cfg.train_steps,
        train_md.to_markdown(),
        cfg.train_steps,
        inputs.eval.len(),
        eval_md.to_markdown(),
        delta.to_markdown()
    );
    let json = json!({
        "experiment": cfg.experiment.name(),
        "config": cfg,
        "model": model_cfg,
        "rows": results.iter().map(|r| json!({
            "regime": r.regime, "train_loss": r.final_loss,
            "train_accuracy": format_percent(r.accuracy_hits, r.accuracy_total),
            "accuracy_correct": r.accuracy_hits, "accuracy_total": r.accuracy_total,
            "pass_at_1": r.early.pass_at_1, "pass_at_k": r.early.pass_at_k,
        })).collect::<Vec<_>>(),
        "reference": { "train": reference.train_metrics, "eval": reference.eval_metrics },
    });
    bundle(cfg, "train_dynamics", &csv, &markdown, json, &mut files)?;
    Ok(RunOutcome { files, summary: markdown })
}

fn run_profile(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    let inputs = load_inputs(cfg)?;
    let p = load_weights(cfg, &inputs.vocab)?;
    let tokens = ablation::true_tokens(&inputs.eval, &inputs.vocab)?;
    let pcfg = ProfileConfig {
        steps: cfg.steps,
        batch: cfg.profile_batch,
        n_samples: cfg.n_samples,
        warmup: cfg.warmup,
        workers: cfg.workers.unwrap_or(1),
        seed: cfg.seed,
    };
    let result = profiler::profile_inference(&p, &inputs.eval, &tokens, &pcfg)?;
    let reference = PaperReference::bundled();
    let mut md = Table::new(["Model", "Peak memory", "Throughput", "Latency"]);
    let params = p.count();
    for (rep, scope) in [(&result.forward_only, "forward only"), (&result.pipeline, "pipeline")] {
        let row = rep.markdown_row(&format!("TRM ({params} parameters, {scope})"));
        let cells: Vec<String> = row.trim_matches('|').split(" | ").map(|c| c.trim().to_string()).collect();
        md.push(cells);
    }
    let mut published = Table::new(["Model", "Peak memory", "Throughput", "Latency"]);
    for r in &reference.efficiency {
        published.push([r.model.clone(), r.peak_memory.clone(), r.throughput.clone(), r.latency.clone()]);
    }
    let mut csv = Table::new([
        "experiment", "scope", "throughput_samples_per_s", "latency_ms", "peak_workspace_bytes", "workspace_source",
        "batch", "steps", "n_samples", "hardware",
    ]);
    for rep in [&result.forward_only, &result.pipeline] {
        csv.push([
            "profile".to_string(),
            serde_json::to_value(rep.scope).expect("enum").as_str().unwrap_or_default().to_string(),
            format!("{:.3}", rep.throughput),
            format!("{:.3}", rep.latency_ms),
            rep.peak_workspace_bytes.to_string(),
            serde_json::to_value(rep.peak_workspace_source).expect("enum").as_str().unwrap_or_default().to_string(),
            rep.batch.to_string(),
            rep.steps.to_string(),
            rep.n_samples.to_string(),
            rep.hardware.clone(),
        ]);
    }
    let markdown = format!(
        "## Efficiency profile ({})\n\n{}\n### Published reference (NVIDIA H100, not comparable in absolute terms)\n\n{}",
        result.forward_only.hardware,
        md.to_markdown(),
        published.to_markdown()
    );
    let json = json!({
        "experiment": cfg.experiment.name(),
        "config": cfg,
        "parameters": params,
        "forward_only": result.forward_only,
        "pipeline": result.pipeline,
        "reference": reference.efficiency,
    });
    let mut files = Vec::new();
    bundle(cfg, "profile", &csv, &markdown, json, &mut files)?;
    Ok(RunOutcome { files, summary: markdown })
}

fn run_prepare_data(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    let inputs = load_inputs(cfg)?;
    let corpus = trainer::training_corpus(&inputs.train, Some(&inputs.eval));
    let mut files = Vec::new();
    let mut summary = String::new();
    for regime in [Regime::Aug0, Regime::Aug1000] {
        let data = trainer::regime_records(&corpus, regime, cfg.aug_seed);
        let dir = regime_dir(cfg, regime);
        data.write_dir(&dir)?;
        summary.push_str(&format!("{}: {} records\n", dir.display(), data.records.len()));
        files.push(dir);
    }
    let vocab: Vec<_> = inputs.vocab.entries().iter().map(|(k, v)| json!({"puzzle_key": k, "token": v})).collect();
    write_text(&cfg.data_root, "vocabulary.json", &format!("{:#}\n", json!(vocab)), &mut files)?;
    Ok(RunOutcome { files, summary })
}

fn run_synth_data(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    let spec = SynthSpec { n_tasks: cfg.synth_tasks, geometric: cfg.synth_geometric, ..SynthSpec::default() };
    let mut files = Vec::new();
    for (split, dir) in [(SplitLabel::Train, cfg.train_dir()), (SplitLabel::Eval, cfg.eval_dir())] {
        synthetic::synthetic_dataset(&spec, split, cfg.seed).write_dir(&dir)?;
        files.push(dir);
    }
    Ok(RunOutcome { files, summary: format!("{} synthetic tasks per split\n", cfg.synth_tasks) })
}
