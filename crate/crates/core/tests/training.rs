mod common;

use trm_lab::arc_data::{build_vocabulary, PuzzleIdVocabulary, SplitLabel};
use trm_lab::augmentation::AugmentedDataset;
use trm_lab::model::{self, init_params, ModelConfig};
use trm_lab::synthetic::{synthetic_dataset, SynthSpec};
use trm_lab::trainer::{
    self, regime_records, training_corpus, CheckpointRecord, Regime, TrainConfig, TrainError, Trainer, TrainingLog,
};

fn setup(n_tasks: usize) -> (AugmentedDataset, PuzzleIdVocabulary, ModelConfig) {
    let spec = SynthSpec { n_tasks, max_side: 4, geometric: false, ..SynthSpec::default() };
    let train = synthetic_dataset(&spec, SplitLabel::Train, 77);
    let vocab = build_vocabulary(&[&train]).unwrap();
    let data = regime_records(&training_corpus(&train, None), Regime::Aug0, 0);
    let mc = ModelConfig::toy(vocab.size(), 4);
    (data, vocab, mc)
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig { total_steps: steps, batch_size: 2, log_every: 2, seed: 9, ..TrainConfig::default() }
}

#[test]
fn zero_steps_returns_the_initialization() {
    let (data, vocab, mc) = setup(3);
    let (ckpt, log) = trainer::train(&mc, cfg(0), &data, &vocab).unwrap();
    assert_eq!(ckpt.params, init_params::<f32>(&mc).unwrap());
    assert_eq!(ckpt.step, 0);
    assert!(log.entries.is_empty());
}

#[test]
fn identical_seeds_train_identically() {
    let (data, vocab, mc) = setup(3);
    let (a, la) = trainer::train(&mc, cfg(4), &data, &vocab).unwrap();
    let (b, lb) = trainer::train(&mc, cfg(4), &data, &vocab).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.velocity, b.velocity);
    let losses = |l: &TrainingLog| l.entries.iter().map(|e| (e.step, e.loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(losses(&la), losses(&lb));
    let (c, _) = trainer::train(&mc, TrainConfig { seed: 10, ..cfg(4) }, &data, &vocab).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn resuming_from_a_saved_checkpoint_continues_bit_for_bit() {
    let (data, vocab, mc) = setup(3);
    let (straight, _) = trainer::train(&mc, cfg(6), &data, &vocab).unwrap();
    let (half, _) = trainer::train(&mc, cfg(3), &data, &vocab).unwrap();
    let dir = tempfile::tempdir().unwrap();
    half.save(dir.path()).unwrap();
    let loaded = CheckpointRecord::load(dir.path()).unwrap();
    assert_eq!(loaded, half);
    let (resumed, log) = trainer::resume(loaded, &data, &vocab, 6).unwrap();
    assert_eq!(resumed.step, 6);
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.velocity, straight.velocity);
    assert_eq!(log.entries.iter().map(|e| e.step).collect::<Vec<_>>(), vec![4, 6]);
}

#[test]
fn training_log_is_monotone_and_finite() {
    let (data, vocab, mc) = setup(3);
    let (_, log) = trainer::train(&mc, TrainConfig { log_every: 1, ..cfg(5) }, &data, &vocab).unwrap();
    let steps: Vec<usize> = log.entries.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5]);
    assert!(log.entries.iter().all(|e| e.loss.is_finite() && e.loss >= 0.0));
    assert!(log.entries.windows(2).all(|w| w[0].elapsed_s <= w[1].elapsed_s));
    let csv = log.to_csv();
    assert!(csv.starts_with("step,loss,batch_accuracy,elapsed_s\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn non_finite_weights_abort_with_the_step_index() {
    let (data, vocab, mc) = setup(2);
    let (mut ckpt, _) = trainer::train(&mc, cfg(2), &data, &vocab).unwrap();
    ckpt.params.head[[0, 0]] = f32::NAN;
    let mut t = Trainer::from_checkpoint(ckpt, &data, &vocab).unwrap();
    match t.step() {
        Err(TrainError::NonFiniteLoss { step }) => assert_eq!(step, 3),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn blank_row_moves_only_when_the_blank_token_is_trained() {
    let (data, vocab, mc) = setup(5);
    let init = init_params::<f32>(&mc).unwrap();
    let (plain, _) = trainer::train(&mc, cfg(10), &data, &vocab).unwrap();
    assert_eq!(plain.params.id_embedding.row(0), init.id_embedding.row(0));
    assert_ne!(plain.params.id_embedding.row(1), init.id_embedding.row(1));

    let (mixed, _) =
        trainer::train(&mc, TrainConfig { blank_token_rate: 0.5, ..cfg(10) }, &data, &vocab).unwrap();
    assert_ne!(mixed.params.id_embedding.row(0), init.id_embedding.row(0));
}

#[test]
fn blank_and_true_ids_give_different_logits_after_training() {
    let (data, vocab, mc) = setup(5);
    let (ckpt, _) = trainer::train(&mc, cfg(10), &data, &vocab).unwrap();
    let rec = &data.records[0];
    let token = vocab.token(&rec.puzzle_key).unwrap();
    let with_id = model::forward_recursive(&ckpt.params, &rec.input, token, 2).unwrap();
    let blank = model::forward_recursive(&ckpt.params, &rec.input, PuzzleIdVocabulary::BLANK_TOKEN, 2).unwrap();
    assert_ne!(with_id.steps[1].logits, blank.steps[1].logits);
}

#[test]
fn invalid_configs_are_rejected() {
    let (data, vocab, mc) = setup(2);
    for bad in [
        TrainConfig { batch_size: 0, ..cfg(1) },
        TrainConfig { learning_rate: -1.0, ..cfg(1) },
        TrainConfig { blank_token_rate: 1.5, ..cfg(1) },
    ] {
        assert!(matches!(Trainer::new(&mc, bad, &data, &vocab), Err(TrainError::InvalidConfig(_))));
    }
    let wrong = ModelConfig::toy(vocab.size() + 1, 0);
    assert!(Trainer::new(&wrong, cfg(1), &data, &vocab).is_err());
}

#[test]
fn early_evaluation_with_an_equivariant_stub_has_equal_pass_rates() {
    let spec = SynthSpec { n_tasks: 4, geometric: false, ..SynthSpec::default() };
    let eval = synthetic_dataset(&spec, SplitLabel::Eval, 5);
    let vocab = build_vocabulary(&[&eval]).unwrap();
    let stub = common::CopyPredictor { vocab: vocab.size() };
    let early = trainer::evaluate_early(&stub, 4, &eval, &vocab, 8, 1).unwrap();
    assert_eq!(early.pass_at_1.correct, early.pass_at_k.correct);
    assert!(early.pass_at_k.correct >= early.pass_at_1.correct);
}
