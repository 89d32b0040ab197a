use ndarray::{Array2, Axis};

use super::*;
use crate::arc_data::{Grid, CANVAS_CELLS, CANVAS_SIDE};
use crate::augmentation::CanvasGrid;

fn grid(h: usize, w: usize, cells: &[u8]) -> Grid {
    Grid::new(h, w, cells.to_vec()).unwrap()
}

fn small_cfg() -> ModelConfig {
    ModelConfig { d_model: 8, trunk_layers: 1, ffn_mult: 2, n_cycles: 2, id_vocab_size: 3, seed: 5 }
}

fn one_hot_logits(classes: &[usize], magnitude: f64) -> Array2<f64> {
    let mut l = Array2::from_elem((CANVAS_CELLS, CELL_VOCAB), -magnitude);
    for (i, &k) in classes.iter().enumerate() {
        l[[i, k]] = magnitude;
    }
    l
}

#[test]
fn init_is_deterministic_and_counts_match() {
    let cfg = ModelConfig { d_model: 64, trunk_layers: 2, ffn_mult: 4, n_cycles: 4, id_vocab_size: 1201, seed: 3 };
    let a = init_params::<f32>(&cfg).unwrap();
    let b = init_params::<f32>(&cfg).unwrap();
    assert_eq!(a, b);
    // Shape sum: embeddings (11 + 900 + 1201) * 64, per layer two 30x30
    // mixers + 64x256 + 256 + 256x64 + 64 + two 64-gains, head 64x11.
    let expected = (11 + 900 + 1201) * 64 + 2 * (1800 + 64 * 256 + 256 + 256 * 64 + 64 + 128) + 64 * 11;
    assert_eq!(cfg.param_count(), expected);
    assert_eq!(a.count(), expected);
    assert!(a.layers.iter().all(|l| l.mix_norm_gain.iter().all(|&g| g == 1.0)));
}

#[test]
fn paper_scale_is_near_seven_million() {
    let n = ModelConfig::paper_scale(0).param_count() as f64;
    assert!((n - 7.0e6).abs() / 7.0e6 < 0.05, "{n}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small_cfg();
    cfg.n_cycles = 0;
    assert!(matches!(init_params::<f32>(&cfg), Err(ModelError::InvalidConfig(_))));
    cfg = small_cfg();
    cfg.d_model = 4;
    assert!(init_params::<f32>(&cfg).is_err());
}

#[test]
fn trace_length_and_prefix() {
    let p = init_params::<f32>(&small_cfg()).unwrap();
    let input = CanvasGrid::at_origin(grid(2, 3, &[1, 2, 3, 4, 5, 6]));
    assert_eq!(forward_recursive(&p, &input, 1, 1).unwrap().len(), 1);
    let six = forward_recursive(&p, &input, 1, 6).unwrap();
    let four = forward_recursive(&p, &input, 1, 4).unwrap();
    assert_eq!(&six.steps[..4], &four.steps[..]);
    assert_eq!(
        p.predict_steps(&input, 1, 6).unwrap(),
        six.decoded(),
        "batched decode path agrees with the full trace"
    );
}

#[test]
fn unknown_token_is_rejected() {
    let p = init_params::<f32>(&small_cfg()).unwrap();
    let input = CanvasGrid::at_origin(grid(1, 1, &[0]));
    assert_eq!(
        forward_recursive(&p, &input, 3, 1).unwrap_err(),
        ModelError::UnknownIdToken { token: 3, vocab: 3 }
    );
}

#[test]
fn decode_one_hot_two_by_two() {
    let target = CanvasGrid::at_origin(grid(2, 2, &[1, 2, 3, 4]));
    let logits = one_hot_logits(&canvas_classes(&target), 5.0);
    assert_eq!(decode_canvas(logits.view()), target.grid);
}

#[test]
fn decode_all_void_is_single_black_cell() {
    let logits = one_hot_logits(&[VOID_CLASS; CANVAS_CELLS], 1.0);
    assert_eq!(decode_canvas(logits.view()), grid(1, 1, &[0]));
}

#[test]
fn decode_interior_void_becomes_black() {
    let mut classes = vec![VOID_CLASS; CANVAS_CELLS];
    classes[0] = 3;
    classes[2 * CANVAS_SIDE + 4] = 7;
    classes[CANVAS_SIDE + 1] = 5;
    let logits = one_hot_logits(&classes, 2.0);
    // Bounding-box oracle: rows 0..=2, cols 0..=4, VOID -> 0.
    let mut expected = vec![0u8; 3 * 5];
    expected[0] = 3;
    expected[5 + 1] = 5;
    expected[2 * 5 + 4] = 7;
    assert_eq!(decode_canvas(logits.view()), grid(3, 5, &expected));
}

fn trace_from_logits(per_step: Vec<Array2<f64>>) -> StepTrace<f64> {
    let zeros = Array2::zeros((CANVAS_CELLS, 8));
    StepTrace {
        steps: per_step
            .into_iter()
            .map(|logits| TraceStep { state: LatentState { y: zeros.clone(), z: zeros.clone() }, logits })
            .collect(),
    }
}

#[test]
fn loss_of_confident_one_hot_is_tiny() {
    let target = CanvasGrid::at_origin(grid(2, 2, &[1, 2, 3, 4]));
    let logits = one_hot_logits(&canvas_classes(&target), 20.0);
    let trace = trace_from_logits(vec![logits.clone(), logits]);
    let loss = deep_supervision_loss(&trace, &target);
    // Each cell: ln(1 + 10 e^-40).
    let analytic = (10.0f64 * (-40.0f64).exp()).ln_1p();
    assert!((loss - analytic).abs() < 1e-15);
    assert!(loss < 1e-6);
}

#[test]
fn uniform_logits_give_ln_eleven() {
    let target = CanvasGrid::at_origin(grid(3, 1, &[0, 9, 4]));
    let trace = trace_from_logits(vec![Array2::zeros((CANVAS_CELLS, CELL_VOCAB))]);
    let loss = deep_supervision_loss(&trace, &target);
    assert!((loss - 11f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_is_mean_over_steps() {
    let target = CanvasGrid::at_origin(grid(1, 1, &[2]));
    let a = one_hot_logits(&canvas_classes(&target), 1.0);
    let b = Array2::zeros((CANVAS_CELLS, CELL_VOCAB));
    let l1 = deep_supervision_loss(&trace_from_logits(vec![a.clone()]), &target);
    let l2 = deep_supervision_loss(&trace_from_logits(vec![b.clone()]), &target);
    let both = deep_supervision_loss(&trace_from_logits(vec![a, b]), &target);
    assert!((both - (l1 + l2) / 2.0).abs() < 1e-14);
}

#[test]
fn zero_head_gradient_matches_softmax_closed_form() {
    let cfg = small_cfg();
    let mut p = init_params::<f64>(&cfg).unwrap();
    p.head.fill(0.0);
    let input = CanvasGrid::at_origin(grid(2, 2, &[1, 0, 0, 1]));
    let target = CanvasGrid::at_origin(grid(2, 2, &[2, 2, 2, 2]));
    let steps = cfg.n_cycles;
    let g = backward(&p, &[Example { input: &input, id_token: 1, target: &target }], steps).unwrap();

    // Zero head means uniform softmax: dL/dhead = sum_t y_t^T (1/11 - onehot) / (900 T).
    let trace = forward_recursive(&p, &input, 1, steps).unwrap();
    let classes = canvas_classes(&target);
    let mut expected = Array2::<f64>::zeros((cfg.d_model, CELL_VOCAB));
    for step in &trace.steps {
        for (i, y_row) in step.state.y.axis_iter(Axis(0)).enumerate() {
            for k in 0..CELL_VOCAB {
                let resid = 1.0 / 11.0 - if classes[i] == k { 1.0 } else { 0.0 };
                for (j, &y) in y_row.iter().enumerate() {
                    expected[[j, k]] += y * resid / (CANVAS_CELLS * steps) as f64;
                }
            }
        }
    }
    let err = (&g.grads.head - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(err < 1e-12, "{err}");
    assert!((g.loss - 11f64.ln()).abs() < 1e-12);
}

#[test]
fn duplicated_example_gives_single_gradient() {
    let p = init_params::<f64>(&small_cfg()).unwrap();
    let input = CanvasGrid::at_origin(grid(2, 1, &[3, 4]));
    let target = CanvasGrid::at_origin(grid(1, 2, &[4, 3]));
    let ex = Example { input: &input, id_token: 2, target: &target };
    let single = backward(&p, &[ex], 2).unwrap();
    let double = backward(&p, &[ex, ex], 2).unwrap();
    for ((name, _, a), (_, _, b)) in single.grads.tensors().into_iter().zip(double.grads.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{name}: {x} vs {y}");
        }
    }
    assert!((single.loss - double.loss).abs() < 1e-12);
}

#[test]
fn blank_row_gets_gradient_only_when_used() {
    let p = init_params::<f64>(&small_cfg()).unwrap();
    let input = CanvasGrid::at_origin(grid(1, 1, &[1]));
    let target = input.clone();
    let with_real = backward(&p, &[Example { input: &input, id_token: 1, target: &target }], 1).unwrap();
    assert!(with_real.grads.id_embedding.row(0).iter().all(|&v| v == 0.0));
    let with_blank = backward(&p, &[Example { input: &input, id_token: 0, target: &target }], 1).unwrap();
    assert!(with_blank.grads.id_embedding.row(0).iter().any(|&v| v != 0.0));
}

#[test]
fn weights_round_trip_bit_exact() {
    let p = init_params::<f32>(&small_cfg()).unwrap();
    let bytes = weights::encode(&p);
    let back = weights::decode(&bytes).unwrap();
    assert_eq!(back, p);
    assert_eq!(weights::encode(&back), bytes);
    assert!(bytes.starts_with(b"TRMLAB-WEIGHTS 1\nd_model=8\n"));

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 3);
    assert!(matches!(weights::decode(&truncated), Err(ModelError::WeightFormat(_))));
}

#[test]
fn detached_objective_matches_reported_loss() {
    let p = init_params::<f64>(&small_cfg()).unwrap();
    let input = CanvasGrid::at_origin(grid(2, 2, &[1, 2, 3, 4]));
    let target = CanvasGrid::at_origin(grid(2, 2, &[4, 3, 2, 1]));
    let ex = Example { input: &input, id_token: 1, target: &target };
    let frozen = entry_states(&p, &input, 1, 3).unwrap();
    let obj = detached_objective(&p, &ex, &frozen).unwrap();
    let g = backward(&p, &[ex], 3).unwrap();
    assert!((obj - g.loss).abs() < 1e-12);
    let trace = forward_recursive(&p, &input, 1, 3).unwrap();
    assert!((deep_supervision_loss(&trace, &target) - obj).abs() < 1e-12);
}
