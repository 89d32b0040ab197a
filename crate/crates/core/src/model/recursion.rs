//! Recursive forward pass, decoding and the deep-supervision objective.
//!
//! Each recursion step updates the reasoning state and then the answer state
//! with the same shared trunk:
//!
//! ```text
//! z <- trunk(x + y + z)
//! y <- trunk(y + z)
//! logits = y * head
//! ```
//!
//! Training detaches `(y, z)` at every step boundary, so each supervised step
//! backpropagates only through its own two trunk applications.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, NdFloat};

use super::config::{CELL_VOCAB, VOID_CLASS};
use super::layer::{self, LayerCache};
use super::params::{cast, Parameters};
use super::ModelError;
use crate::arc_data::{Grid, CANVAS_CELLS, CANVAS_SIDE};
use crate::augmentation::CanvasGrid;

/// Answer state `y` and reasoning state `z`, each `[900, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<F> {
    pub y: Array2<F>,
    pub z: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<F> {
    pub state: LatentState<F>,
    /// `[900, 11]` canvas logits decoded from `y`.
    pub logits: Array2<F>,
}

/// Per-step model state for one input; entry `t - 1` holds recursion step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace<F> {
    pub steps: Vec<TraceStep<F>>,
}

impl<F: NdFloat> StepTrace<F> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn decoded(&self) -> Vec<Grid> {
        self.steps.iter().map(|s| decode_canvas(s.logits.view())).collect()
    }
}

/// Canvas classes: the color inside the placed grid, VOID elsewhere.
pub fn canvas_classes(g: &CanvasGrid) -> Vec<usize> {
    (0..CANVAS_CELLS)
        .map(|i| g.color_at(i / CANVAS_SIDE, i % CANVAS_SIDE).map_or(VOID_CLASS, usize::from))
        .collect()
}

fn check_token<F>(p: &Parameters<F>, id_token: usize) -> Result<(), ModelError> {
    if id_token >= p.config.id_vocab_size {
        return Err(ModelError::UnknownIdToken { token: id_token, vocab: p.config.id_vocab_size });
    }
    Ok(())
}

/// Input embedding for a batch: cell + position + broadcast puzzle id.
fn embed<F: NdFloat>(p: &Parameters<F>, inputs: &[(&CanvasGrid, usize)]) -> Result<Array2<F>, ModelError> {
    let d = p.config.d_model;
    let mut x = Array2::zeros((inputs.len() * CANVAS_CELLS, d));
    for (b, &(grid, id_token)) in inputs.iter().enumerate() {
        check_token(p, id_token)?;
        let id_row = p.id_embedding.row(id_token);
        let mut block = x.slice_mut(s![b * CANVAS_CELLS..(b + 1) * CANVAS_CELLS, ..]);
        for (pos, (mut row, class)) in block.rows_mut().into_iter().zip(canvas_classes(grid)).enumerate() {
            row += &p.cell_embedding.row(class);
            row += &p.position_embedding.row(pos);
            row += &id_row;
        }
    }
    Ok(x)
}

fn trunk<F: NdFloat>(p: &Parameters<F>, input: Array2<F>) -> Array2<F> {
    p.layers.iter().fold(input, |h, l| layer::forward(l, h))
}

fn trunk_cached<F: NdFloat>(p: &Parameters<F>, input: Array2<F>) -> (Array2<F>, Vec<LayerCache<F>>) {
    let mut caches = Vec::with_capacity(p.layers.len());
    let mut h = input;
    for l in &p.layers {
        let (out, cache) = layer::forward_cached(l, h);
        caches.push(cache);
        h = out;
    }
    (h, caches)
}

fn trunk_backward<F: NdFloat>(
    p: &Parameters<F>,
    caches: &[LayerCache<F>],
    dout: Array2<F>,
    grad: &mut Parameters<F>,
) -> Array2<F> {
    p.layers
        .iter()
        .zip(caches)
        .zip(grad.layers.iter_mut())
        .rev()
        .fold(dout, |d, ((l, c), g)| layer::backward(l, c, &d, g))
}

/// One recursion step from a given latent state. Pure in its arguments; this
/// is also the unit the detached training objective is built from.
pub fn recursion_step<F: NdFloat>(
    p: &Parameters<F>,
    x: &Array2<F>,
    state: &LatentState<F>,
) -> (LatentState<F>, Array2<F>) {
    let z = trunk(p, x + &state.y + &state.z);
    let y = trunk(p, &state.y + &z);
    let logits = y.dot(&p.head);
    (LatentState { y, z }, logits)
}

fn initial_state<F: NdFloat>(rows: usize, d: usize) -> LatentState<F> {
    LatentState { y: Array2::zeros((rows, d)), z: Array2::zeros((rows, d)) }
}

/// Runs `steps` recursion steps on one input and records every step.
pub fn forward_recursive<F: NdFloat>(
    p: &Parameters<F>,
    input: &CanvasGrid,
    id_token: usize,
    steps: usize,
) -> Result<StepTrace<F>, ModelError> {
    let x = embed(p, &[(input, id_token)])?;
    let mut state = initial_state(CANVAS_CELLS, p.config.d_model);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, logits) = recursion_step(p, &x, &state);
        trace.push(TraceStep { state: next.clone(), logits });
        state = next;
    }
    Ok(StepTrace { steps: trace })
}

/// Decoded grids per step for a batch of inputs, without keeping latent
/// snapshots. Result is `[input][step]`.
pub fn decode_steps_batch<F: NdFloat>(
    p: &Parameters<F>,
    inputs: &[(&CanvasGrid, usize)],
    steps: usize,
) -> Result<Vec<Vec<Grid>>, ModelError> {
    let x = embed(p, inputs)?;
    let mut state = initial_state(x.nrows(), p.config.d_model);
    let mut out = vec![Vec::with_capacity(steps); inputs.len()];
    for _ in 0..steps {
        let (next, logits) = recursion_step(p, &x, &state);
        for (b, block) in logits.axis_chunks_iter(Axis(0), CANVAS_CELLS).enumerate() {
            out[b].push(decode_canvas(block));
        }
        state = next;
    }
    Ok(out)
}

/// Transient bytes one batched forward pass holds at its peak.
pub fn forward_workspace_bytes<F>(d_model: usize, hidden: usize, batch: usize) -> usize {
    let rows = batch * CANVAS_CELLS;
    let per = std::mem::size_of::<F>();
    // x, y, z, next y/z, trunk input, one layer's intermediates, logits
    rows * (6 * d_model + 2 * hidden + CELL_VOCAB) * per + layer::cache_bytes::<F>(rows, d_model, hidden) / 4
}

fn argmax_row<F: NdFloat>(row: ndarray::ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-cell argmax, cropped to the top-left bounding box of non-VOID cells.
/// VOID cells inside the box decode as color 0; an all-VOID canvas decodes to
/// a single color-0 cell.
pub fn decode_canvas<F: NdFloat>(logits: ArrayView2<'_, F>) -> Grid {
    let classes: Vec<usize> = logits.rows().into_iter().map(argmax_row).collect();
    let mut last_row = None;
    let mut last_col = None;
    for (i, &k) in classes.iter().enumerate() {
        if k != VOID_CLASS {
            let (r, c) = (i / CANVAS_SIDE, i % CANVAS_SIDE);
            last_row = Some(last_row.map_or(r, |v: usize| v.max(r)));
            last_col = Some(last_col.map_or(c, |v: usize| v.max(c)));
        }
    }
    let (Some(r), Some(c)) = (last_row, last_col) else {
        return Grid::filled(1, 1, 0).expect("1x1 grid");
    };
    let cells = (0..=r)
        .flat_map(|row| (0..=c).map(move |col| row * CANVAS_SIDE + col))
        .map(|i| if classes[i] == VOID_CLASS { 0 } else { classes[i] as u8 })
        .collect();
    Grid::new(r + 1, c + 1, cells).expect("bounding box within canvas")
}

/// Mean per-cell cross-entropy for one `[900, 11]` logit block, and
/// optionally its gradient scaled by `grad_scale`.
fn cell_cross_entropy<F: NdFloat>(
    logits: ArrayView2<'_, F>,
    targets: &[usize],
    grad_scale: Option<F>,
) -> (F, Option<Array2<F>>) {
    let n: F = cast(targets.len() as f64);
    let mut total = F::zero();
    let mut grad = grad_scale.map(|_| Array2::zeros(logits.raw_dim()));
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets).enumerate() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp());
        let lse = max + sum.ln();
        total += lse - row[t];
        if let (Some(g), Some(scale)) = (grad.as_mut(), grad_scale) {
            for (k, &v) in row.iter().enumerate() {
                let prob = (v - lse).exp();
                let onehot = if k == t { F::one() } else { F::zero() };
                g[[i, k]] = (prob - onehot) * scale / n;
            }
        }
    }
    (total / n, grad)
}

/// Mean over steps of the mean per-cell cross-entropy against `target`
/// rendered on the canvas (VOID outside the grid).
pub fn deep_supervision_loss<F: NdFloat>(trace: &StepTrace<F>, target: &CanvasGrid) -> F {
    let targets = canvas_classes(target);
    let steps: F = cast(trace.len().max(1) as f64);
    trace
        .steps
        .iter()
        .map(|s| cell_cross_entropy(s.logits.view(), &targets, None).0)
        .fold(F::zero(), |a, b| a + b)
        / steps
}

/// One supervised example: input canvas, puzzle id token and target canvas.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub input: &'a CanvasGrid,
    pub id_token: usize,
    pub target: &'a CanvasGrid,
}

#[derive(Debug, Clone)]
pub struct BatchGradient<F> {
    pub grads: Parameters<F>,
    /// Mean deep-supervision loss over the batch.
    pub loss: F,
    /// Decoded grid at the final step for each example.
    pub final_predictions: Vec<Grid>,
}

/// Gradient of the batch-mean deep-supervision loss with the latent state
/// detached between steps.
pub fn backward<F: NdFloat>(
    p: &Parameters<F>,
    batch: &[Example<'_>],
    steps: usize,
) -> Result<BatchGradient<F>, ModelError> {
    if batch.is_empty() || steps == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let inputs: Vec<(&CanvasGrid, usize)> = batch.iter().map(|e| (e.input, e.id_token)).collect();
    let x = embed(p, &inputs)?;
    let targets: Vec<Vec<usize>> = batch.iter().map(|e| canvas_classes(e.target)).collect();
    let mut grads = Parameters::zeros(&p.config);
    let mut state = initial_state(x.nrows(), p.config.d_model);
    let scale: F = cast(1.0 / (steps as f64 * batch.len() as f64));
    let mut loss = F::zero();
    let mut dx_total: Array2<F> = Array2::zeros(x.raw_dim());
    let mut final_predictions = Vec::new();

    for t in 0..steps {
        let (z, z_caches) = trunk_cached(p, &x + &state.y + &state.z);
        let (y, y_caches) = trunk_cached(p, &state.y + &z);
        let logits = y.dot(&p.head);

        let mut dlogits = Array2::zeros(logits.raw_dim());
        for (b, target) in targets.iter().enumerate() {
            let rows = s![b * CANVAS_CELLS..(b + 1) * CANVAS_CELLS, ..];
            let (l, g) = cell_cross_entropy(logits.slice(rows), target, Some(scale));
            loss += l * scale;
            dlogits.slice_mut(rows).assign(&g.expect("gradient requested"));
            if t + 1 == steps {
                final_predictions.push(decode_canvas(logits.slice(rows)));
            }
        }

        general_mat_mul(F::one(), &y.t(), &dlogits, F::one(), &mut grads.head);
        let dy = dlogits.dot(&p.head.t());
        // y = trunk(y_prev + z); y_prev is detached.
        let dz = trunk_backward(p, &y_caches, dy, &mut grads);
        // z = trunk(x + y_prev + z_prev); only x carries gradient.
        let dx = trunk_backward(p, &z_caches, dz, &mut grads);
        dx_total += &dx;
        state = LatentState { y, z };
    }

    for (b, &(grid, id_token)) in inputs.iter().enumerate() {
        let block = dx_total.slice(s![b * CANVAS_CELLS..(b + 1) * CANVAS_CELLS, ..]);
        let mut id_row = grads.id_embedding.row_mut(id_token);
        for (pos, (row, class)) in block.rows().into_iter().zip(canvas_classes(grid)).enumerate() {
            let mut cell = grads.cell_embedding.row_mut(class);
            cell += &row;
            let mut position = grads.position_embedding.row_mut(pos);
            position += &row;
            id_row += &row;
        }
    }

    if let Some(name) = grads.first_non_finite() {
        return Err(ModelError::NonFiniteGradient(name));
    }
    Ok(BatchGradient { grads, loss, final_predictions })
}

/// The detached deep-supervision objective evaluated at `p` with the latent
/// trajectory frozen to `frozen` (states entering each step). Its exact
/// gradient in `p` is what [`backward`] computes; finite differences of this
/// function are the independent check.
pub fn detached_objective<F: NdFloat>(
    p: &Parameters<F>,
    example: &Example<'_>,
    frozen: &[LatentState<F>],
) -> Result<F, ModelError> {
    let x = embed(p, &[(example.input, example.id_token)])?;
    let targets = canvas_classes(example.target);
    let steps: F = cast(frozen.len() as f64);
    let mut total = F::zero();
    for state in frozen {
        let (_, logits) = recursion_step(p, &x, state);
        total += cell_cross_entropy(logits.view(), &targets, None).0;
    }
    Ok(total / steps)
}

/// States entering each of the first `steps` recursion steps.
pub fn entry_states<F: NdFloat>(
    p: &Parameters<F>,
    input: &CanvasGrid,
    id_token: usize,
    steps: usize,
) -> Result<Vec<LatentState<F>>, ModelError> {
    let trace = forward_recursive(p, input, id_token, steps)?;
    let mut states = vec![initial_state(CANVAS_CELLS, p.config.d_model)];
    states.extend(trace.steps.into_iter().take(steps.saturating_sub(1)).map(|s| s.state));
    Ok(states)
}
