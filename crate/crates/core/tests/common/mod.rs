//! Oracles shared by the integration suites. Nothing here calls the code
//! path it checks.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use trm_lab::arc_data::{build_vocabulary, Dataset, Grid, PuzzleIdVocabulary, SplitLabel};
use trm_lab::augmentation::CanvasGrid;
use trm_lab::model::{
    backward, detached_objective, entry_states, init_params, Example, GridPredictor, LatentState, ModelConfig,
    ModelError, Parameters,
};
use trm_lab::synthetic::{synthetic_dataset, SynthSpec};

pub fn grid(h: usize, w: usize, cells: &[u8]) -> Grid {
    Grid::new(h, w, cells.to_vec()).unwrap()
}

/// Worst per-tensor relative error between analytic gradients and central
/// finite differences of the detached objective. `entries_per_tensor` entries
/// are checked per tensor: the largest-magnitude analytic entry plus an even
/// stride through the rest.
pub fn gradient_check(
    params: &Parameters<f64>,
    examples: &[(CanvasGrid, usize, CanvasGrid)],
    steps: usize,
    h: f64,
    entries_per_tensor: usize,
) -> Vec<(String, f64)> {
    let batch: Vec<Example<'_>> = examples
        .iter()
        .map(|(i, t, o)| Example { input: i, id_token: *t, target: o })
        .collect();
    let analytic = backward(params, &batch, steps).unwrap().grads;
    let frozen: Vec<Vec<LatentState<f64>>> =
        examples.iter().map(|(i, t, _)| entry_states(params, i, *t, steps).unwrap()).collect();
    let objective = |p: &Parameters<f64>| -> f64 {
        batch
            .iter()
            .zip(&frozen)
            .map(|(ex, fr)| detached_objective(p, ex, fr).unwrap())
            .sum::<f64>()
            / batch.len() as f64
    };

    let mut report = Vec::new();
    let tensors = analytic.tensors();
    for (t_idx, (name, _, g)) in tensors.iter().enumerate() {
        let argmax = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let stride = (g.len() / entries_per_tensor).max(1);
        let mut picks: Vec<usize> = (0..g.len()).step_by(stride).take(entries_per_tensor).collect();
        picks.push(argmax);
        let mut worst = 0.0f64;
        for idx in picks {
            let mut plus = params.clone();
            plus.tensors_mut()[t_idx].1[idx] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t_idx].1[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = g[idx];
            let denom = a.abs().max(fd.abs()).max(1e-7);
            worst = worst.max((a - fd).abs() / denom);
        }
        report.push((name.clone(), worst));
    }
    report
}

/// Reads the placed input straight back off the canvas at every depth:
/// commutes with every augmentation, so all variants agree after mapping back.
pub struct CopyPredictor {
    pub vocab: usize,
}

pub fn canvas_readout(input: &CanvasGrid) -> Grid {
    let (h, w) = (input.dy + input.grid.height(), input.dx + input.grid.width());
    let cells = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| input.color_at(r, c).unwrap_or(0));
    Grid::new(h, w, cells.collect()).unwrap()
}

impl GridPredictor for CopyPredictor {
    fn predict_steps(&self, input: &CanvasGrid, _id_token: usize, steps: usize) -> Result<Vec<Grid>, ModelError> {
        Ok(vec![canvas_readout(input); steps])
    }

    fn id_vocab_size(&self) -> usize {
        self.vocab
    }
}

/// Copies the input but adds one to every color in the augmented frame, so
/// variants with different color permutations disagree once mapped back.
pub struct ShiftPredictor {
    pub vocab: usize,
}

impl GridPredictor for ShiftPredictor {
    fn predict_steps(&self, input: &CanvasGrid, _id_token: usize, steps: usize) -> Result<Vec<Grid>, ModelError> {
        let g = canvas_readout(input);
        let cells = g.cells().iter().map(|&c| (c + 1) % 10).collect();
        Ok(vec![Grid::new(g.height(), g.width(), cells).unwrap(); steps])
    }

    fn id_vocab_size(&self) -> usize {
        self.vocab
    }
}

/// Wraps a predictor and records every call's requested depth.
pub struct Counting<P> {
    pub inner: P,
    pub calls: AtomicUsize,
    pub max_steps: AtomicUsize,
}

impl<P> Counting<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: AtomicUsize::new(0), max_steps: AtomicUsize::new(0) }
    }
}

impl<P: GridPredictor> GridPredictor for Counting<P> {
    fn predict_steps(&self, input: &CanvasGrid, id_token: usize, steps: usize) -> Result<Vec<Grid>, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.max_steps.fetch_max(steps, Ordering::SeqCst);
        self.inner.predict_steps(input, id_token, steps)
    }

    fn id_vocab_size(&self) -> usize {
        self.inner.id_vocab_size()
    }
}

/// Small evaluation corpus: `n` seeded tasks with two test inputs each.
pub fn small_eval_set(n: usize, seed: u64) -> (Dataset, PuzzleIdVocabulary) {
    let spec = SynthSpec { n_tasks: n, tests: 2, ..SynthSpec::default() };
    let ds = synthetic_dataset(&spec, SplitLabel::Eval, seed);
    let vocab = build_vocabulary(&[&ds]).unwrap();
    (ds, vocab)
}

pub fn toy_model(vocab: &PuzzleIdVocabulary, seed: u64) -> Parameters<f32> {
    init_params(&ModelConfig::toy(vocab.size(), seed)).unwrap()
}
