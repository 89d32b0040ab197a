//! The tiny recursive grid model: parameters, recursive forward pass with
//! per-step decoding, the deep-supervision objective and its gradient.

mod config;
mod layer;
mod params;
mod recursion;
pub mod weights;

use thiserror::Error;

pub use config::{ModelConfig, CELL_VOCAB, VOID_CLASS};
pub use params::{init_params, LayerParams, Parameters};
pub use recursion::{
    backward, canvas_classes, decode_canvas, decode_steps_batch, deep_supervision_loss, detached_objective,
    entry_states, forward_recursive, forward_workspace_bytes, recursion_step, BatchGradient, Example, LatentState,
    StepTrace, TraceStep,
};

use crate::arc_data::Grid;
use crate::augmentation::CanvasGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("id token {token} outside the id vocabulary of size {vocab}")]
    UnknownIdToken { token: usize, vocab: usize },
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("empty batch or zero steps")]
    EmptyBatch,
    #[error("weight file: {0}")]
    WeightFormat(String),
    #[error("io: {0}")]
    Io(String),
}

/// Anything that maps an input canvas and puzzle id to one decoded grid per
/// recursion step. The model implements it; tests plug in stubs.
pub trait GridPredictor: Sync {
    /// Decoded top-left canvas grids for steps `1..=steps`.
    fn predict_steps(&self, input: &CanvasGrid, id_token: usize, steps: usize) -> Result<Vec<Grid>, ModelError>;

    /// Rows in the puzzle id table.
    fn id_vocab_size(&self) -> usize;
}

impl<F: ndarray::NdFloat> GridPredictor for Parameters<F> {
    fn predict_steps(&self, input: &CanvasGrid, id_token: usize, steps: usize) -> Result<Vec<Grid>, ModelError> {
        let mut out = decode_steps_batch(self, &[(input, id_token)], steps)?;
        Ok(out.pop().expect("one input"))
    }

    fn id_vocab_size(&self) -> usize {
        self.config.id_vocab_size
    }
}

#[cfg(test)]
mod tests;
