use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::arc_data::{CANVAS_CELLS, CANVAS_SIDE};

/// Output classes per canvas cell: ten colors plus VOID.
pub const CELL_VOCAB: usize = 11;
/// Class index marking canvas cells outside the grid.
pub const VOID_CLASS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub trunk_layers: usize,
    /// Channel-transform hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Training recursion depth T.
    pub n_cycles: usize,
    pub id_vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration used for smoke tests and the toy checkpoint.
    pub fn toy(id_vocab_size: usize, seed: u64) -> Self {
        Self { d_model: 16, trunk_layers: 2, ffn_mult: 4, n_cycles: 4, id_vocab_size, seed }
    }

    /// Sized to roughly seven million parameters with 800 training plus 400
    /// evaluation puzzle ids.
    pub fn paper_scale(seed: u64) -> Self {
        Self { d_model: 496, trunk_layers: 3, ffn_mult: 4, n_cycles: 4, id_vocab_size: 1201, seed }
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model < 8 {
            return bad("d_model must be at least 8");
        }
        if self.n_cycles < 1 {
            return bad("n_cycles must be at least 1");
        }
        if self.trunk_layers < 1 {
            return bad("trunk_layers must be at least 1");
        }
        if self.ffn_mult < 1 {
            return bad("ffn_mult must be at least 1");
        }
        if self.id_vocab_size < 1 {
            return bad("id_vocab_size must be at least 1 (the blank row)");
        }
        Ok(())
    }

    /// Parameter count from the declared tensor shapes.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let h = self.hidden();
        let embeddings = (CELL_VOCAB + CANVAS_CELLS + self.id_vocab_size) * d;
        let mixing = 2 * CANVAS_SIDE * CANVAS_SIDE;
        let channel = d * h + h + h * d + d;
        let gains = 2 * d;
        embeddings + self.trunk_layers * (mixing + channel + gains) + d * CELL_VOCAB
    }
}
