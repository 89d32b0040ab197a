//! Browser bindings for the trm-lab demo page.
//!
//! Every operation takes and returns JSON strings. The plain functions are
//! usable natively; the `wasm_bindgen` wrappers turn errors into JS errors.

use serde::{Deserialize, Serialize};
use trm_lab::arc_data::Grid;
use trm_lab::augmentation::{self, CanvasGrid};
use trm_lab::ensemble::vote_grids;
use trm_lab::model::{forward_recursive, init_params, ModelConfig};
use wasm_bindgen::prelude::*;

/// Hard cap on recursion steps so a page click stays responsive.
pub const MAX_DEMO_STEPS: usize = 16;

fn parse_grid(rows: &[Vec<u8>]) -> Result<Grid, String> {
    Grid::from_rows(rows).map_err(|e| e.to_string())
}

fn parse<T: for<'de> Deserialize<'de>>(json: &str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("bad input: {e}"))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AugmentView {
    pub dihedral: u8,
    pub colors: Vec<u8>,
    pub dy: usize,
    pub dx: usize,
    /// Transformed grid before placement on the canvas.
    pub rows: Vec<Vec<u8>>,
    /// Result of mapping the transformed grid back to the original frame.
    pub restored: Vec<Vec<u8>>,
    pub round_trip_ok: bool,
}

/// Samples the augmentation for `seed`, applies it to `grid_json` (a list of
/// rows) and maps the result back.
pub fn augment_json(grid_json: &str, seed: u64) -> Result<String, String> {
    let grid = parse_grid(&parse::<Vec<Vec<u8>>>(grid_json)?)?;
    let aug = augmentation::sample(seed, (grid.height(), grid.width()));
    let placed = augmentation::apply(&aug, &CanvasGrid::at_origin(grid.clone())).map_err(|e| e.to_string())?;
    let inv = augmentation::invert(&aug);
    let restored = inv.dihedral.apply(&inv.color.apply(&placed.grid));
    to_json(&AugmentView {
        dihedral: aug.dihedral.code(),
        colors: aug.color.mapping().to_vec(),
        dy: placed.dy,
        dx: placed.dx,
        rows: placed.grid.rows(),
        round_trip_ok: restored == grid,
        restored: restored.rows(),
    })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct VoteView {
    pub winner: Vec<Vec<u8>>,
    pub margin: usize,
    pub total: usize,
    /// Distinct candidates with their counts, most votes first.
    pub counts: Vec<(Vec<Vec<u8>>, usize)>,
}

/// Majority vote over a JSON list of grids.
pub fn vote_json(grids_json: &str) -> Result<String, String> {
    let grids = parse::<Vec<Vec<Vec<u8>>>>(grids_json)?
        .iter()
        .map(|g| parse_grid(g))
        .collect::<Result<Vec<_>, _>>()?;
    let tally = vote_grids(&grids).map_err(|e| e.to_string())?;
    let mut counts: Vec<_> = tally.counts.iter().map(|(g, &c)| (g.rows(), c)).collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1));
    to_json(&VoteView { winner: tally.winner.rows(), margin: tally.margin, total: tally.total(), counts })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryView {
    /// Decoded grid after each recursion step.
    pub steps: Vec<Vec<Vec<u8>>>,
    /// Cells that changed relative to the previous step.
    pub changed: Vec<usize>,
}

/// Runs an untrained toy model with weights from `seed` on `grid_json` and
/// decodes every recursion step.
pub fn trajectory_json(grid_json: &str, steps: usize, seed: u64) -> Result<String, String> {
    if steps == 0 || steps > MAX_DEMO_STEPS {
        return Err(format!("steps must be in 1..={MAX_DEMO_STEPS}"));
    }
    let grid = parse_grid(&parse::<Vec<Vec<u8>>>(grid_json)?)?;
    let params = init_params::<f32>(&ModelConfig::toy(1, seed)).map_err(|e| e.to_string())?;
    let trace = forward_recursive(&params, &CanvasGrid::at_origin(grid), 0, steps).map_err(|e| e.to_string())?;
    let decoded = trace.decoded();
    let changed = decoded
        .iter()
        .enumerate()
        .map(|(i, g)| match i.checked_sub(1).map(|j| &decoded[j]) {
            Some(prev) if prev.height() == g.height() && prev.width() == g.width() => {
                prev.cells().iter().zip(g.cells()).filter(|(a, b)| a != b).count()
            }
            Some(_) | None => g.cells().len(),
        })
        .collect();
    to_json(&TrajectoryView { steps: decoded.iter().map(Grid::rows).collect(), changed })
}

#[wasm_bindgen]
pub fn augment(grid_json: &str, seed: u32) -> Result<String, JsError> {
    augment_json(grid_json, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn vote(grids_json: &str) -> Result<String, JsError> {
    vote_json(grids_json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn trajectory(grid_json: &str, steps: u32, seed: u32) -> Result<String, JsError> {
    trajectory_json(grid_json, steps as usize, seed as u64).map_err(|e| JsError::new(&e))
}
