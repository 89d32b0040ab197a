//! Inference throughput, latency and peak workspace measurement.
//!
//! Peak workspace comes from [`TrackingAllocator`] when the running binary
//! installs it as its global allocator, and from the analytic estimate in
//! [`forward_workspace_bytes`] otherwise. Reports say which one they used.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc_data::{Dataset, Grid};
use crate::augmentation::{self, Augmentation, CanvasGrid};
use crate::ensemble::{self, EnsembleError};
use crate::model::{self, forward_workspace_bytes, ModelError, Parameters};

pub const MIN_SAMPLES: usize = 100;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

/// Counting wrapper around the system allocator.
///
/// ```ignore
/// #[global_allocator]
/// static ALLOC: trm_lab::profiler::TrackingAllocator = trm_lab::profiler::TrackingAllocator;
/// ```
pub struct TrackingAllocator;

fn grew(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
    if !ACTIVE.load(Ordering::Relaxed) {
        ACTIVE.store(true, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            grew(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            grew(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            grew(new_size);
        }
        p
    }
}

/// Whether [`TrackingAllocator`] is serving this process.
pub fn tracking_active() -> bool {
    ACTIVE.load(Ordering::Relaxed)
}

/// Resets the high-water mark to the live byte count and returns it.
pub fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("n_samples must be at least {MIN_SAMPLES}, got {0}")]
    TooFewSamples(usize),
    #[error("invalid profile config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub steps: usize,
    pub batch: usize,
    pub n_samples: usize,
    /// Batches run and discarded before timing.
    pub warmup: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { steps: 4, batch: 1, n_samples: 200, warmup: 2, workers: 1, seed: 0 }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.n_samples < MIN_SAMPLES {
            return Err(ProfileError::TooFewSamples(self.n_samples));
        }
        if self.batch == 0 || self.steps == 0 || self.warmup == 0 || self.workers == 0 {
            return Err(ProfileError::InvalidConfig("batch, steps, warmup and workers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Batched trunk recursion and decoding only.
    ForwardOnly,
    /// Augmentation, forward, inverse mapping and voting.
    Pipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkspaceSource {
    Allocator,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub scope: Scope,
    pub throughput: f64,
    pub latency_ms: f64,
    pub peak_workspace_bytes: usize,
    pub peak_workspace_source: WorkspaceSource,
    pub hardware: String,
    pub batch: usize,
    pub n_samples: usize,
    pub steps: usize,
}

impl EfficiencyReport {
    /// A row shaped like the efficiency table: model, peak memory,
    /// throughput, latency.
    pub fn markdown_row(&self, label: &str) -> String {
        format!(
            "| {label} | {} | {:.1} samples/s | {:.1} ms/sample |",
            human_bytes(self.peak_workspace_bytes),
            self.throughput,
            self.latency_ms
        )
    }
}

pub fn human_bytes(b: usize) -> String {
    const UNITS: [&str; 4] = ["B", "KB", "MB", "GB"];
    let mut v = b as f64;
    let mut u = 0;
    while v >= 1000.0 && u + 1 < UNITS.len() {
        v /= 1000.0;
        u += 1;
    }
    if u == 0 {
        format!("{b} B")
    } else {
        format!("{v:.1} {}", UNITS[u])
    }
}

pub fn hardware_descriptor(workers: usize) -> String {
    format!("cpu {}-{}, {workers} worker(s)", std::env::consts::ARCH, std::env::consts::OS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub config: ProfileConfig,
    pub forward_only: EfficiencyReport,
    pub pipeline: EfficiencyReport,
}

struct Sample {
    group: usize,
    aug: Augmentation,
    canonical: CanvasGrid,
    id_token: usize,
}

/// `n` (variant, test input) samples cycling over every test input of every
/// task, `group` naming the test input a sample votes for.
fn build_samples(dataset: &Dataset, tokens: &[usize], n: usize, seed: u64) -> Vec<Sample> {
    let slots: Vec<(usize, usize)> = dataset
        .tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.tests.len()).map(move |i| (ti, i)))
        .collect();
    if slots.is_empty() {
        return Vec::new();
    }
    let per_slot = n.div_ceil(slots.len());
    let variants: Vec<Vec<(Augmentation, CanvasGrid)>> = slots
        .iter()
        .map(|&(ti, i)| ensemble::test_variants(&dataset.tasks[ti], i, seed, per_slot))
        .collect();
    (0..n)
        .map(|s| {
            let slot = s % slots.len();
            let (ti, i) = slots[slot];
            Sample {
                group: slot,
                aug: variants[slot][s / slots.len()].0,
                canonical: CanvasGrid::at_origin(dataset.tasks[ti].tests[i].input.clone()),
                id_token: tokens[ti],
            }
        })
        .collect()
}

fn timed_region<T>(f: impl FnOnce() -> Result<T, ProfileError>) -> Result<(T, f64, Option<usize>), ProfileError> {
    let baseline = reset_peak();
    let start = Instant::now();
    let out = f()?;
    let secs = start.elapsed().as_secs_f64();
    let peak = tracking_active().then(|| peak_bytes().saturating_sub(baseline));
    Ok((out, secs, peak))
}

fn forward_only(p: &Parameters<f32>, inputs: &[(CanvasGrid, usize)], cfg: &ProfileConfig) -> Result<(), ProfileError> {
    for chunk in inputs.chunks(cfg.batch) {
        let refs: Vec<(&CanvasGrid, usize)> = chunk.iter().map(|(g, t)| (g, *t)).collect();
        std::hint::black_box(model::decode_steps_batch(p, &refs, cfg.steps)?);
    }
    Ok(())
}

fn pipeline(p: &Parameters<f32>, samples: &[Sample], cfg: &ProfileConfig) -> Result<usize, ProfileError> {
    let mut groups: Vec<Vec<Grid>> = Vec::new();
    for chunk in samples.chunks(cfg.batch) {
        let placed = chunk
            .iter()
            .map(|s| augmentation::apply(&s.aug, &s.canonical).map(|g| (g, s.id_token)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ProfileError::InvalidConfig(e.to_string()))?;
        let refs: Vec<(&CanvasGrid, usize)> = placed.iter().map(|(g, t)| (g, *t)).collect();
        let decoded = model::decode_steps_batch(p, &refs, cfg.steps)?;
        for (s, steps) in chunk.iter().zip(decoded) {
            if groups.len() <= s.group {
                groups.resize(s.group + 1, Vec::new());
            }
            groups[s.group].push(augmentation::map_back(&s.aug, steps.last().expect("steps >= 1")));
        }
    }
    let mut winners = 0;
    for g in groups.iter().filter(|g| !g.is_empty()) {
        std::hint::black_box(ensemble::vote_grids(g)?);
        winners += 1;
    }
    Ok(winners)
}

/// Times `n_samples` variant forward passes at `steps` after `warmup`
/// discarded batches, both forward-only and with the full pipeline.
pub fn profile_inference(
    p: &Parameters<f32>,
    dataset: &Dataset,
    tokens: &[usize],
    cfg: &ProfileConfig,
) -> Result<ProfileResult, ProfileError> {
    cfg.validate()?;
    if tokens.len() != dataset.len() {
        return Err(ProfileError::InvalidConfig("one id token per task required".into()));
    }
    let samples = build_samples(dataset, tokens, cfg.n_samples, cfg.seed);
    if samples.is_empty() {
        return Err(ProfileError::InvalidConfig("dataset has no test inputs".into()));
    }
    let inputs = samples
        .iter()
        .map(|s| augmentation::apply(&s.aug, &s.canonical).map(|g| (g, s.id_token)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ProfileError::InvalidConfig(e.to_string()))?;

    ensemble::with_workers(Some(cfg.workers), || {
        let warm: Vec<_> = inputs.iter().cycle().take(cfg.warmup * cfg.batch).cloned().collect();
        forward_only(p, &warm, cfg)?;

        let analytic = forward_workspace_bytes::<f32>(p.config.d_model, p.config.hidden(), cfg.batch);
        let report = |scope, secs: f64, peak: Option<usize>| EfficiencyReport {
            scope,
            throughput: cfg.n_samples as f64 / secs,
            latency_ms: 1000.0 * secs / cfg.n_samples as f64,
            peak_workspace_bytes: peak.unwrap_or(analytic),
            peak_workspace_source: if peak.is_some() { WorkspaceSource::Allocator } else { WorkspaceSource::Analytic },
            hardware: hardware_descriptor(cfg.workers),
            batch: cfg.batch,
            n_samples: cfg.n_samples,
            steps: cfg.steps,
        };
        let ((), secs, peak) = timed_region(|| forward_only(p, &inputs, cfg))?;
        let fwd = report(Scope::ForwardOnly, secs, peak);
        let (_, secs, peak) = timed_region(|| pipeline(p, &samples, cfg))?;
        let pipe = report(Scope::Pipeline, secs, peak);
        Ok(ProfileResult { config: cfg.clone(), forward_only: fwd, pipeline: pipe })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_and_formatting() {
        let cfg = ProfileConfig { n_samples: 99, ..Default::default() };
        assert_eq!(cfg.validate(), Err(ProfileError::TooFewSamples(99)));
        assert!(ProfileConfig { warmup: 0, ..Default::default() }.validate().is_err());
        assert_eq!(human_bytes(512), "512 B");
        assert_eq!(human_bytes(2_400_000_000), "2.4 GB");
    }
}
