//! Desk-scale laboratory for tiny recursive grid models on ARC-style tasks.

pub mod arc_data;
pub mod augmentation;
pub mod model;
pub mod seeds;
pub mod ensemble;
pub mod metrics;
pub mod synthetic;
pub mod trainer;
pub mod ablation;
pub mod profiler;
pub mod report;
pub mod experiment;
