mod common;

use trm_lab::ablation::true_tokens;
use trm_lab::profiler::{self, profile_inference, ProfileConfig, ProfileError, Scope, TrackingAllocator, WorkspaceSource};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn cfg(steps: usize, batch: usize) -> ProfileConfig {
    ProfileConfig { steps, batch, n_samples: 100, warmup: 1, workers: 1, seed: 3 }
}

#[test]
fn fewer_than_a_hundred_samples_is_refused() {
    let (ds, vocab) = common::small_eval_set(2, 1);
    let p = common::toy_model(&vocab, 0);
    let tokens = true_tokens(&ds, &vocab).unwrap();
    let r = profile_inference(&p, &ds, &tokens, &ProfileConfig { n_samples: 99, ..cfg(2, 1) });
    assert!(matches!(r, Err(ProfileError::TooFewSamples(99))), "{r:?}");
}

#[test]
fn batch_one_latency_and_throughput_are_reciprocal() {
    let (ds, vocab) = common::small_eval_set(3, 2);
    let p = common::toy_model(&vocab, 0);
    let tokens = true_tokens(&ds, &vocab).unwrap();
    let r = profile_inference(&p, &ds, &tokens, &cfg(2, 1)).unwrap();
    for rep in [&r.forward_only, &r.pipeline] {
        let product = rep.throughput * rep.latency_ms / 1000.0;
        assert!((product - 1.0).abs() < 0.1, "{:?}: {product}", rep.scope);
        assert_eq!(rep.n_samples, 100);
    }
    assert_eq!(r.forward_only.scope, Scope::ForwardOnly);
    assert_eq!(r.pipeline.scope, Scope::Pipeline);
}

#[test]
fn workspace_comes_from_the_installed_allocator() {
    assert!(profiler::tracking_active());
    let (ds, vocab) = common::small_eval_set(2, 4);
    let p = common::toy_model(&vocab, 0);
    let tokens = true_tokens(&ds, &vocab).unwrap();
    let r = profile_inference(&p, &ds, &tokens, &cfg(1, 2)).unwrap();
    assert_eq!(r.forward_only.peak_workspace_source, WorkspaceSource::Allocator);
    // Two canvases of 900 x 16 activations at least.
    assert!(r.forward_only.peak_workspace_bytes >= 2 * 900 * 16 * 4);
    assert!(r.pipeline.peak_workspace_bytes > 0);
    assert!(r.forward_only.markdown_row("toy").starts_with("| toy |"));
}

#[test]
fn doubling_recursion_steps_increases_latency() {
    let (ds, vocab) = common::small_eval_set(3, 5);
    let p = common::toy_model(&vocab, 0);
    let tokens = true_tokens(&ds, &vocab).unwrap();
    let short = profile_inference(&p, &ds, &tokens, &cfg(2, 1)).unwrap();
    let long = profile_inference(&p, &ds, &tokens, &cfg(4, 1)).unwrap();
    assert!(
        long.forward_only.latency_ms > short.forward_only.latency_ms,
        "{} vs {}",
        long.forward_only.latency_ms,
        short.forward_only.latency_ms
    );
}

#[test]
fn byte_sizes_render_with_decimal_units() {
    assert_eq!(profiler::human_bytes(512), "512 B");
    assert_eq!(profiler::human_bytes(2_048), "2.0 KB");
    assert_eq!(profiler::human_bytes(3_000_000), "3.0 MB");
}
