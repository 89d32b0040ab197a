//! Small deterministic ARC-style task generator for smoke runs, tests and
//! demos when the real corpus is not at hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arc_data::{Dataset, ExamplePair, Grid, SplitLabel, Task, NUM_COLORS};
use crate::augmentation::{ColorPermutation, DihedralElement};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Identity,
    Recolor { from: u8, to: u8 },
    Swap { a: u8, b: u8 },
    Dihedral { code: u8 },
    Transposed,
}

impl Rule {
    pub fn apply(&self, g: &Grid) -> Grid {
        match *self {
            Rule::Identity => g.clone(),
            Rule::Recolor { from, to } => {
                Grid::new(g.height(), g.width(), g.cells().iter().map(|&c| if c == from { to } else { c }).collect())
                    .expect("same shape")
            }
            Rule::Swap { a, b } => ColorPermutation::swap(a, b).apply(g),
            Rule::Dihedral { code } => DihedralElement::new(code).expect("valid code").apply(g),
            Rule::Transposed => DihedralElement::TRANSPOSE.apply(g),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Rule::Identity => "identity".into(),
            Rule::Recolor { from, to } => format!("recolor{from}{to}"),
            Rule::Swap { a, b } => format!("swap{a}{b}"),
            Rule::Dihedral { code } => format!("dihedral{code}"),
            Rule::Transposed => "transpose".into(),
        }
    }

    fn random(rng: &mut ChaCha8Rng, geometric: bool) -> Self {
        let color = |rng: &mut ChaCha8Rng| rng.random_range(1..NUM_COLORS);
        let families = if geometric { 4 } else { 2 };
        match rng.random_range(0..families) {
            0 => {
                let from = color(rng);
                let to = loop {
                    let c = rng.random_range(0..NUM_COLORS);
                    if c != from {
                        break c;
                    }
                };
                Rule::Recolor { from, to }
            }
            1 => {
                let a = color(rng);
                let b = loop {
                    let c = color(rng);
                    if c != a {
                        break c;
                    }
                };
                Rule::Swap { a, b }
            }
            2 => Rule::Dihedral { code: rng.random_range(1..8) },
            _ => Rule::Transposed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub n_tasks: usize,
    pub demos: usize,
    pub tests: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Colors drawn from `0..palette`.
    pub palette: u8,
    /// Include dihedral and transposition rules besides color rules.
    pub geometric: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n_tasks: 8, demos: 3, tests: 1, min_side: 2, max_side: 5, palette: 5, geometric: true }
    }
}

fn random_grid(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Grid {
    let h = rng.random_range(spec.min_side..=spec.max_side);
    let w = rng.random_range(spec.min_side..=spec.max_side);
    let palette = spec.palette.clamp(2, NUM_COLORS);
    let cells = (0..h * w)
        .map(|_| if rng.random_bool(0.4) { 0 } else { rng.random_range(1..palette) })
        .collect();
    Grid::new(h, w, cells).expect("in range")
}

/// One task following `rule`.
pub fn task_for_rule(puzzle_key: &str, rule: Rule, spec: &SynthSpec, seed: u64) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = |rng: &mut ChaCha8Rng| {
        let input = random_grid(rng, spec);
        ExamplePair { output: rule.apply(&input), input }
    };
    Task {
        puzzle_key: puzzle_key.to_string(),
        demonstrations: (0..spec.demos).map(|_| pair(&mut rng)).collect(),
        tests: (0..spec.tests).map(|_| pair(&mut rng)).collect(),
    }
}

/// `spec.n_tasks` tasks with seeded rules. Keys are eight hex digits, like
/// the public corpus.
pub fn synthetic_dataset(spec: &SynthSpec, split: SplitLabel, seed: u64) -> Dataset {
    let split_tag = match split {
        SplitLabel::Train => 1,
        SplitLabel::Eval => 2,
    };
    let tasks = (0..spec.n_tasks)
        .map(|i| {
            let task_seed = seeds::derive(seed, &[split_tag, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
            let rule = Rule::random(&mut rng, spec.geometric);
            let key = format!("{:08x}", task_seed >> 32);
            task_for_rule(&key, rule, spec, seeds::derive(task_seed, &[0]))
        })
        .collect();
    Dataset::from_tasks(tasks, split)
}
