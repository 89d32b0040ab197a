//! The invertible augmentation group: color permutations, the eight dihedral
//! symmetries of the square, and translations on the 30x30 canvas.
//!
//! Application order is fixed as color, then dihedral, then translation.
//! Colors act cell-wise and translation only moves the placement offset, so
//! the three factors commute and inversion is component-wise.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arc_data::{Dataset, ExamplePair, Grid, SplitLabel, CANVAS_SIDE, NUM_COLORS};
use crate::seeds;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AugmentError {
    #[error("grid {height}x{width} at offset ({dy},{dx}) leaves the 30x30 canvas")]
    OutOfCanvas { height: usize, width: usize, dy: i64, dx: i64 },
    #[error("invalid color mapping {0:?}")]
    InvalidPermutation(Vec<u8>),
    #[error("dihedral code {0} outside 0..8")]
    InvalidDihedral(u8),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("bad augmented record: {0}")]
    BadRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ColorPermutation([u8; NUM_COLORS as usize]);

impl ColorPermutation {
    pub const IDENTITY: Self = Self([0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);

    pub fn new(mapping: [u8; NUM_COLORS as usize]) -> Result<Self, AugmentError> {
        let mut seen = [false; NUM_COLORS as usize];
        for &m in &mapping {
            if m >= NUM_COLORS || std::mem::replace(&mut seen[m as usize], true) {
                return Err(AugmentError::InvalidPermutation(mapping.to_vec()));
            }
        }
        Ok(Self(mapping))
    }

    /// Swaps two colors, leaving the rest fixed.
    pub fn swap(a: u8, b: u8) -> Self {
        let mut m = Self::IDENTITY.0;
        m.swap(a as usize, b as usize);
        Self(m)
    }

    pub fn map(&self, color: u8) -> u8 {
        self.0[color as usize]
    }

    pub fn mapping(&self) -> &[u8; NUM_COLORS as usize] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = [0u8; NUM_COLORS as usize];
        for (from, &to) in self.0.iter().enumerate() {
            inv[to as usize] = from as u8;
        }
        Self(inv)
    }

    pub fn apply(&self, g: &Grid) -> Grid {
        let cells = g.cells().iter().map(|&c| self.map(c)).collect();
        Grid::new(g.height(), g.width(), cells).expect("permutation keeps colors legal")
    }
}

impl TryFrom<Vec<u8>> for ColorPermutation {
    type Error = AugmentError;
    fn try_from(v: Vec<u8>) -> Result<Self, Self::Error> {
        let arr: [u8; NUM_COLORS as usize] =
            v.clone().try_into().map_err(|_| AugmentError::InvalidPermutation(v))?;
        Self::new(arr)
    }
}

impl From<ColorPermutation> for Vec<u8> {
    fn from(p: ColorPermutation) -> Self {
        p.0.to_vec()
    }
}

/// One of the eight symmetries of the square.
///
/// Codes: 0 identity, 1 rot90 (clockwise), 2 rot180, 3 rot270, 4 horizontal
/// flip (mirror columns), 5 vertical flip (mirror rows), 6 transpose,
/// 7 anti-transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DihedralElement(u8);

impl DihedralElement {
    pub const IDENTITY: Self = Self(0);
    pub const ROT90: Self = Self(1);
    pub const ROT180: Self = Self(2);
    pub const ROT270: Self = Self(3);
    pub const FLIP_H: Self = Self(4);
    pub const FLIP_V: Self = Self(5);
    pub const TRANSPOSE: Self = Self(6);
    pub const ANTI_TRANSPOSE: Self = Self(7);

    pub fn new(code: u8) -> Result<Self, AugmentError> {
        if code < 8 {
            Ok(Self(code))
        } else {
            Err(AugmentError::InvalidDihedral(code))
        }
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8).map(Self)
    }

    pub fn code(self) -> u8 {
        self.0
    }

    // Each element is written as R^k F^f: optional horizontal flip first, then
    // k clockwise quarter turns.
    fn to_rot_flip(self) -> (u8, bool) {
        match self.0 {
            0..=3 => (self.0, false),
            4 => (0, true),
            5 => (2, true),
            6 => (3, true),
            _ => (1, true),
        }
    }

    fn from_rot_flip(k: u8, flip: bool) -> Self {
        let k = k % 4;
        Self(match (k, flip) {
            (k, false) => k,
            (0, true) => 4,
            (2, true) => 5,
            (3, true) => 6,
            _ => 7,
        })
    }

    /// The element equivalent to applying `self` first and then `next`.
    pub fn then(self, next: Self) -> Self {
        let (ka, fa) = self.to_rot_flip();
        let (kb, fb) = next.to_rot_flip();
        // F R^k = R^-k F
        let k = if fb { kb + 4 - ka } else { kb + ka };
        Self::from_rot_flip(k, fa ^ fb)
    }

    pub fn inverse(self) -> Self {
        match self.to_rot_flip() {
            (_, true) => self,
            (k, false) => Self::from_rot_flip(4 - k, false),
        }
    }

    /// Whether the element exchanges height and width.
    pub fn swaps_axes(self) -> bool {
        matches!(self.0, 1 | 3 | 6 | 7)
    }

    pub fn output_shape(self, height: usize, width: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (width, height)
        } else {
            (height, width)
        }
    }

    /// Source coordinate in an `height`x`width` grid for output cell `(r, c)`.
    fn source(self, height: usize, width: usize, r: usize, c: usize) -> (usize, usize) {
        match self.0 {
            0 => (r, c),
            1 => (height - 1 - c, r),
            2 => (height - 1 - r, width - 1 - c),
            3 => (c, width - 1 - r),
            4 => (r, width - 1 - c),
            5 => (height - 1 - r, c),
            6 => (c, r),
            _ => (height - 1 - c, width - 1 - r),
        }
    }

    pub fn apply(self, g: &Grid) -> Grid {
        let (h, w) = (g.height(), g.width());
        let (oh, ow) = self.output_shape(h, w);
        let mut cells = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = self.source(h, w, r, c);
                cells.push(g.get(sr, sc));
            }
        }
        Grid::new(oh, ow, cells).expect("dihedral maps preserve validity")
    }
}

impl TryFrom<u8> for DihedralElement {
    type Error = AugmentError;
    fn try_from(code: u8) -> Result<Self, Self::Error> {
        Self::new(code)
    }
}

impl From<DihedralElement> for u8 {
    fn from(d: DihedralElement) -> Self {
        d.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Translation {
    pub dy: i64,
    pub dx: i64,
}

/// A grid placed on the canvas with its top-left corner at `(dy, dx)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanvasGrid {
    pub grid: Grid,
    pub dy: usize,
    pub dx: usize,
}

impl CanvasGrid {
    pub fn at_origin(grid: Grid) -> Self {
        Self { grid, dy: 0, dx: 0 }
    }

    pub fn placed(grid: Grid, dy: i64, dx: i64) -> Result<Self, AugmentError> {
        let (h, w) = (grid.height(), grid.width());
        let fits = |off: i64, len: usize| off >= 0 && off as usize + len <= CANVAS_SIDE;
        if !fits(dy, h) || !fits(dx, w) {
            return Err(AugmentError::OutOfCanvas { height: h, width: w, dy, dx });
        }
        Ok(Self { grid, dy: dy as usize, dx: dx as usize })
    }

    /// Color at canvas position `(r, c)`, or `None` outside the placed grid.
    pub fn color_at(&self, r: usize, c: usize) -> Option<u8> {
        let inside = r >= self.dy
            && c >= self.dx
            && r < self.dy + self.grid.height()
            && c < self.dx + self.grid.width();
        inside.then(|| self.grid.get(r - self.dy, c - self.dx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Augmentation {
    pub color: ColorPermutation,
    pub dihedral: DihedralElement,
    pub shift: Translation,
    pub seed_tag: u64,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        color: ColorPermutation::IDENTITY,
        dihedral: DihedralElement::IDENTITY,
        shift: Translation { dy: 0, dx: 0 },
        seed_tag: 0,
    };

    pub fn is_identity(&self) -> bool {
        self.color == ColorPermutation::IDENTITY
            && self.dihedral == DihedralElement::IDENTITY
            && self.shift == Translation::default()
    }
}

/// Applies color, then dihedral, then translation.
pub fn apply(aug: &Augmentation, g: &CanvasGrid) -> Result<CanvasGrid, AugmentError> {
    let content = aug.dihedral.apply(&aug.color.apply(&g.grid));
    CanvasGrid::placed(content, g.dy as i64 + aug.shift.dy, g.dx as i64 + aug.shift.dx)
}

pub fn invert(aug: &Augmentation) -> Augmentation {
    Augmentation {
        color: aug.color.inverse(),
        dihedral: aug.dihedral.inverse(),
        shift: Translation { dy: -aug.shift.dy, dx: -aug.shift.dx },
        seed_tag: aug.seed_tag,
    }
}

/// Maps a decoded prediction back into the canonical frame.
///
/// `decoded` is the top-left bounding-box grid read off the canvas, so the
/// augmentation's offset shows up as leading rows and columns. Those are
/// cropped when present; when cropping would empty the grid the decoded grid
/// is kept as-is, so the candidate still counts (as a wrong answer) in a vote.
pub fn map_back(aug: &Augmentation, decoded: &Grid) -> Grid {
    let (dy, dx) = (aug.shift.dy.max(0) as usize, aug.shift.dx.max(0) as usize);
    let (h, w) = (decoded.height(), decoded.width());
    let cropped = if h > dy && w > dx {
        let cells = (dy..h).flat_map(|r| (dx..w).map(move |c| (r, c))).map(|(r, c)| decoded.get(r, c));
        Grid::new(h - dy, w - dx, cells.collect()).expect("crop of a valid grid")
    } else {
        decoded.clone()
    };
    let inv = invert(aug);
    inv.dihedral.apply(&inv.color.apply(&cropped))
}

/// Draws a random augmentation whose transformed `bounds` (height, width)
/// still fit the canvas. Deterministic in `rng_seed`.
pub fn sample(rng_seed: u64, bounds: (usize, usize)) -> Augmentation {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut mapping = ColorPermutation::IDENTITY.0;
    mapping.shuffle(&mut rng);
    let dihedral = DihedralElement(rng.random_range(0..8));
    let (h, w) = dihedral.output_shape(bounds.0.min(CANVAS_SIDE), bounds.1.min(CANVAS_SIDE));
    let dy = rng.random_range(0..=(CANVAS_SIDE - h)) as i64;
    let dx = rng.random_range(0..=(CANVAS_SIDE - w)) as i64;
    Augmentation {
        color: ColorPermutation(mapping),
        dihedral,
        shift: Translation { dy, dx },
        seed_tag: rng_seed,
    }
}

/// Test-time variants for one test input: the identity first, then `k - 1`
/// seeded samples keyed by `(seed, puzzle_key, test_index, variant)`.
pub fn variant_stream(
    seed: u64,
    puzzle_key: &str,
    test_index: usize,
    bounds: (usize, usize),
    k: usize,
) -> Vec<Augmentation> {
    let base = seeds::derive(seed, &[seeds::key_hash(puzzle_key), test_index as u64]);
    (0..k)
        .map(|i| {
            if i == 0 {
                Augmentation::IDENTITY
            } else {
                sample(seeds::derive(base, &[i as u64]), bounds)
            }
        })
        .collect()
}

/// One supervised training example, possibly augmented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub puzzle_key: String,
    pub pair_index: usize,
    pub augmentation: Augmentation,
    pub input: CanvasGrid,
    pub output: CanvasGrid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedDataset {
    pub split_label: SplitLabel,
    pub n_per_pair: usize,
    pub seed: u64,
    pub records: Vec<AugmentedRecord>,
}

impl AugmentedDataset {
    /// Conventional directory name, e.g. `arc-aug-1000`.
    pub fn dir_name(n_per_pair: usize) -> String {
        format!("arc-aug-{n_per_pair}")
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), AugmentError> {
        let io = |e: std::io::Error| AugmentError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(io)?;
        let manifest = serde_json::json!({
            "split": self.split_label,
            "n_per_pair": self.n_per_pair,
            "seed": self.seed,
            "records": self.records.len(),
        });
        fs::write(dir.join("manifest.json"), format!("{manifest:#}\n")).map_err(io)?;
        let mut out = BufWriter::new(fs::File::create(dir.join("records.jsonl")).map_err(io)?);
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec).map_err(|e| AugmentError::BadRecord(e.to_string()))?;
            out.write_all(b"\n").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_dir(dir: &Path) -> Result<Self, AugmentError> {
        let io = |e: std::io::Error| AugmentError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).map_err(io)?)
                .map_err(|e| AugmentError::BadRecord(e.to_string()))?;
        let field = |k: &str| manifest.get(k).cloned().ok_or_else(|| AugmentError::BadRecord(format!("manifest lacks `{k}`")));
        let split_label = serde_json::from_value(field("split")?).map_err(|e| AugmentError::BadRecord(e.to_string()))?;
        let n_per_pair = field("n_per_pair")?.as_u64().unwrap_or(0) as usize;
        let seed = field("seed")?.as_u64().unwrap_or(0);
        let reader = BufReader::new(fs::File::open(dir.join("records.jsonl")).map_err(io)?);
        let records = reader
            .lines()
            .map(|line| {
                let line = line.map_err(io)?;
                serde_json::from_str(&line).map_err(|e| AugmentError::BadRecord(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { split_label, n_per_pair, seed, records })
    }
}

fn augment_pair(aug: &Augmentation, pair: &ExamplePair) -> Result<(CanvasGrid, CanvasGrid), AugmentError> {
    Ok((
        apply(aug, &CanvasGrid::at_origin(pair.input.clone()))?,
        apply(aug, &CanvasGrid::at_origin(pair.output.clone()))?,
    ))
}

/// Expands every demonstration pair with `n_per_pair` augmented copies. The
/// canonical pair is always kept, so `n_per_pair = 0` is the canonical-only
/// regime.
pub fn expand_dataset(d: &Dataset, n_per_pair: usize, seed: u64) -> AugmentedDataset {
    let mut records = Vec::new();
    for task in &d.tasks {
        let bounds = task.max_extents();
        let key_seed = seeds::derive(seed, &[seeds::key_hash(&task.puzzle_key)]);
        for (pair_index, pair) in task.demonstrations.iter().enumerate() {
            records.push(AugmentedRecord {
                puzzle_key: task.puzzle_key.clone(),
                pair_index,
                augmentation: Augmentation::IDENTITY,
                input: CanvasGrid::at_origin(pair.input.clone()),
                output: CanvasGrid::at_origin(pair.output.clone()),
            });
            let mut draw = 0u64;
            let mut made = 0;
            while made < n_per_pair {
                let aug = sample(seeds::derive(key_seed, &[pair_index as u64, draw]), bounds);
                draw += 1;
                // sample() respects the task's bounds, so this only fails on
                // hand-built datasets that violate them.
                let Ok((input, output)) = augment_pair(&aug, pair) else { continue };
                records.push(AugmentedRecord {
                    puzzle_key: task.puzzle_key.clone(),
                    pair_index,
                    augmentation: aug,
                    input,
                    output,
                });
                made += 1;
            }
        }
    }
    AugmentedDataset { split_label: d.split_label, n_per_pair, seed, records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(rows: &[&[u8]]) -> Grid {
        Grid::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn arb_grid() -> impl Strategy<Value = Grid> {
        (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..10, h * w).prop_map(move |cells| Grid::new(h, w, cells).unwrap())
        })
    }

    #[test]
    fn identity_augmentation_is_noop() {
        let grid = CanvasGrid::at_origin(g(&[&[1, 2, 3], &[4, 5, 6]]));
        assert_eq!(apply(&Augmentation::IDENTITY, &grid).unwrap(), grid);
        assert_eq!(invert(&Augmentation::IDENTITY), Augmentation::IDENTITY);
    }

    #[test]
    fn rot90_of_column() {
        let col = g(&[&[3], &[7]]);
        assert_eq!(DihedralElement::ROT90.apply(&col), g(&[&[7, 3]]));
    }

    #[test]
    fn color_swap() {
        let aug = Augmentation { color: ColorPermutation::swap(0, 1), ..Augmentation::IDENTITY };
        let out = apply(&aug, &CanvasGrid::at_origin(g(&[&[0, 1]]))).unwrap();
        assert_eq!(out.grid, g(&[&[1, 0]]));
    }

    #[test]
    fn inverse_of_rot90_is_rot270() {
        assert_eq!(DihedralElement::ROT90.inverse(), DihedralElement::ROT270);
        for d in DihedralElement::all() {
            assert_eq!(d.then(d.inverse()), DihedralElement::IDENTITY);
        }
    }

    #[test]
    fn out_of_canvas_shift() {
        let aug = Augmentation { shift: Translation { dy: 29, dx: 0 }, ..Augmentation::IDENTITY };
        let err = apply(&aug, &CanvasGrid::at_origin(g(&[&[1], &[2]]))).unwrap_err();
        assert!(matches!(err, AugmentError::OutOfCanvas { dy: 29, .. }));
        assert!(ColorPermutation::new([0, 0, 2, 3, 4, 5, 6, 7, 8, 9]).is_err());
        assert!(DihedralElement::new(8).is_err());
    }

    #[test]
    fn full_bounds_force_zero_shift() {
        for seed in 0..50 {
            let a = sample(seed, (30, 30));
            assert_eq!(a.shift, Translation::default());
        }
        assert_eq!(sample(42, (3, 5)), sample(42, (3, 5)));
    }

    #[test]
    fn dihedral_codes_are_uniform() {
        let mut counts = [0usize; 8];
        for seed in 0..10_000 {
            counts[sample(seed, (1, 1)).dihedral.code() as usize] += 1;
        }
        // Binomial(10000, 1/8): sigma = sqrt(10000 * 1/8 * 7/8) ~ 33.07.
        let sigma = (10_000.0f64 * 0.125 * 0.875).sqrt();
        for c in counts {
            assert!((c as f64 - 1250.0).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn map_back_keeps_uncroppable_prediction() {
        let aug = Augmentation { shift: Translation { dy: 3, dx: 0 }, ..Augmentation::IDENTITY };
        let tiny = g(&[&[5]]);
        assert_eq!(map_back(&aug, &tiny), tiny);
    }

    proptest! {
        #[test]
        fn round_trip_restores_grid(grid in arb_grid(), seed in any::<u64>()) {
            let aug = sample(seed, (grid.height(), grid.width()));
            let placed = apply(&aug, &CanvasGrid::at_origin(grid.clone())).unwrap();
            prop_assert!(placed.dy + placed.grid.height() <= CANVAS_SIDE);
            prop_assert!(placed.dx + placed.grid.width() <= CANVAS_SIDE);
            let back = apply(&invert(&aug), &placed).unwrap();
            prop_assert_eq!(&back, &CanvasGrid::at_origin(grid.clone()));
            let twice = invert(&invert(&aug));
            prop_assert_eq!(apply(&twice, &CanvasGrid::at_origin(grid.clone())).unwrap(), placed);
        }

        #[test]
        fn color_commutes_with_dihedral(grid in arb_grid(), seed in any::<u64>()) {
            let aug = sample(seed, (1, 1));
            let a = aug.dihedral.apply(&aug.color.apply(&grid));
            let b = aug.color.apply(&aug.dihedral.apply(&grid));
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn expansion_regimes() {
        let task = crate::arc_data::Task {
            puzzle_key: "t".into(),
            demonstrations: vec![ExamplePair { input: g(&[&[1, 2]]), output: g(&[&[2, 1]]) }],
            tests: vec![ExamplePair { input: g(&[&[3]]), output: g(&[&[3]]) }],
        };
        let d = Dataset::from_tasks(vec![task], SplitLabel::Train);

        let aug0 = expand_dataset(&d, 0, 1);
        assert_eq!(aug0.records.len(), 1);
        assert_eq!(aug0.records[0].input.grid, d.tasks[0].demonstrations[0].input);
        assert_eq!(aug0.records[0].output.grid, d.tasks[0].demonstrations[0].output);

        let aug1000 = expand_dataset(&d, 1000, 1);
        assert_eq!(aug1000.records.len(), 1001);
        for rec in &aug1000.records {
            assert_eq!(rec.puzzle_key, "t");
            let inv = invert(&rec.augmentation);
            assert_eq!(apply(&inv, &rec.input).unwrap().grid, d.tasks[0].demonstrations[0].input);
            assert_eq!(apply(&inv, &rec.output).unwrap().grid, d.tasks[0].demonstrations[0].output);
        }

        assert_eq!(expand_dataset(&d, 2, 9), expand_dataset(&d, 2, 9));
    }

    #[test]
    fn augmented_dataset_dir_round_trip() {
        let task = crate::arc_data::Task {
            puzzle_key: "t".into(),
            demonstrations: vec![ExamplePair { input: g(&[&[1, 2]]), output: g(&[&[2, 1]]) }],
            tests: vec![ExamplePair { input: g(&[&[3]]), output: g(&[&[3]]) }],
        };
        let d = Dataset::from_tasks(vec![task], SplitLabel::Train);
        let aug = expand_dataset(&d, 5, 3);
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join(AugmentedDataset::dir_name(5));
        aug.write_dir(&dir).unwrap();
        assert_eq!(AugmentedDataset::read_dir(&dir).unwrap(), aug);
    }
}
