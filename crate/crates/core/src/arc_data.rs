//! ARC task ingestion: grids, tasks, datasets and the puzzle-identity vocabulary.
//!
//! Task documents follow the public ARC layout: a JSON object with `train` and
//! `test` arrays whose elements carry `input` / `output` integer matrices. A
//! dataset directory holds one `<puzzle_key>.json` per task.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Side length of the square canvas every grid must fit into.
pub const CANVAS_SIDE: usize = 30;
/// Number of canvas cells.
pub const CANVAS_CELLS: usize = CANVAS_SIDE * CANVAS_SIDE;
/// Number of ARC colors.
pub const NUM_COLORS: u8 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataError {
    #[error("malformed task document: {0}")]
    MalformedDocument(String),
    #[error("illegal cell value {value} at row {row}, column {col}")]
    IllegalCell { value: i64, row: usize, col: usize },
    #[error("illegal grid shape {height}x{width} (each side must be 1..=30)")]
    IllegalShape { height: usize, width: usize },
    #[error("ragged grid: row {row} has {found} cells, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("{file}: {source}")]
    InFile {
        file: String,
        #[source]
        source: Box<DataError>,
    },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("puzzle key `{0}` appears with conflicting content")]
    DuplicateKey(String),
    #[error("no datasets supplied")]
    NoDatasets,
}

/// Rectangular matrix of ARC colors, at most 30x30.
///
/// Field order matters: the derived `Ord` compares `(height, width, cells)`
/// lexicographically, which is the vote tie-break order.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Grid {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl Grid {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || height > CANVAS_SIDE || width > CANVAS_SIDE {
            return Err(DataError::IllegalShape { height, width });
        }
        if cells.len() != height * width {
            return Err(DataError::MalformedDocument(format!(
                "{} cells for a {height}x{width} grid",
                cells.len()
            )));
        }
        if let Some(pos) = cells.iter().position(|&c| c >= NUM_COLORS) {
            return Err(DataError::IllegalCell {
                value: i64::from(cells[pos]),
                row: pos / width,
                col: pos % width,
            });
        }
        Ok(Self { height, width, cells })
    }

    /// Grid of a single color.
    pub fn filled(height: usize, width: usize, color: u8) -> Result<Self, DataError> {
        Self::new(height, width, vec![color; height * width])
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, DataError> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || width == 0 || height > CANVAS_SIDE || width > CANVAS_SIDE {
            return Err(DataError::IllegalShape { height, width });
        }
        let mut cells = Vec::with_capacity(height * width);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(DataError::RaggedRows { row: r, expected: width, found: row.len() });
            }
            cells.extend_from_slice(row);
        }
        Self::new(height, width, cells)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.cells.chunks(self.width).map(<[u8]>::to_vec).collect()
    }

    /// Compact key used in vote tallies and reports, e.g. `2x2:0102`.
    pub fn serialize_key(&self) -> String {
        let mut s = format!("{}x{}:", self.height, self.width);
        s.extend(self.cells.iter().map(|&c| char::from(b'0' + c)));
        s
    }

    fn parse_value(value: &Value) -> Result<Self, DataError> {
        let rows = value
            .as_array()
            .ok_or_else(|| DataError::MalformedDocument("grid is not an array".into()))?;
        let height = rows.len();
        let width = rows.first().and_then(Value::as_array).map_or(0, Vec::len);
        if height == 0 || width == 0 || height > CANVAS_SIDE || width > CANVAS_SIDE {
            return Err(DataError::IllegalShape { height, width });
        }
        let mut cells = Vec::with_capacity(height * width);
        for (r, row) in rows.iter().enumerate() {
            let row = row
                .as_array()
                .ok_or_else(|| DataError::MalformedDocument(format!("row {r} is not an array")))?;
            if row.len() != width {
                return Err(DataError::RaggedRows { row: r, expected: width, found: row.len() });
            }
            for (c, cell) in row.iter().enumerate() {
                let v = cell.as_i64().ok_or_else(|| {
                    DataError::MalformedDocument(format!("cell ({r},{c}) is not an integer"))
                })?;
                if !(0..i64::from(NUM_COLORS)).contains(&v) {
                    return Err(DataError::IllegalCell { value: v, row: r, col: c });
                }
                cells.push(v as u8);
            }
        }
        Ok(Self { height, width, cells })
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({})", self.serialize_key())
    }
}

impl Serialize for Grid {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<u8>>::deserialize(deserializer)?;
        Grid::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub input: Grid,
    pub output: Grid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub puzzle_key: String,
    pub demonstrations: Vec<ExamplePair>,
    pub tests: Vec<ExamplePair>,
}

impl Task {
    /// Largest height and width over every grid in the task.
    pub fn max_extents(&self) -> (usize, usize) {
        self.demonstrations
            .iter()
            .chain(&self.tests)
            .flat_map(|p| [&p.input, &p.output])
            .fold((1, 1), |(h, w), g| (h.max(g.height()), w.max(g.width())))
    }

    /// Renders the task back into an ARC document.
    pub fn to_document(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            train: &'a [ExamplePair],
            test: &'a [ExamplePair],
        }
        serde_json::to_string(&Doc { train: &self.demonstrations, test: &self.tests })
            .expect("grids always serialize")
    }
}

fn parse_pairs(doc: &Value, field: &str) -> Result<Vec<ExamplePair>, DataError> {
    let arr = doc
        .get(field)
        .and_then(Value::as_array)
        .ok_or_else(|| DataError::MalformedDocument(format!("missing `{field}` array")))?;
    if arr.is_empty() {
        return Err(DataError::MalformedDocument(format!("`{field}` is empty")));
    }
    arr.iter()
        .enumerate()
        .map(|(i, pair)| {
            let get = |k: &str| {
                pair.get(k).ok_or_else(|| {
                    DataError::MalformedDocument(format!("{field}[{i}] has no `{k}`"))
                })
            };
            Ok(ExamplePair {
                input: Grid::parse_value(get("input")?)?,
                output: Grid::parse_value(get("output")?)?,
            })
        })
        .collect()
}

/// Parses one ARC task document. The caller supplies the puzzle key (the file stem).
pub fn parse_task(text: &str, puzzle_key: &str) -> Result<Task, DataError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| DataError::MalformedDocument(e.to_string()))?;
    if !doc.is_object() {
        return Err(DataError::MalformedDocument("top level is not an object".into()));
    }
    Ok(Task {
        puzzle_key: puzzle_key.to_string(),
        demonstrations: parse_pairs(&doc, "train")?,
        tests: parse_pairs(&doc, "test")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub tasks: Vec<Task>,
    pub split_label: SplitLabel,
}

impl Dataset {
    /// Builds a dataset from in-memory tasks, sorting by puzzle key.
    pub fn from_tasks(mut tasks: Vec<Task>, split_label: SplitLabel) -> Self {
        tasks.sort_by(|a, b| a.puzzle_key.cmp(&b.puzzle_key));
        Self { tasks, split_label }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Writes one `<puzzle_key>.json` per task.
    pub fn write_dir(&self, dir: &Path) -> Result<(), DataError> {
        let io = |p: &Path, e: std::io::Error| DataError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for task in &self.tasks {
            let path = dir.join(format!("{}.json", task.puzzle_key));
            fs::write(&path, task.to_document()).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

/// Loads every `*.json` task in `directory`, sorted by puzzle key.
pub fn load_dataset(directory: &Path, split_label: SplitLabel) -> Result<Dataset, DataError> {
    let entries = fs::read_dir(directory).map_err(|e| DataError::Io {
        path: directory.display().to_string(),
        message: e.to_string(),
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut tasks = Vec::with_capacity(files.len());
    for path in files {
        let file = path.display().to_string();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let text = fs::read_to_string(&path)
            .map_err(|e| DataError::Io { path: file.clone(), message: e.to_string() })?;
        let task = parse_task(&text, &stem)
            .map_err(|e| DataError::InFile { file: file.clone(), source: Box::new(e) })?;
        tasks.push(task);
    }
    if tasks.is_empty() {
        log::warn!("dataset directory {} contains no tasks", directory.display());
    }
    Ok(Dataset::from_tasks(tasks, split_label))
}

/// Bijective map from puzzle keys to embedding rows. Row 0 is the blank identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PuzzleIdVocabulary {
    entries: BTreeMap<String, usize>,
}

impl PuzzleIdVocabulary {
    pub const BLANK_TOKEN: usize = 0;

    /// Assigns ids 1.. in sorted key order.
    pub fn from_keys<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut keys: Vec<String> = keys.into_iter().map(Into::into).collect();
        keys.sort();
        keys.dedup();
        let entries = keys.into_iter().enumerate().map(|(i, k)| (k, i + 1)).collect();
        Self { entries }
    }

    pub fn token(&self, puzzle_key: &str) -> Option<usize> {
        self.entries.get(puzzle_key).copied()
    }

    /// Number of embedding rows, including the blank row.
    pub fn size(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn entries(&self) -> &BTreeMap<String, usize> {
        &self.entries
    }
}

/// Builds the vocabulary over the union of puzzle keys in `datasets`.
///
/// A key shared between datasets must carry identical task content.
pub fn build_vocabulary(datasets: &[&Dataset]) -> Result<PuzzleIdVocabulary, DataError> {
    if datasets.is_empty() {
        return Err(DataError::NoDatasets);
    }
    let mut seen: BTreeMap<&str, &Task> = BTreeMap::new();
    for task in datasets.iter().flat_map(|d| &d.tasks) {
        match seen.get(task.puzzle_key.as_str()) {
            Some(prev) if *prev != task => {
                return Err(DataError::DuplicateKey(task.puzzle_key.clone()))
            }
            _ => {
                seen.insert(&task.puzzle_key, task);
            }
        }
    }
    Ok(PuzzleIdVocabulary::from_keys(seen.keys().copied()))
}
