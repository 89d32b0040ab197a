//! Weight container: a text header (magic, format version, config fields)
//! terminated by an `END` line, followed by named tensors. Each tensor is
//! stored as a little-endian `u32` name length, UTF-8 name, `u32` rank, one
//! `u32` per dimension, then row-major little-endian `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::{ModelConfig, CELL_VOCAB};
use super::params::Parameters;
use super::ModelError;
use crate::arc_data::CANVAS_SIDE;

const MAGIC: &str = "TRMLAB-WEIGHTS";
pub const FORMAT_VERSION: u32 = 1;

fn header(cfg: &ModelConfig, n_tensors: usize) -> String {
    format!(
        "{MAGIC} {FORMAT_VERSION}\nd_model={}\ntrunk_layers={}\nffn_mult={}\nn_cycles={}\nid_vocab_size={}\nseed={}\ncanvas={CANVAS_SIDE}\ncell_vocab={CELL_VOCAB}\ntensors={n_tensors}\nEND\n",
        cfg.d_model, cfg.trunk_layers, cfg.ffn_mult, cfg.n_cycles, cfg.id_vocab_size, cfg.seed
    )
}

pub fn encode(p: &Parameters<f32>) -> Vec<u8> {
    let tensors = p.tensors();
    let mut out = header(&p.config, tensors.len()).into_bytes();
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for dim in shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::WeightFormat("truncated tensor data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Parameters<f32>, ModelError> {
    let bad = |m: String| ModelError::WeightFormat(m);
    let end_marker = b"\nEND\n";
    let split = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| bad("missing END header line".into()))?;
    let head = std::str::from_utf8(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    let mut lines = head.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != format!("{MAGIC} {FORMAT_VERSION}") {
        return Err(bad(format!("unsupported header `{magic}`")));
    }
    let mut fields = std::collections::BTreeMap::new();
    for line in lines {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
        let v: u64 = v.trim().parse().map_err(|_| bad(format!("bad value in `{line}`")))?;
        fields.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("header lacks `{k}`")));
    if get("canvas")? != CANVAS_SIDE as u64 || get("cell_vocab")? != CELL_VOCAB as u64 {
        return Err(bad("canvas or cell vocabulary mismatch".into()));
    }
    let config = ModelConfig {
        d_model: get("d_model")? as usize,
        trunk_layers: get("trunk_layers")? as usize,
        ffn_mult: get("ffn_mult")? as usize,
        n_cycles: get("n_cycles")? as usize,
        id_vocab_size: get("id_vocab_size")? as usize,
        seed: get("seed")?,
    };
    config.validate()?;
    let mut params = Parameters::<f32>::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> =
        params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    if get("tensors")? as usize != expected.len() {
        return Err(bad("tensor count does not match config".into()));
    }
    let mut cur = Cursor { bytes, pos: split + end_marker.len() };
    for ((name, shape), (_, dst)) in expected.into_iter().zip(params.tensors_mut()) {
        let len = cur.u32()? as usize;
        let found = std::str::from_utf8(cur.take(len)?).map_err(|e| bad(e.to_string()))?;
        if found != name {
            return Err(bad(format!("expected tensor `{name}`, found `{found}`")));
        }
        let rank = cur.u32()? as usize;
        let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if dims != shape {
            return Err(bad(format!("tensor `{name}` has shape {dims:?}, expected {shape:?}")));
        }
        let raw = cur.take(4 * dst.len())?;
        for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

pub fn save(p: &Parameters<f32>, path: &Path) -> Result<(), ModelError> {
    let mut f = fs::File::create(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&encode(p)).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Parameters<f32>, ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
