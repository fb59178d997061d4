//! PoseSet (JSON Lines) and heatmap (binary) file formats.
//!
//! Heatmap files hold every joint of one sample:
//!
//! ```text
//! "FMHM" | version: u32 | J: u32 | H_g: u32 | W_g: u32 | f32 * (J * H_g * W_g)
//! ```
//!
//! little-endian, row-major per joint.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Heatmap;

pub const HEATMAP_MAGIC: &[u8; 4] = b"FMHM";
pub const HEATMAP_VERSION: u32 = 1;

/// One line of a PoseSet file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints2d: Option<Vec<[f32; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints3d: Option<Vec<[f32; 3]>>,
}

pub fn write_pose_set(path: &Path, records: &[PoseRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pose_set(path: &Path) -> Result<Vec<PoseRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn encode_heatmaps(maps: &[Heatmap]) -> Result<Vec<u8>> {
    let (h, w) = maps.first().map_or((0, 0), |m| (m.height, m.width));
    if let Some(bad) = maps.iter().find(|m| m.height != h || m.width != w) {
        return Err(Error::dim("heatmap grids", &[h, w], &[bad.height, bad.width]));
    }
    let mut out = Vec::with_capacity(20 + maps.len() * h * w * 4);
    out.extend_from_slice(HEATMAP_MAGIC);
    for v in [HEATMAP_VERSION, maps.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in maps {
        for v in &m.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_heatmaps(bytes: &[u8]) -> std::result::Result<Vec<Heatmap>, String> {
    if bytes.len() < 20 || &bytes[..4] != HEATMAP_MAGIC {
        return Err("bad magic or truncated header".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (version, j, h, w) = (word(0), word(1), word(2), word(3));
    if version != HEATMAP_VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let cells = h.checked_mul(w).ok_or("grid size overflow")?;
    let expected = j
        .checked_mul(cells)
        .and_then(|n| n.checked_mul(4))
        .ok_or("size overflow")?
        + 20;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let values: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    values
        .chunks_exact(cells.max(1))
        .take(j)
        .map(|c| Heatmap::new(h, w, c.to_vec()).map_err(|e| e.to_string()))
        .collect()
}

pub fn write_heatmaps(path: &Path, maps: &[Heatmap]) -> Result<()> {
    let bytes = encode_heatmaps(maps)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_heatmaps(path: &Path) -> Result<Vec<Heatmap>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_heatmaps(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}
