//! Patch-grid files: magic `FENC`, little-endian `u32` rows, cols and
//! patch_dim, then `rows·cols·patch_dim` little-endian `f32` values.

use std::path::Path;

use jfe_core::data::PatchGrid;

use crate::error::{JfeError, Result};

pub const MAGIC: &[u8; 4] = b"FENC";
const HEADER: usize = 16;

pub fn encode_grid(grid: &PatchGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * grid.data().len());
    out.extend_from_slice(MAGIC);
    for n in [grid.rows(), grid.cols(), grid.patch_dim()] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<PatchGrid> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(JfeError::Format(
            "not a patch-grid file (missing FENC header)".into(),
        ));
    }
    let word = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (rows, cols, dim) = (word(0), word(1), word(2));
    let n = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(dim))
        .ok_or_else(|| JfeError::Format("patch-grid dimensions overflow".into()))?;
    if bytes.len() != HEADER + 4 * n {
        return Err(JfeError::Format(format!(
            "patch grid {rows}x{cols}x{dim} needs {} bytes, file has {}",
            HEADER + 4 * n,
            bytes.len()
        )));
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(PatchGrid::new(rows, cols, dim, data)?)
}

pub fn read_grid(path: &Path) -> Result<PatchGrid> {
    let bytes = std::fs::read(path).map_err(|e| JfeError::io(path, e))?;
    decode_grid(&bytes).map_err(|e| JfeError::Format(format!("{}: {e}", path.display())))
}

pub fn write_grid(path: &Path, grid: &PatchGrid) -> Result<()> {
    std::fs::write(path, encode_grid(grid)).map_err(|e| JfeError::io(path, e))
}
