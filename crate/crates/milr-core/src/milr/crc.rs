//! Two-dimensional CRC localization for convolution filters.
//!
//! A filter tensor `[F, F, Z, Y]` is treated as F² planes of shape `[Z, Y]`.
//! Each plane gets one CRC word per 4-parameter group along Y for every z
//! (row CRCs) and one per 4-parameter group along Z for every y (column
//! CRCs). A corrupted parameter breaks exactly one row CRC and one column
//! CRC, so recomputing the grid and intersecting the mismatches localizes
//! erroneous parameters to the flagged (z, y) cells.

use crate::tensor::Tensor;
use std::sync::OnceLock;

/// Reflected CRC-32 polynomial (IEEE 802.3).
pub const CRC_POLY: u32 = 0xEDB8_8320;

fn crc_table() -> &'static [u32; 256] {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 == 1 { CRC_POLY ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        table
    })
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    !c
}

/// A parameter coordinate flagged by CRC localization: plane `f1 * F + f2`,
/// channel `z`, filter `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CrcCoord {
    pub plane: usize,
    pub z: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrcGrid {
    pub f: usize,
    pub z: usize,
    pub y: usize,
    /// Row CRCs: indexed `[plane][z][y_group]`, flattened.
    pub rows: Vec<u32>,
    /// Column CRCs: indexed `[plane][z_group][y]`, flattened.
    pub cols: Vec<u32>,
}

fn group_count(n: usize) -> usize {
    n.div_ceil(4)
}

fn param_bytes(filters: &Tensor, idx: usize) -> Vec<u8> {
    let word = filters.word(idx);
    word.to_le_bytes()[..filters.dtype().byte_size()].to_vec()
}

impl CrcGrid {
    /// Number of stored CRC words times 4 bytes.
    pub fn byte_cost(f: usize, z: usize, y: usize) -> usize {
        f * f * (z * group_count(y) + group_count(z) * y) * 4
    }

    pub fn build(filters: &Tensor) -> CrcGrid {
        let sh = filters.shape();
        assert_eq!(sh.len(), 4, "CRC grid expects [f, f, z, y] filters");
        let (f, z, y) = (sh[0], sh[2], sh[3]);
        let planes = f * f;
        let idx = |p: usize, zi: usize, yi: usize| (p * z + zi) * y + yi;
        let mut rows = Vec::with_capacity(planes * z * group_count(y));
        let mut cols = Vec::with_capacity(planes * group_count(z) * y);
        for p in 0..planes {
            for zi in 0..z {
                for yg in 0..group_count(y) {
                    let mut bytes = Vec::new();
                    for yi in yg * 4..(yg * 4 + 4).min(y) {
                        bytes.extend(param_bytes(filters, idx(p, zi, yi)));
                    }
                    rows.push(crc32(&bytes));
                }
            }
            for zg in 0..group_count(z) {
                for yi in 0..y {
                    let mut bytes = Vec::new();
                    for zi in zg * 4..(zg * 4 + 4).min(z) {
                        bytes.extend(param_bytes(filters, idx(p, zi, yi)));
                    }
                    cols.push(crc32(&bytes));
                }
            }
        }
        CrcGrid { f, z, y, rows, cols }
    }

    /// Recomputes the grid over `filters` and returns every (plane, z, y)
    /// whose row group and column group both mismatch. The result is a
    /// superset of the truly modified parameters (unless a CRC collision
    /// hides a group entirely).
    pub fn localize(&self, filters: &Tensor) -> Vec<CrcCoord> {
        let fresh = CrcGrid::build(filters);
        assert_eq!(
            (fresh.f, fresh.z, fresh.y),
            (self.f, self.z, self.y),
            "CRC grid shape mismatch"
        );
        let (z, y) = (self.z, self.y);
        let (ygs, zgs) = (group_count(y), group_count(z));
        let mut flagged = Vec::new();
        for p in 0..self.f * self.f {
            let bad_rows: Vec<(usize, usize)> = (0..z)
                .flat_map(|zi| (0..ygs).map(move |yg| (zi, yg)))
                .filter(|&(zi, yg)| {
                    let i = (p * z + zi) * ygs + yg;
                    self.rows[i] != fresh.rows[i]
                })
                .collect();
            if bad_rows.is_empty() {
                continue;
            }
            let bad_cols: Vec<(usize, usize)> = (0..zgs)
                .flat_map(|zg| (0..y).map(move |yi| (zg, yi)))
                .filter(|&(zg, yi)| {
                    let i = (p * zgs + zg) * y + yi;
                    self.cols[i] != fresh.cols[i]
                })
                .collect();
            for &(zi, yg) in &bad_rows {
                for &(zg, yi) in &bad_cols {
                    if zi / 4 == zg && yi / 4 == yg {
                        flagged.push(CrcCoord { plane: p, z: zi, y: yi });
                    }
                }
            }
        }
        flagged
    }
}
