//! Sidecar persistence for [`MilrState`].
//!
//! Little-endian layout: magic `MILRCKP\0`, u32 version = 1, u32 CRC
//! polynomial, u64 detect seed, u64 recovery seed, u32 batch, u64 plan cost,
//! then checkpoint, detection, and plan sections. Tensors use the same
//! encoding as the weights file (dtype tag, rank, dims, raw payload).
//! Round trips are bit-exact.

use super::crc::CrcGrid;
use super::{
    BackwardPlan, Checkpoint, CheckpointData, DetectionProbe, DetectionRecord, LayerPlan,
    MilrConfig, MilrState, SolvePlan,
};
use crate::error::{MilrError, Result};
use crate::tensor::{Dtype, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MILRCKP\0";
const VERSION: u32 = 1;

fn w32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&[t.dtype().tag(), t.shape().len() as u8])?;
    for &d in t.shape() {
        w32(w, d as u32)?;
    }
    w.write_all(&t.payload_bytes())?;
    Ok(())
}

fn w_tensors(w: &mut impl Write, ts: &[Tensor]) -> Result<()> {
    w32(w, ts.len() as u32)?;
    for t in ts {
        w_tensor(w, t)?;
    }
    Ok(())
}

fn r_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MilrError::Format("truncated sidecar".into()))
}

fn r8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r_exact(r, &mut b)?;
    Ok(b[0])
}

fn r32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_tensor(r: &mut impl Read) -> Result<Tensor> {
    let dtype = Dtype::from_tag(r8(r)?)?;
    let rank = r8(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r32(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * dtype.byte_size()];
    r_exact(r, &mut bytes)?;
    Tensor::from_payload_bytes(shape, dtype, &bytes)
}

fn r_tensors(r: &mut impl Read) -> Result<Vec<Tensor>> {
    let n = r32(r)? as usize;
    (0..n).map(|_| r_tensor(r)).collect()
}

pub fn save_sidecar_to(state: &MilrState, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w32(w, VERSION)?;
    w32(w, state.crc_poly)?;
    w64(w, state.config.detect_seed)?;
    w64(w, state.config.recovery_seed)?;
    w32(w, state.config.batch as u32)?;
    w64(w, state.plan_cost_bytes)?;

    w32(w, state.checkpoints.len() as u32)?;
    for ckpt in &state.checkpoints {
        w32(w, ckpt.position as u32)?;
        match &ckpt.data {
            CheckpointData::Stored(samples) => {
                w.write_all(&[0])?;
                w_tensors(w, samples)?;
            }
            CheckpointData::Derived => w.write_all(&[1])?,
        }
    }

    w32(w, state.detections.len() as u32)?;
    for d in &state.detections {
        w32(w, d.layer as u32)?;
        w64(w, d.seed)?;
        match &d.probe {
            DetectionProbe::DenseColumns { outputs } => {
                w.write_all(&[0])?;
                w_tensor(w, outputs)?;
            }
            DetectionProbe::ConvFilters { row, outputs } => {
                w.write_all(&[1])?;
                w32(w, *row as u32)?;
                w_tensor(w, outputs)?;
            }
            DetectionProbe::BiasSum { sum } => {
                w.write_all(&[2])?;
                w_tensor(w, sum)?;
            }
        }
        match &d.crc {
            Some(grid) => {
                w.write_all(&[1])?;
                w32(w, grid.f as u32)?;
                w32(w, grid.z as u32)?;
                w32(w, grid.y as u32)?;
                w32(w, grid.rows.len() as u32)?;
                for &v in &grid.rows {
                    w32(w, v)?;
                }
                w32(w, grid.cols.len() as u32)?;
                for &v in &grid.cols {
                    w32(w, v)?;
                }
            }
            None => w.write_all(&[0])?,
        }
    }

    w32(w, state.plans.len() as u32)?;
    for p in &state.plans {
        w32(w, p.layer as u32)?;
        match &p.backward {
            BackwardPlan::NotNeeded => w.write_all(&[0])?,
            BackwardPlan::Natural => w.write_all(&[1])?,
            BackwardPlan::DummyCols { seed, alpha, outputs } => {
                w.write_all(&[2])?;
                w64(w, *seed)?;
                w32(w, *alpha as u32)?;
                w_tensors(w, outputs)?;
            }
            BackwardPlan::DummyFilters { seed, count, outputs } => {
                w.write_all(&[3])?;
                w64(w, *seed)?;
                w32(w, *count as u32)?;
                w_tensors(w, outputs)?;
            }
        }
        match &p.solve {
            SolvePlan::Bias => w.write_all(&[0])?,
            SolvePlan::DenseFull => w.write_all(&[1])?,
            SolvePlan::DenseDummyRows { seed, rows, outputs } => {
                w.write_all(&[2])?;
                w64(w, *seed)?;
                w32(w, *rows as u32)?;
                w_tensor(w, outputs)?;
            }
            SolvePlan::ConvFull => w.write_all(&[3])?,
            SolvePlan::ConvDummyInputs { seed, count, outputs } => {
                w.write_all(&[4])?;
                w64(w, *seed)?;
                w32(w, *count as u32)?;
                w_tensors(w, outputs)?;
            }
            SolvePlan::ConvPartialCrc => w.write_all(&[5])?,
        }
    }
    Ok(())
}

pub fn save_sidecar(state: &MilrState, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    save_sidecar_to(state, &mut file)
}

pub fn load_sidecar_from(r: &mut impl Read) -> Result<MilrState> {
    let mut magic = [0u8; 8];
    r_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(MilrError::Format("bad magic in sidecar file".into()));
    }
    let version = r32(r)?;
    if version != VERSION {
        return Err(MilrError::Format(format!(
            "unsupported sidecar version {version}"
        )));
    }
    let crc_poly = r32(r)?;
    let config = MilrConfig {
        detect_seed: r64(r)?,
        recovery_seed: r64(r)?,
        batch: r32(r)? as usize,
    };
    let plan_cost_bytes = r64(r)?;

    let n_ckpt = r32(r)? as usize;
    let mut checkpoints = Vec::with_capacity(n_ckpt);
    for _ in 0..n_ckpt {
        let position = r32(r)? as usize;
        let data = match r8(r)? {
            0 => CheckpointData::Stored(r_tensors(r)?),
            1 => CheckpointData::Derived,
            other => return Err(MilrError::Format(format!("unknown checkpoint tag {other}"))),
        };
        checkpoints.push(Checkpoint { position, data });
    }

    let n_det = r32(r)? as usize;
    let mut detections = Vec::with_capacity(n_det);
    for _ in 0..n_det {
        let layer = r32(r)? as usize;
        let seed = r64(r)?;
        let probe = match r8(r)? {
            0 => DetectionProbe::DenseColumns { outputs: r_tensor(r)? },
            1 => DetectionProbe::ConvFilters {
                row: r32(r)? as usize,
                outputs: r_tensor(r)?,
            },
            2 => DetectionProbe::BiasSum { sum: r_tensor(r)? },
            other => return Err(MilrError::Format(format!("unknown probe tag {other}"))),
        };
        let crc = match r8(r)? {
            0 => None,
            1 => {
                let (f, z, y) = (r32(r)? as usize, r32(r)? as usize, r32(r)? as usize);
                let n_rows = r32(r)? as usize;
                let rows = (0..n_rows).map(|_| r32(r)).collect::<Result<_>>()?;
                let n_cols = r32(r)? as usize;
                let cols = (0..n_cols).map(|_| r32(r)).collect::<Result<_>>()?;
                Some(CrcGrid { f, z, y, rows, cols })
            }
            other => return Err(MilrError::Format(format!("unknown crc tag {other}"))),
        };
        detections.push(DetectionRecord { layer, seed, probe, crc });
    }

    let n_plans = r32(r)? as usize;
    let mut plans = Vec::with_capacity(n_plans);
    for _ in 0..n_plans {
        let layer = r32(r)? as usize;
        let backward = match r8(r)? {
            0 => BackwardPlan::NotNeeded,
            1 => BackwardPlan::Natural,
            2 => BackwardPlan::DummyCols {
                seed: r64(r)?,
                alpha: r32(r)? as usize,
                outputs: r_tensors(r)?,
            },
            3 => BackwardPlan::DummyFilters {
                seed: r64(r)?,
                count: r32(r)? as usize,
                outputs: r_tensors(r)?,
            },
            other => return Err(MilrError::Format(format!("unknown backward tag {other}"))),
        };
        let solve = match r8(r)? {
            0 => SolvePlan::Bias,
            1 => SolvePlan::DenseFull,
            2 => SolvePlan::DenseDummyRows {
                seed: r64(r)?,
                rows: r32(r)? as usize,
                outputs: r_tensor(r)?,
            },
            3 => SolvePlan::ConvFull,
            4 => SolvePlan::ConvDummyInputs {
                seed: r64(r)?,
                count: r32(r)? as usize,
                outputs: r_tensors(r)?,
            },
            5 => SolvePlan::ConvPartialCrc,
            other => return Err(MilrError::Format(format!("unknown solve tag {other}"))),
        };
        plans.push(LayerPlan { layer, backward, solve });
    }

    Ok(MilrState {
        config,
        crc_poly,
        checkpoints,
        detections,
        plans,
        plan_cost_bytes,
    })
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<MilrState> {
    let mut file = std::fs::File::open(path)?;
    load_sidecar_from(&mut file)
}
