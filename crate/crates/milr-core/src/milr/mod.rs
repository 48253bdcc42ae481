//! Algebraic detection and recovery of corrupted network parameters.
//!
//! Each parameterized layer obeys a linear relationship between its input,
//! output, and parameters. During [`initialize`] the engine stores the
//! minimal sidecar data needed to exploit that relationship later:
//!
//! - a detection record per parameterized layer (one output per dense
//!   parameter column, one output per convolution filter, the bias sum);
//! - full input checkpoints where required (the global input, every pooling
//!   layer's input, and wherever a checkpoint is cheaper than dummy data);
//! - dummy-padding seeds and their stored outputs that make otherwise
//!   under-determined backward passes and parameter solves solvable;
//! - a 2-D CRC grid for convolutions that are only partially recoverable.
//!
//! The span between two consecutive checkpoints is a *bracket*: at most one
//! erroneous layer per bracket can be healed, by moving the bracketing
//! checkpoints to the layer with a forward pass (activations linearized) and
//! a backward pass, then solving for the parameters.

pub mod backward;
pub mod crc;
pub mod detect;
pub mod recover;
pub mod sidecar;
pub mod solve;

pub use crc::{CrcCoord, CrcGrid, CRC_POLY};
pub use detect::{detect, DetectionEntry, DetectionLog};
pub use recover::{recover, Outcome, RecoveryReport};

use crate::error::{MilrError, Result};
use crate::linalg::{conv2d, matmul, patch_map};
use crate::network::{layer_forward, Layer, LayerSpec, Network};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Tensor, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MilrConfig {
    /// Base seed for detection probe inputs.
    pub detect_seed: u64,
    /// Base seed for recovery checkpoints and dummy data.
    pub recovery_seed: u64,
    /// Number of recovery input samples carried through every checkpoint.
    pub batch: usize,
}

impl Default for MilrConfig {
    fn default() -> Self {
        MilrConfig {
            detect_seed: 0x4D49_4C52_4445_5443,
            recovery_seed: 0x4D49_4C52_5245_4356,
            batch: 1,
        }
    }
}

/// Checkpoint at `position` p: the input of layer p (p = layer count means
/// the network's final output). `Derived` checkpoints are recomputed on
/// demand from the previous checkpoint through parameterless layers.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub position: usize,
    pub data: CheckpointData,
}

#[derive(Debug, Clone)]
pub enum CheckpointData {
    Stored(Vec<Tensor>),
    Derived,
}

#[derive(Debug, Clone)]
pub enum DetectionProbe {
    /// Dense: the layer's output for a seeded random input, one value per
    /// parameter column.
    DenseColumns { outputs: Tensor },
    /// Conv: the outputs of every filter at one interior patch (im2col row
    /// `row`) of a seeded random input.
    ConvFilters { row: usize, outputs: Tensor },
    /// Bias: the in-order sum of all bias parameters, in the network dtype.
    BiasSum { sum: Tensor },
}

#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub layer: usize,
    pub seed: u64,
    pub probe: DetectionProbe,
    /// Present only for partial-CRC convolution layers.
    pub crc: Option<CrcGrid>,
}

/// How the backward pass traverses this (assumed-clean) layer when an
/// earlier layer in the same bracket is being recovered.
#[derive(Debug, Clone)]
pub enum BackwardPlan {
    /// First parameterized layer after a checkpoint: never traversed.
    NotNeeded,
    /// The layer relationship is invertible as-is.
    Natural,
    /// Dense with fewer columns than inputs: `alpha` dummy parameter columns
    /// regenerated from `seed`, with their per-sample outputs stored.
    DummyCols { seed: u64, alpha: usize, outputs: Vec<Tensor> },
    /// Conv with fewer filters than filter cells: `count` dummy filters
    /// regenerated from `seed`, per-sample outputs stored.
    DummyFilters { seed: u64, count: usize, outputs: Vec<Tensor> },
}

/// How this layer's own parameters are solved once its input and output are
/// known.
#[derive(Debug, Clone)]
pub enum SolvePlan {
    /// params = output − input.
    Bias,
    /// Enough input rows to solve directly.
    DenseFull,
    /// `rows` dummy input rows regenerated from `seed`; their outputs stored
    /// as a `[rows, P]` tensor.
    DenseDummyRows { seed: u64, rows: usize, outputs: Tensor },
    /// Enough patches to solve directly.
    ConvFull,
    /// `count` dummy input tensors regenerated from `seed`; their conv
    /// outputs stored.
    ConvDummyInputs { seed: u64, count: usize, outputs: Vec<Tensor> },
    /// Only CRC-flagged parameters are solved (at most one patch-count's
    /// worth per filter); needs the CrcGrid in the detection record.
    ConvPartialCrc,
}

#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub layer: usize,
    pub backward: BackwardPlan,
    pub solve: SolvePlan,
}

#[derive(Debug, Clone)]
pub struct MilrState {
    pub config: MilrConfig,
    pub crc_poly: u32,
    /// Ascending by position; first is the global input, last the golden
    /// output.
    pub checkpoints: Vec<Checkpoint>,
    pub detections: Vec<DetectionRecord>,
    pub plans: Vec<LayerPlan>,
    /// Byte total of all stored sidecar tensors plus 8 per stored seed.
    pub plan_cost_bytes: u64,
}

impl MilrState {
    pub fn plan_for(&self, layer: usize) -> Option<&LayerPlan> {
        self.plans.iter().find(|p| p.layer == layer)
    }

    pub fn detection_for(&self, layer: usize) -> Option<&DetectionRecord> {
        self.detections.iter().find(|d| d.layer == layer)
    }

    /// Nearest checkpoint position at or before the input of `layer`.
    pub fn prev_checkpoint(&self, layer: usize) -> usize {
        self.checkpoints
            .iter()
            .map(|c| c.position)
            .filter(|&p| p <= layer)
            .max()
            .unwrap_or(0)
    }

    /// Nearest checkpoint position at or after the output of `layer`.
    pub fn next_checkpoint(&self, layer: usize) -> usize {
        self.checkpoints
            .iter()
            .map(|c| c.position)
            .filter(|&p| p > layer)
            .min()
            .unwrap_or(layer + 1)
    }
}

fn tensors_bytes(ts: &[Tensor]) -> u64 {
    ts.iter().map(|t| t.byte_len() as u64).sum()
}

/// The checkpoint samples at `position`, materializing derived checkpoints
/// by forwarding from the previous stored one.
pub fn checkpoint_samples(net: &Network, state: &MilrState, position: usize) -> Result<Vec<Tensor>> {
    let idx = state
        .checkpoints
        .iter()
        .position(|c| c.position == position)
        .ok_or_else(|| MilrError::PlanCorrupted(format!("no checkpoint at position {position}")))?;
    match &state.checkpoints[idx].data {
        CheckpointData::Stored(samples) => Ok(samples.clone()),
        CheckpointData::Derived => {
            if idx == 0 {
                return Err(MilrError::PlanCorrupted(
                    "derived checkpoint with no predecessor".into(),
                ));
            }
            let prev = state.checkpoints[idx - 1].position;
            let base = checkpoint_samples(net, state, prev)?;
            base.iter()
                .map(|x| net.forward_range(x, prev, position, true))
                .collect()
        }
    }
}

/// In-order sum of all parameters, accumulated in the tensor's own dtype.
fn native_sum(params: &Tensor) -> Tensor {
    match params.data() {
        TensorData::F32(v) => Tensor::from_f32(vec![1], vec![v.iter().sum::<f32>()]),
        TensorData::F64(v) => Tensor::from_f64(vec![1], vec![v.iter().sum::<f64>()]),
    }
}

/// The first im2col row whose receptive field contains no padding, so every
/// filter cell influences the probe output. Falls back to row 0 for inputs
/// smaller than the filter.
fn interior_patch_row(layer: &Layer, f: usize, stride: usize, padding: crate::linalg::Padding) -> Result<usize> {
    let (h, w, z) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
    let (_, _, map) = patch_map(h, w, z, f, stride, padding)?;
    let cols = f * f * z;
    Ok((0..map.len() / cols)
        .find(|r| map[r * cols..(r + 1) * cols].iter().all(Option::is_some))
        .unwrap_or(0))
}

/// Computes a conv probe: the output of every filter at im2col row `row` of
/// input `x`, with the same accumulation order as the forward kernel.
fn conv_probe(
    layer: &Layer,
    filters: &Tensor,
    stride: usize,
    padding: crate::linalg::Padding,
    x: &Tensor,
    row: usize,
) -> Result<Tensor> {
    let (h, w, z) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
    let f = filters.shape()[0];
    let y = filters.shape()[3];
    let (_, _, map) = patch_map(h, w, z, f, stride, padding)?;
    let cols = f * f * z;
    // Materialize the receptive field and convolve just that patch: a
    // valid-padding conv of an [f, f, z] input is exactly one output row.
    let mut patch = Tensor::zeros(vec![f, f, z], x.dtype());
    for (c, slot) in map[row * cols..(row + 1) * cols].iter().enumerate() {
        if let Some(i) = *slot {
            patch.set_word(c, x.word(i));
        }
    }
    conv2d(&patch, filters, 1, crate::linalg::Padding::Valid)?.reshaped(vec![y])
}

/// Builds (or rebuilds) the detection probe for a parameterized layer. The
/// CRC grid, if any, must be attached by the caller.
pub(crate) fn build_probe(net: &Network, layer_idx: usize, seed: u64) -> Result<DetectionProbe> {
    let layer = net.layer(layer_idx);
    let mut rng = SplitMix64::new(seed);
    match &layer.spec {
        LayerSpec::Dense { .. } => {
            let x = rng.fill_tensor(&layer.in_shape, net.dtype());
            Ok(DetectionProbe::DenseColumns {
                outputs: layer_forward(layer, &x, true)?,
            })
        }
        LayerSpec::Conv2D { filters, stride, padding } => {
            let x = rng.fill_tensor(&layer.in_shape, net.dtype());
            let row = interior_patch_row(layer, filters.shape()[0], *stride, *padding)?;
            Ok(DetectionProbe::ConvFilters {
                row,
                outputs: conv_probe(layer, filters, *stride, *padding, &x, row)?,
            })
        }
        LayerSpec::Bias { params, .. } => Ok(DetectionProbe::BiasSum {
            sum: native_sum(params),
        }),
        other => Err(MilrError::Domain(format!(
            "layer {layer_idx} ({}) carries no parameters",
            other.kind_name()
        ))),
    }
}

fn probe_stored_bytes(probe: &DetectionProbe) -> u64 {
    match probe {
        DetectionProbe::DenseColumns { outputs } => outputs.byte_len() as u64,
        DetectionProbe::ConvFilters { outputs, .. } => outputs.byte_len() as u64,
        DetectionProbe::BiasSum { sum } => sum.byte_len() as u64,
    }
}

/// Plans and materializes all sidecar data for `net`.
pub fn initialize(net: &Network, config: MilrConfig) -> Result<MilrState> {
    if config.batch == 0 {
        return Err(MilrError::Domain("batch must be >= 1".into()));
    }
    let n = net.len();
    let dtype = net.dtype();
    let esize = dtype.byte_size() as u64;
    let batch = config.batch as u64;

    // Recovery samples and their linearized activations: acts[p] is the
    // input of layer p, acts[n] the final output.
    let mut rng = SplitMix64::new(config.recovery_seed);
    let xs: Vec<Tensor> = (0..config.batch)
        .map(|_| rng.fill_tensor(net.input_shape(), dtype))
        .collect();
    let mut acts: Vec<Vec<Tensor>> = vec![xs];
    for p in 0..n {
        let next = acts[p]
            .iter()
            .map(|x| layer_forward(net.layer(p), x, true))
            .collect::<Result<Vec<_>>>()?;
        acts.push(next);
    }

    let mut cost: u64 = 16; // detect + recovery seeds
    let mut checkpoints = vec![Checkpoint {
        position: 0,
        data: CheckpointData::Stored(acts[0].clone()),
    }];
    cost += tensors_bytes(&acts[0]);
    let mut plans = Vec::new();
    let mut detections = Vec::new();
    let mut pending = false; // a parameterized layer exists in the open bracket
    let mut had_params = false; // any parameters since the last checkpoint

    for idx in 1..n {
        let layer = net.layer(idx);
        match &layer.spec {
            LayerSpec::MaxPool { .. } => {
                // Pooling is not invertible: force an input checkpoint.
                let data = if had_params {
                    cost += tensors_bytes(&acts[idx]);
                    CheckpointData::Stored(acts[idx].clone())
                } else {
                    CheckpointData::Derived
                };
                checkpoints.push(Checkpoint { position: idx, data });
                pending = false;
                had_params = false;
            }
            LayerSpec::Conv2D { .. } | LayerSpec::Dense { .. } | LayerSpec::Bias { .. } => {
                had_params = true;
                let bseed = derive_seed(config.recovery_seed, (idx as u64) << 1);
                let sseed = derive_seed(config.recovery_seed, ((idx as u64) << 1) | 1);
                let in_bytes = layer.in_shape.iter().product::<usize>() as u64 * esize;

                let backward = if !pending {
                    pending = true;
                    BackwardPlan::NotNeeded
                } else {
                    match &layer.spec {
                        LayerSpec::Bias { .. } => BackwardPlan::Natural,
                        LayerSpec::Dense { params } => {
                            let (nn, pp) = (params.shape()[0], params.shape()[1]);
                            if pp >= nn {
                                BackwardPlan::Natural
                            } else {
                                let alpha = nn - pp;
                                let dummy_cost = batch * alpha as u64 * esize + 8;
                                if in_bytes * batch <= dummy_cost {
                                    cost += tensors_bytes(&acts[idx]);
                                    checkpoints.push(Checkpoint {
                                        position: idx,
                                        data: CheckpointData::Stored(acts[idx].clone()),
                                    });
                                    had_params = true;
                                    BackwardPlan::NotNeeded
                                } else {
                                    let bd = SplitMix64::new(bseed).fill_tensor(&[nn, alpha], dtype);
                                    let outputs = acts[idx]
                                        .iter()
                                        .map(|x| {
                                            matmul(&x.reshaped(vec![1, nn])?, &bd)?
                                                .reshaped(vec![alpha])
                                        })
                                        .collect::<Result<Vec<_>>>()?;
                                    cost += dummy_cost;
                                    BackwardPlan::DummyCols { seed: bseed, alpha, outputs }
                                }
                            }
                        }
                        LayerSpec::Conv2D { filters, stride, padding } => {
                            let fsh = filters.shape();
                            let (f, z, y) = (fsh[0], fsh[2], fsh[3]);
                            let f2z = f * f * z;
                            if y >= f2z {
                                BackwardPlan::Natural
                            } else {
                                let count = f2z - y;
                                let g2 = (layer.out_shape[0] * layer.out_shape[1]) as u64;
                                let dummy_cost = batch * g2 * count as u64 * esize + 8;
                                if in_bytes * batch <= dummy_cost {
                                    cost += tensors_bytes(&acts[idx]);
                                    checkpoints.push(Checkpoint {
                                        position: idx,
                                        data: CheckpointData::Stored(acts[idx].clone()),
                                    });
                                    had_params = true;
                                    BackwardPlan::NotNeeded
                                } else {
                                    let wd =
                                        SplitMix64::new(bseed).fill_tensor(&[f, f, z, count], dtype);
                                    let outputs = acts[idx]
                                        .iter()
                                        .map(|x| conv2d(x, &wd, *stride, *padding))
                                        .collect::<Result<Vec<_>>>()?;
                                    cost += dummy_cost;
                                    BackwardPlan::DummyFilters { seed: bseed, count, outputs }
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                };

                let (solve, crc) = match &layer.spec {
                    LayerSpec::Bias { .. } => (SolvePlan::Bias, None),
                    LayerSpec::Dense { params } => {
                        let (nn, pp) = (params.shape()[0], params.shape()[1]);
                        if config.batch >= nn {
                            (SolvePlan::DenseFull, None)
                        } else {
                            let rows = nn - config.batch;
                            let xd = SplitMix64::new(sseed).fill_tensor(&[rows, nn], dtype);
                            let outputs = matmul(&xd, params)?;
                            cost += (rows * pp) as u64 * esize + 8;
                            (SolvePlan::DenseDummyRows { seed: sseed, rows, outputs }, None)
                        }
                    }
                    LayerSpec::Conv2D { filters, stride, padding } => {
                        let fsh = filters.shape();
                        let (f, z, y) = (fsh[0], fsh[2], fsh[3]);
                        let f2z = f * f * z;
                        let g2 = layer.out_shape[0] * layer.out_shape[1];
                        if config.batch * g2 >= f2z {
                            (SolvePlan::ConvFull, None)
                        } else {
                            let count = (f2z - config.batch * g2).div_ceil(g2);
                            let dummy_cost = (count * g2 * y) as u64 * esize + 8;
                            let partial_cost = CrcGrid::byte_cost(f, z, y) as u64;
                            if partial_cost < dummy_cost {
                                cost += partial_cost;
                                (SolvePlan::ConvPartialCrc, Some(CrcGrid::build(filters)))
                            } else {
                                let mut drng = SplitMix64::new(sseed);
                                let mut outputs = Vec::with_capacity(count);
                                for _ in 0..count {
                                    let xd = drng.fill_tensor(&layer.in_shape, dtype);
                                    outputs.push(conv2d(&xd, filters, *stride, *padding)?);
                                }
                                cost += dummy_cost;
                                (SolvePlan::ConvDummyInputs { seed: sseed, count, outputs }, None)
                            }
                        }
                    }
                    _ => unreachable!(),
                };

                plans.push(LayerPlan { layer: idx, backward, solve });

                let dseed = derive_seed(config.detect_seed, idx as u64);
                let probe = build_probe(net, idx, dseed)?;
                cost += probe_stored_bytes(&probe) + 8;
                detections.push(DetectionRecord { layer: idx, seed: dseed, probe, crc });
            }
            _ => {}
        }
    }

    // Golden output checkpoint.
    cost += tensors_bytes(&acts[n]);
    checkpoints.push(Checkpoint {
        position: n,
        data: CheckpointData::Stored(acts[n].clone()),
    });

    Ok(MilrState {
        config,
        crc_poly: CRC_POLY,
        checkpoints,
        detections,
        plans,
        plan_cost_bytes: cost,
    })
}

/// Rebuilds the detection record (probe, bias sum, CRC grid) for a layer
/// whose parameters were just rewritten by recovery.
pub(crate) fn refresh_detection(net: &Network, state: &mut MilrState, layer: usize) -> Result<()> {
    let Some(pos) = state.detections.iter().position(|d| d.layer == layer) else {
        return Ok(());
    };
    let seed = state.detections[pos].seed;
    let probe = build_probe(net, layer, seed)?;
    let crc = if state.detections[pos].crc.is_some() {
        let params = net.layer(layer).spec.params().ok_or_else(|| {
            MilrError::PlanCorrupted(format!("layer {layer} lost its parameters"))
        })?;
        Some(CrcGrid::build(params))
    } else {
        None
    };
    state.detections[pos].probe = probe;
    state.detections[pos].crc = crc;
    Ok(())
}
