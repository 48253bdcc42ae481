//! Backward passes: reconstructing a layer's input from its output.
//!
//! Activations are linearized (ReLU acts as identity), bias is a
//! subtraction, flatten a reshape. Dense and conv layers invert their linear
//! relationship, appending seeded dummy parameter columns / dummy filters
//! (whose outputs were stored at initialization) whenever the natural system
//! is under-determined. All arithmetic here is f64; results feed solvers,
//! never the forward path.

use super::{BackwardPlan, MilrState};
use crate::error::{MilrError, Result};
use crate::linalg::{patch_map, solve_least_squares};
use crate::network::{BiasAttach, LayerSpec, Network};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Inverts layer `idx`: given its output `y` (for recovery sample `sample`),
/// returns its input.
pub fn backward_layer(
    net: &Network,
    state: &MilrState,
    idx: usize,
    y: &Tensor,
    sample: usize,
) -> Result<Tensor> {
    let layer = net.layer(idx);
    match &layer.spec {
        LayerSpec::Input { .. } | LayerSpec::ReLU => Ok(y.clone()),
        LayerSpec::Flatten => y.reshaped(layer.in_shape.clone()),
        LayerSpec::MaxPool { .. } => Err(MilrError::PlanCorrupted(format!(
            "layer {idx}: pooling is not invertible and no checkpoint covers it"
        ))),
        LayerSpec::Bias { params, attach } => {
            let c = params.len();
            let mut x = Tensor::zeros(layer.in_shape.clone(), crate::tensor::Dtype::F64);
            for i in 0..y.len() {
                let b = match attach {
                    BiasAttach::Conv => params.get(i % c),
                    BiasAttach::Dense => params.get(i),
                };
                x.set(i, y.get(i) - b);
            }
            Ok(x)
        }
        LayerSpec::Dense { params } => {
            let (nn, pp) = (params.shape()[0], params.shape()[1]);
            match backward_plan(state, idx)? {
                BackwardPlan::Natural => {
                    // Solve Bᵀ xᵀ = yᵀ (requires P >= N).
                    let mut a = vec![0.0f64; pp * nn];
                    for p in 0..pp {
                        for ni in 0..nn {
                            a[p * nn + ni] = params.get(ni * pp + p);
                        }
                    }
                    let a = Tensor::from_f64(vec![pp, nn], a);
                    let c = Tensor::from_f64(vec![pp, 1], y.to_f64_vec());
                    let sol = solve_least_squares(&a, &c)?;
                    if !sol.full_rank {
                        return Err(MilrError::Singular(format!(
                            "layer {idx}: dense backward system is rank-deficient"
                        )));
                    }
                    sol.x.reshaped(layer.in_shape.clone())
                }
                BackwardPlan::DummyCols { seed, alpha, outputs } => {
                    let bd = SplitMix64::new(*seed).fill_tensor(&[nn, *alpha], net.dtype());
                    let douts = outputs.get(sample).ok_or_else(|| {
                        MilrError::PlanCorrupted(format!("layer {idx}: missing dummy outputs"))
                    })?;
                    dense_backward_augmented(layer, params, &bd, y, douts)
                }
                other => Err(MilrError::PlanCorrupted(format!(
                    "layer {idx}: backward pass not planned ({other:?})"
                ))),
            }
        }
        LayerSpec::Conv2D { filters, stride, padding } => {
            let plan = backward_plan(state, idx)?;
            let fsh = filters.shape();
            let (f, z, yc) = (fsh[0], fsh[2], fsh[3]);
            let f2z = f * f * z;
            let (extra_filters, extra_outputs): (Option<Tensor>, Option<&Tensor>) = match plan {
                BackwardPlan::Natural => (None, None),
                BackwardPlan::DummyFilters { seed, count, outputs } => {
                    let wd = SplitMix64::new(*seed).fill_tensor(&[f, f, z, *count], net.dtype());
                    let douts = outputs.get(sample).ok_or_else(|| {
                        MilrError::PlanCorrupted(format!("layer {idx}: missing dummy outputs"))
                    })?;
                    (Some(wd), Some(douts))
                }
                other => {
                    return Err(MilrError::PlanCorrupted(format!(
                        "layer {idx}: backward pass not planned ({other:?})"
                    )));
                }
            };
            let count = extra_filters.as_ref().map_or(0, |t| t.shape()[3]);
            let yt = yc + count;
            if yt < f2z {
                return Err(MilrError::Singular(format!(
                    "layer {idx}: conv backward under-determined ({yt} < {f2z})"
                )));
            }
            let (h, w) = (layer.in_shape[0], layer.in_shape[1]);
            let (gh, gw, map) = patch_map(h, w, z, f, *stride, *padding)?;
            let g2 = gh * gw;
            // One shared system matrix: row per (real or dummy) filter,
            // column per filter cell. RHS column per patch.
            let mut a = vec![0.0f64; yt * f2z];
            for c in 0..f2z {
                for yi in 0..yc {
                    a[yi * f2z + c] = filters.get(c * yc + yi);
                }
                if let Some(wd) = &extra_filters {
                    for k in 0..count {
                        a[(yc + k) * f2z + c] = wd.get(c * count + k);
                    }
                }
            }
            let mut rhs = vec![0.0f64; yt * g2];
            for r in 0..g2 {
                for yi in 0..yc {
                    rhs[yi * g2 + r] = y.get(r * yc + yi);
                }
                if let Some(douts) = extra_outputs {
                    for k in 0..count {
                        rhs[(yc + k) * g2 + r] = douts.get(r * count + k);
                    }
                }
            }
            let a = Tensor::from_f64(vec![yt, f2z], a);
            let c = Tensor::from_f64(vec![yt, g2], rhs);
            let sol = solve_least_squares(&a, &c)?;
            if !sol.full_rank {
                return Err(MilrError::Singular(format!(
                    "layer {idx}: conv backward system is rank-deficient"
                )));
            }
            // Scatter per-patch solutions back onto the input grid,
            // averaging overlapping sub-regions.
            let in_len: usize = layer.in_shape.iter().product();
            let mut acc = vec![0.0f64; in_len];
            let mut cnt = vec![0u32; in_len];
            for r in 0..g2 {
                for (cell, slot) in map[r * f2z..(r + 1) * f2z].iter().enumerate() {
                    if let Some(i) = *slot {
                        acc[i] += sol.x.get(cell * g2 + r);
                        cnt[i] += 1;
                    }
                }
            }
            for i in 0..in_len {
                if cnt[i] > 0 {
                    acc[i] /= cnt[i] as f64;
                }
            }
            Ok(Tensor::from_f64(layer.in_shape.clone(), acc))
        }
    }
}

fn backward_plan<'a>(state: &'a MilrState, idx: usize) -> Result<&'a BackwardPlan> {
    state
        .plan_for(idx)
        .map(|p| &p.backward)
        .ok_or_else(|| MilrError::PlanCorrupted(format!("layer {idx} has no recovery plan")))
}

fn dense_backward_augmented(
    layer: &crate::network::Layer,
    params: &Tensor,
    dummy: &Tensor,
    y: &Tensor,
    dummy_out: &Tensor,
) -> Result<Tensor> {
    let (nn, pp) = (params.shape()[0], params.shape()[1]);
    let alpha = dummy.shape()[1];
    let rows = pp + alpha;
    let mut a = vec![0.0f64; rows * nn];
    for ni in 0..nn {
        for p in 0..pp {
            a[p * nn + ni] = params.get(ni * pp + p);
        }
        for k in 0..alpha {
            a[(pp + k) * nn + ni] = dummy.get(ni * alpha + k);
        }
    }
    let mut rhs = y.to_f64_vec();
    rhs.extend(dummy_out.to_f64_vec());
    let a = Tensor::from_f64(vec![rows, nn], a);
    let c = Tensor::from_f64(vec![rows, 1], rhs);
    let sol = solve_least_squares(&a, &c)?;
    if !sol.full_rank {
        return Err(MilrError::Singular(
            "dense backward (dummy columns) is rank-deficient".into(),
        ));
    }
    sol.x.reshaped(layer.in_shape.clone())
}

/// Walks the backward pass from the checkpoint at `from_position` down to
/// (and including the inversion of) layer `target + 1`, yielding the output
/// of layer `target`.
pub fn output_of_layer(
    net: &Network,
    state: &MilrState,
    target: usize,
    from_position: usize,
    sink: &Tensor,
    sample: usize,
) -> Result<Tensor> {
    let mut y = sink.clone();
    for idx in (target + 1..from_position).rev() {
        y = backward_layer(net, state, idx, &y, sample)?;
    }
    Ok(y)
}
