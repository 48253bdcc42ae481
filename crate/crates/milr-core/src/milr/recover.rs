//! Recovery: moves the bracketing checkpoints to each flagged layer with a
//! forward and a backward pass, solves for the layer's parameters, and
//! writes them back.

use super::backward::output_of_layer;
use super::detect::{DetectionEntry, DetectionLog};
use super::solve::{
    conv_system, solve_bias_params, solve_conv_params_full, solve_conv_params_partial,
    solve_dense_params, SolveOutcome,
};
use super::{checkpoint_samples, refresh_detection, MilrState, SolvePlan};
use crate::error::{MilrError, Result};
use crate::network::{LayerSpec, Network};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    /// Sole erroneous layer in its bracket, solved with full rank.
    Recovered,
    /// Parameters were rewritten but without a correctness guarantee
    /// (multiple erroneous layers in the bracket, or a rank-deficient
    /// least-squares fallback).
    Degraded,
    Failed(String),
}

#[derive(Debug, Clone, Default)]
pub struct RecoveryReport {
    /// (layer, outcome), ascending by layer.
    pub outcomes: Vec<(usize, Outcome)>,
}

impl RecoveryReport {
    pub fn all_recovered(&self) -> bool {
        self.outcomes.iter().all(|(_, o)| *o == Outcome::Recovered)
    }

    pub fn recovered(&self) -> usize {
        self.count(|o| *o == Outcome::Recovered)
    }

    pub fn degraded(&self) -> usize {
        self.count(|o| *o == Outcome::Degraded)
    }

    pub fn failed(&self) -> usize {
        self.count(|o| matches!(o, Outcome::Failed(_)))
    }

    fn count(&self, pred: impl Fn(&Outcome) -> bool) -> usize {
        self.outcomes.iter().filter(|(_, o)| pred(o)).count()
    }
}

/// Heals every layer in the detection log. Failures are recorded in the
/// report, never raised; an error return means the sidecar state itself is
/// unusable.
pub fn recover(net: &mut Network, state: &mut MilrState, log: &DetectionLog) -> Result<RecoveryReport> {
    let mut brackets: BTreeMap<(usize, usize), Vec<&DetectionEntry>> = BTreeMap::new();
    for entry in &log.entries {
        brackets
            .entry((entry.prev_ckpt, entry.next_ckpt))
            .or_default()
            .push(entry);
    }

    let mut report = RecoveryReport::default();
    for ((prev, next), entries) in &brackets {
        let multi = entries.len() > 1;
        let sources = checkpoint_samples(net, state, *prev)?;
        let sinks = checkpoint_samples(net, state, *next)?;
        for entry in entries {
            let outcome = match recover_layer(net, state, entry, *prev, *next, &sources, &sinks) {
                Ok(SolveOutcome { params, degraded }) => {
                    *net.params_mut(entry.layer).ok_or_else(|| {
                        MilrError::PlanCorrupted(format!(
                            "flagged layer {} has no parameters",
                            entry.layer
                        ))
                    })? = params;
                    if multi || degraded {
                        Outcome::Degraded
                    } else {
                        Outcome::Recovered
                    }
                }
                Err(e) => Outcome::Failed(e.to_string()),
            };
            report.outcomes.push((entry.layer, outcome));
        }
    }
    report.outcomes.sort_by_key(|(layer, _)| *layer);

    // Recovered parameters are solver output, not bit-identical to the
    // originals; refresh those layers' detection records so detect() is
    // clean again. Degraded/failed layers keep their records and stay
    // flagged.
    for (layer, outcome) in &report.outcomes {
        if *outcome == Outcome::Recovered {
            refresh_detection(net, state, *layer)?;
        }
    }
    Ok(report)
}

fn recover_layer(
    net: &Network,
    state: &MilrState,
    entry: &DetectionEntry,
    prev: usize,
    next: usize,
    sources: &[Tensor],
    sinks: &[Tensor],
) -> Result<SolveOutcome> {
    let idx = entry.layer;
    let plan = state
        .plan_for(idx)
        .ok_or_else(|| MilrError::PlanCorrupted(format!("layer {idx} has no recovery plan")))?;

    // Move the checkpoints to the layer: forward (linearized) from the
    // preceding checkpoint, backward from the succeeding one.
    let inputs: Vec<Tensor> = sources
        .iter()
        .map(|x| net.forward_range(x, prev, idx, true))
        .collect::<Result<_>>()?;
    let outputs: Vec<Tensor> = sinks
        .iter()
        .enumerate()
        .map(|(s, y)| output_of_layer(net, state, idx, next, y, s))
        .collect::<Result<_>>()?;

    let dtype = net.dtype();
    let layer = net.layer(idx);
    match (&layer.spec, &plan.solve) {
        (LayerSpec::Bias { params, attach }, SolvePlan::Bias) => Ok(SolveOutcome {
            params: solve_bias_params(&inputs[0], &outputs[0], *attach, params.len(), dtype)?,
            degraded: false,
        }),
        (LayerSpec::Dense { params }, SolvePlan::DenseFull) => {
            let (n, p) = (params.shape()[0], params.shape()[1]);
            let x_rows: Vec<Vec<f64>> = inputs.iter().map(|t| t.to_f64_vec()).collect();
            let c_rows: Vec<Vec<f64>> = outputs.iter().map(|t| t.to_f64_vec()).collect();
            solve_dense_params(&x_rows, &c_rows, n, p, dtype)
        }
        (LayerSpec::Dense { params }, SolvePlan::DenseDummyRows { seed, rows, outputs: douts }) => {
            let (n, p) = (params.shape()[0], params.shape()[1]);
            let xd = SplitMix64::new(*seed).fill_tensor(&[*rows, n], dtype);
            let mut x_rows: Vec<Vec<f64>> = inputs.iter().map(|t| t.to_f64_vec()).collect();
            let mut c_rows: Vec<Vec<f64>> = outputs.iter().map(|t| t.to_f64_vec()).collect();
            for r in 0..*rows {
                x_rows.push((0..n).map(|j| xd.get(r * n + j)).collect());
                c_rows.push((0..p).map(|j| douts.get(r * p + j)).collect());
            }
            solve_dense_params(&x_rows, &c_rows, n, p, dtype)
        }
        (LayerSpec::Conv2D { filters, stride, padding }, solve_plan) => {
            let fsh = filters.shape().to_vec();
            let (f, z, y) = (fsh[0], fsh[2], fsh[3]);
            let f2z = f * f * z;
            let mut all_inputs = inputs;
            let mut all_outputs = outputs;
            match solve_plan {
                SolvePlan::ConvFull => {}
                SolvePlan::ConvDummyInputs { seed, count, outputs: douts } => {
                    let mut drng = SplitMix64::new(*seed);
                    for k in 0..*count {
                        all_inputs.push(drng.fill_tensor(&layer.in_shape, dtype));
                        all_outputs.push(douts[k].clone());
                    }
                }
                SolvePlan::ConvPartialCrc => {}
                other => {
                    return Err(MilrError::PlanCorrupted(format!(
                        "layer {idx}: conv layer with non-conv solve plan {other:?}"
                    )));
                }
            }
            let (a_rows, c_rows) = conv_system(&all_inputs, &all_outputs, f, *stride, *padding, y)?;
            if matches!(solve_plan, SolvePlan::ConvPartialCrc) {
                let flagged = entry.crc_flagged.as_deref().ok_or_else(|| {
                    MilrError::NoRecovery(format!(
                        "layer {idx}: partial recovery without CRC localization"
                    ))
                })?;
                solve_conv_params_partial(filters, &a_rows, &c_rows, flagged, dtype)
            } else {
                solve_conv_params_full(&a_rows, &c_rows, f2z, y, fsh, dtype)
            }
        }
        (spec, plan) => Err(MilrError::PlanCorrupted(format!(
            "layer {idx}: {} does not match its solve plan {plan:?}",
            spec.kind_name()
        ))),
    }
}
