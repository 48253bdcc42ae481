//! Parameter solving: given a layer's (reconstructed) input and output,
//! rebuild its parameters.

use super::crc::CrcCoord;
use crate::error::{MilrError, Result};
use crate::linalg::{im2col, solve_least_squares, Padding};
use crate::network::BiasAttach;
use crate::tensor::{idx3, Dtype, Tensor};

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub params: Tensor,
    /// Set when the system was rank-deficient and the least-squares fallback
    /// produced a minimum-norm (possibly imprecise) solution.
    pub degraded: bool,
}

/// `params = output − input`, de-duplicated across the broadcast axis by
/// taking position (0, 0, ·) for conv bias and the vector itself for dense.
pub fn solve_bias_params(
    input: &Tensor,
    output: &Tensor,
    attach: BiasAttach,
    count: usize,
    dtype: Dtype,
) -> Result<Tensor> {
    if input.shape() != output.shape() {
        return Err(MilrError::shape(format!(
            "bias solve: input {:?} vs output {:?}",
            input.shape(),
            output.shape()
        )));
    }
    let values: Vec<f64> = match attach {
        BiasAttach::Conv => {
            let sh = input.shape();
            (0..count)
                .map(|c| output.get(idx3(sh, 0, 0, c)) - input.get(idx3(sh, 0, 0, c)))
                .collect()
        }
        BiasAttach::Dense => (0..count).map(|i| output.get(i) - input.get(i)).collect(),
    };
    Ok(Tensor::from_f64_values(vec![count], &values, dtype))
}

/// Solves `X · B = C` for `B` given stacked input rows `x_rows` (`m` rows of
/// length `n`) and output rows `c_rows` (`m` rows of length `p`).
pub fn solve_dense_params(
    x_rows: &[Vec<f64>],
    c_rows: &[Vec<f64>],
    n: usize,
    p: usize,
    dtype: Dtype,
) -> Result<SolveOutcome> {
    let m = x_rows.len();
    if m != c_rows.len() || m < n {
        return Err(MilrError::NoRecovery(format!(
            "dense solve needs at least {n} rows, got {m}"
        )));
    }
    let a = Tensor::from_f64(vec![m, n], x_rows.concat());
    let c = Tensor::from_f64(vec![m, p], c_rows.concat());
    let sol = solve_least_squares(&a, &c)?;
    Ok(SolveOutcome {
        params: Tensor::from_f64_values(vec![n, p], &sol.x.to_f64_vec(), dtype),
        degraded: !sol.full_rank,
    })
}

/// Assembles the im2col system for a conv layer from (input, output) sample
/// pairs: one row per output position per sample.
pub fn conv_system(
    inputs: &[Tensor],
    outputs: &[Tensor],
    f: usize,
    stride: usize,
    padding: Padding,
    y: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut a_rows = Vec::new();
    let mut c_rows = Vec::new();
    for (x, out) in inputs.iter().zip(outputs) {
        let lowered = im2col(x, f, stride, padding)?;
        let cols = lowered.shape()[1];
        let rows = lowered.shape()[0];
        if out.len() != rows * y {
            return Err(MilrError::shape(format!(
                "conv solve: output has {} values, expected {}",
                out.len(),
                rows * y
            )));
        }
        for r in 0..rows {
            a_rows.push((0..cols).map(|c| lowered.get(r * cols + c)).collect());
            c_rows.push((0..y).map(|yi| out.get(r * y + yi)).collect());
        }
    }
    Ok((a_rows, c_rows))
}

/// Full conv solve: `im2col(X) · W = C` for the flattened filters
/// `W: [f²z, y]`.
pub fn solve_conv_params_full(
    a_rows: &[Vec<f64>],
    c_rows: &[Vec<f64>],
    f2z: usize,
    y: usize,
    filter_shape: Vec<usize>,
    dtype: Dtype,
) -> Result<SolveOutcome> {
    let m = a_rows.len();
    if m < f2z {
        return Err(MilrError::NoRecovery(format!(
            "conv solve needs at least {f2z} patch rows, got {m}"
        )));
    }
    let a = Tensor::from_f64(vec![m, f2z], a_rows.concat());
    let c = Tensor::from_f64(vec![m, y], c_rows.concat());
    let sol = solve_least_squares(&a, &c)?;
    Ok(SolveOutcome {
        params: Tensor::from_f64_values(filter_shape, &sol.x.to_f64_vec(), dtype),
        degraded: !sol.full_rank,
    })
}

/// Partial conv solve: only CRC-flagged coordinates are treated as unknown.
/// The contribution of every trusted parameter is subtracted from the output
/// and the reduced system is solved per filter. Fails when any filter has
/// more flagged parameters than there are patch rows.
pub fn solve_conv_params_partial(
    current: &Tensor,
    a_rows: &[Vec<f64>],
    c_rows: &[Vec<f64>],
    flagged: &[CrcCoord],
    dtype: Dtype,
) -> Result<SolveOutcome> {
    let fsh = current.shape().to_vec();
    let (z, y) = (fsh[2], fsh[3]);
    let f2z = fsh[0] * fsh[1] * z;
    let m = a_rows.len();
    if flagged.is_empty() {
        return Err(MilrError::NoRecovery(
            "partial conv solve: CRC localized no parameters".into(),
        ));
    }
    let mut params = current.to_f64_vec();
    // Group flagged cells by filter: cell index = plane * z + coord.z.
    let mut per_filter: Vec<Vec<usize>> = vec![Vec::new(); y];
    for coord in flagged {
        if coord.y >= y || coord.z >= z || coord.plane >= fsh[0] * fsh[1] {
            return Err(MilrError::PlanCorrupted(format!(
                "flagged coordinate {coord:?} outside filter shape {fsh:?}"
            )));
        }
        let cell = coord.plane * z + coord.z;
        if !per_filter[coord.y].contains(&cell) {
            per_filter[coord.y].push(cell);
        }
    }
    let mut degraded = false;
    for (yi, cells) in per_filter.iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        if cells.len() > m {
            return Err(MilrError::NoRecovery(format!(
                "filter {yi}: {} flagged parameters exceed {m} available equations",
                cells.len()
            )));
        }
        let unknown: std::collections::HashSet<usize> = cells.iter().copied().collect();
        // Reduced RHS: output minus trusted-parameter contributions.
        let mut rhs = Vec::with_capacity(m);
        for (row, crow) in a_rows.iter().zip(c_rows) {
            let mut v = crow[yi];
            for c in 0..f2z {
                if !unknown.contains(&c) {
                    v -= row[c] * params[c * y + yi];
                }
            }
            rhs.push(v);
        }
        let mut a = Vec::with_capacity(m * cells.len());
        for row in a_rows {
            for &c in cells {
                a.push(row[c]);
            }
        }
        let a = Tensor::from_f64(vec![m, cells.len()], a);
        let c = Tensor::from_f64(vec![m, 1], rhs);
        let sol = solve_least_squares(&a, &c)?;
        if !sol.full_rank {
            degraded = true;
        }
        for (k, &cell) in cells.iter().enumerate() {
            params[cell * y + yi] = sol.x.get(k);
        }
    }
    Ok(SolveOutcome {
        params: Tensor::from_f64_values(fsh, &params, dtype),
        degraded,
    })
}
