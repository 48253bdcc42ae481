//! Deterministic dense kernels (matmul, conv2d, im2col) plus the f64
//! least-squares solver everything in recovery funnels through.
//!
//! Forward kernels accumulate in the tensor dtype with a fixed summation
//! order so that detection can compare outputs bit-for-bit. The solver always
//! works in f64; callers round the solution back to the network dtype.

use crate::error::{MilrError, Result};
use crate::tensor::{Tensor, TensorData};
use ndarray::{Array1, Array2};
use ndarray_linalg::{FactorizeInto, LeastSquaresSvdInto, Solve};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    Same,
}

impl Padding {
    pub fn tag(self) -> u8 {
        match self {
            Padding::Valid => 0,
            Padding::Same => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Padding::Valid),
            1 => Ok(Padding::Same),
            other => Err(MilrError::Format(format!("unknown padding tag {other}"))),
        }
    }
}

/// Output extent and (before, after) zero padding for one spatial axis:
/// `g = ((m - f + pad_total) / stride) + 1`.
pub fn conv_axis(m: usize, f: usize, stride: usize, padding: Padding) -> Result<(usize, usize, usize)> {
    if stride == 0 {
        return Err(MilrError::shape("stride must be >= 1"));
    }
    match padding {
        Padding::Valid => {
            if f > m {
                return Err(MilrError::shape(format!("filter {f} larger than input {m}")));
            }
            if (m - f) % stride != 0 {
                return Err(MilrError::shape(format!(
                    "non-integral output size for m={m}, f={f}, stride={stride}"
                )));
            }
            Ok(((m - f) / stride + 1, 0, 0))
        }
        Padding::Same => {
            // Output size ceil(m / stride); total padding splits low-first.
            let g = m.div_ceil(stride);
            let needed = (g - 1) * stride + f;
            let total = needed.saturating_sub(m);
            let before = total / 2;
            Ok((g, before, total - before))
        }
    }
}

fn matmul_kernel<T>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T>
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign,
{
    let mut c = vec![T::default(); m * p];
    for i in 0..m {
        for k in 0..n {
            let aik = a[i * n + k];
            let row = &mut c[i * p..(i + 1) * p];
            let brow = &b[k * p..(k + 1) * p];
            for j in 0..p {
                row[j] += aik * brow[j];
            }
        }
    }
    c
}

/// `c[i,j] = sum_k a[i,k] * b[k,j]`, accumulated in the tensor dtype with k
/// ascending.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 {
        return Err(MilrError::shape("matmul expects rank-2 tensors"));
    }
    if ash[1] != bsh[0] {
        return Err(MilrError::shape(format!(
            "inner dimensions differ: {:?} x {:?}",
            ash, bsh
        )));
    }
    let (m, n, p) = (ash[0], ash[1], bsh[1]);
    let shape = vec![m, p];
    match (a.data(), b.data()) {
        (TensorData::F32(x), TensorData::F32(y)) => {
            Ok(Tensor::from_f32(shape, matmul_kernel(x, y, m, n, p)))
        }
        (TensorData::F64(x), TensorData::F64(y)) => {
            Ok(Tensor::from_f64(shape, matmul_kernel(x, y, m, n, p)))
        }
        _ => Err(MilrError::Dtype),
    }
}

/// Flat input index for each (output position, filter cell) pair, or None for
/// zero padding. Row `r = i * gw + j`, column `(f1 * f + f2) * z + c`.
pub fn patch_map(
    h: usize,
    w: usize,
    z: usize,
    f: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, Vec<Option<usize>>)> {
    let (gh, pad_h, _) = conv_axis(h, f, stride, padding)?;
    let (gw, pad_w, _) = conv_axis(w, f, stride, padding)?;
    let cols = f * f * z;
    let mut map = Vec::with_capacity(gh * gw * cols);
    for i in 0..gh {
        for j in 0..gw {
            for f1 in 0..f {
                for f2 in 0..f {
                    let yi = (i * stride + f1) as isize - pad_h as isize;
                    let xj = (j * stride + f2) as isize - pad_w as isize;
                    let inside = yi >= 0 && (yi as usize) < h && xj >= 0 && (xj as usize) < w;
                    for c in 0..z {
                        map.push(if inside {
                            Some(((yi as usize * w) + xj as usize) * z + c)
                        } else {
                            None
                        });
                    }
                }
            }
        }
    }
    Ok((gh, gw, map))
}

/// Lowers the input to a `[G*G, F*F*Z]` matrix whose row r is the flattened
/// receptive field of output position r (zeros at padded positions).
pub fn im2col(input: &Tensor, f: usize, stride: usize, padding: Padding) -> Result<Tensor> {
    let sh = input.shape();
    if sh.len() != 3 {
        return Err(MilrError::shape("im2col expects [h, w, z] input"));
    }
    let (h, w, z) = (sh[0], sh[1], sh[2]);
    let (gh, gw, map) = patch_map(h, w, z, f, stride, padding)?;
    let cols = f * f * z;
    let shape = vec![gh * gw, cols];
    match input.data() {
        TensorData::F32(x) => {
            let data = map.iter().map(|m| m.map_or(0.0, |i| x[i])).collect();
            Ok(Tensor::from_f32(shape, data))
        }
        TensorData::F64(x) => {
            let data = map.iter().map(|m| m.map_or(0.0, |i| x[i])).collect();
            Ok(Tensor::from_f64(shape, data))
        }
    }
}

fn conv2d_kernel<T>(
    x: &[T],
    filt: &[T],
    map: &[Option<usize>],
    rows: usize,
    cols: usize,
    y: usize,
) -> Vec<T>
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign,
{
    // Weighted sum per output position, filter cells visited in
    // (f1, f2, z) order to keep the accumulation order fixed.
    let mut out = vec![T::default(); rows * y];
    for r in 0..rows {
        let patch = &map[r * cols..(r + 1) * cols];
        let orow = &mut out[r * y..(r + 1) * y];
        for (c, slot) in patch.iter().enumerate() {
            if let Some(i) = *slot {
                let xv = x[i];
                let frow = &filt[c * y..(c + 1) * y];
                for k in 0..y {
                    orow[k] += xv * frow[k];
                }
            }
        }
    }
    out
}

/// 2-D convolution of a `[h, w, z]` input with `[f, f, z, y]` filters.
pub fn conv2d(input: &Tensor, filters: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (ish, fsh) = (input.shape(), filters.shape());
    if ish.len() != 3 || fsh.len() != 4 {
        return Err(MilrError::shape("conv2d expects [h,w,z] input and [f,f,z,y] filters"));
    }
    if fsh[0] != fsh[1] || fsh[2] != ish[2] {
        return Err(MilrError::shape(format!(
            "filters {:?} incompatible with input {:?}",
            fsh, ish
        )));
    }
    let (h, w, z, f, y) = (ish[0], ish[1], ish[2], fsh[0], fsh[3]);
    let (gh, gw, map) = patch_map(h, w, z, f, stride, padding)?;
    let cols = f * f * z;
    let shape = vec![gh, gw, y];
    match (input.data(), filters.data()) {
        (TensorData::F32(x), TensorData::F32(filt)) => Ok(Tensor::from_f32(
            shape,
            conv2d_kernel(x, filt, &map, gh * gw, cols, y),
        )),
        (TensorData::F64(x), TensorData::F64(filt)) => Ok(Tensor::from_f64(
            shape,
            conv2d_kernel(x, filt, &map, gh * gw, cols, y),
        )),
        _ => Err(MilrError::Dtype),
    }
}

/// Singular-value ratio below which a system is classified as rank-deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LsSolution {
    /// Minimum-norm least-squares solution, always f64.
    pub x: Tensor,
    pub rank: usize,
    pub full_rank: bool,
    /// Relative residual `||a x - c|| / ||c||` (0 when c is zero).
    pub residual: f64,
}

fn to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let sh = t.shape();
    if sh.len() != 2 {
        return Err(MilrError::shape("solver expects rank-2 tensors"));
    }
    Ok(Array2::from_shape_vec((sh[0], sh[1]), t.to_f64_vec()).unwrap())
}

fn relative_residual(a: &Array2<f64>, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
    let r = a.dot(x) - c;
    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if cn == 0.0 {
        rn
    } else {
        rn / cn
    }
}

/// Minimum-norm least-squares solution of `a x = c` with `a: [m, n]`,
/// `c: [m, k]`, computed in f64 regardless of the input dtype.
///
/// Square full-rank systems take an LU fast path; everything else (and any
/// LU result with a poor residual) goes through SVD-based `gelsd`.
pub fn solve_least_squares(a: &Tensor, c: &Tensor) -> Result<LsSolution> {
    let aa = to_array2(a)?;
    let cc = to_array2(c)?;
    let (m, n) = aa.dim();
    if cc.dim().0 != m {
        return Err(MilrError::shape(format!(
            "rhs rows {} do not match lhs rows {m}",
            cc.dim().0
        )));
    }
    let k = cc.dim().1;

    if m == n && m > 0 {
        if let Ok(lu) = aa.clone().factorize_into() {
            let mut x = Array2::<f64>::zeros((n, k));
            let mut ok = true;
            for j in 0..k {
                let col: Array1<f64> = cc.column(j).to_owned();
                match lu.solve(&col) {
                    Ok(sol) => x.column_mut(j).assign(&sol),
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                let residual = relative_residual(&aa, &x, &cc);
                if residual.is_finite() && residual < 1e-6 {
                    return Ok(LsSolution {
                        x: Tensor::from_f64(vec![n, k], x.into_raw_vec()),
                        rank: n,
                        full_rank: true,
                        residual,
                    });
                }
            }
        }
    }

    let out = aa
        .clone()
        .least_squares_into(cc.clone())
        .map_err(|e| MilrError::Singular(format!("least-squares failed: {e}")))?;
    let x = out.solution;
    let rank = out.rank as usize;
    let sv = &out.singular_values;
    let full_rank = if sv.is_empty() {
        rank == n
    } else {
        let smax = sv[0];
        let smin = sv[sv.len().min(n) - 1];
        smax > 0.0 && smin / smax >= RANK_TOLERANCE && rank >= n.min(m)
    } && rank >= n;
    let residual = relative_residual(&aa, &x, &cc);
    Ok(LsSolution {
        x: Tensor::from_f64(vec![n, k], x.into_raw_vec()),
        rank,
        full_rank,
        residual,
    })
}

/// Like [`solve_least_squares`] but errors when the system is numerically
/// rank-deficient and an exact solution was required.
pub fn solve_exact(a: &Tensor, c: &Tensor) -> Result<LsSolution> {
    let sol = solve_least_squares(a, c)?;
    if !sol.full_rank {
        return Err(MilrError::Singular(format!(
            "rank {} below required {} (tolerance {RANK_TOLERANCE})",
            sol.rank,
            a.shape()[1]
        )));
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Dtype;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += a[i * n + k] * b[k * p + j];
                }
                c[i * p + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_f64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::from_f64(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_f64(vec![1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_f64(vec![2, 1], vec![3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.to_f64_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_against_naive_oracle() {
        let mut rng = SplitMix64::new(11);
        let a = rng.fill_tensor(&[5, 7], Dtype::F64);
        let b = rng.fill_tensor(&[7, 3], Dtype::F64);
        let c = matmul(&a, &b).unwrap();
        let expect = naive_matmul(&a.to_f64_vec(), &b.to_f64_vec(), 5, 7, 3);
        for (got, want) in c.to_f64_vec().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(vec![2, 3], Dtype::F64);
        let b = Tensor::zeros(vec![2, 3], Dtype::F64);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn conv_output_sizes_match_architectures() {
        // 28x28 valid 3x3 -> 26; 32x32 same 3x3 -> 32
        assert_eq!(conv_axis(28, 3, 1, Padding::Valid).unwrap().0, 26);
        assert_eq!(conv_axis(32, 3, 1, Padding::Same).unwrap().0, 32);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = SplitMix64::new(3);
        let x = rng.fill_tensor(&[4, 4, 1], Dtype::F64);
        let f = Tensor::from_f64(vec![1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &f, 1, Padding::Valid).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn im2col_single_field_is_flattened_input() {
        let x = Tensor::from_f64(vec![3, 3, 1], (1..=9).map(|v| v as f64).collect());
        let m = im2col(&x, 3, 1, Padding::Valid).unwrap();
        assert_eq!(m.shape(), &[1, 9]);
        assert_eq!(m.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn im2col_matmul_reproduces_conv2d() {
        let mut rng = SplitMix64::new(99);
        let x = rng.fill_tensor(&[4, 4, 1], Dtype::F64);
        let f = rng.fill_tensor(&[3, 3, 1, 2], Dtype::F64);
        let lowered = im2col(&x, 3, 1, Padding::Valid).unwrap();
        assert_eq!(lowered.shape(), &[4, 9]);
        let wf = f.reshaped(vec![9, 2]).unwrap();
        let via_gemm = matmul(&lowered, &wf).unwrap();
        let direct = conv2d(&x, &f, 1, Padding::Valid).unwrap();
        assert!(via_gemm.bit_eq(&direct.reshaped(vec![4, 2]).unwrap()));
    }

    #[test]
    fn im2col_same_padding_zero_rows() {
        let x = Tensor::from_f64(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let m = im2col(&x, 3, 1, Padding::Same).unwrap();
        // corner receptive fields include padded zeros
        let row0 = &m.to_f64_vec()[0..9];
        assert_eq!(row0[0], 0.0);
        assert_eq!(row0[4], 1.0);
    }

    #[test]
    fn solve_identity_system() {
        let a = Tensor::from_f64(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut rng = SplitMix64::new(5);
        let c = rng.fill_tensor(&[3, 2], Dtype::F64);
        let sol = solve_exact(&a, &c).unwrap();
        for (got, want) in sol.x.to_f64_vec().iter().zip(c.to_f64_vec()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_overdetermined_consistent_recovers_exactly() {
        let mut rng = SplitMix64::new(17);
        let a = rng.fill_tensor(&[8, 4], Dtype::F64);
        let x0 = rng.fill_tensor(&[4, 3], Dtype::F64);
        let c = matmul(&a, &x0).unwrap();
        let sol = solve_exact(&a, &c).unwrap();
        for (got, want) in sol.x.to_f64_vec().iter().zip(x0.to_f64_vec()) {
            assert!((got - want).abs() < 1e-8 * want.abs().max(1.0));
        }
    }

    #[test]
    fn solve_underdetermined_beats_random_candidates() {
        let mut rng = SplitMix64::new(23);
        let a = rng.fill_tensor(&[2, 4], Dtype::F64);
        let c = rng.fill_tensor(&[2, 1], Dtype::F64);
        let sol = solve_least_squares(&a, &c).unwrap();
        let aa = to_array2(&a).unwrap();
        let cc = to_array2(&c).unwrap();
        let best = relative_residual(&aa, &to_array2(&sol.x).unwrap(), &cc);
        for _ in 0..1000 {
            let cand = rng.fill_tensor(&[4, 1], Dtype::F64);
            let r = relative_residual(&aa, &to_array2(&cand).unwrap(), &cc);
            assert!(best <= r + 1e-12);
        }
    }

    #[test]
    fn solve_rank_deficient_flagged() {
        // Two identical columns.
        let a = Tensor::from_f64(vec![3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let c = Tensor::from_f64(vec![3, 1], vec![2.0, 4.0, 6.0]);
        let sol = solve_least_squares(&a, &c).unwrap();
        assert!(!sol.full_rank);
        assert!(solve_exact(&a, &c).is_err());
    }
}
