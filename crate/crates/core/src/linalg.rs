//! Shared dense linear algebra: least squares with rank diagnostics,
//! truncated SVD of large Hankel matrices, and matrix exponential/logarithm.

use nalgebra::{DMatrix, DVector};
use rand_core::RngCore;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Lanczos approximation of the Gamma function for x > 0.
///
/// Coefficients for g = 7, n = 9 (Godfrey); relative error below 1e-13 on
/// the range used here (0 < x <= 2).
pub fn gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x));
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * acc
}

/// Result of a least-squares solve.
#[derive(Debug, Clone)]
pub struct Lstsq {
    pub solution: DVector<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// RMS of the residual Y - Phi * theta.
    pub residual_rms: f64,
}

/// Minimum-norm least squares via SVD with a relative rank tolerance.
///
/// Errors when the numerical rank is below the column count; the message
/// names columns with (near-)zero norm when that is the cause.
pub fn lstsq(phi: &DMatrix<f64>, y: &DVector<f64>, rtol: f64) -> Result<Lstsq> {
    let ncols = phi.ncols();
    if phi.nrows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "regressor has {} rows but output has {}",
            phi.nrows(),
            y.len()
        )));
    }
    if phi.nrows() < ncols {
        return Err(Error::RankDeficient(format!(
            "{} samples for {} unknowns",
            phi.nrows(),
            ncols
        )));
    }
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * rtol;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < ncols {
        let max_col_norm = (0..ncols).map(|j| phi.column(j).norm()).fold(0.0, f64::max);
        let dead: Vec<String> = (0..ncols)
            .filter(|&j| phi.column(j).norm() <= max_col_norm * rtol)
            .map(|j| j.to_string())
            .collect();
        let detail = if dead.is_empty() {
            "linearly dependent columns".to_string()
        } else {
            format!("column(s) {} are zero", dead.join(", "))
        };
        return Err(Error::RankDeficient(format!(
            "rank {rank} < {ncols} unknowns ({detail})"
        )));
    }
    let solution = svd
        .solve(y, tol)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let residual = y - phi * &solution;
    let residual_rms = residual.norm() / (y.len() as f64).sqrt();
    Ok(Lstsq {
        solution,
        rank,
        singular_values: svd.singular_values.iter().copied().collect(),
        residual_rms,
    })
}

/// Minimum-norm least squares that tolerates rank deficiency: singular
/// directions below the tolerance are truncated instead of rejected. Used
/// for warm starts where dependent columns are expected by construction.
pub fn lstsq_minnorm(phi: &DMatrix<f64>, y: &DVector<f64>, rtol: f64) -> Result<Lstsq> {
    if phi.nrows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "regressor has {} rows but output has {}",
            phi.nrows(),
            y.len()
        )));
    }
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * rtol;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let solution = svd
        .solve(y, tol)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let residual = y - phi * &solution;
    let residual_rms = residual.norm() / (y.len() as f64).sqrt();
    Ok(Lstsq {
        solution,
        rank,
        singular_values: svd.singular_values.iter().copied().collect(),
        residual_rms,
    })
}

/// y = H * x where H(i, j) = markov[i + j + shift] has the given shape.
fn hankel_matmul(
    markov: &[f64],
    rows: usize,
    cols: usize,
    shift: usize,
    x: &DMatrix<f64>,
) -> DMatrix<f64> {
    debug_assert_eq!(x.nrows(), cols);
    let p = x.ncols();
    let mut out = DMatrix::zeros(rows, p);
    let x_cols: Vec<DVector<f64>> = (0..p).map(|j| x.column(j).into_owned()).collect();
    let rows_data: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|i| {
            let band = &markov[i + shift..i + shift + cols];
            x_cols
                .iter()
                .map(|xc| band.iter().zip(xc.iter()).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    for (i, r) in rows_data.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    out
}

/// y = H^T * x for the same Hankel block.
fn hankel_matmul_t(
    markov: &[f64],
    rows: usize,
    cols: usize,
    shift: usize,
    x: &DMatrix<f64>,
) -> DMatrix<f64> {
    // H^T is the (cols x rows) Hankel block with the same generating sequence.
    hankel_matmul(markov, cols, rows, shift, x)
}

/// Truncated SVD of the Hankel block H(i, j) = markov[i + j + shift].
///
/// Dense SVD for small blocks; randomized range finding with power
/// iterations otherwise (deterministic: fixed-seed ChaCha12 test matrix).
pub fn hankel_truncated_svd(
    markov: &[f64],
    rows: usize,
    cols: usize,
    shift: usize,
    rank: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    if markov.len() < rows + cols + shift {
        return Err(Error::InvalidArgument(format!(
            "need {} markov parameters for a {rows}x{cols} Hankel (shift {shift}), got {}",
            rows + cols + shift,
            markov.len()
        )));
    }
    if rows * cols <= 250_000 {
        let h = DMatrix::from_fn(rows, cols, |i, j| markov[i + j + shift]);
        let svd = h.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let k = rank.min(svd.singular_values.len());
        return Ok((
            u.columns(0, k).into_owned(),
            DVector::from_iterator(k, svd.singular_values.iter().take(k).copied()),
            vt.rows(0, k).transpose(),
        ));
    }
    let p = (rank + 17).min(cols);
    let omega = gaussian_matrix(cols, p, 0x5eed_4a11);
    let mut y = hankel_matmul(markov, rows, cols, shift, &omega);
    for _ in 0..4 {
        let q = orthonormalize(y);
        let z = hankel_matmul_t(markov, rows, cols, shift, &q);
        let q2 = orthonormalize(z);
        y = hankel_matmul(markov, rows, cols, shift, &q2);
    }
    let q = orthonormalize(y);
    // B = Q^T H  (p x cols), via B^T = H^T Q
    let bt = hankel_matmul_t(markov, rows, cols, shift, &q);
    let svd = bt.transpose().svd(true, true);
    let u_small = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let k = rank.min(svd.singular_values.len());
    let u = &q * u_small.columns(0, k);
    Ok((
        u,
        DVector::from_iterator(k, svd.singular_values.iter().take(k).copied()),
        vt.rows(0, k).transpose(),
    ))
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    qr.q()
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let n = rows * cols;
    let z = standard_normals(seed, n);
    DMatrix::from_fn(rows, cols, |i, j| z[i * cols + j])
}

/// Standard normal samples from ChaCha12 via the Box-Muller transform.
///
/// Fully determined by the seed; stable across platforms.
pub fn standard_normals(seed: u64, n: usize) -> Vec<f64> {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        out.push(r * c);
        out.push(r * s);
    }
    out.truncate(n);
    out
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.norm();
    let s = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(s as i32);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=24 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.norm() < 1e-300 {
            break;
        }
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

/// Principal matrix logarithm.
///
/// Symmetric positive-definite matrices go through the symmetric
/// eigendecomposition; everything else uses inverse scaling-and-squaring
/// (Denman-Beavers square roots, then an atanh series). Errors when an
/// eigenvalue sits on the closed negative real axis.
pub fn matrix_log(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    for ev in a.complex_eigenvalues().iter() {
        if ev.re <= 0.0 && ev.im.abs() <= 1e-14 * ev.norm().max(1e-300) {
            return Err(Error::Numerical(format!(
                "matrix logarithm branch violation: eigenvalue {ev} on the closed negative real axis"
            )));
        }
    }
    let sym_err = (a - a.transpose()).norm() / a.norm().max(1e-300);
    if sym_err < 1e-12 {
        let eig = nalgebra::SymmetricEigen::new(a.clone());
        if eig.eigenvalues.iter().all(|&l| l > 0.0) {
            let mut d = DMatrix::zeros(n, n);
            for i in 0..n {
                d[(i, i)] = eig.eigenvalues[i].ln();
            }
            return Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose());
        }
    }
    // inverse scaling and squaring
    let identity = DMatrix::identity(n, n);
    let mut m = a.clone();
    let mut sqrts = 0u32;
    while (&m - &identity).norm() > 0.25 {
        m = denman_beavers_sqrt(&m)?;
        sqrts += 1;
        if sqrts > 64 {
            return Err(Error::Numerical(
                "matrix logarithm: square-root scaling did not converge".into(),
            ));
        }
    }
    // ln(M) = 2 atanh(X), X = (M - I)(M + I)^{-1}
    let x = (&m - &identity)
        * (&m + &identity)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("matrix logarithm: singular M + I".into()))?;
    let x2 = &x * &x;
    let mut term = x.clone();
    let mut acc = x.clone();
    for k in 1..200 {
        term = &term * &x2;
        let contrib = &term / (2 * k + 1) as f64;
        acc += &contrib;
        if contrib.norm() < 1e-18 * acc.norm().max(1e-300) {
            break;
        }
    }
    Ok(acc * 2f64.powi(sqrts as i32 + 1))
}

fn denman_beavers_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..60 {
        let y_inv = y
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("matrix square root: singular iterate".into()))?;
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("matrix square root: singular iterate".into()))?;
        let y_next = (&y + z_inv) * 0.5;
        let z_next = (&z + y_inv) * 0.5;
        let delta = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if delta < 1e-15 * y.norm().max(1e-300) {
            break;
        }
    }
    Ok(y)
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_matches_known_values() {
        assert_relative_eq!(gamma(0.5), std::f64::consts::PI.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(gamma(1.0), 1.0, max_relative = 1e-12);
        assert_relative_eq!(gamma(2.0), 1.0, max_relative = 1e-12);
        assert_relative_eq!(gamma(0.25), 3.625_609_908_221_908_3, max_relative = 1e-11);
    }

    #[test]
    fn lstsq_solves_exact_system() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 3.0, 5.0]);
        let r = lstsq(&phi, &y, 1e-12).unwrap();
        assert_relative_eq!(r.solution[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.solution[1], 2.0, epsilon = 1e-12);
        assert!(r.residual_rms < 1e-12);
    }

    #[test]
    fn lstsq_names_zero_column() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let err = lstsq(&phi, &y, 1e-12).unwrap_err();
        assert!(err.to_string().contains("column(s) 1"), "{err}");
    }

    #[test]
    fn exp_log_roundtrip() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.05, -0.02, 0.7]);
        let l = matrix_log(&a).unwrap();
        let back = matrix_exp(&l);
        assert!((back - &a).norm() < 1e-10);
    }

    #[test]
    fn log_rejects_negative_real_axis() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.0, 0.3]);
        assert!(matrix_log(&a).is_err());
    }

    #[test]
    fn scalar_log_matches() {
        let a = DMatrix::from_element(1, 1, (-1.0f64).exp());
        let l = matrix_log(&a).unwrap();
        assert_relative_eq!(l[(0, 0)], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn hankel_svd_small_matches_dense() {
        let m: Vec<f64> = (0..40).map(|k| 0.8f64.powi(k)).collect();
        let (_, s, _) = hankel_truncated_svd(&m, 10, 10, 1, 3).unwrap();
        // rank-1 Hankel from a single geometric mode
        assert!(s[0] > 1.0);
        assert!(s[1] / s[0] < 1e-12);
    }

    #[test]
    fn normals_are_reproducible_and_unit_variance() {
        let a = standard_normals(7, 100_000);
        let b = standard_normals(7, 100_000);
        assert_eq!(a, b);
        let mean: f64 = a.iter().sum::<f64>() / a.len() as f64;
        let var: f64 = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (a.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }
}
