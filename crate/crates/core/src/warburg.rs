//! Fractional-integrator impulse responses, Ho-Kalman rational
//! approximation of the sampled Warburg impedance, continuous-time
//! conversion, and frequency-response evaluation.

use nalgebra::{Complex, DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::linalg::{
    gamma, hankel_truncated_svd, matrix_log, spectral_radius,
};

/// Finite state-space approximation of the normalized Warburg impedance
/// Z_w / (A_w sqrt(Ts)). The Warburg coefficient scales only the output.
#[derive(Debug, Clone)]
pub struct WarburgRealization {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: RowDVector<f64>,
    ts: f64,
}

impl WarburgRealization {
    /// Builds a realization from explicit matrices, checking stability.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: RowDVector<f64>, ts: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.len() != n || c.len() != n {
            return Err(Error::InvalidArgument("inconsistent realization dimensions".into()));
        }
        if !(ts > 0.0) {
            return Err(Error::InvalidArgument(format!("ts must be positive, got {ts}")));
        }
        let rho = spectral_radius(&a);
        if rho >= 1.0 {
            return Err(Error::Numerical(format!(
                "unstable realization: spectral radius {rho} >= 1"
            )));
        }
        Ok(Self { a, b, c, ts })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &RowDVector<f64> {
        &self.c
    }
}

/// Continuous-time counterpart obtained from the matrix logarithm.
#[derive(Debug, Clone)]
pub struct ContinuousRealization {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub c_bar: RowDVector<f64>,
}

/// Impulse response of the discrete fractional integrator of order `alpha`
/// under zero-order-hold sampling: h[0] = 0 and
/// h[k] = Ts^alpha / (alpha Gamma(alpha)) (k^alpha - (k-1)^alpha) for k >= 1.
pub fn fractional_impulse(alpha: f64, ts: f64, k_max: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    if k_max < 1 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let scale = ts.powf(alpha) / (alpha * gamma(alpha));
    let mut h = Vec::with_capacity(k_max + 1);
    h.push(0.0);
    for k in 1..=k_max {
        let k = k as f64;
        h.push(scale * (k.powf(alpha) - (k - 1.0).powf(alpha)));
    }
    Ok(h)
}

/// Impulse response of the sampled Warburg impedance,
/// w[k] = 2 A_w sqrt(Ts) / Gamma(0.5) (sqrt(k) - sqrt(k-1)).
pub fn warburg_impulse(a_w: f64, ts: f64, k_max: usize) -> Result<Vec<f64>> {
    if !(a_w > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Warburg coefficient must be positive, got {a_w}"
        )));
    }
    let h = fractional_impulse(0.5, 1.0, k_max)?;
    let scale = a_w * ts.sqrt();
    Ok(h.into_iter().map(|v| scale * v).collect())
}

/// Ho-Kalman realization with the default square Hankel of side
/// 2 * order + 1 built from impulse samples 1..(4 order + 2).
pub fn ho_kalman(impulse: &[f64], order: usize, ts: f64) -> Result<WarburgRealization> {
    let side = 2 * order + 1;
    ho_kalman_sized(impulse, order, ts, side, side)
}

/// Ho-Kalman with explicit Hankel dimensions. `rows + cols` (plus the
/// shifted column) must not exceed the impulse length.
pub fn ho_kalman_sized(
    impulse: &[f64],
    order: usize,
    ts: f64,
    rows: usize,
    cols: usize,
) -> Result<WarburgRealization> {
    if order < 1 {
        return Err(Error::InvalidArgument("order must be at least 1".into()));
    }
    if rows < order || cols < order {
        return Err(Error::InvalidArgument(format!(
            "Hankel {rows}x{cols} cannot hold a rank-{order} factorization"
        )));
    }
    if impulse.len() < rows + cols + 1 {
        return Err(Error::InvalidArgument(format!(
            "impulse of {} samples is too short for a {rows}x{cols} Hankel",
            impulse.len()
        )));
    }
    // Markov parameters start at impulse[1]; the k = 0 sample is the
    // (zero) feedthrough.
    let (u, s, v) = hankel_truncated_svd(impulse, rows, cols, 1, order)?;
    if s[order - 1] <= 1e-12 * s[0] {
        return Err(Error::DegenerateOrder(format!(
            "singular value {} of {} is below tolerance; Hankel rank < order",
            s[order - 1],
            order
        )));
    }
    let s_sqrt: Vec<f64> = s.iter().map(|x| x.sqrt()).collect();
    // Balanced (square-root) realization: A = S^-1/2 U^T H2 V S^-1/2.
    let h2v = shifted_hankel_times(impulse, rows, cols, &v);
    let mut a = u.transpose() * h2v;
    for i in 0..order {
        for j in 0..order {
            a[(i, j)] /= s_sqrt[i] * s_sqrt[j];
        }
    }
    let mut b = DVector::zeros(order);
    for i in 0..order {
        b[i] = s_sqrt[i] * v[(0, i)];
    }
    let mut c = RowDVector::zeros(order);
    for i in 0..order {
        c[i] = u[(0, i)] * s_sqrt[i];
    }
    WarburgRealization::new(a, b, c, ts)
}

/// H2 * V where H2(i, j) = impulse[i + j + 2] (the shifted Hankel block).
fn shifted_hankel_times(
    impulse: &[f64],
    rows: usize,
    cols: usize,
    v: &DMatrix<f64>,
) -> DMatrix<f64> {
    let p = v.ncols();
    let mut out = DMatrix::zeros(rows, p);
    for i in 0..rows {
        let band = &impulse[i + 2..i + 2 + cols];
        for j in 0..p {
            out[(i, j)] = band
                .iter()
                .zip(v.column(j).iter())
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    out
}

/// Default full-length approximation of the normalized Warburg impedance:
/// impulse over 0..k_max and a Hankel with rows = k_max / 4,
/// cols = k_max - rows, which uses every available sample.
pub fn normalized_warburg(order: usize, k_max: usize, ts: f64) -> Result<WarburgRealization> {
    if k_max < 4 * order + 3 {
        return Err(Error::InvalidArgument(format!(
            "k_max {k_max} is too short for order {order}"
        )));
    }
    let w = warburg_impulse(1.0, 1.0, k_max)?;
    let rows = (k_max / 4).max(2 * order + 1);
    let cols = k_max - 1 - rows;
    ho_kalman_sized(&w, order, ts, rows, cols)
}

/// Markov parameters of a realization: w[0] = 0, w[k] = c a^(k-1) b.
pub fn realization_impulse(r: &WarburgRealization, k_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k_max + 1);
    out.push(0.0);
    let mut x = r.b.clone();
    for _ in 1..=k_max {
        out.push((&r.c * &x)[0]);
        x = &r.a * x;
    }
    out
}

/// E_T metric: 100 * rms(w - w_hat) / rms(w), in percent.
pub fn relative_error(w: &[f64], w_hat: &[f64]) -> Result<f64> {
    if w.len() != w_hat.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            w.len(),
            w_hat.len()
        )));
    }
    let ref_energy: f64 = w.iter().map(|x| x * x).sum();
    if ref_energy == 0.0 {
        return Err(Error::InvalidArgument("zero-energy reference".into()));
    }
    let err_energy: f64 = w
        .iter()
        .zip(w_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(100.0 * (err_energy / ref_energy).sqrt())
}

/// Continuous conversion: a_bar = ln(a) / ts, b_bar = -(I - a)^-1 a_bar b,
/// c_bar = c.
pub fn to_continuous(r: &WarburgRealization) -> Result<ContinuousRealization> {
    let log_a = matrix_log(&r.a)?;
    let a_bar = &log_a / r.ts;
    let n = r.order();
    let i_minus_a = DMatrix::identity(n, n) - &r.a;
    let inv = i_minus_a
        .try_inverse()
        .ok_or_else(|| Error::Numerical("I - A is singular".into()))?;
    let b_bar = -(&inv * &a_bar * &r.b);
    Ok(ContinuousRealization {
        a_bar,
        b_bar,
        c_bar: r.c.clone(),
    })
}

/// Discrete frequency response H(e^{j omega}) = c (e^{j omega} I - a)^-1 b
/// at each angular frequency in radians per sample.
pub fn freq_response(r: &WarburgRealization, omegas: &[f64]) -> Vec<Complex<f64>> {
    let n = r.order();
    let a_c = r.a.map(|x| Complex::new(x, 0.0));
    let b_c = r.b.map(|x| Complex::new(x, 0.0));
    let c_c = r.c.map(|x| Complex::new(x, 0.0));
    omegas
        .iter()
        .map(|&w| {
            let z = Complex::new(0.0, w).exp();
            let m = DMatrix::from_diagonal_element(n, n, z) - &a_c;
            let x = m.lu().solve(&b_c).expect("z I - A is invertible off the spectrum");
            (&c_c * x)[0]
        })
        .collect()
}

/// Ideal normalized Warburg reference 1 / sqrt(j omega), with
/// sqrt(j) = e^{j pi / 4}.
pub fn ideal_warburg_response(omega: f64) -> Complex<f64> {
    Complex::new(0.0, omega).sqrt().inv()
}

/// A fixed order-7 normalized realization (Ts-free), kept as a golden asset
/// for regression tests of the discretization and conversion routines.
pub mod golden {
    use super::*;

    pub const A_Z: [[f64; 7]; 7] = [
        [0.99964, -0.0014121, -0.0025413, -0.0028264, -0.0012488, 0.00041095, 0.00012636],
        [-0.0014120, 0.98934, -0.028798, -0.036660, -0.018323, 0.0065444, 0.0023842],
        [-0.0025412, -0.028798, 0.88467, -0.18947, -0.11661, 0.051034, 0.021731],
        [-0.0028263, -0.036660, -0.18947, 0.61030, -0.30015, 0.16198, 0.080232],
        [-0.0012488, -0.018323, -0.11661, -0.30015, 0.70033, 0.21261, 0.12742],
        [0.00041094, 0.0065444, 0.051034, 0.16198, 0.21261, 0.78626, -0.17239],
        [0.00012635, 0.0023842, 0.021731, 0.080232, 0.12742, -0.17239, 0.80393],
    ];
    pub const B_Z: [f64; 7] = [
        0.194140, 0.376185, 0.631849, 0.673511, 0.294717, -0.092444, -0.029057,
    ];
    pub const C_Z: [f64; 7] = [
        0.194143, 0.376185, 0.631849, 0.673511, 0.294717, -0.092444, -0.029057,
    ];

    /// The printed matrices as a realization with the given sampling period.
    pub fn realization(ts: f64) -> WarburgRealization {
        let a = DMatrix::from_fn(7, 7, |i, j| A_Z[i][j]);
        let b = DVector::from_row_slice(&B_Z);
        let c = RowDVector::from_row_slice(&C_Z);
        WarburgRealization::new(a, b, c, ts).expect("golden realization is stable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fractional_impulse_alpha_one_is_integrator() {
        let h = fractional_impulse(1.0, 1.0, 10).unwrap();
        assert_eq!(h[0], 0.0);
        for &v in &h[1..] {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fractional_impulse_half_first_sample() {
        let h = fractional_impulse(0.5, 1.0, 3).unwrap();
        assert_eq!(h[0], 0.0);
        assert_relative_eq!(h[1], 2.0 / std::f64::consts::PI.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn fractional_impulse_rejects_bad_alpha() {
        assert!(fractional_impulse(0.0, 1.0, 5).is_err());
        assert!(fractional_impulse(1.5, 1.0, 5).is_err());
    }

    #[test]
    fn warburg_impulse_values() {
        let w = warburg_impulse(1.0, 1.0, 5).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 1.1284).abs() < 5e-5);
        assert_relative_eq!(
            w[2],
            2.0 / std::f64::consts::PI.sqrt() * (2f64.sqrt() - 1.0),
            max_relative = 1e-12
        );
        assert!((w[2] - 0.467392).abs() < 5e-6);
    }

    #[test]
    fn telescoping_mass_closed_form() {
        for &alpha in &[0.3, 0.5, 0.9, 1.0] {
            let ts = 0.008;
            let h = fractional_impulse(alpha, ts, 500).unwrap();
            let sum: f64 = h.iter().sum();
            let expected = ts.powf(alpha) * 500f64.powf(alpha) / (alpha * gamma(alpha));
            assert_relative_eq!(sum, expected, max_relative = 1e-11);
        }
    }

    /// Oracle: a fixed stable order-2 system, re-identified from its own
    /// Markov parameters.
    #[test]
    fn ho_kalman_recovers_order2_system() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.6]);
        let b = DVector::from_row_slice(&[1.0, 0.5]);
        let c = RowDVector::from_row_slice(&[0.7, -0.3]);
        let truth = WarburgRealization::new(a, b, c, 1.0).unwrap();
        let impulse = realization_impulse(&truth, 40);
        let est = ho_kalman(&impulse, 2, 1.0).unwrap();
        let back = realization_impulse(&est, 40);
        for (x, y) in impulse.iter().zip(&back) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn ho_kalman_degenerate_order_errors() {
        // rank-1 data cannot support order 3
        let impulse: Vec<f64> = (0..40).map(|k| if k == 0 { 0.0 } else { 0.5f64.powi(k) }).collect();
        assert!(matches!(
            ho_kalman(&impulse, 3, 1.0),
            Err(Error::DegenerateOrder(_))
        ));
    }

    #[test]
    fn ho_kalman_projection_property() {
        // re-running on the realized impulse reproduces the Markov parameters
        let w = warburg_impulse(1.0, 1.0, 200).unwrap();
        let r1 = ho_kalman_sized(&w, 4, 1.0, 40, 40).unwrap();
        let w1 = realization_impulse(&r1, 198);
        let r2 = ho_kalman_sized(&w1, 4, 1.0, 40, 40).unwrap();
        let w2 = realization_impulse(&r2, 198);
        for (x, y) in w1.iter().zip(&w2) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn realization_impulse_zero_feedthrough_and_cb() {
        let r = golden::realization(1.0);
        let w = realization_impulse(&r, 1);
        assert_eq!(w[0], 0.0);
        // first Markov parameter of the printed system is C_z B_z ~ 2/sqrt(pi)
        let cb = w[1];
        assert!((cb - 2.0 / std::f64::consts::PI.sqrt()).abs() < 1e-3, "{cb}");
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 100.0);
        assert!(relative_error(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn printed_realization_error_below_one_percent() {
        // the rounded printed matrices land near the reported 0.45%
        let r = golden::realization(1.0);
        let what = realization_impulse(&r, 10_000);
        let w = warburg_impulse(1.0, 1.0, 10_000).unwrap();
        let e = relative_error(&w, &what).unwrap();
        assert!(e < 1.0, "E_10000 = {e}%");
    }

    #[test]
    fn to_continuous_scalar_case() {
        let a = DMatrix::from_element(1, 1, (-1.0f64).exp());
        let b = DVector::from_element(1, 1.0);
        let c = RowDVector::from_element(1, 1.0);
        let r = WarburgRealization::new(a, b, c, 1.0).unwrap();
        let cont = to_continuous(&r).unwrap();
        assert_relative_eq!(cont.a_bar[(0, 0)], -1.0, epsilon = 1e-10);
    }

    #[test]
    fn to_continuous_matches_golden_a_entry() {
        let r = golden::realization(1.0);
        let cont = to_continuous(&r).unwrap();
        assert!(
            (cont.a_bar[(0, 0)] / -0.3835e-3 - 1.0).abs() < 0.01,
            "a_bar[0,0] = {}",
            cont.a_bar[(0, 0)]
        );
        // consistency: exp(a_bar ts) == a
        let back = crate::linalg::matrix_exp(&(&cont.a_bar * r.ts()));
        let rel = (&back - r.a()).norm() / r.a().norm();
        assert!(rel < 1e-8, "relative Frobenius error {rel}");
    }

    #[test]
    fn freq_response_finite_at_nyquist() {
        let r = golden::realization(1.0);
        let h = freq_response(&r, &[std::f64::consts::PI]);
        assert!(h[0].norm().is_finite());
    }

    #[test]
    fn freq_response_near_minus_45_degrees() {
        let r = normalized_warburg(7, 2000, 1.0).unwrap();
        let omega = 0.01 * std::f64::consts::PI;
        let h = freq_response(&r, &[omega])[0];
        let ideal = ideal_warburg_response(omega);
        let dmag = 20.0 * (h.norm() / ideal.norm()).log10();
        let phase = h.arg().to_degrees();
        assert!(dmag.abs() < 0.5, "magnitude error {dmag} dB");
        assert!((phase + 45.0).abs() < 2.0, "phase {phase}");
    }

    #[test]
    fn ideal_reference_slope_and_phase() {
        // -10 dB per decade and constant -45 degrees
        let h1 = ideal_warburg_response(0.001);
        let h2 = ideal_warburg_response(0.01);
        let slope = 20.0 * (h2.norm() / h1.norm()).log10();
        assert_relative_eq!(slope, -10.0, epsilon = 1e-9);
        assert_relative_eq!(h1.arg().to_degrees(), -45.0, epsilon = 1e-9);
    }

    #[test]
    fn error_decreases_with_order() {
        let w = warburg_impulse(1.0, 1.0, 2000).unwrap();
        let mut last = f64::INFINITY;
        for order in 3..=9 {
            let r = ho_kalman_sized(&w, order, 1.0, 500, 1499).unwrap();
            let what = realization_impulse(&r, 2000);
            let e = relative_error(&w, &what).unwrap();
            assert!(e < last * 1.05, "order {order}: {e}% after {last}%");
            last = e;
        }
    }
}
