//! Numerical observability checks for the translational error system
//! `(A(t), C(t))`: transition matrices, Gramian windows, the Kalman matrix of
//! the constant pair `(Ā, C̄)` and a persistent-excitation certificate for
//! monocular bearings.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::ImuSample;
use crate::error::{Error, Result};
use crate::liegroup::{project3, Rotation};
use crate::observer::{a_bar, build_a};

pub const DEFAULT_DELTA: f64 = 2.0;
pub const DEFAULT_MU: f64 = 1e-4;
/// Camera period: the quadrature grid of the Gramian.
pub const DEFAULT_GRID_DT: f64 = 0.05;
pub const DEFAULT_MAX_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GramianOptions {
    pub grid_dt: f64,
    pub mu: f64,
    /// Largest RK4 step used for `Φ` between grid nodes.
    pub max_step: f64,
}

impl Default for GramianOptions {
    fn default() -> Self {
        Self {
            grid_dt: DEFAULT_GRID_DT,
            mu: DEFAULT_MU,
            max_step: DEFAULT_MAX_STEP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramianReport {
    pub window_start: f64,
    pub delta: f64,
    pub w: DMatrix<f64>,
    pub min_eig: f64,
    pub max_eig: f64,
    pub uniformly_observable_flag: bool,
}

impl GramianReport {
    fn from_matrix(window_start: f64, delta: f64, mut w: DMatrix<f64>, mu: f64) -> Self {
        crate::riccati::symmetrize(&mut w);
        let eig = SymmetricEigen::new(w.clone()).eigenvalues;
        let min_eig = eig.min();
        let max_eig = eig.max();
        Self {
            window_start,
            delta,
            w,
            min_eig,
            max_eig,
            uniformly_observable_flag: min_eig >= mu,
        }
    }
}

fn rk4_phi(a_of_t: &impl Fn(f64) -> DMatrix<f64>, phi: &DMatrix<f64>, t: f64, h: f64) -> DMatrix<f64> {
    let k1 = a_of_t(t) * phi;
    let a_mid = a_of_t(t + 0.5 * h);
    let k2 = &a_mid * (phi + &k1 * (0.5 * h));
    let k3 = &a_mid * (phi + &k2 * (0.5 * h));
    let k4 = a_of_t(t + h) * (phi + &k3 * h);
    phi + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Advances `phi` from `t0` to `t1` with RK4 steps no longer than `max_step`.
fn advance(a_of_t: &impl Fn(f64) -> DMatrix<f64>, mut phi: DMatrix<f64>, t0: f64, t1: f64, max_step: f64) -> DMatrix<f64> {
    let span = t1 - t0;
    if span <= 0.0 {
        return phi;
    }
    let steps = (span / max_step).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    for k in 0..steps {
        phi = rk4_phi(a_of_t, &phi, t0 + k as f64 * h, h);
    }
    phi
}

/// `Φ(t1, t0)` for `dΦ/dt = A(t)Φ`, RK4 with steps of at most 1 ms.
pub fn transition_matrix(a_of_t: impl Fn(f64) -> DMatrix<f64>, t0: f64, t1: f64) -> DMatrix<f64> {
    transition_matrix_with_step(a_of_t, t0, t1, DEFAULT_MAX_STEP)
}

pub fn transition_matrix_with_step(a_of_t: impl Fn(f64) -> DMatrix<f64>, t0: f64, t1: f64, max_step: f64) -> DMatrix<f64> {
    let d = a_of_t(t0).nrows();
    advance(&a_of_t, DMatrix::identity(d, d), t0, t1, max_step)
}

/// Grid nodes `t, t + h, …, t + δ` and their trapezoidal weights.
fn trapezoid_nodes(t: f64, delta: f64, grid_dt: f64) -> Vec<(f64, f64)> {
    let m = ((delta / grid_dt) - 1e-9).ceil().max(1.0) as usize;
    let h = delta / m as f64;
    (0..=m)
        .map(|j| {
            let w = if j == 0 || j == m { 0.5 * h } else { h };
            (t + j as f64 * h, w)
        })
        .collect()
}

/// `(1/δ)∫ₜ^{t+δ} Φ(τ,t)ᵀC(τ)ᵀC(τ)Φ(τ,t) dτ`, trapezoidal on the camera grid.
pub fn gramian(
    a_of_t: impl Fn(f64) -> DMatrix<f64>,
    c_of_t: impl Fn(f64) -> DMatrix<f64>,
    t: f64,
    delta: f64,
) -> GramianReport {
    gramian_with(a_of_t, c_of_t, t, delta, &GramianOptions::default())
}

pub fn gramian_with(
    a_of_t: impl Fn(f64) -> DMatrix<f64>,
    c_of_t: impl Fn(f64) -> DMatrix<f64>,
    t: f64,
    delta: f64,
    opts: &GramianOptions,
) -> GramianReport {
    let d = a_of_t(t).nrows();
    let mut phi = DMatrix::identity(d, d);
    let mut w = DMatrix::zeros(d, d);
    let mut prev = t;
    for (tau, weight) in trapezoid_nodes(t, delta, opts.grid_dt) {
        phi = advance(&a_of_t, phi, prev, tau, opts.max_step);
        prev = tau;
        let cphi = c_of_t(tau) * &phi;
        w += cphi.transpose() * cphi * weight;
    }
    GramianReport::from_matrix(t, delta, w / delta, opts.mu)
}

/// `exp(Ā s)`; `Ā` is nilpotent of order three.
pub fn exp_a_bar(n: usize, s: f64) -> DMatrix<f64> {
    let a = a_bar(n);
    let a2 = &a * &a;
    let d = a.nrows();
    DMatrix::identity(d, d) + a * s + a2 * (0.5 * s * s)
}

/// `T = I_{n+2} ⊗ Rᵀ`.
pub fn t_matrix(rot: &Rotation, n: usize) -> DMatrix<f64> {
    let d = 3 * (n + 2);
    let mut t = DMatrix::zeros(d, d);
    let rt = rot.matrix().transpose();
    for b in 0..n + 2 {
        t.fixed_view_mut::<3, 3>(3 * b, 3 * b).copy_from(&rt);
    }
    t
}

/// Same Gramian through `Φ(τ,t) = T(τ)exp(Ā(τ−t))T(t)ᵀ`, without integrating.
pub fn gramian_factored(
    rot_of_t: impl Fn(f64) -> Rotation,
    c_of_t: impl Fn(f64) -> DMatrix<f64>,
    n: usize,
    t: f64,
    delta: f64,
    opts: &GramianOptions,
) -> GramianReport {
    let d = 3 * (n + 2);
    let mut inner = DMatrix::zeros(d, d);
    for (tau, weight) in trapezoid_nodes(t, delta, opts.grid_dt) {
        let ct = c_of_t(tau) * t_matrix(&rot_of_t(tau), n) * exp_a_bar(n, tau - t);
        inner += ct.transpose() * ct * weight;
    }
    let tt = t_matrix(&rot_of_t(t), n);
    let w = &tt * inner * tt.transpose() / delta;
    GramianReport::from_matrix(t, delta, w, opts.mu)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservabilityMatrix {
    pub o: DMatrix<f64>,
    pub rank: usize,
    pub det_oto: f64,
}

/// Kalman observability matrix of `(Ā, C̄)` with `C̄ = [0 I₃ₙ]`, assembled
/// from its closed block pattern in the `(v, g, L)` state ordering.
pub fn kalman_observability_matrix(n: usize) -> ObservabilityMatrix {
    let cols = n + 2;
    let mut o = DMatrix::zeros(n * cols, cols);
    for i in 0..n {
        o[(i, 2 + i)] = 1.0;
        o[(n + i, 0)] = 1.0;
        o[(2 * n + i, 1)] = 1.0;
    }
    let o = kron_i3(&o);
    let rank = o.rank(1e-9);
    let det_oto = (o.transpose() * &o).determinant();
    ObservabilityMatrix { o, rank, det_oto }
}

fn kron_i3(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(3 * m.nrows(), 3 * m.ncols(), |r, c| {
        if r % 3 == c % 3 {
            m[(r / 3, c / 3)]
        } else {
            0.0
        }
    })
}

/// `‖Φ_numeric(t1,t0) − T(t1)exp(Ā(t1−t0))T(t0)ᵀ‖_F` along a rotation history
/// with body rate `ω(t)`.
pub fn verify_phi_factorization(
    rot_of_t: impl Fn(f64) -> Rotation,
    omega_of_t: impl Fn(f64) -> Vector3<f64>,
    n: usize,
    t0: f64,
    t1: f64,
) -> f64 {
    let a_of_t = |t: f64| build_a(&ImuSample::new(omega_of_t(t), Vector3::zeros(), t), n);
    let phi = transition_matrix(a_of_t, t0, t1);
    let fact = t_matrix(&rot_of_t(t1), n) * exp_a_bar(n, t1 - t0) * t_matrix(&rot_of_t(t0), n).transpose();
    (phi - fact).norm()
}

/// Bearing history of one landmark: `(t, R R_c y)` samples in time order.
pub type BearingHistory = Vec<(f64, Vector3<f64>)>;

/// Smallest over all windows of the least eigenvalue of `(1/δ*)∫π(b(τ))dτ`.
pub fn pe_level(history: &[(f64, Vector3<f64>)], delta_star: f64) -> Result<f64> {
    let (first, last) = match (history.first(), history.last()) {
        (Some(f), Some(l)) => (f.0, l.0),
        _ => return Err(Error::InsufficientData("empty bearing history".into())),
    };
    if last - first < delta_star - 1e-12 {
        return Err(Error::InsufficientData(format!(
            "bearing history spans {:.3} s, window needs {delta_star} s",
            last - first
        )));
    }
    let projectors = history
        .iter()
        .map(|(_, b)| project3(b))
        .collect::<Result<Vec<Matrix3<f64>>>>()?;
    let mut worst = f64::INFINITY;
    for start in 0..history.len() {
        let t_start = history[start].0;
        if t_start + delta_star > last + 1e-12 {
            break;
        }
        let mut acc = Matrix3::zeros();
        let mut k = start;
        while k + 1 < history.len() && history[k + 1].0 <= t_start + delta_star + 1e-12 {
            let h = history[k + 1].0 - history[k].0;
            acc += (projectors[k] + projectors[k + 1]) * (0.5 * h);
            k += 1;
        }
        let lam = SymmetricEigen::new(acc / delta_star).eigenvalues.min();
        worst = worst.min(lam);
    }
    Ok(worst)
}

/// Per landmark: does `(1/δ*)∫π(R R_c yᵢ) dτ ≥ μ* I₃` hold on every window?
pub fn mono_pe_certificate(histories: &[BearingHistory], delta_star: f64, mu_star: f64) -> Result<Vec<bool>> {
    histories
        .iter()
        .map(|h| pe_level(h, delta_star).map(|lam| lam >= mu_star))
        .collect()
}

/// Writes `window_start_s,delta_s,min_eig,max_eig,flag` rows.
pub fn write_gramian_csv(path: &Path, reports: &[GramianReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "window_start_s,delta_s,min_eig,max_eig,flag")?;
    for r in reports {
        writeln!(
            f,
            "{},{},{:e},{:e},{}",
            r.window_start, r.delta, r.min_eig, r.max_eig, r.uniformly_observable_flag
        )?;
    }
    f.flush()?;
    Ok(())
}
