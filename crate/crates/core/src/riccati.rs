//! Riccati covariance propagation and the discrete predict/correct steps.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::measurements::OutputMatrix;

/// Condition number of `CPCᵀ + Q` above which a warning is logged.
pub const CONDITION_WARN: f64 = 1e12;

/// Diagonal shift used when testing `P` for positive definiteness.
pub const COLLAPSE_SHIFT: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiState {
    pub p: DMatrix<f64>,
    pub v_noise: DMatrix<f64>,
    pub q_noise: DMatrix<f64>,
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn require_pd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let asym = (m - m.transpose()).amax();
    if asym > 1e-9 || Cholesky::new(m.clone()).is_none() {
        return Err(Error::Config(vec![format!(
            "{name} must be symmetric positive definite"
        )]));
    }
    Ok(())
}

/// `PCᵀ(CPCᵀ + Q)⁻¹` via a Cholesky solve.
pub fn gain(p: &DMatrix<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if c.nrows() == 0 {
        return Ok(DMatrix::zeros(p.nrows(), 0));
    }
    let pct = p * c.transpose();
    let mut s = c * &pct + q;
    symmetrize(&mut s);
    let chol = Cholesky::new(s).ok_or(Error::NonFinite("innovation covariance factorization"))?;
    let d = chol.l_dirty().diagonal();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let cond_estimate = (hi / lo).powi(2);
    if cond_estimate > CONDITION_WARN {
        log::warn!("innovation covariance is ill-conditioned (estimate {cond_estimate:.2e})");
    }
    // L S = PCᵀ  ⇔  S Lᵀ = C P
    let lt = chol.solve(&pct.transpose());
    check_finite(&lt, "gain computation")?;
    Ok(lt.transpose())
}

impl RiccatiState {
    pub fn new(p: DMatrix<f64>, v_noise: DMatrix<f64>, q_noise: DMatrix<f64>) -> Result<Self> {
        let dim = p.nrows();
        let mut errs = Vec::new();
        if p.ncols() != dim || v_noise.shape() != (dim, dim) || dim % 3 != 0 || dim < 6 {
            errs.push(format!("P and V must be the same 3(n+2) square size, got {:?} and {:?}", p.shape(), v_noise.shape()));
        }
        let n3 = dim.saturating_sub(6);
        if q_noise.shape() != (n3, n3) {
            errs.push(format!("Q must be {n3}x{n3}, got {:?}", q_noise.shape()));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        require_pd(&p, "P")?;
        require_pd(&v_noise, "V")?;
        if n3 > 0 {
            require_pd(&q_noise, "Q")?;
        }
        Ok(Self {
            p,
            v_noise,
            q_noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn n(&self) -> usize {
        self.dim() / 3 - 2
    }

    /// Integrates `Ṗ = AP + PAᵀ + V` over `dt` with RK4 for a constant `A`.
    pub fn predict_p(&self, a: &DMatrix<f64>, dt: f64) -> Result<Self> {
        self.predict_p_with(|_| a.clone(), 0.0, dt)
    }

    /// As [`predict_p`](Self::predict_p) with `A` evaluated at the RK4 stage times.
    pub fn predict_p_with(&self, a_of_t: impl Fn(f64) -> DMatrix<f64>, t0: f64, dt: f64) -> Result<Self> {
        let v = &self.v_noise;
        self.rk4(t0, dt, |t, p| {
            let a = a_of_t(t);
            let ap = &a * p;
            &ap + ap.transpose() + v
        })
    }

    /// Integrates the full CRE `Ṗ = AP + PAᵀ − PCᵀQ⁻¹CP + V` for constant `A`, `C`.
    pub fn propagate_cre_continuous(&self, a: &DMatrix<f64>, c: &DMatrix<f64>, dt: f64) -> Result<Self> {
        self.propagate_cre_with(|_| (a.clone(), c.clone()), 0.0, dt)
    }

    /// Full CRE with `(A(t), C(t))` evaluated at the RK4 stage times.
    pub fn propagate_cre_with(
        &self,
        ac_of_t: impl Fn(f64) -> (DMatrix<f64>, DMatrix<f64>),
        t0: f64,
        dt: f64,
    ) -> Result<Self> {
        let q_chol = if self.q_noise.nrows() > 0 {
            Some(Cholesky::new(self.q_noise.clone()).ok_or(Error::CovarianceCollapse)?)
        } else {
            None
        };
        let v = &self.v_noise;
        self.rk4(t0, dt, |t, p| {
            let (a, c) = ac_of_t(t);
            let ap = &a * p;
            let mut d = &ap + ap.transpose() + v;
            if let Some(qc) = &q_chol {
                let cp = &c * p;
                d -= cp.transpose() * qc.solve(&cp);
            }
            d
        })
    }

    fn rk4(
        &self,
        t0: f64,
        dt: f64,
        f: impl Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(vec![format!("dt must be positive, got {dt}")]));
        }
        let p0 = &self.p;
        let k1 = f(t0, p0);
        let k2 = f(t0 + 0.5 * dt, &(p0 + &k1 * (0.5 * dt)));
        let k3 = f(t0 + 0.5 * dt, &(p0 + &k2 * (0.5 * dt)));
        let k4 = f(t0 + dt, &(p0 + &k3 * dt));
        let mut p = p0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        symmetrize(&mut p);
        check_finite(&p, "covariance propagation")?;
        Ok(Self {
            p,
            ..self.clone()
        })
    }

    /// `L = PCᵀ(CPCᵀ + Q)⁻¹` for a dense output matrix.
    pub fn gain_l(&self, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        gain(&self.p, c, &self.q_noise)
    }

    /// Gain for an [`OutputMatrix`], solved on the visible rows only.
    ///
    /// Columns of invisible landmarks are zero. This matches the dense
    /// formula whenever `Q` does not couple different landmarks.
    pub fn gain_l_visible(&self, om: &OutputMatrix) -> Result<DMatrix<f64>> {
        let c_vis = om.visible_rows();
        let idx: Vec<usize> = om
            .visible
            .iter()
            .flat_map(|i| (3 * i)..(3 * i + 3))
            .collect();
        let q_vis = self.q_noise.select_rows(&idx).select_columns(&idx);
        let l_vis = gain(&self.p, &c_vis, &q_vis)?;
        let mut l = DMatrix::zeros(self.dim(), 3 * om.n());
        for (k, &col) in idx.iter().enumerate() {
            l.set_column(col, &l_vis.column(k));
        }
        Ok(l)
    }

    /// `P⁺ = (I − LC)P`, symmetrized; fails if `P⁺` is no longer positive definite.
    pub fn correct_p(&self, l: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Self> {
        if l.ncols() != c.nrows() || l.nrows() != self.dim() || c.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: c.ncols(),
            });
        }
        let lcp = l * (c * &self.p);
        let mut p = &self.p - lcp;
        symmetrize(&mut p);
        check_finite(&p, "covariance correction")?;
        let shifted = &p + DMatrix::identity(self.dim(), self.dim()) * COLLAPSE_SHIFT;
        if Cholesky::<f64, Dyn>::new(shifted).is_none() {
            return Err(Error::CovarianceCollapse);
        }
        Ok(Self {
            p,
            ..self.clone()
        })
    }

    /// Extreme eigenvalues of `P`.
    pub fn eig_bounds(&self) -> (f64, f64) {
        let e = self.p.clone().symmetric_eigenvalues();
        (e.min(), e.max())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurements::build_c;
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut impl Rng, d: usize, floor: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * floor
    }

    fn state(rng: &mut impl Rng, n: usize) -> RiccatiState {
        let d = 3 * (n + 2);
        RiccatiState::new(random_spd(rng, d, 0.1), random_spd(rng, d, 0.1), random_spd(rng, 3 * n, 0.1)).unwrap()
    }

    fn eye(d: usize) -> DMatrix<f64> {
        DMatrix::identity(d, d)
    }

    #[test]
    fn forced_growth() {
        let rs = RiccatiState::new(eye(9) * 2.0, eye(9), eye(3)).unwrap();
        let out = rs.predict_p(&DMatrix::zeros(9, 9), 1.0).unwrap();
        assert!((out.p - eye(9) * 3.0).amax() < 1e-14);
        assert!(rs.predict_p(&DMatrix::zeros(9, 9), 0.0).is_err());
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(RiccatiState::new(eye(9), eye(6), eye(3)).is_err());
        assert!(RiccatiState::new(-eye(9), eye(9), eye(3)).is_err());
        match RiccatiState::new(eye(9), eye(6), eye(4)) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    fn fine_oracle(p0: &DMatrix<f64>, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>, dt: f64, steps: usize) -> DMatrix<f64> {
        let h = dt / steps as f64;
        let mut p = p0.clone();
        for _ in 0..steps {
            let k1 = f(&p);
            let k2 = f(&(&p + &k1 * (0.5 * h)));
            let k3 = f(&(&p + &k2 * (0.5 * h)));
            let k4 = f(&(&p + &k3 * h));
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        p
    }

    #[test]
    fn predict_matches_fine_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let rs = state(&mut rng, 2);
        let a = DMatrix::from_fn(12, 12, |i, j| if i == j { -1.0 } else { rng.random_range(-0.3..0.3) });
        let dt = 0.005;
        let coarse = rs.predict_p(&a, dt).unwrap();
        let fine = fine_oracle(&rs.p, |p| &a * p + p * a.transpose() + &rs.v_noise, dt, 100);
        assert!((coarse.p - fine).amax() < 1e-8);
    }

    #[test]
    fn cre_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rs = state(&mut rng, 1);
        let a = DMatrix::from_fn(9, 9, |_, _| rng.random_range(-0.5..0.5));
        let z = DMatrix::zeros(3, 9);
        let via_cre = rs.propagate_cre_continuous(&a, &z, 0.01).unwrap();
        let via_pred = rs.predict_p(&a, 0.01).unwrap();
        assert!((via_cre.p - via_pred.p).amax() < 1e-14);

        let c = DMatrix::from_fn(3, 9, |_, _| rng.random_range(-0.3..0.3));
        let dt = 0.005;
        let coarse = rs.propagate_cre_continuous(&a, &c, dt).unwrap();
        let qi = rs.q_noise.clone().try_inverse().unwrap();
        let fine = fine_oracle(
            &rs.p,
            |p| &a * p + p * a.transpose() - p * c.transpose() * &qi * &c * p + &rs.v_noise,
            dt,
            100,
        );
        assert!((coarse.p - fine).amax() < 1e-8);
    }

    #[test]
    fn scalar_cre_fixed_point() {
        // 3×3-block analogue of a = 0, c = 1, v = q = 1: P = I is stationary
        let mut rs = RiccatiState::new(eye(9), eye(9), eye(3)).unwrap();
        let c = DMatrix::from_fn(3, 9, |i, j| if j == i + 6 { 1.0 } else { 0.0 });
        rs.v_noise = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(9, |i, _| if i >= 6 { 1.0 } else { 0.0 }));
        for _ in 0..100 {
            rs = rs.propagate_cre_continuous(&DMatrix::zeros(9, 9), &c, 0.01).unwrap();
        }
        assert!((rs.p.view((6, 6), (3, 3)) - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn gain_examples() {
        let rs = RiccatiState::new(eye(9), eye(9), eye(3)).unwrap();
        assert_eq!(rs.gain_l(&DMatrix::zeros(3, 9)).unwrap(), DMatrix::zeros(9, 3));
        let l = gain(&eye(6), &eye(6), &eye(6)).unwrap();
        assert!((l - eye(6) * 0.5).amax() < 1e-15);
        let out = {
            let rs = RiccatiState { p: eye(6), v_noise: eye(6), q_noise: eye(6) };
            rs.correct_p(&(eye(6) * 0.5), &eye(6)).unwrap()
        };
        assert!((out.p - eye(6) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn gain_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for n in 1..5 {
            let rs = state(&mut rng, n);
            let c = DMatrix::from_fn(3 * n, 3 * (n + 2), |_, _| rng.random_range(-1.0..1.0));
            let l = rs.gain_l(&c).unwrap();
            let lhs = &l * (&c * &rs.p * c.transpose() + &rs.q_noise);
            assert!((lhs - &rs.p * c.transpose()).amax() < 1e-9);
        }
    }

    #[test]
    fn visible_gain_matches_dense_with_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 4;
        let d = 3 * (n + 2);
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(3 * n, |_, _| rng.random_range(0.1..1.0)));
        let rs = RiccatiState::new(random_spd(&mut rng, d, 0.1), random_spd(&mut rng, d, 0.1), q).unwrap();
        let blocks: Vec<_> = [1usize, 3]
            .iter()
            .map(|&i| (i, Matrix3::from_fn(|r, c| if r == c { 1.0 } else { 0.1 * (r + c) as f64 })))
            .collect();
        let om = build_c(&blocks, n).unwrap();
        let dense = rs.gain_l(&om.c).unwrap();
        let vis = rs.gain_l_visible(&om).unwrap();
        assert!((dense - &vis).amax() < 1e-12);
        assert!(vis.columns(0, 3).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn correction_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let rs = state(&mut rng, 2);
        let c = DMatrix::from_fn(6, 12, |_, _| rng.random_range(-1.0..1.0));
        let same = rs.correct_p(&DMatrix::zeros(12, 6), &c).unwrap();
        assert_eq!(same.p, rs.p);
        assert!(rs.correct_p(&DMatrix::zeros(12, 5), &c).is_err());
        // an arbitrary large gain destroys definiteness
        let bad = DMatrix::from_fn(12, 6, |_, _| rng.random_range(-5.0..5.0));
        assert!(matches!(rs.correct_p(&bad, &c), Err(Error::CovarianceCollapse)));
    }

    #[test]
    fn more_landmarks_never_increase_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let n = 5;
        for _ in 0..20 {
            let q = DMatrix::identity(3 * n, 3 * n) * 0.05;
            let rs = RiccatiState::new(random_spd(&mut rng, 21, 0.1), eye(21), q).unwrap();
            let pis: Vec<(usize, Matrix3<f64>)> = (0..n)
                .map(|i| {
                    let b = nalgebra::Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
                    (i, crate::liegroup::project3(&b).unwrap())
                })
                .collect();
            let sub = build_c(&pis[..2], n).unwrap();
            let all = build_c(&pis, n).unwrap();
            let p_sub = rs.correct_p(&rs.gain_l_visible(&sub).unwrap(), &sub.c).unwrap();
            let p_all = rs.correct_p(&rs.gain_l_visible(&all).unwrap(), &all.c).unwrap();
            assert!(p_all.p.trace() <= p_sub.p.trace() + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn correction_contracts_in_psd_order(seed in any::<u64>(), n in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rs = state(&mut rng, n);
            let c = DMatrix::from_fn(3 * n, 3 * (n + 2), |_, _| rng.random_range(-1.0..1.0));
            let l = rs.gain_l(&c).unwrap();
            let out = rs.correct_p(&l, &c).unwrap();
            let diff = &rs.p - &out.p;
            prop_assert!(diff.symmetric_eigenvalues().min() > -1e-9);
            prop_assert!((&out.p - out.p.transpose()).norm() < 1e-9);
        }

        #[test]
        fn prediction_keeps_symmetry(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rs = state(&mut rng, 2);
            let a = DMatrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
            let out = rs.predict_p(&a, 0.005).unwrap();
            prop_assert!((&out.p - out.p.transpose()).norm() < 1e-9);
        }
    }
}
