//! Rigid-body kinematics with static landmarks and the auxiliary gravity state.

use nalgebra::{DMatrix, Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{skew, GroupElement, Rotation, TangentElement};

/// Default inertial gravity vector (m/s²).
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

/// Physical state: attitude, position, velocity, gravity and landmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub rot: Rotation,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub g: Vector3<f64>,
    pub landmarks: Matrix3xX<f64>,
    pub t: f64,
}

impl RigidBodyState {
    pub fn n(&self) -> usize {
        self.landmarks.ncols()
    }

    /// `X = 𝓜(R, p, v, g, p_L)`.
    pub fn to_group(&self) -> GroupElement {
        GroupElement::new(self.rot, self.p, self.v, self.g, self.landmarks.clone())
    }

    pub fn from_group(x: &GroupElement, t: f64) -> Self {
        Self {
            rot: x.rot,
            p: x.x1,
            v: x.x2,
            g: x.x3,
            landmarks: x.xl.clone(),
            t,
        }
    }

    /// Same state with a different landmark set.
    pub fn with_landmarks(&self, landmarks: Matrix3xX<f64>) -> Self {
        Self {
            landmarks,
            ..self.clone()
        }
    }
}

/// One IMU reading in the body frame: angular rate and apparent acceleration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub omega: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub t: f64,
}

impl ImuSample {
    pub fn new(omega: Vector3<f64>, accel: Vector3<f64>, t: f64) -> Self {
        Self { omega, accel, t }
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.accel.iter()).all(|v| v.is_finite()) && self.t.is_finite()
    }
}

/// The constant matrices `H` and its shift block `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureConstants {
    pub h: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl StructureConstants {
    pub fn n(&self) -> usize {
        self.s.nrows() - 3
    }
}

/// `S` has ones at (1,0) and (2,1); `H = diag(0₃, S)`.
pub fn build_structure(n: usize) -> StructureConstants {
    let mut s = DMatrix::zeros(3 + n, 3 + n);
    s[(1, 0)] = 1.0;
    s[(2, 1)] = 1.0;
    let mut h = DMatrix::zeros(6 + n, 6 + n);
    h.view_mut((3, 3), (3 + n, 3 + n)).copy_from(&s);
    StructureConstants { h, s }
}

/// `V = 𝒱([ω]×, 0, a, 0, 0)`.
pub fn build_group_velocity(imu: &ImuSample, n: usize) -> TangentElement {
    TangentElement::new(
        &imu.omega,
        Vector3::zeros(),
        imu.accel,
        Vector3::zeros(),
        Matrix3xX::zeros(n),
    )
}

/// Component-wise time derivative of a [`RigidBodyState`].
#[derive(Clone, Debug, PartialEq)]
pub struct StateDerivative {
    pub r_dot: Matrix3<f64>,
    pub p_dot: Vector3<f64>,
    pub v_dot: Vector3<f64>,
    pub g_dot: Vector3<f64>,
    pub landmarks_dot: Matrix3xX<f64>,
}

impl StateDerivative {
    /// Arranged like `Ẋ` in the embedded group form.
    pub fn embed(&self) -> DMatrix<f64> {
        let n = self.landmarks_dot.ncols();
        let mut m = DMatrix::zeros(6 + n, 6 + n);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r_dot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.p_dot);
        m.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.v_dot);
        m.fixed_view_mut::<3, 1>(0, 5).copy_from(&self.g_dot);
        m.view_mut((0, 6), (3, n)).copy_from(&self.landmarks_dot);
        m
    }
}

/// `Ṙ = R[ω]×, ṗ = v, v̇ = g + Ra, ġ = 0, ṗ_i = 0`.
pub fn derivative_component(s: &RigidBodyState, imu: &ImuSample) -> StateDerivative {
    StateDerivative {
        r_dot: s.rot.matrix() * skew(&imu.omega),
        p_dot: s.v,
        v_dot: s.g + s.rot.matrix() * imu.accel,
        g_dot: Vector3::zeros(),
        landmarks_dot: Matrix3xX::zeros(s.n()),
    }
}

/// `Ẋ = XH − HX + XV` in embedded form.
pub fn derivative_group(
    x: &GroupElement,
    vel: &TangentElement,
    sc: &StructureConstants,
) -> Result<DMatrix<f64>> {
    for other in [vel.n(), sc.n()] {
        if other != x.n() {
            return Err(Error::DimensionMismatch {
                expected: x.n(),
                actual: other,
            });
        }
    }
    let xm = x.embed();
    Ok(&xm * &sc.h - &sc.h * &xm + &xm * vel.embed())
}

/// Advances the state by `dt` holding the IMU sample constant.
///
/// The attitude follows the exact exponential `R·exp(ω dt)`; position and
/// velocity use classical RK4 with the attitude evaluated at each stage time.
pub fn integrate_step(s: &RigidBodyState, imu: &ImuSample, dt: f64) -> RigidBodyState {
    let (p, v) = rk4_translation(&s.rot, &s.p, &s.v, &s.g, imu, dt);
    RigidBodyState {
        rot: s.rot * Rotation::exp(&(imu.omega * dt)),
        p,
        v,
        g: s.g,
        landmarks: s.landmarks.clone(),
        t: s.t + dt,
    }
}

/// RK4 for `ṗ = v, v̇ = g + R(τ)a` with `R(τ) = R·exp(ωτ)`.
pub(crate) fn rk4_translation(
    rot: &Rotation,
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    g: &Vector3<f64>,
    imu: &ImuSample,
    dt: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let r0 = *rot.matrix();
    let r_half = r0 * Rotation::exp(&(imu.omega * (0.5 * dt))).matrix();
    let r1 = r0 * Rotation::exp(&(imu.omega * dt)).matrix();
    let f0 = g + r0 * imu.accel;
    let fh = g + r_half * imu.accel;
    let f1 = g + r1 * imu.accel;

    let k1v = f0;
    let k1p = *v;
    let k2v = fh;
    let k2p = v + k1v * (0.5 * dt);
    let k3v = fh;
    let k3p = v + k2v * (0.5 * dt);
    let k4v = f1;
    let k4p = v + k3v * dt;

    let p_next = p + (k1p + 2.0 * k2p + 2.0 * k3p + k4p) * (dt / 6.0);
    let v_next = v + (k1v + 2.0 * k2v + 2.0 * k3v + k4v) * (dt / 6.0);
    (p_next, v_next)
}
