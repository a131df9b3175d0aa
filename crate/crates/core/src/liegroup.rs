//! SO(3) and the extended group SE_{3+n}(3).
//!
//! A group element packs one rotation with `3 + n` translational columns:
//! position, velocity, gravity and `n` landmark positions. Elements are kept
//! in structured form; [`GroupElement::embed`] produces the dense
//! `(6+n)×(6+n)` matrix when a test or an analysis needs it.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, Rotation3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::Mul;

use crate::error::{Error, Result};

/// Norm below which a direction is treated as degenerate.
pub const EPS_SING: f64 = 1e-9;

/// Orthonormality and unit-norm tolerance for rotations and axes.
pub const ROTATION_TOL: f64 = 1e-9;

/// Drift level at which products are re-orthonormalized.
const RENORMALIZE_AT: f64 = 1e-10;

/// `[v]×`, so that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]. Rejects matrices whose symmetric part exceeds the tolerance.
pub fn unskew(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let sym = (m + m.transpose()).norm() * 0.5;
    if sym > ROTATION_TOL {
        return Err(Error::NotSkew(sym));
    }
    Ok(Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    ))
}

/// Column-major stacking of a 3×n matrix.
pub fn vectorize(m: &Matrix3xX<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Reshapes a 3n-vector back into its 3×n column form.
pub fn unvectorize(v: &DVector<f64>) -> Result<Matrix3xX<f64>> {
    if v.len() % 3 != 0 {
        return Err(Error::BadLength(v.len()));
    }
    Ok(Matrix3xX::from_column_slice(v.as_slice()))
}

/// Orthogonal projector onto the complement of `x`: `I - x xᵀ / ‖x‖²`.
pub fn project(x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n2 = x.norm_squared();
    if n2.sqrt() <= EPS_SING {
        return Err(Error::DegenerateInput(n2.sqrt()));
    }
    Ok(DMatrix::identity(x.len(), x.len()) - x * x.transpose() / n2)
}

/// Fixed-size version of [`project`] for 3-vectors.
pub fn project3(x: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let n2 = x.norm_squared();
    if n2.sqrt() <= EPS_SING {
        return Err(Error::DegenerateInput(n2.sqrt()));
    }
    Ok(Matrix3::identity() - x * x.transpose() / n2)
}

/// A direction-cosine matrix in SO(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix3<f64>", into = "Matrix3<f64>")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates `m` against `mᵀm = I` and `det m = 1`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let residual = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if residual > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NotARotation { residual, det });
        }
        Ok(Rotation(m))
    }

    /// Projects an arbitrary invertible matrix with positive determinant onto
    /// SO(3) via the polar decomposition `m (mᵀm)^{-1/2}`.
    pub fn from_matrix_projected(m: Matrix3<f64>) -> Result<Self> {
        let eig = SymmetricEigen::new(m.transpose() * m);
        if eig.eigenvalues.min() <= 0.0 || m.determinant() <= 0.0 {
            return Err(Error::NotARotation {
                residual: f64::INFINITY,
                det: m.determinant(),
            });
        }
        let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
        let s = &eig.eigenvectors * Matrix3::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
        Ok(Rotation(m * s))
    }

    /// `I + sin θ [v]× + (1 − cos θ)[v]×²` for a unit axis `v`.
    pub fn angle_axis(theta: f64, axis: &Vector3<f64>) -> Result<Self> {
        let norm = axis.norm();
        if (norm - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NonUnitAxis(norm));
        }
        Ok(Self::angle_axis_unchecked(theta, axis))
    }

    fn angle_axis_unchecked(theta: f64, axis: &Vector3<f64>) -> Self {
        let k = skew(axis);
        Rotation(Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos()))
    }

    /// Exponential of a rotation vector (angle times unit axis).
    pub fn exp(w: &Vector3<f64>) -> Self {
        let theta = w.norm();
        if theta < 1e-12 {
            // second-order series; exact to machine precision at this size
            let k = skew(w);
            return Rotation(Matrix3::identity() + k + k * k * 0.5);
        }
        Self::angle_axis_unchecked(theta, &(w / theta))
    }

    /// Rotation vector with angle in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    /// Rotation about the inertial z axis.
    pub fn yaw(psi: f64) -> Self {
        let (s, c) = psi.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn orthonormality_residual(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    /// Polar re-orthonormalization; a no-op when the drift is below threshold.
    pub fn renormalized(self) -> Self {
        if self.orthonormality_residual() <= RENORMALIZE_AT {
            return self;
        }
        Self::from_matrix_projected(self.0).unwrap_or(self)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<Matrix3<f64>> for Rotation {
    type Error = Error;
    fn try_from(m: Matrix3<f64>) -> Result<Self> {
        Rotation::from_matrix(m)
    }
}

impl From<Rotation> for Matrix3<f64> {
    fn from(r: Rotation) -> Self {
        r.0
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0).renormalized()
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        *self * *rhs
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// An element `𝓜(R, x1, x2, x3, X_L)` of SE_{3+n}(3).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    pub rot: Rotation,
    pub x1: Vector3<f64>,
    pub x2: Vector3<f64>,
    pub x3: Vector3<f64>,
    pub xl: Matrix3xX<f64>,
}

impl GroupElement {
    pub fn new(
        rot: Rotation,
        x1: Vector3<f64>,
        x2: Vector3<f64>,
        x3: Vector3<f64>,
        xl: Matrix3xX<f64>,
    ) -> Self {
        Self { rot, x1, x2, x3, xl }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rot: Rotation::identity(),
            x1: Vector3::zeros(),
            x2: Vector3::zeros(),
            x3: Vector3::zeros(),
            xl: Matrix3xX::zeros(n),
        }
    }

    /// Number of landmark columns.
    pub fn n(&self) -> usize {
        self.xl.ncols()
    }

    /// Group product `self · other`.
    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement> {
        if self.n() != other.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                actual: other.n(),
            });
        }
        let r = self.rot.matrix();
        let mut xl = r * &other.xl;
        xl += &self.xl;
        Ok(GroupElement {
            rot: self.rot * other.rot,
            x1: r * other.x1 + self.x1,
            x2: r * other.x2 + self.x2,
            x3: r * other.x3 + self.x3,
            xl,
        })
    }

    /// `𝓜(Rᵀ, −Rᵀx1, −Rᵀx2, −Rᵀx3, −RᵀX_L)`.
    pub fn inverse(&self) -> GroupElement {
        let rt = self.rot.transpose();
        let m = rt.matrix();
        GroupElement {
            rot: rt,
            x1: -(m * self.x1),
            x2: -(m * self.x2),
            x3: -(m * self.x3),
            xl: -(m * &self.xl),
        }
    }

    /// Left-multiplication by a pure rotation `𝓜(E, 0, …, 0)`.
    pub fn rotated_left(&self, e: &Rotation) -> GroupElement {
        let m = e.matrix();
        GroupElement {
            rot: *e * self.rot,
            x1: m * self.x1,
            x2: m * self.x2,
            x3: m * self.x3,
            xl: m * &self.xl,
        }
    }

    /// Dense `(6+n)×(6+n)` matrix form.
    pub fn embed(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::identity(6 + n, 6 + n);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rot.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.x1);
        m.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.x2);
        m.fixed_view_mut::<3, 1>(0, 5).copy_from(&self.x3);
        m.view_mut((0, 6), (3, n)).copy_from(&self.xl);
        m
    }

    /// Extracts the structured fields from a dense matrix, validating the
    /// bottom rows `[0 | I]`.
    pub fn from_embedded(m: &DMatrix<f64>) -> Result<GroupElement> {
        if m.nrows() < 6 || m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: 6,
                actual: m.nrows().min(m.ncols()),
            });
        }
        let n = m.nrows() - 6;
        let bottom = m.view((3, 0), (3 + n, 6 + n));
        let mut expected = DMatrix::zeros(3 + n, 6 + n);
        expected.view_mut((0, 3), (3 + n, 3 + n)).fill_with_identity();
        let dev = (bottom - expected).norm();
        if dev > ROTATION_TOL {
            return Err(Error::NotARotation {
                residual: dev,
                det: f64::NAN,
            });
        }
        let rot = Rotation::from_matrix(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(GroupElement {
            rot,
            x1: m.fixed_view::<3, 1>(0, 3).into_owned(),
            x2: m.fixed_view::<3, 1>(0, 4).into_owned(),
            x3: m.fixed_view::<3, 1>(0, 5).into_owned(),
            xl: Matrix3xX::from_iterator(n, m.view((0, 6), (3, n)).iter().copied()),
        })
    }
}

/// An element `𝒱(Ω, x1, x2, x3, X_L)` of the Lie algebra 𝔰𝔢_{3+n}(3).
#[derive(Clone, Debug, PartialEq)]
pub struct TangentElement {
    omega: Matrix3<f64>,
    pub x1: Vector3<f64>,
    pub x2: Vector3<f64>,
    pub x3: Vector3<f64>,
    pub xl: Matrix3xX<f64>,
}

impl TangentElement {
    /// Builds the algebra element from the rotation-rate vector `w`, so the
    /// rotational block is skew-symmetric by construction.
    pub fn new(
        w: &Vector3<f64>,
        x1: Vector3<f64>,
        x2: Vector3<f64>,
        x3: Vector3<f64>,
        xl: Matrix3xX<f64>,
    ) -> Self {
        Self {
            omega: skew(w),
            x1,
            x2,
            x3,
            xl,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(
            &Vector3::zeros(),
            Vector3::zeros(),
            Vector3::zeros(),
            Vector3::zeros(),
            Matrix3xX::zeros(n),
        )
    }

    pub fn omega(&self) -> &Matrix3<f64> {
        &self.omega
    }

    pub fn omega_vector(&self) -> Vector3<f64> {
        unskew(&self.omega).expect("omega is skew by construction")
    }

    pub fn n(&self) -> usize {
        self.xl.ncols()
    }

    /// Dense `(6+n)×(6+n)` matrix form (bottom rows zero).
    pub fn embed(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(6 + n, 6 + n);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.omega);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.x1);
        m.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.x2);
        m.fixed_view_mut::<3, 1>(0, 5).copy_from(&self.x3);
        m.view_mut((0, 6), (3, n)).copy_from(&self.xl);
        m
    }
}
