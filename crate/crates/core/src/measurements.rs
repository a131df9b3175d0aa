//! Landmark measurement models, innovations and the output matrix `C(t)`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::RigidBodyState;
use crate::error::{Error, Result};
use crate::liegroup::{project3, GroupElement, Rotation};

/// Minimum camera-to-landmark distance (m) for a bearing to be defined.
pub const EPS_SING: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[serde(rename = "relpos")]
    RelativePosition,
    Stereo,
    Mono,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::RelativePosition => "relpos",
            Modality::Stereo => "stereo",
            Modality::Mono => "mono",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relpos" | "relative-position" => Ok(Modality::RelativePosition),
            "stereo" => Ok(Modality::Stereo),
            "mono" => Ok(Modality::Mono),
            other => Err(format!("unknown modality `{other}` (expected relpos, stereo or mono)")),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Camera pose in the body frame: `r_c` maps camera coordinates to body
/// coordinates and `p_c` is the optical center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub r_c: Rotation,
    pub p_c: Vector3<f64>,
}

/// Forward-looking mount: the optical axis becomes body x, image-down becomes body −z.
const FORWARD_MOUNT: Matrix3<f64> = Matrix3::new(0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0);

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self {
            r_c: Rotation::identity(),
            p_c: Vector3::zeros(),
        }
    }

    /// EuRoC MAV `cam0` sensor-to-body transform.
    pub fn euroc_cam0() -> Self {
        Self::from_rows(
            [0.0148655429818, -0.999880929698, 0.00414029679422],
            [0.999557249008, 0.0149672133247, 0.025715529948],
            [-0.0257744366974, 0.00375618835797, 0.999660727178],
            [-0.0216401454975, -0.064676986768, 0.00981073058949],
        )
    }

    /// EuRoC MAV `cam1` sensor-to-body transform.
    pub fn euroc_cam1() -> Self {
        Self::from_rows(
            [0.0125552670891, -0.999755099723, 0.0182237714554],
            [0.999598781151, 0.0130119051815, 0.0251588363115],
            [-0.0253898008918, 0.0179005838253, 0.999517347078],
            [-0.0198435579556, 0.0453689425024, 0.00786212447038],
        )
    }

    fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3], t: [f64; 3]) -> Self {
        let m = Matrix3::new(r0[0], r0[1], r0[2], r1[0], r1[1], r1[2], r2[0], r2[1], r2[2]);
        Self {
            // the published calibration is orthonormal to about 1e-9 only
            r_c: Rotation::from_matrix_projected(m).expect("calibration is a rotation"),
            p_c: Vector3::from(t),
        }
    }

    /// Re-expresses an EuRoC rig (IMU x up) on a body whose x axis points forward.
    pub fn forward_mounted(&self) -> Self {
        Self {
            r_c: Rotation::from_matrix_projected(FORWARD_MOUNT * self.r_c.matrix())
                .expect("mount is a rotation"),
            p_c: FORWARD_MOUNT * self.p_c,
        }
    }

    /// Point in body coordinates expressed in the camera frame.
    pub fn body_to_camera(&self, y_body: &Vector3<f64>) -> Vector3<f64> {
        self.r_c.matrix().transpose() * (y_body - self.p_c)
    }
}

/// Pinhole calibration matrix `𝒦`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
}

impl CameraIntrinsics {
    pub fn new(k: Matrix3<f64>) -> Result<Self> {
        let lower = k[(1, 0)].abs() + k[(2, 0)].abs() + k[(2, 1)].abs();
        if lower != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::Config(vec![
                "intrinsics must be upper triangular with k[2][2] = 1".into(),
            ]));
        }
        let k_inv = k
            .try_inverse()
            .ok_or(Error::DegenerateInput(k.determinant().abs()))?;
        Ok(Self { k, k_inv })
    }

    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::new(Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0))
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    /// Pixel coordinates of a camera-frame direction with positive depth.
    pub fn project(&self, b: &Vector3<f64>) -> Option<(f64, f64)> {
        if b.z <= 0.0 {
            return None;
        }
        let z = self.k * (b / b.z);
        Some((z.x, z.y))
    }
}

/// Unit bearing `𝒦⁻¹(u, v, 1)ᵀ / ‖·‖`.
pub fn pixel_to_bearing(intr: &CameraIntrinsics, u: f64, v: f64) -> Vector3<f64> {
    (intr.k_inv * Vector3::new(u, v, 1.0)).normalize()
}

/// Which sensor produces the landmark readings, with its extrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SensorRig {
    RelativePosition,
    Mono(CameraExtrinsics),
    Stereo([CameraExtrinsics; 2]),
}

impl SensorRig {
    pub fn modality(&self) -> Modality {
        match self {
            SensorRig::RelativePosition => Modality::RelativePosition,
            SensorRig::Mono(_) => Modality::Mono,
            SensorRig::Stereo(_) => Modality::Stereo,
        }
    }

    /// Default rig of each modality: EuRoC cameras mounted forward.
    pub fn euroc_forward(modality: Modality) -> Self {
        let c0 = CameraExtrinsics::euroc_cam0().forward_mounted();
        let c1 = CameraExtrinsics::euroc_cam1().forward_mounted();
        match modality {
            Modality::RelativePosition => SensorRig::RelativePosition,
            Modality::Mono => SensorRig::Mono(c0),
            Modality::Stereo => SensorRig::Stereo([c0, c1]),
        }
    }

    /// Cameras of the rig, empty for relative position.
    pub fn cameras(&self) -> &[CameraExtrinsics] {
        match self {
            SensorRig::RelativePosition => &[],
            SensorRig::Mono(c) => std::slice::from_ref(c),
            SensorRig::Stereo(cs) => cs,
        }
    }
}

/// Raw sensor output for one landmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Reading {
    RelativePosition(Vector3<f64>),
    Mono(Vector3<f64>),
    Stereo([Vector3<f64>; 2]),
}

impl Reading {
    pub fn modality(&self) -> Modality {
        match self {
            Reading::RelativePosition(_) => Modality::RelativePosition,
            Reading::Mono(_) => Modality::Mono,
            Reading::Stereo(_) => Modality::Stereo,
        }
    }

    pub fn is_finite(&self) -> bool {
        let vs: &[Vector3<f64>] = match self {
            Reading::RelativePosition(y) | Reading::Mono(y) => std::slice::from_ref(y),
            Reading::Stereo(ys) => ys,
        };
        vs.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }
}

/// Reading of landmark `landmark_id` at time `t`; `None` when out of view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkObservation {
    pub landmark_id: usize,
    pub t: f64,
    pub reading: Option<Reading>,
}

impl LandmarkObservation {
    pub fn visible(&self) -> bool {
        self.reading.is_some()
    }

    pub fn invisible(landmark_id: usize, t: f64) -> Self {
        Self {
            landmark_id,
            t,
            reading: None,
        }
    }
}

fn bearing(cam: &CameraExtrinsics, y_body: &Vector3<f64>, landmark: usize) -> Result<Vector3<f64>> {
    let d = y_body - cam.p_c;
    let dist = d.norm();
    if dist <= EPS_SING {
        return Err(Error::SingularMeasurement {
            landmark,
            distance: dist,
        });
    }
    Ok(cam.r_c.matrix().transpose() * d / dist)
}

/// Relative position of landmark `i` in the body frame.
pub fn relative_position(state: &RigidBodyState, i: usize) -> Vector3<f64> {
    state.rot.matrix().transpose() * (state.landmarks.column(i) - state.p)
}

/// Noiseless reading of landmark `i`.
pub fn measure(state: &RigidBodyState, i: usize, rig: &SensorRig) -> Result<LandmarkObservation> {
    if i >= state.n() {
        return Err(Error::DimensionMismatch {
            expected: state.n(),
            actual: i,
        });
    }
    let y = relative_position(state, i);
    let reading = match rig {
        SensorRig::RelativePosition => Reading::RelativePosition(y),
        SensorRig::Mono(c) => Reading::Mono(bearing(c, &y, i)?),
        SensorRig::Stereo([c1, c2]) => Reading::Stereo([bearing(c1, &y, i)?, bearing(c2, &y, i)?]),
    };
    Ok(LandmarkObservation {
        landmark_id: i,
        t: state.t,
        reading: Some(reading),
    })
}

/// `𝐫_i = [0₃; 1, 0, 0, −e_i]` in `ℝ^{6+n}`.
fn r_vector(n: usize, i: usize) -> DVector<f64> {
    let mut r = DVector::zeros(6 + n);
    r[3] = 1.0;
    r[6 + i] = -1.0;
    r
}

/// Evaluates the reading through embedded matrices: `X⁻¹𝐫_i` for relative
/// position and `X_c⁻¹(X⁻¹𝐫_i − 𝐩_c)` normalized for bearings.
///
/// Slow (dense inverses); intended for cross-checking [`measure`].
pub fn measure_group_form(x: &GroupElement, i: usize, rig: &SensorRig) -> Result<Reading> {
    let n = x.n();
    let x_inv = x
        .embed()
        .try_inverse()
        .ok_or(Error::NonFinite("group inverse"))?;
    let r = r_vector(n, i);
    let y = &x_inv * &r;
    let cam_reading = |cam: &CameraExtrinsics| -> Result<Vector3<f64>> {
        let xc = GroupElement::identity(n).rotated_left(&cam.r_c).embed();
        let xc_inv = xc.try_inverse().ok_or(Error::NonFinite("camera inverse"))?;
        let mut pc = r.clone();
        pc.fixed_rows_mut::<3>(0).copy_from(&cam.p_c);
        let z = xc_inv * (&y - pc);
        let norm = z.norm();
        if norm <= EPS_SING {
            return Err(Error::SingularMeasurement {
                landmark: i,
                distance: norm,
            });
        }
        Ok(Vector3::new(z[0], z[1], z[2]) / norm)
    };
    Ok(match rig {
        SensorRig::RelativePosition => Reading::RelativePosition(Vector3::new(y[0], y[1], y[2])),
        SensorRig::Mono(c) => Reading::Mono(cam_reading(c)?),
        SensorRig::Stereo([c1, c2]) => Reading::Stereo([cam_reading(c1)?, cam_reading(c2)?]),
    })
}

/// Innovation `σ^p_i` of a visible observation and its projector block `Π_i`.
///
/// With `ŷ_i = R̂ᵀ(p̂_i − p̂)`: relative position gives `ŷ_i − y_i`, bearings
/// give `Σ_q π(R_cq ȳ^q)(ŷ_i − p_cq)`.
pub fn innovation(
    obs: &LandmarkObservation,
    xhat: &GroupElement,
    rig: &SensorRig,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let reading = obs.reading.as_ref().ok_or_else(|| {
        Error::InsufficientData(format!("landmark {} is not visible", obs.landmark_id))
    })?;
    let i = obs.landmark_id;
    if i >= xhat.n() {
        return Err(Error::DimensionMismatch {
            expected: xhat.n(),
            actual: i,
        });
    }
    let y_hat = xhat.rot.matrix().transpose() * (xhat.xl.column(i) - xhat.x1);
    innovation_from_prediction(reading, &y_hat, rig, i)
}

/// [`innovation`] given the predicted relative position `ŷ_i` directly.
pub fn innovation_from_prediction(
    reading: &Reading,
    y_hat: &Vector3<f64>,
    rig: &SensorRig,
    landmark: usize,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let term = |cam: &CameraExtrinsics, b: &Vector3<f64>| -> Result<(Vector3<f64>, Matrix3<f64>)> {
        let pi = project3(&(cam.r_c.matrix() * b)).map_err(|_| Error::SingularMeasurement {
            landmark,
            distance: b.norm(),
        })?;
        Ok((pi * (y_hat - cam.p_c), pi))
    };
    match (reading, rig) {
        (Reading::RelativePosition(y), SensorRig::RelativePosition) => {
            Ok((y_hat - y, Matrix3::identity()))
        }
        (Reading::Mono(b), SensorRig::Mono(c)) => term(c, b),
        (Reading::Stereo([b1, b2]), SensorRig::Stereo([c1, c2])) => {
            let (s1, p1) = term(c1, b1)?;
            let (s2, p2) = term(c2, b2)?;
            Ok((s1 + s2, p1 + p2))
        }
        _ => Err(Error::ModalityMismatch {
            got: reading.modality().name(),
            rig: rig.modality().name(),
        }),
    }
}

/// `C(t)` with block `(i, i+2)` equal to `Π_i` for each visible landmark.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMatrix {
    pub c: DMatrix<f64>,
    pub pi_blocks: Vec<Matrix3<f64>>,
    /// Landmarks with a nonzero row block, ascending.
    pub visible: Vec<usize>,
}

impl OutputMatrix {
    pub fn n(&self) -> usize {
        self.pi_blocks.len()
    }

    /// Rows of `C` belonging to visible landmarks only.
    pub fn visible_rows(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(3 * self.visible.len(), self.c.ncols());
        for (k, &i) in self.visible.iter().enumerate() {
            out.view_mut((3 * k, 0), (3, self.c.ncols()))
                .copy_from(&self.c.view((3 * i, 0), (3, self.c.ncols())));
        }
        out
    }
}

/// Places each `(i, Π_i)` at block column `i + 2`; absent landmarks keep zero rows.
pub fn build_c(blocks: &[(usize, Matrix3<f64>)], n: usize) -> Result<OutputMatrix> {
    let mut c = DMatrix::zeros(3 * n, 3 * (n + 2));
    let mut pi_blocks = vec![Matrix3::zeros(); n];
    let mut visible = Vec::with_capacity(blocks.len());
    for (i, pi) in blocks {
        if *i >= n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: *i,
            });
        }
        c.fixed_view_mut::<3, 3>(3 * i, 3 * (i + 2)).copy_from(pi);
        pi_blocks[*i] = *pi;
        visible.push(*i);
    }
    visible.sort_unstable();
    visible.dedup();
    Ok(OutputMatrix {
        c,
        pi_blocks,
        visible,
    })
}
