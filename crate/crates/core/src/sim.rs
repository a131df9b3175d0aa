//! Simulation harness: the circular test flight, a landmark world on the
//! walls of a cube, noisy IMU and camera streams, single runs, Monte Carlo
//! aggregation and CSV output.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{rk4_translation, ImuSample, RigidBodyState, GRAVITY};
use crate::error::{Error, Result};
use crate::liegroup::{GroupElement, Rotation};
use crate::measurements::{
    innovation_from_prediction, measure, CameraExtrinsics, LandmarkObservation, Modality, Reading, SensorRig,
};
use crate::observability::{gramian_with, GramianOptions, GramianReport};
use crate::observer::{build_a, error_state, CovariancePropagation, ObserverConfig, ObserverState};

/// Typical landmark range used to scale gyro noise into the landmark block of `V`.
pub const NOMINAL_RANGE: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub gyro_std: f64,
    pub accel_std: f64,
    pub bearing_std_deg: f64,
    pub relpos_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gyro_std: 0.0035,
            accel_std: 0.095,
            bearing_std_deg: 0.5,
            relpos_std: 0.05,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            gyro_std: 0.0,
            accel_std: 0.0,
            bearing_std_deg: 0.0,
            relpos_std: 0.0,
        }
    }
}

/// How far the initial estimate starts from the truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Per-axis roll/pitch perturbation (world x and y) when `uniform_attitude` is off.
    pub attitude_std_deg: f64,
    /// Draw `R̂(0)` uniformly on SO(3) instead.
    pub uniform_attitude: bool,
    /// Uniform draws whose `R̂Rᵀg` lies within this cone of `−g` are redrawn.
    pub antipode_exclusion_deg: f64,
    pub velocity_std: f64,
    /// Landmark perturbation for pre-initialized landmarks.
    pub landmark_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            attitude_std_deg: 2.0,
            uniform_attitude: false,
            antipode_exclusion_deg: 5.0,
            velocity_std: 0.3,
            landmark_std: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraMount {
    /// EuRoC cam0/cam1 turned to look along body x.
    #[default]
    Euroc,
    /// Forward-looking cameras at the body origin, stereo baseline 0.11 m along body y.
    Ideal,
}

/// A yaw about gravity plus a translation applied to the whole scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gauge {
    pub yaw: f64,
    pub translation: Vector3<f64>,
}

impl Gauge {
    fn rot(&self) -> Rotation {
        Rotation::yaw(self.yaw)
    }

    fn point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot().matrix() * p + self.translation
    }

    fn state(&self, s: &RigidBodyState) -> RigidBodyState {
        let rz = self.rot();
        let lm = gauge_points(Some(self), &s.landmarks);
        RigidBodyState {
            rot: rz * s.rot,
            p: self.point(&s.p),
            v: rz.matrix() * s.v,
            g: rz.matrix() * s.g,
            landmarks: lm,
            t: s.t,
        }
    }

    fn group(&self, x: &GroupElement) -> GroupElement {
        let s = self.state(&RigidBodyState::from_group(x, 0.0));
        s.to_group()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub radius: f64,
    pub v_forward: f64,
    pub vert_amp: f64,
    pub vert_freq: f64,
    pub roll_amp_deg: f64,
    pub roll_freq: f64,
    pub pitch_amp_deg: f64,
    pub pitch_freq: f64,
    pub duration: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub n_world_landmarks: usize,
    pub cube_side: f64,
    pub max_visible: usize,
    pub fov_deg: f64,
    pub include_floor_ceiling: bool,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub modality: Modality,
    pub camera: CameraMount,
    /// Hold the platform at its initial pose.
    pub stationary: bool,
    /// Track this many landmarks in every frame, pre-initialized, ignoring
    /// the field of view. `None` runs the full landmark world.
    pub fixed_landmarks: Option<usize>,
    pub init: InitConfig,
    pub k_r: f64,
    /// Multipliers on the default `V` and `Q`.
    pub v_scale: f64,
    pub q_scale: f64,
    /// Extra factor on the bearing `Q`. The output matrix is built from the
    /// measured ray, so noise in the ray and in the innovation correlate and
    /// push depths along the ray; a larger `Q` damps that drift.
    pub bearing_q_inflation: f64,
    pub propagation: CovariancePropagation,
    pub gauge: Option<Gauge>,
    /// Record the extreme eigenvalues of `P` at every frame.
    pub track_covariance_bounds: bool,
    /// Keep the full error state and `σ^p` of every frame.
    pub record_full_state: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            radius: 3.0,
            v_forward: 1.0,
            vert_amp: 1.5,
            vert_freq: 0.1,
            roll_amp_deg: 5.0,
            roll_freq: 0.08,
            pitch_amp_deg: 3.0,
            pitch_freq: 0.06,
            duration: 50.0,
            imu_rate: 200.0,
            cam_rate: 20.0,
            n_world_landmarks: 1000,
            cube_side: 12.0,
            max_visible: 50,
            fov_deg: 120.0,
            include_floor_ceiling: false,
            noise: NoiseConfig::default(),
            seed: 0,
            modality: Modality::RelativePosition,
            camera: CameraMount::Euroc,
            stationary: false,
            fixed_landmarks: None,
            init: InitConfig::default(),
            k_r: 1.0,
            v_scale: 1.0,
            q_scale: 1.0,
            bearing_q_inflation: 256.0,
            propagation: CovariancePropagation::Structured,
            gauge: None,
            track_covariance_bounds: false,
            record_full_state: false,
        }
    }
}

pub fn default_scenario() -> ScenarioConfig {
    ScenarioConfig::default()
}

/// Landmarks tracked in every frame of [`convergence_scenario`].
pub const CONVERGENCE_LANDMARKS: usize = 10;

/// Noiseless run from a uniformly random attitude with a fixed set of
/// pre-initialized landmarks. `V` and `Q` are scaled down since the data
/// carries no noise; the filter then weights the whole history almost
/// equally and converges in a few seconds for every modality.
pub fn convergence_scenario(modality: Modality, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        modality,
        seed,
        duration: 10.0,
        noise: NoiseConfig::zero(),
        fixed_landmarks: Some(CONVERGENCE_LANDMARKS),
        init: InitConfig {
            uniform_attitude: true,
            ..InitConfig::default()
        },
        v_scale: 1e-5,
        q_scale: 1e-3,
        bearing_q_inflation: 1.0,
        ..ScenarioConfig::default()
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = [
            ("radius", self.radius),
            ("duration", self.duration),
            ("imu_rate", self.imu_rate),
            ("cam_rate", self.cam_rate),
            ("cube_side", self.cube_side),
            ("k_r", self.k_r),
            ("v_scale", self.v_scale),
            ("q_scale", self.q_scale),
            ("bearing_q_inflation", self.bearing_q_inflation),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        let non_negative = [
            ("v_forward", self.v_forward),
            ("vert_amp", self.vert_amp),
            ("vert_freq", self.vert_freq),
            ("roll_amp_deg", self.roll_amp_deg),
            ("roll_freq", self.roll_freq),
            ("pitch_amp_deg", self.pitch_amp_deg),
            ("pitch_freq", self.pitch_freq),
            ("noise.gyro_std", self.noise.gyro_std),
            ("noise.accel_std", self.noise.accel_std),
            ("noise.bearing_std_deg", self.noise.bearing_std_deg),
            ("noise.relpos_std", self.noise.relpos_std),
            ("init.attitude_std_deg", self.init.attitude_std_deg),
            ("init.antipode_exclusion_deg", self.init.antipode_exclusion_deg),
            ("init.velocity_std", self.init.velocity_std),
            ("init.landmark_std", self.init.landmark_std),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 360.0) {
            errs.push(format!("fov_deg must lie in (0, 360), got {}", self.fov_deg));
        }
        if self.imu_rate > 0.0 && self.cam_rate > 0.0 {
            let ratio = self.imu_rate / self.cam_rate;
            if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
                errs.push(format!(
                    "imu_rate ({}) must be an integer multiple of cam_rate ({})",
                    self.imu_rate, self.cam_rate
                ));
            }
        }
        if self.max_visible == 0 {
            errs.push("max_visible must be at least 1".to_string());
        }
        match self.fixed_landmarks {
            Some(0) => errs.push("fixed_landmarks must be at least 1 when set".to_string()),
            None if self.n_world_landmarks == 0 => errs.push("n_world_landmarks must be at least 1".to_string()),
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn imu_dt(&self) -> f64 {
        1.0 / self.imu_rate
    }

    pub fn imu_steps(&self) -> usize {
        (self.duration * self.imu_rate).round() as usize
    }

    pub fn steps_per_frame(&self) -> usize {
        (self.imu_rate / self.cam_rate).round() as usize
    }

    pub fn rig(&self) -> SensorRig {
        match self.camera {
            CameraMount::Euroc => SensorRig::euroc_forward(self.modality),
            CameraMount::Ideal => {
                let c0 = CameraExtrinsics::identity().forward_mounted();
                let c1 = CameraExtrinsics {
                    p_c: Vector3::new(0.0, -0.11, 0.0),
                    ..c0
                };
                match self.modality {
                    Modality::RelativePosition => SensorRig::RelativePosition,
                    Modality::Mono => SensorRig::Mono(c0),
                    Modality::Stereo => SensorRig::Stereo([c0, c1]),
                }
            }
        }
    }

    /// Camera that decides visibility (cam0 of the rig).
    pub fn visibility_camera(&self) -> CameraExtrinsics {
        match self.camera {
            CameraMount::Euroc => CameraExtrinsics::euroc_cam0().forward_mounted(),
            CameraMount::Ideal => CameraExtrinsics::identity().forward_mounted(),
        }
    }

    /// Observer tuning: `V` from the nominal IMU noise levels and `Q` from the
    /// nominal measurement noise of the modality, independent of the noise
    /// actually injected so noiseless runs keep the same gains.
    pub fn observer_config(&self) -> ObserverConfig {
        let nominal = NoiseConfig::default();
        let mut oc = ObserverConfig {
            n_slots: self.fixed_landmarks.unwrap_or(self.max_visible),
            k_r: self.k_r,
            propagation: self.propagation,
            ..ObserverConfig::default()
        }
        .with_imu_noise(nominal.gyro_std, nominal.accel_std, self.imu_dt(), NOMINAL_RANGE);
        oc.v_velocity *= self.v_scale;
        oc.v_gravity *= self.v_scale;
        oc.v_landmark *= self.v_scale;
        oc.q_measurement = match self.modality {
            Modality::RelativePosition => nominal.relpos_std.powi(2),
            _ => (nominal.bearing_std_deg.to_radians() * oc.assumed_depth).powi(2) * self.bearing_q_inflation,
        } * self.q_scale;
        oc
    }
}

/// Pose, velocity and body-frame IMU of the analytic trajectory at `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthSample {
    pub state: RigidBodyState,
    pub omega: Vector3<f64>,
    pub accel: Vector3<f64>,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Analytic truth in the scenario frame (before any gauge).
fn kinematics_base(cfg: &ScenarioConfig, t: f64) -> TruthSample {
    let tt = if cfg.stationary { 0.0 } else { t };
    let motion = if cfg.stationary { 0.0 } else { 1.0 };
    let r = cfg.radius;
    let w = cfg.v_forward / r;
    let wz = 2.0 * PI * cfg.vert_freq;
    let wr = 2.0 * PI * cfg.roll_freq;
    let wp = 2.0 * PI * cfg.pitch_freq;
    let (sa, ca) = (w * tt).sin_cos();

    let p = Vector3::new(r * ca, r * sa, cfg.vert_amp * (wz * tt).sin());
    let v = motion * Vector3::new(-cfg.v_forward * sa, cfg.v_forward * ca, cfg.vert_amp * wz * (wz * tt).cos());
    let acc = motion
        * Vector3::new(
            -cfg.v_forward * w * ca,
            -cfg.v_forward * w * sa,
            -cfg.vert_amp * wz * wz * (wz * tt).sin(),
        );

    let roll_a = cfg.roll_amp_deg.to_radians();
    let pitch_a = cfg.pitch_amp_deg.to_radians();
    let psi = w * tt + FRAC_PI_2;
    let phi = roll_a * (wr * tt).sin();
    let theta = pitch_a * (wp * tt).sin();
    let psi_d = motion * w;
    let phi_d = motion * roll_a * wr * (wr * tt).cos();
    let theta_d = motion * pitch_a * wp * (wp * tt).cos();

    let rot = Rotation::yaw(psi) * Rotation::from_matrix(rot_y(theta) * rot_x(phi)).expect("elementary rotations");
    // Body rates of the z-y-x Euler sequence.
    let (sphi, cphi) = phi.sin_cos();
    let (sth, cth) = theta.sin_cos();
    let omega = Vector3::new(
        phi_d - psi_d * sth,
        theta_d * cphi + psi_d * cth * sphi,
        -theta_d * sphi + psi_d * cth * cphi,
    );
    let accel = rot.matrix().transpose() * (acc - GRAVITY);
    TruthSample {
        state: RigidBodyState {
            rot,
            p,
            v,
            g: GRAVITY,
            landmarks: Matrix3xX::zeros(0),
            t,
        },
        omega,
        accel,
    }
}

/// Truth at `t` with analytic body rate and specific force.
pub fn truth_kinematics(cfg: &ScenarioConfig, t: f64) -> TruthSample {
    let mut s = kinematics_base(cfg, t);
    if let Some(g) = &cfg.gauge {
        s.state = g.state(&s.state);
    }
    s
}

pub fn generate_truth(cfg: &ScenarioConfig, t: f64) -> RigidBodyState {
    truth_kinematics(cfg, t).state
}

/// Time constant of the position hold in [`synthesize_imu`] (s).
pub const POSITION_HOLD_TAU: f64 = 0.05;

/// Noiseless IMU samples on `[0, duration)`, zero-order hold.
///
/// `ω_k = Log(R_kᵀR_{k+1})/dt` reproduces the attitude exactly. A held
/// specific force cannot match both velocity and position of a curved path
/// over one step, so `a_k` is solved from the RK4 velocity update to land on
/// `v(t_{k+1}) − e_p/τ`, where `e_p` is the position offset of the integrated
/// sequence. That keeps integrated position on the analytic path to
/// ~1e-7 m at the price of velocity offsets of a few µm/s.
pub fn synthesize_imu(cfg: &ScenarioConfig) -> Vec<ImuSample> {
    let dt = cfg.imu_dt();
    let mut next = generate_truth(cfg, 0.0);
    let (mut p, mut v) = (next.p, next.v);
    (0..cfg.imu_steps())
        .map(|k| {
            let cur = next.clone();
            next = generate_truth(cfg, (k + 1) as f64 * dt);
            let omega = (cur.rot.transpose() * next.rot).log() / dt;
            let e_half = Rotation::exp(&(omega * (0.5 * dt)));
            let e_full = Rotation::exp(&(omega * dt));
            let wv = (Matrix3::identity() + e_half.matrix() * 4.0 + e_full.matrix()) * (dt / 6.0);
            let v_target = next.v - (p - cur.p) / POSITION_HOLD_TAU;
            let rhs = cur.rot.matrix().transpose() * (v_target - v - cur.g * dt);
            let accel = wv.lu().solve(&rhs).expect("ZOH velocity map is invertible");
            let imu = ImuSample::new(omega, accel, cur.t);
            (p, v) = rk4_translation(&cur.rot, &p, &v, &cur.g, &imu, dt);
            imu
        })
        .collect()
}

/// Points spread uniformly over the walls of the cube (plus floor and
/// ceiling when enabled), centred on the trajectory and gauge-transformed.
pub fn generate_landmarks(cfg: &ScenarioConfig, count: usize, rng: &mut impl Rng) -> Matrix3xX<f64> {
    let h = 0.5 * cfg.cube_side;
    let faces = if cfg.include_floor_ceiling { 6 } else { 4 };
    let mut m = Matrix3xX::zeros(count);
    for mut col in m.column_iter_mut() {
        let face = rng.random_range(0..faces);
        let u = rng.random_range(-h..h);
        let w = rng.random_range(-h..h);
        let sign = if face % 2 == 0 { h } else { -h };
        let p = match face / 2 {
            0 => Vector3::new(sign, u, w),
            1 => Vector3::new(u, sign, w),
            _ => Vector3::new(u, w, sign),
        };
        let p = cfg.gauge.map_or(p, |g| g.point(&p));
        col.copy_from(&p);
    }
    m
}

/// Landmarks in front of the camera within the horizontal field of view,
/// nearest first, at most `max_visible`.
pub fn select_visible(state: &RigidBodyState, landmarks: &Matrix3xX<f64>, cfg: &ScenarioConfig) -> Vec<usize> {
    visible_in_cone(state, landmarks, &cfg.visibility_camera(), cfg.fov_deg, cfg.max_visible)
}

/// [`select_visible`] for an explicit camera, field of view and cap.
pub fn visible_in_cone(
    state: &RigidBodyState,
    landmarks: &Matrix3xX<f64>,
    cam: &CameraExtrinsics,
    fov_deg: f64,
    max_visible: usize,
) -> Vec<usize> {
    let half = 0.5 * fov_deg.to_radians();
    let rt = state.rot.matrix().transpose();
    let mut seen: Vec<(f64, usize)> = landmarks
        .column_iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let c = cam.body_to_camera(&(rt * (l - state.p)));
            (c.z > 0.0 && c.x.atan2(c.z).abs() <= half).then(|| (c.norm(), i))
        })
        .collect();
    seen.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    seen.truncate(max_visible);
    seen.into_iter().map(|(_, i)| i).collect()
}

/// Rotates unit vector `b` by a Gaussian angle about a random axis orthogonal to it.
fn perturb_bearing(b: &Vector3<f64>, std: f64, rng: &mut impl Rng) -> Vector3<f64> {
    if std == 0.0 {
        return *b;
    }
    loop {
        let r = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let axis = b.cross(&r);
        let nrm = axis.norm();
        if nrm > 1e-6 {
            let angle: f64 = Normal::new(0.0, std).expect("finite std").sample(rng);
            return (Rotation::exp(&(axis * (angle / nrm))).matrix() * b).normalize();
        }
    }
}

/// Applies the measurement noise of `noise` to an observation.
pub fn corrupt(obs: &LandmarkObservation, noise: &NoiseConfig, rng: &mut impl Rng) -> LandmarkObservation {
    let sb = noise.bearing_std_deg.to_radians();
    let reading = obs.reading.map(|r| match r {
        Reading::RelativePosition(y) => {
            let n = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
            Reading::RelativePosition(y + n * noise.relpos_std)
        }
        Reading::Mono(b) => Reading::Mono(perturb_bearing(&b, sb, rng)),
        Reading::Stereo([b1, b2]) => {
            let c1 = perturb_bearing(&b1, sb, rng);
            Reading::Stereo([c1, perturb_bearing(&b2, sb, rng)])
        }
    });
    LandmarkObservation { reading, ..*obs }
}

/// Noiseless observation of a single world point.
pub fn observe_point(
    state: &RigidBodyState,
    point: &Vector3<f64>,
    id: usize,
    rig: &SensorRig,
) -> Result<LandmarkObservation> {
    let s = RigidBodyState {
        landmarks: Matrix3xX::from_column_slice(point.as_slice()),
        ..state.clone()
    };
    let mut obs = measure(&s, 0, rig)?;
    obs.landmark_id = id;
    Ok(obs)
}

/// `Π` of a point under exact prediction, i.e. the output-matrix block.
pub fn output_block(state: &RigidBodyState, point: &Vector3<f64>, rig: &SensorRig) -> Result<Matrix3<f64>> {
    let obs = observe_point(state, point, 0, rig)?;
    let y = state.rot.matrix().transpose() * (point - state.p);
    let reading = obs.reading.expect("fresh observations are visible");
    Ok(innovation_from_prediction(&reading, &y, rig, 0)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub p: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub q: [f64; 4],
    pub v: Vector3<f64>,
}

impl PoseSample {
    fn new(rot: &Rotation, p: &Vector3<f64>, v: &Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_matrix(rot.matrix());
        Self {
            p: *p,
            q: [q.w, q.i, q.j, q.k],
            v: *v,
        }
    }
}

/// One camera epoch of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub t: f64,
    pub truth: PoseSample,
    pub estimate: PoseSample,
    pub att_err_deg: f64,
    pub pos_err: f64,
    /// `‖x_v‖` and `‖x_g‖`, the body-frame velocity and gravity errors.
    pub vel_err: f64,
    pub grav_err: f64,
    /// Norm of the full error state over initialized slots.
    pub x_norm: f64,
    /// Angle between `ğ = R̂Rᵀg` and `g` (deg).
    pub breve_g_angle_deg: f64,
    pub n_visible: usize,
    pub n_used: usize,
    pub p_eig: Option<(f64, f64)>,
    pub x: Option<DVector<f64>>,
    pub sigma_p: Option<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ScenarioConfig,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: Duration,
}

impl RunResult {
    /// Everything except the wall-clock time matches.
    pub fn same_outputs(&self, other: &RunResult) -> bool {
        self.config == other.config && self.epochs == other.epochs
    }
}

fn uniform_rotation(rng: &mut impl Rng) -> Rotation {
    let q = nalgebra::Quaternion::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    let m = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    Rotation::from_matrix_projected(m).expect("unit quaternion gives a rotation")
}

fn gaussian3(std: f64, rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| StandardNormal.sample(rng)) * std
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Initial attitude estimate; always drawn in the ungauged frame.
fn initial_attitude(cfg: &ScenarioConfig, truth0: &RigidBodyState, rng: &mut impl Rng) -> Rotation {
    if !cfg.init.uniform_attitude {
        // roll and pitch only: yaw about gravity is a gauge direction, fixed like p̂(0)
        let mut d = gaussian3(cfg.init.attitude_std_deg.to_radians(), rng);
        d.z = 0.0;
        return Rotation::exp(&d) * truth0.rot;
    }
    let excl = cfg.init.antipode_exclusion_deg.to_radians();
    loop {
        let r = uniform_rotation(rng);
        let breve = r.matrix() * truth0.rot.matrix().transpose() * GRAVITY;
        if angle_between(&breve, &(-GRAVITY)) > excl {
            return r;
        }
    }
}

fn slot_truth(state: &RigidBodyState, world: &Matrix3xX<f64>, os: &ObserverState) -> RigidBodyState {
    let n = os.n();
    let mut lm = Matrix3xX::zeros(n);
    for s in 0..n {
        if let Some(w) = os.slots.world_of(s) {
            lm.set_column(s, &world.column(w));
        }
    }
    state.with_landmarks(lm)
}

/// One simulation run.
pub fn run_single(cfg: &ScenarioConfig) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rig = cfg.rig();
    let ocfg = cfg.observer_config();
    let dt = cfg.imu_dt();

    let base = ScenarioConfig {
        gauge: None,
        ..cfg.clone()
    };
    let n_lm = cfg.fixed_landmarks.unwrap_or(cfg.n_world_landmarks);
    let world_base = generate_landmarks(&base, n_lm, &mut rng);
    let world = gauge_points(cfg.gauge.as_ref(), &world_base);

    // The initial estimate is drawn in the ungauged frame and then moved by
    // the gauge, so gauged and ungauged runs see the same random draws.
    let truth0 = generate_truth(&base, 0.0);
    let rhat = initial_attitude(cfg, &truth0, &mut rng);
    let vhat = truth0.v + gaussian3(cfg.init.velocity_std, &mut rng);
    let mut os = match cfg.fixed_landmarks {
        Some(m) => {
            let mut lhat = world_base.clone();
            for i in 0..m {
                let c = lhat.column(i) + gaussian3(cfg.init.landmark_std, &mut rng);
                lhat.set_column(i, &c);
            }
            let mut xhat = GroupElement::new(rhat, truth0.p, vhat, GRAVITY, lhat);
            if let Some(g) = &cfg.gauge {
                xhat = g.group(&xhat);
            }
            ObserverState::with_landmarks(ocfg, rig.clone(), xhat)?
        }
        None => {
            let mut xhat = GroupElement::new(rhat, truth0.p, vhat, GRAVITY, Matrix3xX::zeros(ocfg.n_slots));
            if let Some(g) = &cfg.gauge {
                xhat = g.group(&xhat);
            }
            ObserverState::new(ocfg, rig.clone(), xhat.rot, xhat.x1, xhat.x2, xhat.x3)?
        }
    };

    let imu_true = synthesize_imu(cfg);
    let gyro = Normal::new(0.0, cfg.noise.gyro_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let accel = Normal::new(0.0, cfg.noise.accel_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let spf = cfg.steps_per_frame();
    let mut epochs = Vec::with_capacity(imu_true.len() / spf);

    for (k, sample) in imu_true.iter().enumerate() {
        let imu = ImuSample::new(
            sample.omega + Vector3::from_fn(|_, _| gyro.sample(&mut rng)),
            sample.accel + Vector3::from_fn(|_, _| accel.sample(&mut rng)),
            sample.t,
        );
        os.predict(&imu, dt)?;
        if (k + 1) % spf != 0 {
            continue;
        }
        let t = (k + 1) as f64 * dt;
        let truth = generate_truth(cfg, t);
        let ids: Vec<usize> = match cfg.fixed_landmarks {
            Some(m) => (0..m).collect(),
            None => select_visible(&truth, &world, cfg),
        };
        let mut frame = Vec::with_capacity(ids.len());
        for &i in &ids {
            let clean = observe_point(&truth, &world.column(i).into_owned(), i, &rig)?;
            frame.push(corrupt(&clean, &cfg.noise, &mut rng));
        }
        let (n_used, gains) = match cfg.fixed_landmarks {
            Some(_) => {
                let g = os.update(&frame)?;
                (frame.len(), g)
            }
            None => {
                let rep = os.process_frame(t, &frame)?;
                (rep.used, rep.gains)
            }
        };

        let truth_slots = match cfg.fixed_landmarks {
            Some(_) => truth.with_landmarks(world.clone()),
            None => slot_truth(&truth, &world, &os),
        };
        let mut x = error_state(&truth_slots, &os.xhat);
        for (i, init) in os.initialized_landmarks.iter().enumerate() {
            if !init {
                x.fixed_rows_mut::<3>(6 + 3 * i).fill(0.0);
            }
        }
        let xh = &os.xhat;
        let att = (truth.rot * xh.rot.transpose()).angle().to_degrees();
        let breve = xh.rot.matrix() * truth.rot.matrix().transpose() * os.g_true;
        let p_eig = cfg.track_covariance_bounds.then(|| {
            let e = nalgebra::SymmetricEigen::new(os.covariance()).eigenvalues;
            (e.min(), e.max())
        });
        let (x_full, sigma_p) = if cfg.record_full_state {
            let n = os.n();
            let sp = gains.map(|g| g.sigma_p).unwrap_or_else(|| DVector::zeros(3 * n));
            (Some(x.clone()), Some(sp))
        } else {
            (None, None)
        };
        epochs.push(EpochRecord {
            t,
            truth: PoseSample::new(&truth.rot, &truth.p, &truth.v),
            estimate: PoseSample::new(&xh.rot, &xh.x1, &xh.x2),
            att_err_deg: att,
            pos_err: (truth.p - xh.x1).norm(),
            vel_err: x.fixed_rows::<3>(0).norm(),
            grav_err: x.fixed_rows::<3>(3).norm(),
            x_norm: x.norm(),
            breve_g_angle_deg: angle_between(&breve, &os.g_true).to_degrees(),
            n_visible: ids.len(),
            n_used,
            p_eig,
            x: x_full,
            sigma_p,
        });
    }
    Ok(RunResult {
        config: cfg.clone(),
        epochs,
        wall_clock: start.elapsed(),
    })
}

/// Per-epoch RMSE across Monte Carlo runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmseSeries {
    pub t: Vec<f64>,
    pub att_deg: Vec<f64>,
    pub pos_m: Vec<f64>,
    pub vel_mps: Vec<f64>,
    pub grav_mps2: Vec<f64>,
}

impl RmseSeries {
    pub fn from_runs(runs: &[RunResult]) -> Self {
        let Some(first) = runs.first() else {
            return Self::default();
        };
        let m = runs.len() as f64;
        let rms = |k: usize, f: &dyn Fn(&EpochRecord) -> f64| {
            (runs.iter().map(|r| f(&r.epochs[k]).powi(2)).sum::<f64>() / m).sqrt()
        };
        let len = first.epochs.len();
        Self {
            t: first.epochs.iter().map(|e| e.t).collect(),
            att_deg: (0..len).map(|k| rms(k, &|e| e.att_err_deg)).collect(),
            pos_m: (0..len).map(|k| rms(k, &|e| e.pos_err)).collect(),
            vel_mps: (0..len).map(|k| rms(k, &|e| e.vel_err)).collect(),
            grav_mps2: (0..len).map(|k| rms(k, &|e| e.grav_err)).collect(),
        }
    }

    /// Mean of `values` over epochs with `t` in `[t0, t1]`.
    pub fn window_mean(&self, values: &[f64], t0: f64, t1: f64) -> f64 {
        let sel: Vec<f64> = self
            .t
            .iter()
            .zip(values)
            .filter(|(t, _)| **t >= t0 - 1e-9 && **t <= t1 + 1e-9)
            .map(|(_, v)| *v)
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct MonteCarloResult {
    pub rmse: RmseSeries,
    pub runs: Vec<RunResult>,
}

/// Thread count from `LIE_VIO_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("LIE_VIO_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
}

/// Runs seeds `cfg.seed .. cfg.seed + n_runs` in parallel and aggregates RMSE.
pub fn run_monte_carlo(cfg: &ScenarioConfig, n_runs: usize) -> Result<MonteCarloResult> {
    if n_runs == 0 {
        return Err(Error::Config(vec!["runs must be at least 1".to_string()]));
    }
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(vec![e.to_string()]))?;
    let runs: Vec<RunResult> = pool.install(|| {
        (0..n_runs as u64)
            .into_par_iter()
            .map(|k| {
                run_single(&ScenarioConfig {
                    seed: cfg.seed.wrapping_add(k),
                    ..cfg.clone()
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(MonteCarloResult {
        rmse: RmseSeries::from_runs(&runs),
        runs,
    })
}

/// Gramian windows along the scenario trajectory. Each window tracks up to
/// `per_window` landmarks that stay in view for the whole window; a window
/// with none gets a zero output matrix.
pub fn trajectory_gramians(
    cfg: &ScenarioConfig,
    landmarks: &Matrix3xX<f64>,
    delta: f64,
    per_window: usize,
    opts: &GramianOptions,
) -> Result<Vec<GramianReport>> {
    cfg.validate()?;
    let rig = cfg.rig();
    let mut out = Vec::new();
    let mut t0 = 0.0;
    while t0 + delta <= cfg.duration + 1e-9 {
        let mut ids = persistent_landmarks(cfg, landmarks, t0, delta, opts.grid_dt);
        ids.truncate(per_window);
        let n = ids.len().max(1);
        let a_of_t = |t: f64| build_a(&ImuSample::new(truth_kinematics(cfg, t).omega, Vector3::zeros(), t), n);
        let c_of_t = |t: f64| {
            let s = generate_truth(cfg, t);
            let mut c = DMatrix::zeros(3 * n, 3 * (n + 2));
            for (slot, id) in ids.iter().enumerate() {
                if let Ok(pi) = output_block(&s, &landmarks.column(*id).into_owned(), &rig) {
                    c.view_mut((3 * slot, 6 + 3 * slot), (3, 3)).copy_from(&pi);
                }
            }
            c
        };
        out.push(gramian_with(a_of_t, c_of_t, t0, delta, opts));
        t0 += delta;
    }
    Ok(out)
}

/// Landmarks inside the field of view at every camera instant of
/// `[t0, t0 + delta]`, in the order [`select_visible`] ranks them at `t0`.
/// A landmark that leaves the view mid-window contributes almost nothing to
/// its own slot of the Gramian.
pub fn persistent_landmarks(cfg: &ScenarioConfig, landmarks: &Matrix3xX<f64>, t0: f64, delta: f64, dt: f64) -> Vec<usize> {
    let cam = cfg.visibility_camera();
    let mut ids = visible_in_cone(&generate_truth(cfg, t0), landmarks, &cam, cfg.fov_deg, usize::MAX);
    let steps = (delta / dt).round().max(1.0) as usize;
    for k in 1..=steps {
        let vis = visible_in_cone(&generate_truth(cfg, t0 + delta * k as f64 / steps as f64), landmarks, &cam, cfg.fov_deg, usize::MAX);
        ids.retain(|id| vis.contains(id));
    }
    ids
}

pub fn write_rmse_csv(path: &Path, rmse: &RmseSeries) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t_s,att_deg,pos_m,vel_mps,grav_mps2")?;
    for k in 0..rmse.t.len() {
        writeln!(
            f,
            "{:.3},{:.9e},{:.9e},{:.9e},{:.9e}",
            rmse.t[k], rmse.att_deg[k], rmse.pos_m[k], rmse.vel_mps[k], rmse.grav_mps2[k]
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Truth or estimate trajectory of one run.
pub fn write_trajectory_csv(path: &Path, run: &RunResult, estimate: bool) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t_s,px_m,py_m,pz_m,qw,qx,qy,qz,vx_mps,vy_mps,vz_mps")?;
    for e in &run.epochs {
        let s = if estimate { &e.estimate } else { &e.truth };
        writeln!(
            f,
            "{:.3},{:.9e},{:.9e},{:.9e},{:.12},{:.12},{:.12},{:.12},{:.9e},{:.9e},{:.9e}",
            e.t, s.p.x, s.p.y, s.p.z, s.q[0], s.q[1], s.q[2], s.q[3], s.v.x, s.v.y, s.v.z
        )?;
    }
    f.flush()?;
    Ok(())
}

/// World landmarks the run with this config uses (same RNG stream).
pub fn world_landmarks(cfg: &ScenarioConfig) -> Matrix3xX<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.fixed_landmarks.unwrap_or(cfg.n_world_landmarks);
    let base = ScenarioConfig {
        gauge: None,
        ..cfg.clone()
    };
    gauge_points(cfg.gauge.as_ref(), &generate_landmarks(&base, n, &mut rng))
}

fn gauge_points(gauge: Option<&Gauge>, m: &Matrix3xX<f64>) -> Matrix3xX<f64> {
    let mut out = m.clone();
    if let Some(g) = gauge {
        for mut c in out.column_iter_mut() {
            let q = g.point(&c.clone_owned());
            c.copy_from(&q);
        }
    }
    out
}
