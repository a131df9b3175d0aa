//! EuRoC MAV sequences in the ASL layout: IMU and ground-truth ingestion,
//! camera measurements synthesized from ground truth against virtual
//! landmarks, and RMS position error after a yaw-plus-translation alignment.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3xX, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ImuSample, RigidBodyState, GRAVITY};
use crate::error::{Error, Result};
use crate::liegroup::Rotation;
use crate::measurements::{CameraExtrinsics, LandmarkObservation, Modality, SensorRig};
use crate::observer::ObserverState;
use crate::sim::{corrupt, observe_point, synthesize_imu, truth_kinematics, thread_cap, visible_in_cone, NoiseConfig, ScenarioConfig};

pub const IMU_FILE: &str = "mav0/imu0/data.csv";
pub const GROUNDTRUTH_FILE: &str = "mav0/state_groundtruth_estimate0/data.csv";

/// Ground-truth gaps longer than this reject the window.
pub const MAX_GT_GAP_S: f64 = 0.5;

/// Landmarks per square metre of wall in the simulated room (1000 on four 12 m walls).
pub const DEFAULT_LANDMARK_DENSITY: f64 = 1000.0 / (4.0 * 144.0);

const QUAT_UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuRecord {
    pub t_ns: i64,
    pub omega: Vector3<f64>,
    pub accel: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthRecord {
    pub t_ns: i64,
    pub p: Vector3<f64>,
    pub rot: Rotation,
    pub v: Vector3<f64>,
    /// Gyro and accelerometer biases when the file carries them.
    pub bias_gyro: Option<Vector3<f64>>,
    pub bias_accel: Option<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EurocRecords {
    pub imu: Vec<ImuRecord>,
    pub gt: Vec<GroundTruthRecord>,
    pub sequence_name: String,
}

impl EurocRecords {
    /// Time zero: the first ground-truth sample.
    pub fn t0_ns(&self) -> Option<i64> {
        self.gt.first().map(|g| g.t_ns)
    }
}

fn seconds_since(t_ns: i64, t0_ns: i64) -> f64 {
    (t_ns - t0_ns) as f64 * 1e-9
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Numeric rows of an ASL CSV with at least `min_cols` columns, paired with
/// their line numbers. The header line is skipped.
fn read_rows(path: &Path, min_cols: usize) -> Result<Vec<(usize, i64, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut rows = Vec::new();
    let mut last_t = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() < min_cols {
            return Err(parse_err(path, line, format!("expected {min_cols} columns, found {}", rec.len())));
        }
        let t: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad timestamp {:?}", &rec[0])))?;
        if last_t.is_some_and(|l| t <= l) {
            return Err(parse_err(path, line, format!("timestamp {t} is not increasing")));
        }
        last_t = Some(t);
        let vals = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(path, line, format!("bad number {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, t, vals));
    }
    Ok(rows)
}

/// `timestamp [ns], w_x, w_y, w_z, a_x, a_y, a_z`.
pub fn parse_imu_csv(path: &Path) -> Result<Vec<ImuRecord>> {
    Ok(read_rows(path, 7)?
        .into_iter()
        .map(|(_, t, v)| ImuRecord {
            t_ns: t,
            omega: Vector3::new(v[0], v[1], v[2]),
            accel: Vector3::new(v[3], v[4], v[5]),
        })
        .collect())
}

/// `timestamp, p (3), q_wxyz (4), v (3)[, b_w (3), b_a (3)]`.
pub fn parse_groundtruth_csv(path: &Path) -> Result<Vec<GroundTruthRecord>> {
    read_rows(path, 11)?
        .into_iter()
        .map(|(line, t, v)| {
            let rot = quaternion_to_rotation([v[3], v[4], v[5], v[6]]).map_err(|e| parse_err(path, line, e.to_string()))?;
            let biases = v.len() >= 16;
            Ok(GroundTruthRecord {
                t_ns: t,
                p: Vector3::new(v[0], v[1], v[2]),
                rot,
                v: Vector3::new(v[7], v[8], v[9]),
                bias_gyro: biases.then(|| Vector3::new(v[10], v[11], v[12])),
                bias_accel: biases.then(|| Vector3::new(v[13], v[14], v[15])),
            })
        })
        .collect()
}

/// Reads a sequence directory (the one holding `mav0`, or `mav0` itself).
pub fn load_sequence(dir: &Path) -> Result<EurocRecords> {
    if !dir.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", dir.display()),
        )));
    }
    let root = if dir.join("mav0").is_dir() {
        dir.to_path_buf()
    } else if dir.file_name().is_some_and(|n| n == "mav0") {
        dir.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        return Err(Error::InsufficientData(format!("{} has no mav0 directory", dir.display())));
    };
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());
    Ok(EurocRecords {
        imu: parse_imu_csv(&root.join(IMU_FILE))?,
        gt: parse_groundtruth_csv(&root.join(GROUNDTRUTH_FILE))?,
        sequence_name: name,
    })
}

/// Hamilton quaternion `(w, x, y, z)`; must be unit within 1e-6.
pub fn quaternion_to_rotation(q: [f64; 4]) -> Result<Rotation> {
    let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
    let norm = quat.norm();
    if (norm - 1.0).abs() > QUAT_UNIT_TOL {
        return Err(Error::InsufficientData(format!("quaternion norm {norm:.9} is not unit")));
    }
    let m = UnitQuaternion::from_quaternion(quat).to_rotation_matrix().into_inner();
    Rotation::from_matrix_projected(m)
}

/// `(w, x, y, z)` with `w ≥ 0`.
pub fn rotation_to_quaternion(r: &Rotation) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(r.matrix());
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

fn lerp(a: &Vector3<f64>, b: &Vector3<f64>, s: f64) -> Vector3<f64> {
    a + (b - a) * s
}

/// Ground truth at `t_ns`: linear in position, velocity and biases, shortest
/// arc in attitude. Exact at sample timestamps.
pub fn interpolate_groundtruth(gt: &[GroundTruthRecord], t_ns: i64) -> Result<GroundTruthRecord> {
    let (first, last) = match (gt.first(), gt.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InsufficientData("empty ground truth".into())),
    };
    if t_ns < first.t_ns || t_ns > last.t_ns {
        return Err(Error::InsufficientData(format!(
            "time {t_ns} outside ground truth [{}, {}]",
            first.t_ns, last.t_ns
        )));
    }
    let k = gt.partition_point(|g| g.t_ns < t_ns);
    if gt[k].t_ns == t_ns {
        return Ok(gt[k]);
    }
    let (a, b) = (&gt[k - 1], &gt[k]);
    let gap = seconds_since(b.t_ns, a.t_ns);
    if gap > MAX_GT_GAP_S {
        return Err(Error::InsufficientData(format!(
            "ground-truth gap of {gap:.3} s at {} ns",
            a.t_ns
        )));
    }
    let s = (t_ns - a.t_ns) as f64 / (b.t_ns - a.t_ns) as f64;
    let rel = (a.rot.transpose() * b.rot).log();
    let both = |x: Option<Vector3<f64>>, y: Option<Vector3<f64>>| x.zip(y).map(|(x, y)| lerp(&x, &y, s));
    Ok(GroundTruthRecord {
        t_ns,
        p: lerp(&a.p, &b.p, s),
        rot: a.rot * Rotation::exp(&(rel * s)),
        v: lerp(&a.v, &b.v, s),
        bias_gyro: both(a.bias_gyro, b.bias_gyro),
        bias_accel: both(a.bias_accel, b.bias_accel),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EurocConfig {
    pub modality: Modality,
    /// Only the visual parts are used; the IMU stream is real.
    pub noise: NoiseConfig,
    pub seed: u64,
    pub cam_rate: f64,
    pub fov_deg: f64,
    pub max_visible: usize,
    /// Virtual landmarks per square metre of wall.
    pub landmark_density: f64,
    /// Margin added around the ground-truth bounding box.
    pub bbox_margin: f64,
    /// Evaluate only the first `duration` seconds.
    pub duration: Option<f64>,
    /// Subtract the ground-truth bias estimates from the IMU.
    pub compensate_bias: bool,
    /// Camera updates on; off gives pure IMU dead reckoning.
    pub updates: bool,
    pub v_scale: f64,
    pub q_scale: f64,
    pub bearing_q_inflation: f64,
}

impl Default for EurocConfig {
    fn default() -> Self {
        let sim = ScenarioConfig::default();
        Self {
            modality: Modality::RelativePosition,
            noise: NoiseConfig::default(),
            seed: 0,
            cam_rate: sim.cam_rate,
            fov_deg: sim.fov_deg,
            max_visible: sim.max_visible,
            landmark_density: DEFAULT_LANDMARK_DENSITY,
            bbox_margin: 2.0,
            duration: None,
            compensate_bias: true,
            updates: true,
            v_scale: sim.v_scale,
            q_scale: sim.q_scale,
            bearing_q_inflation: sim.bearing_q_inflation,
        }
    }
}

impl EurocConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("cam_rate", self.cam_rate),
            ("landmark_density", self.landmark_density),
            ("v_scale", self.v_scale),
            ("q_scale", self.q_scale),
            ("bearing_q_inflation", self.bearing_q_inflation),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 360.0) {
            errs.push(format!("fov_deg must lie in (0, 360), got {}", self.fov_deg));
        }
        if !(self.bbox_margin >= 0.0) {
            errs.push(format!("bbox_margin must be non-negative, got {}", self.bbox_margin));
        }
        if self.max_visible == 0 {
            errs.push("max_visible must be at least 1".to_string());
        }
        if let Some(d) = self.duration {
            if !(d > 0.0) {
                errs.push(format!("duration must be positive, got {d}"));
            }
        }
        for (name, v) in [
            ("noise.bearing_std_deg", self.noise.bearing_std_deg),
            ("noise.relpos_std", self.noise.relpos_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Real EuRoC extrinsics; the body frame is the IMU frame.
    pub fn rig(&self) -> SensorRig {
        match self.modality {
            Modality::RelativePosition => SensorRig::RelativePosition,
            Modality::Mono => SensorRig::Mono(CameraExtrinsics::euroc_cam0()),
            Modality::Stereo => SensorRig::Stereo([CameraExtrinsics::euroc_cam0(), CameraExtrinsics::euroc_cam1()]),
        }
    }
}

/// Points on the four vertical walls of the ground-truth bounding box grown
/// by `bbox_margin`, faces chosen in proportion to their area.
pub fn virtual_landmarks(gt: &[GroundTruthRecord], cfg: &EurocConfig, rng: &mut impl Rng) -> Result<Matrix3xX<f64>> {
    if gt.is_empty() {
        return Err(Error::InsufficientData("empty ground truth".into()));
    }
    let mut lo = gt[0].p;
    let mut hi = gt[0].p;
    for g in gt {
        lo = lo.inf(&g.p);
        hi = hi.sup(&g.p);
    }
    let m = Vector3::repeat(cfg.bbox_margin);
    let (lo, hi) = (lo - m, hi + m);
    let ext = hi - lo;
    let area_x = ext.y * ext.z;
    let area_y = ext.x * ext.z;
    let total = 2.0 * (area_x + area_y);
    let count = ((total * cfg.landmark_density).round() as usize).max(1);
    let mut out = Matrix3xX::zeros(count);
    for mut col in out.column_iter_mut() {
        let along_x = rng.random_range(0.0..total) >= 2.0 * area_x;
        let high = rng.random_bool(0.5);
        let z = rng.random_range(lo.z..=hi.z);
        let p = if along_x {
            Vector3::new(rng.random_range(lo.x..=hi.x), if high { hi.y } else { lo.y }, z)
        } else {
            Vector3::new(if high { hi.x } else { lo.x }, rng.random_range(lo.y..=hi.y), z)
        };
        col.copy_from(&p);
    }
    Ok(out)
}

/// Camera frame `k`: taken once the IMU has been integrated up to sample `imu_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub t_ns: i64,
    pub imu_index: usize,
    pub observations: Vec<LandmarkObservation>,
}

/// IMU samples inside the ground-truth span and the evaluation window.
fn usable_imu<'a>(records: &'a EurocRecords, cfg: &EurocConfig) -> Result<&'a [ImuRecord]> {
    let t0 = records.t0_ns().ok_or_else(|| Error::InsufficientData("empty ground truth".into()))?;
    let t_end = records.gt.last().map(|g| g.t_ns).unwrap_or(t0);
    let t_end = match cfg.duration {
        Some(d) => t_end.min(t0 + (d * 1e9).round() as i64),
        None => t_end,
    };
    let a = records.imu.partition_point(|s| s.t_ns < t0);
    let b = records.imu.partition_point(|s| s.t_ns <= t_end);
    if b < a + 2 {
        return Err(Error::InsufficientData("IMU and ground truth do not overlap".into()));
    }
    Ok(&records.imu[a..b])
}

/// Measurements at camera rate from interpolated ground truth, with the
/// visual noise of `cfg`. Frames sit on IMU timestamps.
pub fn synthesize_measurements(
    records: &EurocRecords,
    landmarks: &Matrix3xX<f64>,
    cfg: &EurocConfig,
    rng: &mut impl Rng,
) -> Result<Vec<SynthFrame>> {
    cfg.validate()?;
    let imu = usable_imu(records, cfg)?;
    let rig = cfg.rig();
    let vis_cam = rig.cameras().first().copied().unwrap_or_else(CameraExtrinsics::euroc_cam0);
    let period_ns = (1e9 / cfg.cam_rate).round() as i64;
    let mut next = imu[0].t_ns + period_ns;
    let mut frames = Vec::new();
    for (k, s) in imu.iter().enumerate().skip(1) {
        if s.t_ns < next {
            continue;
        }
        next += period_ns * ((s.t_ns - next) / period_ns + 1);
        let g = interpolate_groundtruth(&records.gt, s.t_ns)?;
        let state = RigidBodyState {
            rot: g.rot,
            p: g.p,
            v: g.v,
            g: GRAVITY,
            landmarks: Matrix3xX::zeros(0),
            t: 0.0,
        };
        let ids = visible_in_cone(&state, landmarks, &vis_cam, cfg.fov_deg, cfg.max_visible);
        let mut observations = Vec::with_capacity(ids.len());
        for i in ids {
            let clean = observe_point(&state, &landmarks.column(i).into_owned(), i, &rig)?;
            observations.push(corrupt(&clean, &cfg.noise, rng));
        }
        frames.push(SynthFrame {
            t_ns: s.t_ns,
            imu_index: k,
            observations,
        });
    }
    Ok(frames)
}

/// Yaw about `z` and translation taking `est` onto `gt` in least squares.
pub fn fit_yaw_translation(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<(f64, Vector3<f64>)> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::InsufficientData(format!(
            "cannot align {} estimates with {} ground-truth points",
            est.len(),
            gt.len()
        )));
    }
    let n = est.len() as f64;
    let ce = est.iter().sum::<Vector3<f64>>() / n;
    let cg = gt.iter().sum::<Vector3<f64>>() / n;
    let (mut s, mut c) = (0.0, 0.0);
    for (e, g) in est.iter().zip(gt) {
        let (e, g) = (e - ce, g - cg);
        s += e.x * g.y - e.y * g.x;
        c += e.x * g.x + e.y * g.y;
    }
    // no horizontal spread: the yaw is undetermined, keep it at zero
    let yaw = if s.hypot(c) > 1e-12 { s.atan2(c) } else { 0.0 };
    let t = cg - Rotation::yaw(yaw).matrix() * ce;
    Ok((yaw, t))
}

/// RMS position error over the whole trajectory after the yaw-plus-translation
/// alignment fitted on the first second.
pub fn align_and_rms(t: &[f64], est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if t.len() != est.len() || t.len() != gt.len() || t.is_empty() {
        return Err(Error::InsufficientData("trajectories do not overlap".into()));
    }
    let w = t.partition_point(|&s| s - t[0] <= 1.0);
    let (yaw, tr) = fit_yaw_translation(&est[..w], &gt[..w])?;
    let r = Rotation::yaw(yaw);
    let sq: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (g - (r.matrix() * e + tr)).norm_squared())
        .sum();
    Ok((sq / t.len() as f64).sqrt())
}

/// Estimated and true positions at every camera frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EurocTrajectory {
    pub t: Vec<f64>,
    pub est: Vec<Vector3<f64>>,
    pub gt: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EurocResult {
    pub sequence: String,
    pub rms_position: f64,
    pub runtime_s: f64,
    pub n_frames: usize,
    pub duration_s: f64,
    pub n_landmarks: usize,
    pub config: EurocConfig,
}

/// Runs the observer over a sequence and scores it.
pub fn run_sequence(records: &EurocRecords, cfg: &EurocConfig) -> Result<(EurocResult, EurocTrajectory)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t0 = records.t0_ns().ok_or_else(|| Error::InsufficientData("empty ground truth".into()))?;
    let imu = usable_imu(records, cfg)?;
    let landmarks = virtual_landmarks(&records.gt, cfg, &mut rng)?;
    let frames = synthesize_measurements(records, &landmarks, cfg, &mut rng)?;

    let mean_dt = seconds_since(imu[imu.len() - 1].t_ns, imu[0].t_ns) / (imu.len() - 1) as f64;
    let sc = ScenarioConfig {
        modality: cfg.modality,
        imu_rate: 1.0 / mean_dt,
        max_visible: cfg.max_visible,
        v_scale: cfg.v_scale,
        q_scale: cfg.q_scale,
        bearing_q_inflation: cfg.bearing_q_inflation,
        ..ScenarioConfig::default()
    };
    let g0 = interpolate_groundtruth(&records.gt, imu[0].t_ns)?;
    let mut os = ObserverState::new(sc.observer_config(), cfg.rig(), g0.rot, g0.p, g0.v, GRAVITY)?;

    let mut traj = EurocTrajectory::default();
    let mut frame_iter = frames.iter().peekable();
    for k in 0..imu.len() - 1 {
        let s = &imu[k];
        let (mut omega, mut accel) = (s.omega, s.accel);
        if cfg.compensate_bias {
            let g = interpolate_groundtruth(&records.gt, s.t_ns)?;
            omega -= g.bias_gyro.unwrap_or_default();
            accel -= g.bias_accel.unwrap_or_default();
        }
        let dt = seconds_since(imu[k + 1].t_ns, s.t_ns);
        os.predict(&ImuSample::new(omega, accel, seconds_since(s.t_ns, t0)), dt)?;
        let Some(frame) = frame_iter.next_if(|f| f.imu_index == k + 1) else {
            continue;
        };
        let t = seconds_since(frame.t_ns, t0);
        if cfg.updates {
            os.process_frame(t, &frame.observations)?;
        }
        let g = interpolate_groundtruth(&records.gt, frame.t_ns)?;
        traj.t.push(t);
        traj.est.push(os.xhat.x1);
        traj.gt.push(g.p);
    }
    let rms = align_and_rms(&traj.t, &traj.est, &traj.gt)?;
    let result = EurocResult {
        sequence: records.sequence_name.clone(),
        rms_position: rms,
        runtime_s: start.elapsed().as_secs_f64(),
        n_frames: traj.t.len(),
        duration_s: traj.t.last().copied().unwrap_or(0.0),
        n_landmarks: landmarks.ncols(),
        config: cfg.clone(),
    };
    Ok((result, traj))
}

/// Loads and runs several sequence directories in parallel, at most
/// `LIE_VIO_THREADS` at a time when that is set.
pub fn evaluate_sequences(dirs: &[PathBuf], cfg: &EurocConfig) -> Vec<Result<EurocResult>> {
    let run = || -> Vec<Result<EurocResult>> {
        dirs.par_iter()
            .map(|d| run_sequence(&load_sequence(d)?, cfg).map(|(r, _)| r))
            .collect()
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    match builder.build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

/// Writes `<out>/results/<sequence>.json` and returns its path.
pub fn write_result_json(out: &Path, result: &EurocResult) -> Result<PathBuf> {
    let dir = out.join("results");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.json", result.sequence));
    fs::write(&path, serde_json::to_string_pretty(result)?)?;
    Ok(path)
}

/// Writes the simulated flight of `scenario` as an ASL sequence under `dir`:
/// ground truth and IMU at the scenario IMU rate, IMU noise from the scenario,
/// zero biases, timestamps starting at `t0_ns`.
pub fn write_synthetic_sequence(dir: &Path, scenario: &ScenarioConfig, t0_ns: i64) -> Result<()> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let gyro = Normal::new(0.0, scenario.noise.gyro_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let accel = Normal::new(0.0, scenario.noise.accel_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let imu = synthesize_imu(scenario);
    let step_ns = (1e9 * scenario.imu_dt()).round() as i64;

    let imu_path = dir.join(IMU_FILE);
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    for p in [&imu_path, &gt_path] {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut fi = std::io::BufWriter::new(fs::File::create(&imu_path)?);
    let mut fg = std::io::BufWriter::new(fs::File::create(&gt_path)?);
    writeln!(
        fi,
        "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]"
    )?;
    writeln!(
        fg,
        "#timestamp, p_RS_R_x [m], p_RS_R_y [m], p_RS_R_z [m], q_RS_w [], q_RS_x [], q_RS_y [], q_RS_z [], v_RS_R_x [m s^-1], v_RS_R_y [m s^-1], v_RS_R_z [m s^-1], b_w_RS_S_x [rad s^-1], b_w_RS_S_y [rad s^-1], b_w_RS_S_z [rad s^-1], b_a_RS_S_x [m s^-2], b_a_RS_S_y [m s^-2], b_a_RS_S_z [m s^-2]"
    )?;
    for k in 0..=imu.len() {
        let t_ns = t0_ns + k as i64 * step_ns;
        let truth = truth_kinematics(scenario, k as f64 * scenario.imu_dt()).state;
        let q = rotation_to_quaternion(&truth.rot);
        writeln!(
            fg,
            "{t_ns},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},0,0,0,0,0,0",
            truth.p.x, truth.p.y, truth.p.z, q[0], q[1], q[2], q[3], truth.v.x, truth.v.y, truth.v.z
        )?;
        if let Some(s) = imu.get(k) {
            let w = s.omega + Vector3::from_fn(|_, _| gyro.sample(&mut rng));
            let a = s.accel + Vector3::from_fn(|_, _| accel.sample(&mut rng));
            writeln!(fi, "{t_ns},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}", w.x, w.y, w.z, a.x, a.y, a.z)?;
        }
    }
    fi.flush()?;
    fg.flush()?;
    Ok(())
}
