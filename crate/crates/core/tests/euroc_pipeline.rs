use lie_vio::euroc::*;
use lie_vio::measurements::{Modality, Reading};
use lie_vio::sim::{NoiseConfig, ScenarioConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const T0_NS: i64 = 1_403_715_273_262_142_976;

fn sequence(duration: f64, noise: NoiseConfig) -> (tempfile::TempDir, EurocRecords) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("SIM_01");
    let sc = ScenarioConfig {
        duration,
        noise,
        seed: 3,
        ..ScenarioConfig::default()
    };
    write_synthetic_sequence(&root, &sc, T0_NS).unwrap();
    let rec = load_sequence(&root).unwrap();
    (dir, rec)
}

#[test]
fn synthetic_sequence_loads() {
    let (_d, rec) = sequence(2.0, NoiseConfig::default());
    assert_eq!(rec.sequence_name, "SIM_01");
    assert_eq!(rec.imu.len(), 400);
    assert_eq!(rec.gt.len(), 401);
    assert_eq!(rec.t0_ns(), Some(T0_NS));
    assert!(rec.gt.iter().all(|g| g.bias_gyro == Some(nalgebra::Vector3::zeros())));
}

#[test]
fn bearing_streams_are_unit_norm() {
    let (_d, rec) = sequence(3.0, NoiseConfig::default());
    let cfg = EurocConfig {
        modality: Modality::Stereo,
        ..EurocConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lm = virtual_landmarks(&rec.gt, &cfg, &mut rng).unwrap();
    let frames = synthesize_measurements(&rec, &lm, &cfg, &mut rng).unwrap();
    assert_eq!(frames.len(), 59);
    let mut n = 0;
    for f in &frames {
        for o in &f.observations {
            if let Some(Reading::Stereo([a, b])) = o.reading {
                assert!((a.norm() - 1.0).abs() < 1e-12 && (b.norm() - 1.0).abs() < 1e-12);
                n += 1;
            }
        }
    }
    assert!(n > 0);
}

#[test]
fn noiseless_sequence_is_tracked() {
    let (_d, rec) = sequence(10.0, NoiseConfig::zero());
    let cfg = EurocConfig {
        noise: NoiseConfig::zero(),
        ..EurocConfig::default()
    };
    let (res, traj) = run_sequence(&rec, &cfg).unwrap();
    println!("noiseless rms {:.3e}", res.rms_position);
    assert_eq!(res.n_frames, traj.t.len());
    assert!(res.rms_position < 1e-4);
}

#[test]
fn updates_bound_imu_drift() {
    let (_d, rec) = sequence(30.0, NoiseConfig::default());
    let cfg = EurocConfig::default();
    let (on, _) = run_sequence(&rec, &cfg).unwrap();
    let (off, traj) = run_sequence(
        &rec,
        &EurocConfig {
            updates: false,
            ..cfg.clone()
        },
    )
    .unwrap();
    let err = |k: usize| (traj.est[k] - traj.gt[k]).norm();
    let (mid, end) = (err(traj.t.len() / 2), err(traj.t.len() - 1));
    println!("rms with updates {:.3}, dead reckoning {:.3}, error at 15 s {mid:.3}, 30 s {end:.3}", on.rms_position, off.rms_position);
    assert!(on.rms_position < off.rms_position);
    // dead reckoning grows faster than linearly
    assert!(end > 2.0 * mid);
}

#[test]
fn result_json_round_trips() {
    let (_d, rec) = sequence(2.0, NoiseConfig::default());
    let (res, _) = run_sequence(&rec, &EurocConfig::default()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let path = write_result_json(out.path(), &res).unwrap();
    assert!(path.ends_with("results/SIM_01.json"));
    let back: EurocResult = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(back, res);
}

#[test]
fn batch_evaluation_keeps_order_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let sc = ScenarioConfig {
        duration: 2.0,
        ..ScenarioConfig::default()
    };
    let good = dir.path().join("SIM_A");
    write_synthetic_sequence(&good, &sc, T0_NS).unwrap();
    let dirs = vec![good.clone(), dir.path().join("missing"), good];
    let res = evaluate_sequences(&dirs, &EurocConfig::default());
    assert_eq!(res.len(), 3);
    assert!(res[1].is_err());
    let (a, c) = (res[0].as_ref().unwrap(), res[2].as_ref().unwrap());
    assert_eq!(a.sequence, "SIM_A");
    assert_eq!(a.rms_position, c.rms_position);
}
