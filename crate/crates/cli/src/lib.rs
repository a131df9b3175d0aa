//! Command-line front end: run configuration, overrides and the three
//! commands `simulate`, `euroc` and `observability`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use lie_vio::euroc::{load_sequence, run_sequence, write_result_json, EurocConfig};
use lie_vio::measurements::Modality;
use lie_vio::observability::{write_gramian_csv, GramianOptions, GramianReport, DEFAULT_DELTA};
use lie_vio::sim::{
    run_monte_carlo, trajectory_gramians, world_landmarks, write_rmse_csv, write_trajectory_csv, ScenarioConfig,
};
use serde::{Deserialize, Serialize};

/// Landmarks tracked per Gramian window.
pub const GRAMIAN_LANDMARKS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    #[default]
    Simulate,
    Euroc,
    Observability,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Simulate => "simulate",
            Command::Euroc => "euroc",
            Command::Observability => "observability",
        })
    }
}

/// Contents of a configuration file. Every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub scenario: ScenarioConfig,
    pub euroc: EurocConfig,
    pub dataset_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub runs: usize,
    /// Shorthand that overrides both `scenario.modality` and `euroc.modality`.
    pub modality: Option<Modality>,
    /// Gramian window length (s).
    pub gramian_delta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Simulate,
            scenario: ScenarioConfig::default(),
            euroc: EurocConfig::default(),
            dataset_path: None,
            output_dir: PathBuf::from("runs/default"),
            runs: 17,
            modality: None,
            gramian_delta: DEFAULT_DELTA,
        }
    }
}

impl RunConfig {
    /// Every problem at once, prefixed by the key it concerns.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = Vec::new();
        if self.runs == 0 {
            errs.push("runs must be at least 1".to_string());
        }
        if !(self.gramian_delta > 0.0) {
            errs.push(format!("gramian_delta must be positive, got {}", self.gramian_delta));
        }
        if self.output_dir.as_os_str().is_empty() {
            errs.push("output_dir must not be empty".to_string());
        }
        if self.command == Command::Euroc && self.dataset_path.is_none() {
            errs.push("dataset_path is required by the euroc command".to_string());
        }
        let nested = |prefix: &str, r: lie_vio::Result<()>, errs: &mut Vec<String>| {
            if let Err(lie_vio::Error::Config(list)) = r {
                errs.extend(list.into_iter().map(|e| format!("{prefix}.{e}")));
            }
        };
        nested("scenario", self.scenario.validate(), &mut errs);
        if self.command == Command::Euroc {
            nested("euroc", self.euroc.validate(), &mut errs);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs))
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Io(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Data(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(errs) => {
                write!(f, "configuration error:")?;
                for e in errs {
                    write!(f, "\n  {e}")?;
                }
                Ok(())
            }
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<lie_vio::Error> for CliError {
    fn from(e: lie_vio::Error) -> Self {
        use lie_vio::Error as E;
        match e {
            E::Config(list) => CliError::Config(list),
            E::Io(e) => CliError::Io(e.to_string()),
            E::Json(e) => CliError::Io(e.to_string()),
            e @ (E::Parse { .. } | E::InsufficientData(_) | E::ModalityMismatch { .. } | E::DimensionMismatch { .. }) => {
                CliError::Data(e.to_string())
            }
            e => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "lie-vio", version, about = "Visual-inertial observer simulation, EuRoC evaluation and observability analysis")]
pub struct Cli {
    /// Command to run; defaults to the one in the config file, else `simulate`.
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long, value_parser = parse_modality)]
    pub modality: Option<Modality>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// EuRoC sequence directory (the one holding `mav0`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Hold the platform still at its initial pose.
    #[arg(long)]
    pub stationary: bool,
    /// Shorter or longer flight (s).
    #[arg(long)]
    pub duration: Option<f64>,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse()
}

/// Reads a config file; unknown keys and type errors are reported with their position.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))
}

/// Config file first, then command-line overrides.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(c) = cli.command {
        cfg.command = c;
    }
    if let Some(s) = cli.seed {
        cfg.scenario.seed = s;
        cfg.euroc.seed = s;
    }
    if let Some(r) = cli.runs {
        cfg.runs = r;
    }
    if let Some(m) = cli.modality {
        cfg.modality = Some(m);
    }
    if let Some(m) = cfg.modality {
        cfg.scenario.modality = m;
        cfg.euroc.modality = m;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(d) = &cli.dataset {
        cfg.dataset_path = Some(d.clone());
    }
    if cli.stationary {
        cfg.scenario.stationary = true;
    }
    if let Some(d) = cli.duration {
        cfg.scenario.duration = d;
        cfg.euroc.duration = Some(d);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the configured command and returns its one-line summary.
pub fn execute(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let out = &cfg.output_dir;
    match cfg.command {
        Command::Simulate => simulate(cfg, out),
        Command::Euroc => euroc(cfg, out),
        Command::Observability => observability(cfg, out),
    }
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let mc = run_monte_carlo(&cfg.scenario, cfg.runs)?;
    write_rmse_csv(&out.join("rmse.csv"), &mc.rmse)?;
    let first = &mc.runs[0];
    write_trajectory_csv(&out.join("truth.csv"), first, false)?;
    write_trajectory_csv(&out.join("estimate.csv"), first, true)?;
    write_gramians(cfg, out)?;
    let r = &mc.rmse;
    let k = r.t.len().checked_sub(1).ok_or_else(|| CliError::Data("flight shorter than one camera frame".into()))?;
    Ok(format!(
        "simulate {} x{}: t={:.2} s RMSE att {:.4} deg, pos {:.4} m, vel {:.4} m/s, grav {:.4} m/s^2",
        cfg.scenario.modality, cfg.runs, r.t[k], r.att_deg[k], r.pos_m[k], r.vel_mps[k], r.grav_mps2[k]
    ))
}

/// Gramian windows along the first run's flight, written to `gramian.csv`.
fn write_gramians(cfg: &RunConfig, out: &Path) -> Result<Vec<GramianReport>, CliError> {
    let sc = &cfg.scenario;
    let landmarks = world_landmarks(sc);
    let reports = trajectory_gramians(sc, &landmarks, cfg.gramian_delta, GRAMIAN_LANDMARKS, &GramianOptions::default())?;
    if reports.is_empty() {
        return Err(CliError::Config(vec![format!(
            "gramian_delta {} exceeds the flight duration {}",
            cfg.gramian_delta, sc.duration
        )]));
    }
    write_gramian_csv(&out.join("gramian.csv"), &reports)?;
    Ok(reports)
}

fn euroc(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let dir = cfg
        .dataset_path
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["dataset_path is required by the euroc command".into()]))?;
    let records = load_sequence(dir)?;
    let (res, _) = run_sequence(&records, &cfg.euroc)?;
    let path = write_result_json(out, &res)?;
    Ok(format!(
        "euroc {} {}: RMS position {:.3} m over {:.1} s ({})",
        res.sequence,
        cfg.euroc.modality,
        res.rms_position,
        res.duration_s,
        path.display()
    ))
}

fn observability(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let sc = &cfg.scenario;
    let reports = write_gramians(cfg, out)?;
    let min = reports.iter().map(|r| r.min_eig).fold(f64::INFINITY, f64::min);
    let all = reports.iter().all(|r| r.uniformly_observable_flag);
    Ok(format!(
        "observability {}{}: {} windows of {} s, smallest Gramian eigenvalue {:.3e}, uniformly observable {}",
        sc.modality,
        if sc.stationary { " (stationary)" } else { "" },
        reports.len(),
        cfg.gramian_delta,
        min,
        all
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_the_file() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.json");
        fs::write(&p, r#"{"command": "observability", "runs": 3, "scenario": {"seed": 9, "modality": "stereo"}}"#).unwrap();
        let cli = Cli::parse_from(["lie-vio", "--config", p.to_str().unwrap(), "--modality", "mono", "--stationary"]);
        let cfg = resolve(&cli).unwrap();
        assert_eq!(cfg.command, Command::Observability);
        assert_eq!(cfg.runs, 3);
        assert_eq!(cfg.scenario.seed, 9);
        assert_eq!(cfg.scenario.modality, Modality::Mono);
        assert!(cfg.scenario.stationary);
        assert_eq!(cfg.scenario.radius, 3.0);
    }

    #[test]
    fn validation_lists_every_field() {
        let cfg = RunConfig {
            command: Command::Euroc,
            runs: 0,
            scenario: ScenarioConfig {
                imu_rate: 0.0,
                fov_deg: 0.0,
                ..ScenarioConfig::default()
            },
            ..RunConfig::default()
        };
        let Err(CliError::Config(errs)) = cfg.validate() else {
            panic!("expected a config error");
        };
        assert_eq!(errs.len(), 4, "{errs:?}");
        for key in ["runs", "dataset_path", "scenario.imu_rate", "scenario.fov_deg"] {
            assert!(errs.iter().any(|e| e.starts_with(key)), "{key} missing from {errs:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.json");
        fs::write(&p, r#"{"scenario": {"radiuss": 2}}"#).unwrap();
        let Err(CliError::Config(errs)) = load_config(&p) else {
            panic!("expected a config error");
        };
        assert!(errs[0].contains("radiuss"));
    }

    #[test]
    fn error_categories() {
        assert_eq!(CliError::from(lie_vio::Error::CovarianceCollapse).exit_code(), 5);
        assert_eq!(CliError::from(lie_vio::Error::InsufficientData("x".into())).exit_code(), 4);
        assert_eq!(CliError::from(lie_vio::Error::Config(vec![])).exit_code(), 2);
    }
}
