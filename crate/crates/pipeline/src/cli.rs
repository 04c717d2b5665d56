//! Command-line front end. `main` only parses arguments and maps the outcome
//! to an exit code.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ppm_core::geometry::{self, CorrespondenceSet, DepthFrame, SolverBackend};
use ppm_core::io::{self, PoiSet};
use ppm_core::labeling::DEFAULT_POI_RADIUS_PX;

use crate::config::{ConfigError, PipelineConfig};
use crate::scenario::{self, scenario_for_seed};
use crate::stages::{self, Artifacts, PoiSource, Stage, StageError};

#[derive(Debug, Parser)]
#[command(name = "ppm", version, about = "Point projection mapping toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the work-surface plane to empty-scene depth frames.
    CalibrateBaseplane {
        /// Depth frame headers, or directories holding `*.json` headers.
        #[arg(required = true)]
        frames: Vec<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `plane.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the camera-to-projector rigid transform from corner pairs.
    CalibrateProjector {
        correspondences: PathBuf,
        #[arg(long, value_enum, default_value_t = Backend::Procrustes)]
        backend: Backend,
        /// Directory for `transform.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert and register the specimen and histology images.
    Register(RunArgs),
    /// Transport the POIs through a saved field and report tissue labels.
    ExtractLabels(RunArgs),
    /// Registration followed by label extraction.
    Run(RunArgs),
    /// Write a synthetic scenario directory.
    Simulate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Scenario JSON overriding the defaults for this seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_POI_RADIUS_PX)]
        poi_radius: f64,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "ppm-data")]
        data_dir: PathBuf,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out_dir` in the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Backend {
    Procrustes,
    NelderMead,
    ProcrustesRefined,
}

impl From<Backend> for SolverBackend {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Procrustes => SolverBackend::Procrustes,
            Backend::NelderMead => SolverBackend::NelderMead,
            Backend::ProcrustesRefined => SolverBackend::ProcrustesRefined,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration.
    Usage(String),
    Stage(StageError),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Stage(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Stage(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<StageError> for CliError {
    fn from(e: StageError) -> Self {
        CliError::Stage(e)
    }
}

fn failed(stage: Stage, source: ppm_core::Error) -> CliError {
    CliError::Stage(StageError { stage, source })
}

/// Runs one command, printing a short summary on stdout.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::CalibrateBaseplane {
            frames,
            samples,
            seed,
            out,
        } => calibrate_baseplane(&frames, samples, seed, out.as_deref()),
        Command::CalibrateProjector {
            correspondences,
            backend,
            out,
        } => calibrate_projector(&correspondences, backend.into(), out.as_deref()),
        Command::Register(args) => register(&load_config(&args)?),
        Command::ExtractLabels(args) => extract_labels(&load_config(&args)?),
        Command::Run(args) => run(&load_config(&args)?),
        Command::Simulate {
            seed,
            out,
            config,
            poi_radius,
        } => simulate(seed, &out, config.as_deref(), poi_radius),
        Command::Serve {
            port,
            data_dir,
            ui_dir,
        } => serve(port, data_dir, ui_dir),
    }
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig, CliError> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn frame_headers(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut headers = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let entries = std::fs::read_dir(input)
                .map_err(|e| failed(Stage::Load, ppm_core::Error::io(input, e)))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            headers.extend(found);
        } else {
            headers.push(input.clone());
        }
    }
    Ok(headers)
}

fn calibrate_baseplane(
    inputs: &[PathBuf],
    samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if samples < 3 {
        return Err(CliError::Usage(format!(
            "--samples must be at least 3, got {samples}"
        )));
    }
    let frames = frame_headers(inputs)?
        .iter()
        .map(|p| io::read_depth_frame(p))
        .collect::<Result<Vec<DepthFrame>, _>>()
        .map_err(|e| failed(Stage::Load, e))?;
    let fit = geometry::calibrate_base_plane(&frames, samples, seed)
        .map_err(|e| failed(Stage::Register, e))?;
    println!(
        "plane a={:.9} b={:.9} c={:.6} residual_mm2={:.3e} samples={}",
        fit.plane.a, fit.plane.b, fit.plane.c, fit.residual, fit.samples
    );
    if let Some(dir) = out {
        let path = dir.join("plane.json");
        io::write_json(&path, &fit).map_err(|e| failed(Stage::Register, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn calibrate_projector(
    path: &Path,
    backend: SolverBackend,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let set: CorrespondenceSet = io::read_json(path).map_err(|e| failed(Stage::Load, e))?;
    let calibration = geometry::estimate_projector_transform_with(&set, backend)
        .map_err(|e| failed(Stage::Register, e))?;
    println!("rmse_mm {:.6e}", calibration.rmse);
    if calibration.not_rigid {
        eprintln!("warning: residuals exceed 10% of the camera extent; the pairs do not fit a rigid model");
    }
    if let Some(dir) = out {
        let path = dir.join("transform.json");
        io::write_json(&path, &calibration).map_err(|e| failed(Stage::Register, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn register(config: &PipelineConfig) -> Result<(), CliError> {
    let specimen = io::read_rgb(&config.s_o).map_err(|e| failed(Stage::Load, e))?;
    let histology = io::read_rgb(&config.h_o).map_err(|e| failed(Stage::Load, e))?;
    let out = Artifacts::new(&config.out_dir);
    let reg = stages::run_registration(&specimen, &histology, &config.settings(), &out)?;
    print_registration(&reg.metrics);
    Ok(())
}

fn extract_labels(config: &PipelineConfig) -> Result<(), CliError> {
    let specimen = io::read_rgb(&config.s_o).map_err(|e| failed(Stage::Load, e))?;
    let pois = match (&config.s_poi, &config.pois) {
        (Some(path), _) => {
            PoiSource::Image(io::read_rgb(path).map_err(|e| failed(Stage::Load, e))?)
        }
        (None, Some(path)) => {
            PoiSource::Points(io::read_json::<PoiSet>(path).map_err(|e| failed(Stage::Load, e))?)
        }
        (None, None) => {
            return Err(CliError::Usage(
                "invalid config field `s_poi`: required".into(),
            ))
        }
    };
    let annotation = io::read_annotation(&config.h_a).map_err(|e| failed(Stage::Load, e))?;
    let out = Artifacts::new(&config.out_dir);
    let ddf = out.read_ddf().map_err(|e| failed(Stage::Load, e))?;
    let labels = stages::run_labels(
        &specimen,
        &pois,
        &annotation,
        &ddf,
        &config.settings(),
        &out,
    )?;
    println!(
        "labels {} -> {}",
        labels.report.entries.len(),
        out.path(stages::files::LABELS).display()
    );
    Ok(())
}

fn run(config: &PipelineConfig) -> Result<(), CliError> {
    let (result, report) = stages::run_pipeline(config)?;
    print_registration(&result.metrics(&config.settings().registration()));
    println!(
        "labels {} -> {}",
        report.entries.len(),
        config.out_dir.join(stages::files::LABELS).display()
    );
    Ok(())
}

fn print_registration(m: &ppm_core::registration::RegistrationMetrics) {
    println!(
        "mi {:.4} -> {:.4}  dice {:.4} -> {:.4}  iterations {}",
        m.mi_initial, m.mi_final, m.dice_initial, m.dice_final, m.iterations_run
    );
}

fn simulate(seed: u64, out: &Path, config: Option<&Path>, poi_radius: f64) -> Result<(), CliError> {
    if !(poi_radius.is_finite() && poi_radius > 0.0) {
        return Err(CliError::Usage(format!(
            "--poi-radius must be > 0, got {poi_radius}"
        )));
    }
    let mut scenario = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read scenario {}: {e}", path.display()))
            })?;
            let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!("invalid scenario {}: {e}", path.display()))
            })?;
            if let Some(obj) = value.as_object_mut() {
                obj.remove("schema_version");
            }
            crate::config::parse_json(&value.to_string())?
        }
        None => scenario_for_seed(seed),
    };
    scenario.seed = seed;
    scenario
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid scenario: {e}")))?;
    let config_path =
        scenario::write_scenario(out, &scenario, poi_radius).map_err(|e| failed(Stage::Load, e))?;
    println!("wrote {}", config_path.display());
    Ok(())
}

fn serve(port: u16, data_dir: PathBuf, ui_dir: Option<PathBuf>) -> Result<(), CliError> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(e.to_string()))?;
    runtime
        .block_on(crate::service::serve(port, data_dir.clone(), ui_dir))
        .map_err(|e| failed(Stage::Load, ppm_core::Error::io(&data_dir, e)))
}
