//! Command-line surface: simulate, train, benchmark, evaluate, export.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{self, version_string};
use crate::chamfer::CD_DEFINITION;
use crate::cloud::PointCloud;
use crate::config::RunConfig;
use crate::sim;
use crate::train::{self, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "svfuse",
    version,
    about = "Sparse-voxel camera-LiDAR fusion: simulator, training, and forecasting benchmark"
)]
struct Cli {
    /// Print the full default configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence on disk.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured frame count.
        #[arg(long)]
        frames: Option<usize>,
        /// Sequence id used in the directory name.
        #[arg(long, default_value_t = 0)]
        seq_id: u32,
    },
    /// Stage 1: train depth refinement on simulator ground truth.
    TrainDepth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sequence directory produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 2: train the full pipeline with ray self-supervision.
    TrainSsl {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Stage-1 checkpoint; omit to train from scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// LiDAR forecasting benchmark against the static-world baseline.
    Forecast {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also export predicted and ground-truth clouds as PLY.
        #[arg(long)]
        dump_clouds: bool,
    },
    /// Depth metrics of a trained checkpoint.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert an LRPC point cloud to ASCII PLY.
    ExportPly {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, (i32, String)> {
    let mut config = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            crate::config::ConfigError::Io { .. } => (EXIT_DATA, e.to_string()),
            _ => (EXIT_USAGE, e.to_string()),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
        config.sim.seed = s;
    } else {
        config.sim.seed = config.seed;
    }
    Ok(config)
}

fn train_exit(e: &TrainError) -> i32 {
    match e {
        TrainError::NumericFailure { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn write_train_report(
    out: &Path,
    name: &str,
    config: &RunConfig,
    report: &train::StageReport,
    runtime_s: f64,
) -> Result<(), (i32, String)> {
    let doc = serde_json::json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "version": version_string(),
        "metrics": {
            "steps": report.losses.len(),
            "first_loss": report.first_loss,
            "final_loss": report.final_loss,
        },
    });
    bench::write_report(out, name, &doc, runtime_s).map_err(|e| (EXIT_DATA, e.to_string()))
}

fn run(cli: Cli) -> Result<(), (i32, String)> {
    if cli.print_config {
        println!("{}", RunConfig::default().to_json_pretty());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err((EXIT_USAGE, "no subcommand given; see --help".to_string()));
    };
    match command {
        Command::Simulate {
            config,
            out,
            seed,
            frames,
            seq_id,
        } => {
            let mut config = load_config(&config, seed)?;
            if let Some(f) = frames {
                config.n_frames = f;
            }
            let seq = sim::make_sequence(&config.sim, config.n_frames, &out, seq_id)
                .map_err(|e| (EXIT_DATA, e.to_string()))?;
            println!("wrote {} frames to {}", config.n_frames, seq.display());
            Ok(())
        }
        Command::TrainDepth {
            config,
            data,
            out,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            let start = std::time::Instant::now();
            let dataset =
                train::open_dataset(&data).map_err(|e| (train_exit(&e), e.to_string()))?;
            let prepared =
                train::prepare_frames(&dataset).map_err(|e| (train_exit(&e), e.to_string()))?;
            let (ckpt, report, _) = train::train_stage1(&config, &prepared, &out)
                .map_err(|e| (train_exit(&e), e.to_string()))?;
            write_train_report(
                &out,
                "depth_report.json",
                &config,
                &report,
                start.elapsed().as_secs_f64(),
            )?;
            println!(
                "stage 1 done: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
                report.losses.len(),
                report.first_loss,
                report.final_loss,
                ckpt.display()
            );
            Ok(())
        }
        Command::TrainSsl {
            config,
            data,
            out,
            seed,
            checkpoint,
        } => {
            let config = load_config(&config, seed)?;
            let start = std::time::Instant::now();
            let dataset =
                train::open_dataset(&data).map_err(|e| (train_exit(&e), e.to_string()))?;
            let prepared =
                train::prepare_frames(&dataset).map_err(|e| (train_exit(&e), e.to_string()))?;
            let (ckpt, report, _) =
                train::train_stage2(&config, &prepared, checkpoint.as_deref(), &out)
                    .map_err(|e| (train_exit(&e), e.to_string()))?;
            write_train_report(
                &out,
                "ssl_report.json",
                &config,
                &report,
                start.elapsed().as_secs_f64(),
            )?;
            println!(
                "stage 2 done: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
                report.losses.len(),
                report.first_loss,
                report.final_loss,
                ckpt.display()
            );
            Ok(())
        }
        Command::Forecast {
            config,
            data,
            checkpoint,
            out,
            seed,
            dump_clouds,
        } => {
            let config = load_config(&config, seed)?;
            if !checkpoint.is_file() {
                return Err((
                    EXIT_DATA,
                    format!("missing checkpoint at {}", checkpoint.display()),
                ));
            }
            let dataset =
                train::open_dataset(&data).map_err(|e| (train_exit(&e), e.to_string()))?;
            let prepared =
                train::prepare_frames(&dataset).map_err(|e| (train_exit(&e), e.to_string()))?;
            let mut params = crate::model::init_params(config.seed);
            params
                .load_from(&checkpoint)
                .map_err(|e| (EXIT_DATA, e.to_string()))?;
            let dump = dump_clouds.then(|| out.join("clouds"));
            let (report, runtime) =
                bench::run_forecast_benchmark(&config, &params, &prepared, dump.as_deref())
                    .map_err(|e| (EXIT_DATA, e.to_string()))?;
            bench::write_report(&out, "report.json", &report, runtime)
                .map_err(|e| (EXIT_DATA, e.to_string()))?;
            for (key, cd) in &report.metrics {
                println!(
                    "{key}: model {cd:.4} m^2 vs static baseline {:.4} m^2 ({})",
                    report.baseline[key], CD_DEFINITION
                );
            }
            Ok(())
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            out,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            if !checkpoint.is_file() {
                return Err((
                    EXIT_DATA,
                    format!("missing checkpoint at {}", checkpoint.display()),
                ));
            }
            let dataset =
                train::open_dataset(&data).map_err(|e| (train_exit(&e), e.to_string()))?;
            let prepared =
                train::prepare_frames(&dataset).map_err(|e| (train_exit(&e), e.to_string()))?;
            let mut params = crate::model::init_params(config.seed);
            params
                .load_from(&checkpoint)
                .map_err(|e| (EXIT_DATA, e.to_string()))?;
            let (report, runtime) = bench::run_depth_eval(&config, &params, &prepared)
                .map_err(|e| (EXIT_DATA, e.to_string()))?;
            bench::write_report(&out, "eval_report.json", &report, runtime)
                .map_err(|e| (EXIT_DATA, e.to_string()))?;
            println!(
                "depth MAE {:.4} m, MSE {:.4} m^2 over {} frames",
                report.depth_mae, report.depth_mse, report.frames_evaluated
            );
            Ok(())
        }
        Command::ExportPly { input, out } => {
            // Sensor origin does not affect the exported vertices.
            let cloud =
                PointCloud::load(&input, [0.0; 3]).map_err(|e| (EXIT_DATA, e.to_string()))?;
            cloud
                .export_ply(&out)
                .map_err(|e| (EXIT_DATA, e.to_string()))?;
            println!("wrote {} vertices to {}", cloud.len(), out.display());
            Ok(())
        }
    }
}

/// Parses and dispatches; returns a process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits.
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

/// Summary map used by tests to inspect a written report.
pub fn read_report(path: &Path) -> Option<BTreeMap<String, serde_json::Value>> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn no_args_is_usage_exit() {
        assert_eq!(cli_main(["svfuse"]), EXIT_USAGE);
    }

    #[test]
    fn unknown_flag_is_usage_exit() {
        assert_eq!(cli_main(["svfuse", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn print_config_succeeds() {
        assert_eq!(cli_main(["svfuse", "--print-config"]), EXIT_OK);
    }

    #[test]
    fn forecast_without_checkpoint_is_data_error() {
        let dir = tempdir().unwrap();
        let missing = dir.path().join("nope.svwt");
        let code = cli_main([
            "svfuse".to_string(),
            "forecast".to_string(),
            "--data".to_string(),
            dir.path().display().to_string(),
            "--checkpoint".to_string(),
            missing.display().to_string(),
            "--out".to_string(),
            dir.path().join("out").display().to_string(),
        ]);
        assert_eq!(code, EXIT_DATA);
    }

    #[test]
    fn export_ply_roundtrip() {
        let dir = tempdir().unwrap();
        let cloud_path = dir.path().join("c.lrpc");
        let ply_path = dir.path().join("c.ply");
        let cloud = PointCloud {
            timestamp: 0.0,
            sensor_origin: [0.0; 3],
            points: vec![crate::cloud::LidarPoint {
                position: [1.0, 2.0, 3.0],
                radial_velocity: -4.0,
                intensity: 0.5,
            }],
        };
        cloud.save(&cloud_path).unwrap();
        let code = cli_main([
            "svfuse".to_string(),
            "export-ply".to_string(),
            "--input".to_string(),
            cloud_path.display().to_string(),
            "--out".to_string(),
            ply_path.display().to_string(),
        ]);
        assert_eq!(code, EXIT_OK);
        let text = std::fs::read_to_string(&ply_path).unwrap();
        assert!(text.contains("element vertex 1"));
    }
}
