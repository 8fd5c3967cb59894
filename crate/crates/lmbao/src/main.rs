//! Command line front end: run odometry over a dataset, synthesize test
//! datasets, and evaluate trajectories.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use lmbao::config::OdometryConfig;
use lmbao::pipeline::{ate_rmse, run_dataset, synthesize_dataset, RunOptions};
use lmbao::scan_io::{read_trajectory, BeamModel, SyntheticWorld, Trajectory, Twist};

#[derive(Parser)]
#[command(name = "lmbao", about = "Landmark-map bundle-adjustment LiDAR odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry over a directory of scan files.
    Run {
        /// Directory containing scan files.
        #[arg(long)]
        dataset: PathBuf,
        /// Output trajectory file.
        #[arg(long)]
        out: PathBuf,
        /// Configuration file (key=value lines); defaults are used if absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ground-truth trajectory for ATE evaluation.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Per-scan report table output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with ground truth.
    Synth {
        /// Output directory; scans and groundtruth.txt are written here.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Scene::Corridor)]
        scene: Scene,
        #[arg(long, value_enum, default_value_t = Motion::Line)]
        trajectory: Motion,
        /// Number of scans.
        #[arg(long, default_value_t = 50)]
        scans: usize,
        /// Seconds between scan starts; also the sweep duration.
        #[arg(long, default_value_t = 0.1)]
        period: f64,
        /// Range noise standard deviation in meters.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Linear speed in m/s for moving trajectories.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Beam columns per sweep.
        #[arg(long, default_value_t = 1800)]
        columns: usize,
        /// Beam rings.
        #[arg(long, default_value_t = 64)]
        rings: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare an estimated trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scene {
    Corridor,
    Courtyard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Motion {
    /// Stay at the origin.
    Static,
    /// Drive straight along +x.
    Line,
    /// Drive a square loop: four straight legs with turns in place.
    Square,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run {
            dataset,
            out,
            config,
            gt,
            report,
        } => {
            let cfg = match config {
                Some(path) => OdometryConfig::from_file(&path).map_err(|e| e.to_string())?,
                None => OdometryConfig::default(),
            };
            let opts = RunOptions {
                dataset,
                out,
                gt,
                report,
            };
            let run = run_dataset(&opts, &cfg).map_err(|e| e.to_string())?;
            println!(
                "processed {} scans, mean {:.1} ms/scan",
                run.records.len(),
                run.mean_time_ms()
            );
            if let Some(ate) = run.ate_rmse {
                println!("ate_rmse_m {ate:.6}");
            }
            Ok(())
        }
        Command::Synth {
            out,
            scene,
            trajectory,
            scans,
            period,
            sigma,
            speed,
            columns,
            rings,
            seed,
        } => {
            let world = match scene {
                Scene::Corridor => SyntheticWorld::corridor(40.0, 4.0, 3.0),
                Scene::Courtyard => SyntheticWorld::courtyard(12.0),
            };
            let total = scans as f64 * period + 1.0;
            let traj = match trajectory {
                Motion::Static => Trajectory::stationary(total),
                Motion::Line => Trajectory::constant_twist(
                    Twist {
                        linear: Vector3::new(speed, 0.0, 0.0),
                        angular: Vector3::zeros(),
                    },
                    total,
                ),
                Motion::Square => square_loop(speed, total),
            };
            let beam = BeamModel {
                columns,
                rings,
                ..BeamModel::default()
            };
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let gt = synthesize_dataset(&world, &traj, scans, period, &beam, sigma, seed, &out)
                .map_err(|e| e.to_string())?;
            println!("wrote {scans} scans and {}", gt.display());
            Ok(())
        }
        Command::Eval { est, gt } => {
            let est = read_trajectory(&est).map_err(|e| e.to_string())?;
            let gt = read_trajectory(&gt).map_err(|e| e.to_string())?;
            let tolerance = median_period(&est).map_or(0.05, |p| p / 2.0);
            let ate = ate_rmse(&est, &gt, tolerance).map_err(|e| e.to_string())?;
            println!("ate_rmse_m {ate:.6}");
            Ok(())
        }
    }
}

/// A square loop inside the courtyard: straight legs of 8 m joined by 90
/// degree turns in place, repeated until `duration` is covered.
fn square_loop(speed: f64, duration: f64) -> Trajectory {
    let leg = Twist {
        linear: Vector3::new(speed.max(0.1), 0.0, 0.0),
        angular: Vector3::zeros(),
    };
    let turn = Twist {
        linear: Vector3::zeros(),
        angular: Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
    };
    let leg_time = 8.0 / speed.max(0.1);
    let mut pieces = Vec::new();
    let mut t = 0.0;
    while t < duration {
        pieces.push((leg, leg_time));
        pieces.push((turn, 1.0));
        t += leg_time + 1.0;
    }
    Trajectory::piecewise(
        lmbao::geom::RigidTransform::from_translation(Vector3::new(-4.0, -4.0, 0.0)),
        &pieces,
    )
}

fn median_period(traj: &[(f64, lmbao::geom::RigidTransform)]) -> Option<f64> {
    if traj.len() < 2 {
        return None;
    }
    let mut gaps: Vec<f64> = traj.windows(2).map(|w| w[1].0 - w[0].0).collect();
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2])
}
