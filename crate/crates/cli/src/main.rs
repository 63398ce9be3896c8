use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spinodom_cli::dataset::write_dataset;
use spinodom_cli::error::CliError;
use spinodom_cli::eval::evaluate;
use spinodom_cli::pgm::snapshot_to_pgm;
use spinodom_cli::run::{bench, bench_table, execute, Input};
use spinodom_cli::{Overrides, RunConfig};
use spinodom_sim::wire::read_tum;

#[derive(Parser)]
#[command(name = "spinodom", version, about = "Streaming lidar odometry against a depth panorama")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a run and write packets, IMU and ground truth.
    Sim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the odometry over a packet file, or over a simulated stream when
    /// no input is given.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a trajectory against ground truth (both TUM).
    Eval {
        trajectory: PathBuf,
        truth: PathBuf,
        /// Association tolerance in seconds; half the trajectory period by default.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Replay one input at divisors 1, 2, 4 and 8 and report latency.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: InputArgs,
        /// Also write bench.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a pano snapshot as a PGM image.
    PanoDump {
        #[arg(long)]
        input: PathBuf,
        /// Output file, or a directory to write `<input stem>.pgm` into.
        #[arg(long)]
        out: PathBuf,
        /// Depth mapped to the darkest grey; the largest depth by default.
        #[arg(long)]
        max_range: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    divisor: Option<usize>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Simulated scene.
    #[arg(long)]
    scene: Option<String>,
}

#[derive(Args)]
struct InputArgs {
    /// Packet file; the configured simulation when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// IMU file to go with the packets.
    #[arg(long, requires = "input")]
    imu: Option<PathBuf>,
    /// Ground truth (TUM) for the packets, used for error and drift.
    #[arg(long, requires = "input")]
    truth: Option<PathBuf>,
}

impl InputArgs {
    fn input(self) -> Input {
        match self.input {
            None => Input::Sim,
            Some(packets) => Input::Packets { packets, imu: self.imu, truth: self.truth },
        }
    }
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Input { path: path.clone(), source: e })?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            workers: self.workers,
            divisor: self.divisor,
            duration: self.duration,
            scene: self.scene.clone(),
        })?;
        Ok(cfg)
    }
}

fn read_trajectory(path: &Path) -> Result<Vec<(f64, spinodom::Pose)>, CliError> {
    let f = fs::File::open(path).map_err(|e| CliError::Input { path: path.to_path_buf(), source: e })?;
    read_tum(BufReader::new(f)).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sim { common, out } => {
            let cfg = common.load()?;
            let d = write_dataset(&cfg, &out)?;
            println!("wrote {} packets to {}", d.packet_count, d.packets.display());
        }
        Command::Run { common, input, out } => {
            let cfg = common.load()?;
            let r = execute(&cfg, &input.input(), Some(&out))?;
            let m = &r.metrics;
            println!(
                "{} blocks, {:.1} Hz, distance {:.2} m, endpoint error {}, drift {}, relocations {}",
                m.blocks,
                m.output_rate_hz.unwrap_or(0.0),
                m.distance_m,
                m.endpoint_error_m.map_or("n/a".into(), |e| format!("{e:.3} m")),
                m.drift_pct.map_or("n/a".into(), |d| format!("{d:.3}%")),
                m.relocations
            );
            if let Some(e) = r.failure {
                return Err(e);
            }
        }
        Command::Eval { trajectory, truth, tolerance } => {
            let est = read_trajectory(&trajectory)?;
            let reference = read_trajectory(&truth)?;
            let report = evaluate(&est, &reference, tolerance)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Bench { common, input, out } => {
            let cfg = common.load()?;
            let rows = bench(&cfg, &input.input())?;
            print!("{}", bench_table(&rows));
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| CliError::Output { path: dir.clone(), source: e })?;
                let path = dir.join("bench.json");
                let text = serde_json::to_string_pretty(&rows).expect("bench serializes");
                fs::write(&path, text + "\n").map_err(|e| CliError::Output { path, source: e })?;
            }
        }
        Command::PanoDump { input, out, max_range } => {
            let f = fs::File::open(&input).map_err(|e| CliError::Input { path: input.clone(), source: e })?;
            let pgm = snapshot_to_pgm(BufReader::new(f), max_range)
                .map_err(|e| CliError::Parse { path: input.clone(), message: e.to_string() })?;
            let path = if out.is_dir() {
                let stem = input.file_stem().map_or("pano".into(), |s| s.to_string_lossy().into_owned());
                out.join(format!("{stem}.pgm"))
            } else {
                out
            };
            fs::write(&path, pgm).map_err(|e| CliError::Output { path: path.clone(), source: e })?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
