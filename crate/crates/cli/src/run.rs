//! Odometry driver shared by `run` and `bench`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use spinodom::odom::BlockAssembler;
use spinodom::{ColumnBlock, ImuSample, OdomOutput, Odometry, Pose};
use spinodom_sim::wire::{read_imu, read_tum, write_tum, PacketReader};
use spinodom_sim::{GroundTruth, Simulator, WireError};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::metrics::{RunMetrics, StageMetrics};

/// Where the range stream comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    /// Generate it from the `[sim]` and `[trajectory]` sections.
    Sim,
    Packets { packets: PathBuf, imu: Option<PathBuf>, truth: Option<PathBuf> },
}

pub struct RunResult {
    pub trajectory: Vec<(f64, Pose)>,
    pub outputs: Vec<OdomOutput>,
    pub metrics: RunMetrics,
    /// Set when the stream broke off; outputs cover everything before it.
    pub failure: Option<CliError>,
}

enum Truth {
    Sim(GroundTruth),
    File(Vec<(f64, Pose)>),
    None,
}

enum Stream {
    Sim(Box<Simulator>, usize),
    Packets(PacketReader<BufReader<File>>, PathBuf),
}

impl Stream {
    fn next(&mut self) -> Option<Result<ColumnBlock, CliError>> {
        match self {
            Stream::Sim(sim, w) => sim.next_block(*w).map(Ok),
            Stream::Packets(r, path) => r.next().map(|p| {
                p.map_err(|source| match source {
                    WireError::Io(e) => CliError::Input { path: path.clone(), source: e },
                    source => CliError::Framing { path: path.clone(), source },
                })
            }),
        }
    }
}

/// IMU samples in time order, handed out up to a time.
enum ImuFeed {
    None,
    Sim { last: f64 },
    File { samples: Vec<ImuSample>, next: usize },
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Input { path: path.to_path_buf(), source: e })
}

fn read_truth(path: &Path) -> Result<Vec<(f64, Pose)>, CliError> {
    read_tum(BufReader::new(open(path)?)).map_err(|e| CliError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

/// Run the odometry over `input`. When `out` is given, the trajectory, the
/// metrics document and optional pano snapshots are written there, also
/// when the stream fails part way.
pub fn execute(cfg: &RunConfig, input: &Input, out: Option<&Path>) -> Result<RunResult, CliError> {
    let model = cfg.odom.sensor;
    let (mut stream, truth, mut imu) = match input {
        Input::Sim => {
            let sim = Simulator::new(cfg.sim_config()).map_err(|e| CliError::Other(e.to_string()))?;
            let truth = Truth::Sim(sim.truth().clone());
            let imu = if cfg.sim.imu { ImuFeed::Sim { last: f64::NEG_INFINITY } } else { ImuFeed::None };
            (Stream::Sim(Box::new(sim), cfg.sim.packet_cols), truth, imu)
        }
        Input::Packets { packets, imu, truth } => {
            let reader = PacketReader::new(BufReader::new(open(packets)?));
            let imu = match imu {
                Some(p) => {
                    let samples = read_imu(BufReader::new(open(p)?))
                        .map_err(|e| CliError::Parse { path: p.clone(), message: e.to_string() })?;
                    ImuFeed::File { samples, next: 0 }
                }
                None => ImuFeed::None,
            };
            let truth = match truth {
                Some(p) => Truth::File(read_truth(p)?),
                None => Truth::None,
            };
            (Stream::Packets(reader, packets.clone()), truth, imu)
        }
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::Output { path: dir.to_path_buf(), source: e })?;
    }

    let mut odo = Odometry::new(cfg.odom.clone()).map_err(|e| CliError::Other(e.to_string()))?;
    let mut assembler = BlockAssembler::new(&model, cfg.odom.divisor);
    let dt = model.firing_interval();
    let sim_imu = match &stream {
        Stream::Sim(sim, _) => Some(sim.config().clone()),
        Stream::Packets(..) => None,
    };
    let sim_truth = match &truth {
        Truth::Sim(t) => Some(t.clone()),
        _ => None,
    };
    let mut outputs: Vec<OdomOutput> = Vec::new();
    let mut snapshots = Vec::new();
    let mut failure = None;
    let mut columns = 0u64;
    let mut t0 = None;

    let snapshots_on = cfg.output.pano_snapshots;
    let process = |block: &ColumnBlock,
                       odo: &mut Odometry,
                       imu: &mut ImuFeed,
                       outputs: &mut Vec<OdomOutput>,
                       snapshots: &mut Vec<String>|
     -> Result<(), CliError> {
        let t_end = block.t_start + block.width as f64 * dt;
        let samples: Vec<ImuSample> = match imu {
            ImuFeed::None => Vec::new(),
            ImuFeed::Sim { last } => {
                let (Some(cfg), Some(truth)) = (&sim_imu, &sim_truth) else { unreachable!() };
                let s: Vec<ImuSample> =
                    truth.imu(last.max(0.0), t_end, &cfg.imu).into_iter().filter(|s| s.time > *last).collect();
                if let Some(x) = s.last() {
                    *last = x.time;
                }
                s
            }
            ImuFeed::File { samples, next } => {
                let start = *next;
                while *next < samples.len() && samples[*next].time <= t_end {
                    *next += 1;
                }
                samples[start..*next].to_vec()
            }
        };
        for s in samples {
            odo.push_imu(s).map_err(|e| CliError::Stream(e.to_string()))?;
        }
        let o = odo.process_block(block).map_err(|e| CliError::Stream(e.to_string()))?;
        if o.relocated && snapshots_on {
            if let (Some(dir), Some(pano)) = (out, odo.pano()) {
                snapshots.push(write_snapshot(dir, &format!("pano_{:06}.lpan", outputs.len()), pano)?);
            }
        }
        outputs.push(o);
        Ok(())
    };

    loop {
        let packet = match stream.next() {
            None => break,
            Some(Ok(p)) => p,
            Some(Err(e)) => {
                failure = Some(e);
                break;
            }
        };
        columns += packet.width as u64;
        t0.get_or_insert(packet.t_start);
        let blocks = match assembler.push(&packet) {
            Ok(b) => b,
            Err(e) => {
                failure = Some(CliError::Stream(e.to_string()));
                break;
            }
        };
        for b in blocks {
            if let Err(e) = process(&b.block, &mut odo, &mut imu, &mut outputs, &mut snapshots) {
                failure = Some(e);
                break;
            }
        }
        if failure.is_some() {
            break;
        }
    }
    if failure.is_none() {
        if let Some(b) = assembler.finish() {
            if let Err(e) = process(&b.block, &mut odo, &mut imu, &mut outputs, &mut snapshots) {
                failure = Some(e);
            }
        }
    }
    odo.flush();
    if let (Some(dir), true, Some(pano)) = (out, snapshots_on, odo.pano()) {
        snapshots.push(write_snapshot(dir, "pano_final.lpan", pano)?);
    }

    let trajectory: Vec<(f64, Pose)> = outputs.iter().map(|o| (o.time, o.pose)).collect();
    let reference: Option<Vec<(f64, Pose)>> = match &truth {
        Truth::Sim(gt) => Some(gt.relative_poses(&trajectory.iter().map(|(t, _)| *t).collect::<Vec<_>>())),
        Truth::File(v) => Some(relative_to(v, t0.unwrap_or(0.0))),
        Truth::None => None,
    };
    let mut metrics = RunMetrics::new(cfg);
    metrics.source = match input {
        Input::Sim => "sim".into(),
        Input::Packets { .. } => "packets".into(),
    };
    if matches!(input, Input::Packets { .. }) {
        metrics.scene = None;
        metrics.seed = None;
    }
    metrics.fill(&outputs, columns as f64 * dt, reference.as_deref(), &odo);
    metrics.timing_ms = StageMetrics::from_outputs(&outputs);
    metrics.pano_snapshots = snapshots;
    if let Some(e) = &failure {
        metrics.status = e.status().into();
        metrics.error = Some(e.to_string());
    }

    if let Some(dir) = out {
        let path = dir.join("trajectory.tum");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::Output { path: path.clone(), source: e })?);
        write_tum(&mut w, &trajectory)
            .and_then(|_| w.flush())
            .map_err(|e| CliError::Output { path: path.clone(), source: e })?;
        let path = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
        fs::write(&path, text + "\n").map_err(|e| CliError::Output { path, source: e })?;
    }
    Ok(RunResult { trajectory, outputs, metrics, failure })
}

/// Re-express a reference trajectory relative to its pose nearest `t0`,
/// the frame an odometry run starting at identity reports in.
fn relative_to(poses: &[(f64, Pose)], t0: f64) -> Vec<(f64, Pose)> {
    let Some(origin) = poses.iter().min_by(|a, b| (a.0 - t0).abs().total_cmp(&(b.0 - t0).abs())) else {
        return Vec::new();
    };
    let inv = origin.1.inverse();
    poses.iter().map(|(t, p)| (*t, inv.compose(p))).collect()
}

fn write_snapshot(dir: &Path, name: &str, pano: &spinodom::DepthPano) -> Result<String, CliError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| CliError::Output { path: path.clone(), source: e })?;
    let mut w = BufWriter::new(f);
    pano.write_snapshot(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Output { path: path.clone(), source: e })?;
    Ok(name.to_string())
}

/// Latency of one divisor on a replayed input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub divisor: usize,
    pub blocks: usize,
    pub output_rate_hz: f64,
    /// Time to acquire one block, ms.
    pub acquisition_ms: f64,
    pub mean_ms: f64,
    pub p90_ms: f64,
    /// Acquisition plus p90 runtime, ms.
    pub effective_latency_ms: f64,
    pub stage_mean_ms: StageMeans,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageMeans {
    pub feature: f64,
    pub associate: f64,
    pub solve: f64,
    pub fuse: f64,
}

pub const BENCH_DIVISORS: [usize; 4] = [1, 2, 4, 8];

/// Replay the same input once per divisor.
pub fn bench(cfg: &RunConfig, input: &Input) -> Result<Vec<BenchRow>, CliError> {
    let mut rows = Vec::new();
    for d in BENCH_DIVISORS {
        let mut c = cfg.clone();
        c.odom.divisor = d;
        c.output.pano_snapshots = false;
        let r = execute(&c, input, None)?;
        if let Some(e) = r.failure {
            return Err(e);
        }
        let acquisition_ms = 1e3 * c.odom.sensor.sweep_period / d as f64;
        let total = r.metrics.timing_ms.total.unwrap_or_default();
        let mean = |f: fn(&OdomOutput) -> u64| {
            let n = r.outputs.len().max(1) as f64;
            r.outputs.iter().map(|o| f(o) as f64).sum::<f64>() / n / 1e3
        };
        rows.push(BenchRow {
            divisor: d,
            blocks: r.outputs.len(),
            output_rate_hz: r.metrics.output_rate_hz.unwrap_or(0.0),
            acquisition_ms,
            mean_ms: total.mean,
            p90_ms: total.p90,
            effective_latency_ms: acquisition_ms + total.p90,
            stage_mean_ms: StageMeans {
                feature: mean(|o| o.timing.feature),
                associate: mean(|o| o.timing.associate),
                solve: mean(|o| o.timing.solve),
                fuse: mean(|o| o.timing.fuse),
            },
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "divisor  blocks  rate_hz  acquire_ms  mean_ms  p90_ms  latency_ms  feature  associate  solve  fuse\n",
    );
    for r in rows {
        s += &format!(
            "{:>7}  {:>6}  {:>7.1}  {:>10.2}  {:>7.2}  {:>6.2}  {:>10.2}  {:>7.2}  {:>9.2}  {:>5.2}  {:>4.2}\n",
            r.divisor,
            r.blocks,
            r.output_rate_hz,
            r.acquisition_ms,
            r.mean_ms,
            r.p90_ms,
            r.effective_latency_ms,
            r.stage_mean_ms.feature,
            r.stage_mean_ms.associate,
            r.stage_mean_ms.solve,
            r.stage_mean_ms.fuse
        );
    }
    s
}
