//! `sim`: write a simulated run as packet, IMU and ground-truth files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use spinodom_sim::wire::{encode_block, write_imu, write_tum};
use spinodom_sim::Simulator;

use crate::config::RunConfig;
use crate::error::CliError;

pub const PACKETS_FILE: &str = "packets.lpkt";
pub const IMU_FILE: &str = "imu.limu";
pub const TRUTH_FILE: &str = "truth.tum";
pub const SIM_FILE: &str = "sim.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub packets: PathBuf,
    pub imu: PathBuf,
    pub truth: PathBuf,
    pub packet_count: usize,
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Output { path: path.to_path_buf(), source: e }
}

/// Packets of `[sim] packet_cols` columns; ground truth relative to the
/// first pose, at time 0 and at the end of every packet; IMU samples over
/// the whole run.
pub fn write_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset, CliError> {
    fs::create_dir_all(dir).map_err(output_err(dir))?;
    let sim_cfg = cfg.sim_config();
    let mut sim = Simulator::new(sim_cfg.clone()).map_err(|e| CliError::Other(e.to_string()))?;
    let model = cfg.odom.sensor;
    let dt = model.firing_interval();
    let width = cfg.sim.packet_cols;

    let packets = dir.join(PACKETS_FILE);
    let mut w = BufWriter::new(File::create(&packets).map_err(output_err(&packets))?);
    let mut times = vec![0.0];
    let mut buf = Vec::new();
    let mut count = 0;
    while let Some(b) = sim.next_block(width) {
        buf.clear();
        encode_block(&b, width, dt, model.cols, &mut buf);
        w.write_all(&buf).map_err(output_err(&packets))?;
        times.push(b.t_start + b.width as f64 * dt);
        count += 1;
    }
    w.flush().map_err(output_err(&packets))?;

    let truth = dir.join(TRUTH_FILE);
    let mut w = BufWriter::new(File::create(&truth).map_err(output_err(&truth))?);
    write_tum(&mut w, &sim.truth().relative_poses(&times))
        .and_then(|_| w.flush())
        .map_err(output_err(&truth))?;

    let imu = dir.join(IMU_FILE);
    let end = times.last().copied().unwrap_or(0.0);
    let mut w = BufWriter::new(File::create(&imu).map_err(output_err(&imu))?);
    write_imu(&mut w, &sim.imu(0.0, end)).and_then(|_| w.flush()).map_err(output_err(&imu))?;

    let meta = dir.join(SIM_FILE);
    let text = serde_json::to_string_pretty(&sim_cfg).expect("sim config serializes");
    fs::write(&meta, text + "\n").map_err(output_err(&meta))?;
    Ok(Dataset { packets, imu, truth, packet_count: count })
}
