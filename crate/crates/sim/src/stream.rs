//! Column stream driver and ground truth.

use serde::{Deserialize, Serialize};
use spinodom::{ColumnBlock, DirectionTable, ImuSample, LidarModel, Pose};
use thiserror::Error;

use crate::imu::{synth_imu_prepared, ImuConfig};
use crate::raycast::{raycast_block, RangeNoise};
use crate::scene::{Scene, SceneError};
use crate::trajectory::{Trajectory, TrajectoryError, TrajectorySpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid lidar model: {0}")]
    Model(String),
}

/// Everything needed to reproduce a simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scene: Scene,
    pub model: LidarModel,
    pub trajectory: TrajectorySpec,
    pub noise: RangeNoise,
    pub imu: ImuConfig,
}

/// Ground truth for a run: the analytic trajectory sampled on demand at any
/// column time, which covers every emitted column exactly.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    traj: Trajectory,
    firing_interval: f64,
}

impl GroundTruth {
    pub fn new(spec: TrajectorySpec, model: &LidarModel) -> Self {
        GroundTruth { traj: spec.prepare(), firing_interval: model.firing_interval() }
    }

    pub fn spec(&self) -> &TrajectorySpec {
        self.traj.spec()
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.traj.pose(t)
    }

    pub fn column_pose(&self, column: u64) -> Pose {
        self.traj.pose(column as f64 * self.firing_interval)
    }

    /// Poses at the given times, relative to the pose at time 0, i.e. in
    /// the frame an odometry run starting at identity reports.
    pub fn relative_poses(&self, times: &[f64]) -> Vec<(f64, Pose)> {
        let origin_inv = self.traj.pose(0.0).inverse();
        times.iter().map(|&t| (t, origin_inv.compose(&self.traj.pose(t)))).collect()
    }

    pub fn imu(&self, t0: f64, t1: f64, cfg: &ImuConfig) -> Vec<ImuSample> {
        synth_imu_prepared(&self.traj, t0, t1, cfg)
    }
}

/// Emits the range stream of a simulated run block by block.
pub struct Simulator {
    cfg: SimConfig,
    table: DirectionTable,
    truth: GroundTruth,
    next: u64,
    total: u64,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.model.validate().map_err(|e| SimError::Model(e.to_string()))?;
        cfg.trajectory.validate()?;
        if cfg.scene.primitives.is_empty() {
            return Err(SceneError::Empty.into());
        }
        let total = (cfg.trajectory.duration / cfg.model.firing_interval()).round() as u64;
        Ok(Simulator {
            table: DirectionTable::new(&cfg.model),
            truth: GroundTruth::new(cfg.trajectory.clone(), &cfg.model),
            cfg,
            next: 0,
            total,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    /// Columns in the whole run.
    pub fn total_columns(&self) -> u64 {
        self.total
    }

    pub fn emitted_columns(&self) -> u64 {
        self.next
    }

    /// Next `width` columns, or fewer at the end of the run.
    pub fn next_block(&mut self, width: usize) -> Option<ColumnBlock> {
        if self.next >= self.total || width == 0 {
            return None;
        }
        let w = (width as u64).min(self.total - self.next) as usize;
        let block = self.block_at(self.next, w);
        self.next += w as u64;
        Some(block)
    }

    /// Columns `first..first + width`, independent of the stream position.
    pub fn block_at(&self, first: u64, width: usize) -> ColumnBlock {
        let poses: Vec<Pose> = (0..width as u64).map(|j| self.truth.column_pose(first + j)).collect();
        raycast_block(&self.cfg.scene, &self.cfg.model, &self.table, first, &poses, &self.cfg.noise)
    }

    /// IMU samples with times in `[t0, t1]`.
    pub fn imu(&self, t0: f64, t1: f64) -> Vec<ImuSample> {
        self.truth.imu(t0, t1, &self.cfg.imu)
    }
}
