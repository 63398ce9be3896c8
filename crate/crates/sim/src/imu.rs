//! Inertial samples from analytic trajectories.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use spinodom::traj::GRAVITY;
use spinodom::ImuSample;

use crate::trajectory::{Trajectory, TrajectorySpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuConfig {
    /// Hz.
    pub rate: f64,
    /// White noise standard deviations; biases are always zero.
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub seed: u64,
}

impl Default for ImuConfig {
    fn default() -> Self {
        ImuConfig { rate: 200.0, accel_sigma: 0.0, gyro_sigma: 0.0, seed: 0 }
    }
}

/// Specific force and body rate at time `t`, noise free.
pub fn imu_at(traj: &Trajectory, t: f64) -> ImuSample {
    let k = traj.at(t);
    let pose = k.pose();
    let world = k.accel + Vector3::new(0.0, 0.0, GRAVITY);
    ImuSample {
        time: t,
        accel: pose.rotation.inverse() * world,
        gyro: Vector3::new(0.0, 0.0, k.yaw_rate),
    }
}

/// Samples at `k / rate` for every `k` with the time inside `[t0, t1]`.
pub fn synth_imu(spec: &TrajectorySpec, t0: f64, t1: f64, cfg: &ImuConfig) -> Vec<ImuSample> {
    synth_imu_prepared(&spec.prepare(), t0, t1, cfg)
}

pub fn synth_imu_prepared(traj: &Trajectory, t0: f64, t1: f64, cfg: &ImuConfig) -> Vec<ImuSample> {
    let k0 = (t0 * cfg.rate).ceil() as i64;
    let k1 = (t1 * cfg.rate).floor() as i64;
    let na = Normal::new(0.0, cfg.accel_sigma.max(0.0)).expect("finite sigma");
    let ng = Normal::new(0.0, cfg.gyro_sigma.max(0.0)).expect("finite sigma");
    (k0.max(0)..=k1)
        .map(|k| {
            let mut s = imu_at(traj, k as f64 / cfg.rate);
            if cfg.accel_sigma > 0.0 || cfg.gyro_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (k as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
                s.accel += Vector3::from_fn(|_, _| na.sample(&mut rng));
                s.gyro += Vector3::from_fn(|_, _| ng.sample(&mut rng));
            }
            s
        })
        .collect()
}
