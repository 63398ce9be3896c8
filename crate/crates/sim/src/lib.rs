//! Synthetic lidar worlds: box-and-plane scenes, analytic trajectories,
//! rolling-shutter raycasting, IMU synthesis and the packet formats used to
//! replay them.

pub mod imu;
pub mod raycast;
pub mod scene;
pub mod stream;
pub mod trajectory;
pub mod wire;

pub use imu::{synth_imu, ImuConfig};
pub use raycast::{raycast_block, RangeNoise};
pub use scene::{Scene, SceneError};
pub use stream::{GroundTruth, SimConfig, SimError, Simulator};
pub use trajectory::{Heading, PathKind, Trajectory, TrajectorySpec};
pub use wire::{PacketReader, WireError};
