//! Streaming lidar odometry against a depth panorama.

pub mod geometry;
pub mod grid;
pub mod icp;
pub mod odom;
pub mod pano;
pub mod sweep;
pub mod traj;

pub use geometry::{DirectionTable, Gaussian3, LidarModel, Pose, Vec3};
pub use grid::FeatureGrid;
pub use odom::{OdomConfig, OdomOutput, Odometry};
pub use pano::DepthPano;
pub use sweep::{ColumnBlock, SweepBuffer};
pub use traj::{ImuSample, LocalTrajectory, NavState};
