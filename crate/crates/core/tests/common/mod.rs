#![allow(dead_code)]

use spinodom::grid::FeatureGrid;
use spinodom::odom::default_sensor;
use spinodom::{Vec3, ColumnBlock, DepthPano, DirectionTable, LidarModel, OdomConfig, OdomOutput, Odometry, Pose, SweepBuffer};
use spinodom_sim::{raycast_block, ImuConfig, RangeNoise, Scene, SimConfig, Simulator, TrajectorySpec};

/// One revolution cast from a fixed world pose.
pub fn static_sweep(scene: &Scene, model: &LidarModel, pose: &Pose, noise: RangeNoise) -> ColumnBlock {
    let table = DirectionTable::new(model);
    let poses = vec![*pose; model.cols];
    raycast_block(scene, model, &table, 0, &poses, &noise)
}

/// Pano anchored at the sensor (identity) after `sweeps` noisy revolutions
/// taken around `pose` with small known tilts and offsets, the way motion
/// fills the rows between beams in a running pano.
pub fn converged_pano(scene: &Scene, cfg: &OdomConfig, pose: &Pose, sweeps: u64) -> DepthPano {
    let model = cfg.sensor;
    let table = DirectionTable::new(&model);
    let mut pano = DepthPano::new(cfg.pano_model(), Pose::identity(), cfg.fusion_params());
    let row = model.row_height();
    for s in 0..sweeps {
        let k = s as f64;
        let jitter = Pose::exp(
            &Vec3::new(0.0, row * (k / sweeps as f64 - 0.5), 0.002 * (k - 1.0)),
            &Vec3::new(0.02 * (k % 3.0 - 1.0), 0.01 * (k % 2.0), 0.015 * (k % 4.0 - 1.5)),
        );
        let at = pose.compose(&jitter);
        let block = static_sweep(scene, &model, &at, RangeNoise { sigma: 0.01, seed: 1000 + s });
        let mut buf = SweepBuffer::new(model.rows, model.cols, model.firing_interval());
        buf.push(&block).unwrap();
        let poses = vec![jitter; model.cols];
        pano.add_buffer_columns(&buf, 0, model.cols, &poses, &table);
    }
    pano
}

/// Scored feature grid and candidate cells for one revolution.
pub fn features(cfg: &OdomConfig, block: &ColumnBlock) -> (FeatureGrid, Vec<usize>) {
    let model = cfg.sensor;
    let mut buf = SweepBuffer::new(model.rows, model.cols, model.firing_interval());
    buf.push(block).unwrap();
    let mut grid = FeatureGrid::new(model.rows, model.cols, cfg.cell_rows, cfg.cell_cols).unwrap();
    grid.score_all(&buf, &DirectionTable::new(&model));
    let cands = grid.filter(cfg.max_smooth, cfg.max_var, cfg.nms);
    (grid, cands)
}

pub fn sim_config(scene: Scene, trajectory: TrajectorySpec, seed: u64) -> SimConfig {
    SimConfig {
        scene,
        model: default_sensor(),
        trajectory,
        noise: RangeNoise { sigma: 0.01, seed },
        imu: ImuConfig::default(),
    }
}

/// Streams a simulated run through odometry; returns every output.
pub fn run(cfg: &OdomConfig, sim: SimConfig) -> (Vec<OdomOutput>, Odometry, Simulator) {
    let mut sim = Simulator::new(sim).unwrap();
    let mut odo = Odometry::new(cfg.clone()).unwrap();
    let w = cfg.block_width();
    let mut outs = Vec::new();
    while let Some(b) = sim.next_block(w) {
        if b.width < w {
            break;
        }
        outs.push(odo.process_block(&b).unwrap());
    }
    (outs, odo, sim)
}
