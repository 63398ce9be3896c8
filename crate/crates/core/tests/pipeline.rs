mod common;

use nalgebra::Vector3;
use spinodom::icp::associate;
use spinodom::{OdomConfig, OdomOutput, Pose};
use spinodom_sim::{RangeNoise, Scene, TrajectorySpec};

fn cfg(divisor: usize) -> OdomConfig {
    OdomConfig { divisor, ..OdomConfig::default() }
}

#[test]
fn room_pano_converges_to_scene_depth() {
    let cfg = cfg(1);
    let scene = Scene::named("room", 0).unwrap();
    let at = Pose::from_yaw(0.2, Vector3::new(0.3, -0.4, 1.5));
    let pano = common::converged_pano(&scene, &cfg, &at, 10);
    let table = pano.table();
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 0..pano.rows() {
        for c in 0..pano.cols() {
            let d = f64::from(pano.depth(r, c));
            if d <= 0.0 {
                continue;
            }
            let dir = at.rotation_matrix() * table.direction(r, c);
            if let Some(t) = scene.raycast(&at.translation, &dir) {
                sum += (d - t).abs();
                n += 1;
            }
        }
    }
    let mean = sum / n as f64;
    assert!(n > pano.rows() * pano.cols() / 4, "only {n} valid pixels");
    assert!(mean < 0.02, "mean abs depth error {mean}");
}

fn first_registered(outs: &[OdomOutput]) -> usize {
    outs.iter().position(|o| o.report.is_some()).expect("registration started")
}

#[test]
fn stationary_room_run_stays_put() {
    let trajectory = TrajectorySpec::stationary([0.3, -0.4, 1.5], 0.2, 1.5);
    let (outs, odo, _) = common::run(&cfg(4), common::sim_config(Scene::named("room", 0).unwrap(), trajectory, 3));
    let k = first_registered(&outs);
    let first = outs[k].pose;
    assert!(outs.len() - k >= 10);
    for o in &outs[k..] {
        let rel = first.inverse().compose(&o.pose);
        assert!(rel.translation.norm() < 1e-3, "t={} {:?}", o.time, rel.translation);
        assert!(rel.rotation.angle().to_degrees() < 0.05, "t={}", o.time);
    }
    assert_eq!(odo.relocations(), 0);
}

#[test]
fn divisor_eight_outputs_at_80_hz() {
    let trajectory = TrajectorySpec::circle([0.0, 0.0, 1.2], 6.0, 1.0, 1);
    let mut sim = common::sim_config(Scene::named("boxworld", 0).unwrap(), trajectory, 1);
    sim.trajectory.duration = 1.0;
    let (outs, _, _) = common::run(&cfg(8), sim);
    assert_eq!(outs.len(), 80);
    for (i, o) in outs.iter().enumerate() {
        assert!((o.time - (i + 1) as f64 / 80.0).abs() < 1e-9);
    }
}

#[test]
fn corridor_traversal_relocates_without_jumps() {
    let trajectory = TrajectorySpec::line([0.0, 0.0, 1.4], 0.0, 1.0, 30.0);
    let sim = common::sim_config(Scene::named("corridor", 0).unwrap(), trajectory, 2);
    let (outs, odo, sim) = common::run(&cfg(4), sim);
    assert!(odo.relocations() >= 1);
    let times: Vec<f64> = outs.iter().map(|o| o.time).collect();
    let truth = sim.truth().relative_poses(&times);
    // Step residual against the true step, split by whether a swap happened
    // at that block. The first second is the cold-start transient.
    let (mut swap_res, mut plain_res) = (Vec::new(), Vec::new());
    for k in 1..outs.len() {
        if outs[k].time < 1.0 {
            continue;
        }
        let step = outs[k].pose.translation - outs[k - 1].pose.translation;
        let expect = truth[k].1.translation - truth[k - 1].1.translation;
        let res = (step - expect).norm();
        if outs[k].relocated {
            assert!(res < 0.02, "t={} jump {res}", outs[k].time);
            swap_res.push(res);
        } else {
            plain_res.push(res);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let swaps = swap_res.len();
    assert!(mean(&swap_res) < 2.0 * mean(&plain_res), "{} vs {}", mean(&swap_res), mean(&plain_res));
    assert!(swaps >= 1);
    let end = outs.last().unwrap();
    let err = (end.pose.translation - truth.last().unwrap().1.translation).norm();
    assert!(err < 0.02 * 30.0, "endpoint error {err}");
}

#[test]
fn divisors_agree_on_the_trajectory() {
    let trajectory = TrajectorySpec::circle([0.0, 0.0, 1.2], 6.0, 1.0, 1);
    let mut spec = common::sim_config(Scene::named("boxworld", 0).unwrap(), trajectory, 9);
    spec.trajectory.duration = 8.0;
    let (one, _, _) = common::run(&cfg(1), spec.clone());
    let (eight, _, _) = common::run(&cfg(8), spec);
    let (a, b) = (one.last().unwrap(), eight.last().unwrap());
    assert!((a.time - b.time).abs() < 1e-9);
    let d = (a.pose.translation - b.pose.translation).norm();
    assert!(d < 0.05, "endpoints differ by {d}");
}

#[test]
fn worker_count_does_not_change_results() {
    let trajectory = TrajectorySpec::figure_eight([0.0, 0.0, 1.2], 7.0, 1.0, 1);
    let mut spec = common::sim_config(Scene::named("boxworld", 0).unwrap(), trajectory, 4);
    spec.trajectory.duration = 2.0;
    let poses = |workers| {
        let (outs, _, _) = common::run(&OdomConfig { workers, ..cfg(4) }, spec.clone());
        outs.iter().map(|o| (o.time.to_bits(), o.pose)).collect::<Vec<_>>()
    };
    let base = poses(1);
    assert_eq!(poses(2), base);
    assert_eq!(poses(8), base);
}

#[test]
fn match_quality_falls_with_distance_from_pano() {
    let cfg = cfg(1);
    let scene = Scene::named("boxworld", 0).unwrap();
    let at = Pose::from_yaw(0.0, Vector3::new(-6.0, 0.0, 1.2));
    let pano = common::converged_pano(&scene, &cfg, &at, 8);
    let params = cfg.icp_params();
    let mut qs = Vec::new();
    for i in 0..=20 {
        let d = 0.25 * f64::from(i);
        let offset = Pose::from_translation(Vector3::new(d, 0.4 * d, 0.0));
        let sweep = common::static_sweep(&scene, &cfg.sensor, &at.compose(&offset), RangeNoise { sigma: 0.01, seed: 3 });
        let (grid, cands) = common::features(&cfg, &sweep);
        let poses = vec![offset; grid.cols];
        let q = associate(&grid, &cands, &poses, &pano, &params).len() as f64 / cands.len() as f64;
        qs.push(q);
    }
    assert!(qs[0] > 0.9, "{qs:?}");
    // Monotone up to and including the first value that would trigger a
    // relocation; beyond that the pano would have been replaced.
    let trigger = qs.iter().position(|&q| q < cfg.q_threshold).expect("relocation never triggers");
    assert!(qs[..=trigger].windows(2).all(|w| w[1] <= w[0]), "{qs:?}");
}
