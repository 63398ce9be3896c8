//! Local trajectory over the sweep buffer.
//!
//! One navigation state per grid column plus a closing state at the end of
//! the newest column, all expressed in the current pano frame. States are
//! predicted with IMU strapdown integration when samples are available and
//! with a constant linear and angular velocity model otherwise.

use std::collections::VecDeque;

use nalgebra::UnitQuaternion;
use thiserror::Error;

use crate::geometry::{Pose, Vec3};

pub const GRAVITY: f64 = 9.80665;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajError {
    #[error("imu sample at t={got} is not after the previous sample at t={last}")]
    ImuOutOfOrder { last: f64, got: f64 },
    #[error("imu sample at t={0} is not finite")]
    ImuNotFinite(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    pub time: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub rotation: UnitQuaternion<f64>,
}

impl NavState {
    pub fn at_rest(time: f64, pose: Pose) -> Self {
        Self {
            time,
            position: pose.translation,
            velocity: Vec3::zeros(),
            rotation: pose.rotation,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }

    pub fn is_finite(&self) -> bool {
        self.time.is_finite()
            && self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

/// Body-frame specific force (m/s²) and angular rate (rad/s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    pub accel: Vec3,
    pub gyro: Vec3,
}

/// Linear interpolation of the IMU signal, held constant outside the
/// sampled interval. `samples` must be non-empty and time-ordered.
fn imu_at(samples: &[ImuSample], t: f64) -> (Vec3, Vec3) {
    let i = samples.partition_point(|s| s.time <= t);
    if i == 0 {
        return (samples[0].accel, samples[0].gyro);
    }
    if i == samples.len() {
        let s = &samples[i - 1];
        return (s.accel, s.gyro);
    }
    let (a, b) = (&samples[i - 1], &samples[i]);
    let w = (t - a.time) / (b.time - a.time);
    (a.accel.lerp(&b.accel, w), a.gyro.lerp(&b.gyro, w))
}

/// Trapezoidal strapdown step from `s` to time `t1`. `gravity` is the
/// gravity vector in the frame of `s`.
fn imu_step(s: &NavState, t1: f64, samples: &[ImuSample], gravity: &Vec3) -> NavState {
    let dt = t1 - s.time;
    let (fa, wa) = imu_at(samples, s.time);
    let (fb, wb) = imu_at(samples, t1);
    let rotation = s.rotation * UnitQuaternion::from_scaled_axis((wa + wb) * (0.5 * dt));
    let accel = (s.rotation * fa + rotation * fb) * 0.5 + gravity;
    NavState {
        time: t1,
        position: s.position + s.velocity * dt + accel * (0.5 * dt * dt),
        velocity: s.velocity + accel * dt,
        rotation,
    }
}

/// Integrate IMU samples from `s` to `t1`, splitting at every sample time.
pub fn propagate_imu(s: &NavState, t1: f64, samples: &[ImuSample], gravity: &Vec3) -> NavState {
    if samples.is_empty() {
        return propagate_cv(s, t1, &Vec3::zeros());
    }
    let mut cur = *s;
    let first = samples.partition_point(|x| x.time <= s.time);
    for x in &samples[first..] {
        if x.time >= t1 {
            break;
        }
        cur = imu_step(&cur, x.time, samples, gravity);
    }
    imu_step(&cur, t1, samples, gravity)
}

/// Constant velocity and constant angular rate `omega` (pano frame).
pub fn propagate_cv(s: &NavState, t1: f64, omega: &Vec3) -> NavState {
    let dt = t1 - s.time;
    NavState {
        time: t1,
        position: s.position + s.velocity * dt,
        velocity: s.velocity,
        rotation: UnitQuaternion::from_scaled_axis(omega * dt) * s.rotation,
    }
}

/// Predict `count` states spaced `dt` apart after `last`.
pub fn predict_states(
    last: &NavState,
    count: usize,
    dt: f64,
    omega: &Vec3,
    gravity: &Vec3,
    imu: &[ImuSample],
) -> Vec<NavState> {
    let mut out = Vec::with_capacity(count);
    let mut cur = *last;
    for k in 1..=count {
        let t = last.time + k as f64 * dt;
        cur = if imu.is_empty() {
            propagate_cv(last, t, omega)
        } else {
            propagate_imu(&cur, t, imu, gravity)
        };
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug)]
pub struct LocalTrajectory {
    states: Vec<NavState>,
    state_dt: f64,
    cell_cols: usize,
    /// Angular rate for the constant-velocity model, pano frame.
    pub omega: Vec3,
    /// Gravity in the pano frame.
    pub gravity: Vec3,
    imu: VecDeque<ImuSample>,
    imu_enabled: bool,
}

impl LocalTrajectory {
    /// `grid_cols + 1` states at rest at `pose`, the last one at `end_time`.
    pub fn new(grid_cols: usize, cell_cols: usize, firing_interval: f64, end_time: f64, pose: Pose) -> Self {
        let state_dt = cell_cols as f64 * firing_interval;
        let states = (0..=grid_cols)
            .map(|j| NavState::at_rest(end_time - (grid_cols - j) as f64 * state_dt, pose))
            .collect();
        Self {
            states,
            state_dt,
            cell_cols,
            omega: Vec3::zeros(),
            gravity: Vec3::new(0.0, 0.0, -GRAVITY),
            imu: VecDeque::new(),
            imu_enabled: false,
        }
    }

    pub fn states(&self) -> &[NavState] {
        &self.states
    }

    pub fn first(&self) -> &NavState {
        &self.states[0]
    }

    pub fn last(&self) -> &NavState {
        self.states.last().expect("trajectory has states")
    }

    pub fn state_dt(&self) -> f64 {
        self.state_dt
    }

    pub fn cell_cols(&self) -> usize {
        self.cell_cols
    }

    /// `t1 − t0` of the covered span.
    pub fn span(&self) -> f64 {
        self.last().time - self.first().time
    }

    pub fn uses_imu(&self) -> bool {
        self.imu_enabled
    }

    pub fn imu_len(&self) -> usize {
        self.imu.len()
    }

    pub fn push_imu(&mut self, sample: ImuSample) -> Result<(), TrajError> {
        let finite = sample.time.is_finite()
            && sample.accel.iter().chain(sample.gyro.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(TrajError::ImuNotFinite(sample.time));
        }
        if let Some(last) = self.imu.back() {
            if sample.time <= last.time {
                return Err(TrajError::ImuOutOfOrder {
                    last: last.time,
                    got: sample.time,
                });
            }
        }
        self.imu.push_back(sample);
        self.imu_enabled = true;
        Ok(())
    }

    /// Drop the `count` oldest states and predict `count` new ones.
    pub fn predict(&mut self, count: usize) {
        let count = count.min(self.states.len() - 1);
        self.states.drain(..count);
        let last = *self.last();
        self.prune_imu();
        let imu = self.imu.make_contiguous();
        let new = predict_states(&last, count, self.state_dt, &self.omega, &self.gravity, imu);
        self.states.extend(new);
    }

    /// Recompute states 1.. from state 0 with the active predictor.
    pub fn repropagate(&mut self) {
        let first = self.states[0];
        let n = self.states.len() - 1;
        let imu = self.imu.make_contiguous();
        let new = predict_states(&first, n, self.state_dt, &self.omega, &self.gravity, imu);
        self.states.truncate(1);
        self.states.extend(new);
    }

    /// Left-multiply the start state by `delta` (pano frame), shift the
    /// velocity by `Δp / Δt` (and, for the constant-velocity model, the
    /// angular rate by `Log(ΔR) / Δt`), then repropagate.
    pub fn apply_correction(&mut self, delta: &Pose) {
        if *delta == Pose::identity() {
            return;
        }
        let span = self.span();
        let s0 = &mut self.states[0];
        let corrected = delta.compose(&s0.pose());
        s0.rotation = corrected.rotation;
        s0.position = corrected.translation;
        s0.velocity += delta.translation / span;
        if !self.imu_enabled {
            self.omega += delta.rotation.scaled_axis() / span;
        }
        self.repropagate();
    }

    /// Re-express every state in a new pano frame, given the pose of the old
    /// pano frame in the new one.
    pub fn reexpress(&mut self, new_from_old: &Pose) {
        let r = new_from_old.rotation;
        for s in &mut self.states {
            let p = new_from_old.compose(&s.pose());
            s.position = p.translation;
            s.rotation = p.rotation;
            s.velocity = r * s.velocity;
        }
        self.omega = r * self.omega;
        self.gravity = r * self.gravity;
    }

    /// Pose at a fractional raw-column offset from the span start.
    pub fn pose_at_offset(&self, col_offset: f64) -> Pose {
        let s = (col_offset / self.cell_cols as f64).max(0.0);
        let last = self.states.len() - 2;
        let i = (s.floor() as usize).min(last);
        let alpha = (s - i as f64).min(1.0);
        self.states[i].pose().interpolate(&self.states[i + 1].pose(), alpha)
    }

    /// Poses of `count` consecutive raw columns starting at `first_offset`.
    pub fn column_poses(&self, first_offset: usize, count: usize) -> Vec<Pose> {
        (0..count)
            .map(|j| self.pose_at_offset((first_offset + j) as f64))
            .collect()
    }

    /// Keep one sample at or before the span start; older ones are unused.
    fn prune_imu(&mut self) {
        let t0 = self.states[0].time;
        while self.imu.len() >= 2 && self.imu[1].time <= t0 {
            self.imu.pop_front();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DT: f64 = 0.1 / 1024.0;

    fn traj() -> LocalTrajectory {
        LocalTrajectory::new(64, 16, DT, 0.1, Pose::identity())
    }

    #[test]
    fn initial_spacing() {
        let t = traj();
        assert_eq!(t.states().len(), 65);
        assert!((t.span() - 0.1).abs() < 1e-12);
        for w in t.states().windows(2) {
            assert!((w[1].time - w[0].time - 16.0 * DT).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_velocity_prediction_is_static() {
        let mut t = traj();
        t.predict(8);
        assert!((t.last().time - (0.1 + 8.0 * 16.0 * DT)).abs() < 1e-12);
        for s in t.states() {
            assert_eq!(s.position, Vec3::zeros());
            assert_eq!(s.rotation, UnitQuaternion::identity());
        }
    }

    #[test]
    fn constant_velocity_closed_form() {
        let v = Vec3::new(1.0, -0.5, 0.25);
        let s0 = NavState {
            time: 2.0,
            position: Vec3::new(1.0, 2.0, 3.0),
            velocity: v,
            rotation: UnitQuaternion::identity(),
        };
        let states = predict_states(&s0, 10, 0.01, &Vec3::zeros(), &Vec3::zeros(), &[]);
        for (k, s) in states.iter().enumerate() {
            let dt = s.time - 2.0;
            assert!((dt - (k + 1) as f64 * 0.01).abs() < 1e-12);
            assert!((s.position - (s0.position + v * dt)).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_correction_is_bit_identical() {
        let mut t = traj();
        t.states[0].velocity = Vec3::new(0.3, 0.1, 0.0);
        t.repropagate();
        t.predict(16);
        let before = t.states().to_vec();
        t.apply_correction(&Pose::identity());
        assert_eq!(t.states(), &before[..]);
    }

    #[test]
    fn pure_translation_shifts_every_state() {
        let mut t = traj();
        t.states[0].velocity = Vec3::new(1.0, 0.0, 0.0);
        t.repropagate();
        let before = t.states().to_vec();
        let dp = Vec3::new(0.02, -0.01, 0.005);
        t.apply_correction(&Pose::from_translation(dp));
        let span = t.span();
        for (a, b) in before.iter().zip(t.states()) {
            let dt = b.time - before[0].time;
            let expect = a.position + dp + dp / span * dt;
            assert!((b.position - expect).norm() < 1e-12);
            assert!((b.velocity - (a.velocity + dp / span)).norm() < 1e-12);
        }
    }

    #[test]
    fn imu_out_of_order_rejected() {
        let mut t = traj();
        let s = ImuSample {
            time: 1.0,
            accel: Vec3::zeros(),
            gyro: Vec3::zeros(),
        };
        t.push_imu(s).unwrap();
        assert!(matches!(t.push_imu(s), Err(TrajError::ImuOutOfOrder { .. })));
    }

    #[test]
    fn static_imu_holds_position() {
        let mut t = traj();
        for k in 0..200 {
            t.push_imu(ImuSample {
                time: k as f64 / 400.0,
                accel: Vec3::new(0.0, 0.0, GRAVITY),
                gyro: Vec3::zeros(),
            })
            .unwrap();
        }
        t.predict(32);
        assert!(t.last().position.norm() < 1e-12);
    }

    #[test]
    fn imu_circle_oracle() {
        // Yaw-aligned uniform circle: p = r(sin wt, 1 − cos wt), heading wt.
        let (r, w) = (3.0, 0.5);
        let truth = |t: f64| {
            NavState {
                time: t,
                position: Vec3::new(r * (w * t).sin(), r * (1.0 - (w * t).cos()), 0.0),
                velocity: Vec3::new(r * w * (w * t).cos(), r * w * (w * t).sin(), 0.0),
                rotation: UnitQuaternion::from_euler_angles(0.0, 0.0, w * t),
            }
        };
        let samples: Vec<ImuSample> = (0..400)
            .map(|k| {
                let t = k as f64 / 400.0;
                ImuSample {
                    time: t,
                    // Centripetal r w² toward the centre (body +y).
                    accel: Vec3::new(0.0, r * w * w, GRAVITY),
                    gyro: Vec3::new(0.0, 0.0, w),
                }
            })
            .collect();
        let s0 = truth(0.3);
        let g = Vec3::new(0.0, 0.0, -GRAVITY);
        let out = predict_states(&s0, 10, 0.01, &Vec3::zeros(), &g, &samples);
        for s in &out {
            let e = truth(s.time);
            assert!((s.position - e.position).norm() < 1e-3);
            assert!(s.rotation.angle_to(&e.rotation) < 1e-6);
        }
    }

    #[test]
    fn pose_interpolation_between_states() {
        let mut t = traj();
        t.states[0].velocity = Vec3::new(1.6, 0.0, 0.0);
        t.repropagate();
        // Halfway through grid column 3.
        let p = t.pose_at_offset(3.5 * 16.0);
        let expect = 1.6 * 3.5 * 16.0 * DT;
        assert!((p.translation.x - expect).abs() < 1e-12);
    }

    #[test]
    fn reexpress_round_trip() {
        let mut t = traj();
        t.states[0].velocity = Vec3::new(0.4, 0.2, 0.0);
        t.omega = Vec3::new(0.0, 0.0, 0.3);
        t.repropagate();
        let before = t.clone();
        let g = Pose::from_yaw(0.7, Vec3::new(1.0, -2.0, 0.5));
        t.reexpress(&g);
        assert!((t.gravity - before.gravity).norm() < 1e-12);
        t.reexpress(&g.inverse());
        for (a, b) in before.states().iter().zip(t.states()) {
            assert!((a.position - b.position).norm() < 1e-12);
            assert!((a.velocity - b.velocity).norm() < 1e-12);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
        }
    }

    fn arb_delta() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-0.05f64..0.05), prop::array::uniform3(-0.2f64..0.2)).prop_map(
            |(r, t)| Pose::exp(&Vec3::from(r), &Vec3::from(t)),
        )
    }

    proptest! {
        #[test]
        fn correction_preserves_spacing_and_continuity(delta in arb_delta(), m in 1usize..16) {
            let mut t = traj();
            t.states[0].velocity = Vec3::new(1.0, 0.3, 0.0);
            t.omega = Vec3::new(0.0, 0.0, 0.2);
            t.repropagate();
            t.apply_correction(&delta);
            let last = *t.last();
            t.predict(m);
            prop_assert!((t.states()[64 - m].position - last.position).norm() < 1e-9);
            for w in t.states().windows(2) {
                prop_assert!((w[1].time - w[0].time - 16.0 * DT).abs() < 1e-9);
                prop_assert!((w[1].rotation.norm() - 1.0).abs() < 1e-9);
                prop_assert!(w[1].is_finite());
                // Continuity: neighbouring states stay close for bounded rates.
                prop_assert!((w[1].position - w[0].position).norm() < 0.1);
            }
        }

        #[test]
        fn correction_group_consistency(delta in arb_delta()) {
            let mut t = traj();
            t.states[0].velocity = Vec3::new(1.0, 0.0, 0.0);
            t.repropagate();
            let s0 = *t.first();
            t.apply_correction(&delta);
            t.apply_correction(&delta.inverse());
            let s1 = *t.first();
            prop_assert!((s0.position - s1.position).norm() < 1e-9);
            prop_assert!(s0.rotation.angle_to(&s1.rotation) < 1e-9);
        }

        #[test]
        fn prediction_is_deterministic(v in prop::array::uniform3(-2.0f64..2.0)) {
            let mut a = traj();
            a.states[0].velocity = Vec3::from(v);
            a.repropagate();
            let mut b = a.clone();
            a.predict(8);
            b.predict(8);
            prop_assert_eq!(a.states(), b.states());
        }
    }
}
