//! Parametric sensor trajectories with analytic derivatives.
//!
//! All motion is planar at a fixed height with yaw-only attitude, which keeps
//! the IMU synthesis exact: the body rate is `(0, 0, yaw_rate)`.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use spinodom::Pose;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("speed must be finite and non-negative, got {0}")]
    Speed(f64),
    #[error("duration must be finite and positive, got {0}")]
    Duration(f64),
    #[error("invalid path: {0}")]
    Path(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum PathKind {
    Static { position: [f64; 3] },
    Line { start: [f64; 3], heading: f64 },
    Circle { center: [f64; 3], radius: f64 },
    /// Gerono lemniscate `x = a sin φ, y = a sin φ cos φ`, crossing at the
    /// centre. `φ` advances uniformly, so speed is the lap average.
    FigureEight { center: [f64; 3], half_width: f64 },
    /// Uniform Catmull-Rom spline through the points. Closed paths wrap.
    Waypoints { points: Vec<[f64; 3]>, closed: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Heading {
    /// Face along the direction of travel.
    Tangent,
    Fixed { yaw: f64 },
    Spin { yaw0: f64, rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: PathKind,
    /// m/s; lap average for loops.
    pub speed: f64,
    pub heading: Heading,
    /// Seconds.
    pub duration: f64,
}

/// Position, its first two derivatives, and yaw with its rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub position: Vec3,
    pub velocity: Vec3,
    pub accel: Vec3,
    pub yaw: f64,
    pub yaw_rate: f64,
}

impl Kinematics {
    pub fn pose(&self) -> Pose {
        Pose::from_yaw(self.yaw, self.position)
    }
}

impl TrajectorySpec {
    pub fn stationary(position: [f64; 3], yaw: f64, duration: f64) -> Self {
        TrajectorySpec {
            kind: PathKind::Static { position },
            speed: 0.0,
            heading: Heading::Fixed { yaw },
            duration,
        }
    }

    pub fn line(start: [f64; 3], heading: f64, speed: f64, duration: f64) -> Self {
        TrajectorySpec { kind: PathKind::Line { start, heading }, speed, heading: Heading::Tangent, duration }
    }

    /// Closed circle flown `laps` times; the duration is a whole number of laps.
    pub fn circle(center: [f64; 3], radius: f64, speed: f64, laps: u32) -> Self {
        let mut spec = TrajectorySpec {
            kind: PathKind::Circle { center, radius },
            speed,
            heading: Heading::Tangent,
            duration: 1.0,
        };
        spec.duration = spec.lap_period().unwrap_or(1.0) * laps as f64;
        spec
    }

    pub fn figure_eight(center: [f64; 3], half_width: f64, speed: f64, laps: u32) -> Self {
        let mut spec = TrajectorySpec {
            kind: PathKind::FigureEight { center, half_width },
            speed,
            heading: Heading::Tangent,
            duration: 1.0,
        };
        spec.duration = spec.lap_period().unwrap_or(1.0) * laps as f64;
        spec
    }

    pub fn closed_waypoints(points: Vec<[f64; 3]>, speed: f64, laps: u32) -> Self {
        let mut spec = TrajectorySpec {
            kind: PathKind::Waypoints { points, closed: true },
            speed,
            heading: Heading::Tangent,
            duration: 1.0,
        };
        spec.duration = spec.lap_period().unwrap_or(1.0) * laps as f64;
        spec
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(TrajectoryError::Speed(self.speed));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(TrajectoryError::Duration(self.duration));
        }
        match &self.kind {
            PathKind::Circle { radius, .. } if !(*radius > 0.0) => Err(TrajectoryError::Path("circle radius must be positive")),
            PathKind::FigureEight { half_width, .. } if !(*half_width > 0.0) => {
                Err(TrajectoryError::Path("figure-eight half width must be positive"))
            }
            PathKind::Waypoints { points, closed } => {
                if points.len() < if *closed { 3 } else { 2 } {
                    return Err(TrajectoryError::Path("too few waypoints"));
                }
                if points.windows(2).any(|w| w[0] == w[1]) {
                    return Err(TrajectoryError::Path("repeated waypoint"));
                }
                Ok(())
            }
            PathKind::Circle { .. } | PathKind::FigureEight { .. } if self.speed == 0.0 => {
                Err(TrajectoryError::Path("loops need a positive speed"))
            }
            _ => Ok(()),
        }
    }

    /// True for kinds whose motion repeats.
    pub fn is_loop(&self) -> bool {
        match &self.kind {
            PathKind::Circle { .. } | PathKind::FigureEight { .. } => true,
            PathKind::Waypoints { closed, .. } => *closed,
            _ => false,
        }
    }

    /// Time for one lap of a loop kind.
    pub fn lap_period(&self) -> Option<f64> {
        if !self.is_loop() || !(self.speed > 0.0) {
            return None;
        }
        Some(self.lap_length()? / self.speed)
    }

    /// Arc length of one lap.
    pub fn lap_length(&self) -> Option<f64> {
        match &self.kind {
            PathKind::Circle { radius, .. } => Some(TAU * radius),
            PathKind::FigureEight { half_width, .. } => {
                Some(arc_length(|u| lemniscate(*half_width, u).1, 4096))
            }
            PathKind::Waypoints { points, closed: true } => {
                let n = points.len();
                Some((0..n).map(|s| arc_length(|u| catmull_rom(points, true, s, u).1, 512)).sum())
            }
            _ => None,
        }
    }

    /// Distance travelled over the whole duration.
    pub fn path_length(&self) -> f64 {
        match (&self.kind, self.lap_period()) {
            (PathKind::Static { .. }, _) => 0.0,
            (PathKind::Line { .. }, _) => self.speed * self.duration,
            (_, Some(period)) => self.lap_length().unwrap_or(0.0) * self.duration / period,
            (PathKind::Waypoints { points, closed: false }, _) => {
                (0..points.len() - 1).map(|s| arc_length(|u| catmull_rom(points, false, s, u).1, 512)).sum()
            }
            _ => 0.0,
        }
    }

    /// Analytic state at time `t`. Recomputes path lengths on every call;
    /// use [`TrajectorySpec::prepare`] when sampling densely.
    pub fn at(&self, t: f64) -> Kinematics {
        self.prepare().at(t)
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.at(t).pose()
    }

    /// Caches lap period and segment lengths for fast sampling.
    pub fn prepare(&self) -> Trajectory {
        let seg_lengths = match &self.kind {
            PathKind::Waypoints { points, closed } => {
                let segments = if *closed { points.len() } else { points.len().saturating_sub(1) };
                (0..segments).map(|s| arc_length(|u| catmull_rom(points, *closed, s, u).1, 512)).collect()
            }
            _ => Vec::new(),
        };
        Trajectory { period: self.lap_period(), spec: self.clone(), seg_lengths }
    }
}

/// A [`TrajectorySpec`] with its path lengths precomputed.
#[derive(Clone, Debug)]
pub struct Trajectory {
    spec: TrajectorySpec,
    period: Option<f64>,
    seg_lengths: Vec<f64>,
}

impl Trajectory {
    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.at(t).pose()
    }

    /// Analytic state at time `t` (seconds from the start).
    pub fn at(&self, t: f64) -> Kinematics {
        let spec = &self.spec;
        let (position, velocity, accel) = match &spec.kind {
            PathKind::Static { position } => (Vec3::from(*position), Vec3::zeros(), Vec3::zeros()),
            PathKind::Line { start, heading } => {
                let dir = Vec3::new(heading.cos(), heading.sin(), 0.0);
                (Vec3::from(*start) + dir * (spec.speed * t), dir * spec.speed, Vec3::zeros())
            }
            PathKind::Circle { center, radius } => {
                let period = self.period.unwrap_or(1.0);
                let w = TAU / period;
                let th = TAU * lap_phase(t, period);
                let (s, c) = th.sin_cos();
                (
                    Vec3::from(*center) + Vec3::new(c, s, 0.0) * *radius,
                    Vec3::new(-s, c, 0.0) * (radius * w),
                    Vec3::new(-c, -s, 0.0) * (radius * w * w),
                )
            }
            PathKind::FigureEight { center, half_width } => {
                let period = self.period.unwrap_or(1.0);
                let w = TAU / period;
                let (p, d, dd) = lemniscate(*half_width, lap_phase(t, period));
                // Derivatives are per unit phase u ∈ [0, 1); dφ/du = 2π.
                let rate = w / TAU;
                (Vec3::from(*center) + p, d * rate, dd * rate * rate)
            }
            PathKind::Waypoints { points, closed } => self.waypoint_state(points, *closed, t),
        };
        let (yaw, yaw_rate) = match spec.heading {
            Heading::Fixed { yaw } => (yaw, 0.0),
            Heading::Spin { yaw0, rate } => (yaw0 + rate * t, rate),
            Heading::Tangent => {
                let v2 = velocity.x * velocity.x + velocity.y * velocity.y;
                if v2 < 1e-18 {
                    (self.initial_heading(), 0.0)
                } else {
                    (
                        velocity.y.atan2(velocity.x),
                        (velocity.x * accel.y - velocity.y * accel.x) / v2,
                    )
                }
            }
        };
        Kinematics { position, velocity, accel, yaw, yaw_rate }
    }

    fn initial_heading(&self) -> f64 {
        match &self.spec.kind {
            PathKind::Line { heading, .. } => *heading,
            _ => 0.0,
        }
    }

    fn waypoint_state(&self, points: &[[f64; 3]], closed: bool, t: f64) -> (Vec3, Vec3, Vec3) {
        let lengths = &self.seg_lengths;
        let segments = lengths.len();
        let total: f64 = lengths.iter().sum();
        let speed = self.spec.speed;
        if !(speed > 0.0) || total == 0.0 {
            return (Vec3::from(points[0]), Vec3::zeros(), Vec3::zeros());
        }
        let mut dist = speed * t;
        if closed {
            dist = total * lap_phase(dist, total);
        } else if dist >= total {
            let (p, _, _) = catmull_rom(points, false, segments - 1, 1.0);
            return (p, Vec3::zeros(), Vec3::zeros());
        }
        let mut seg = 0;
        while seg + 1 < segments && dist >= lengths[seg] {
            dist -= lengths[seg];
            seg += 1;
        }
        // Each segment is traversed at a constant parameter rate chosen so
        // that its duration matches its length at the nominal speed.
        let seg_time = lengths[seg] / speed;
        let u = (dist / lengths[seg]).clamp(0.0, 1.0);
        let (p, d, dd) = catmull_rom(points, closed, seg, u);
        (p, d / seg_time, dd / (seg_time * seg_time))
    }
}

/// Fraction of a lap elapsed at `t`, in `[0, 1)`. Values within rounding of
/// a whole number of laps snap to 0, so loops close exactly.
pub fn lap_phase(t: f64, period: f64) -> f64 {
    let s = t / period;
    let k = s.round();
    if (s - k).abs() < 1e-9 {
        return 0.0;
    }
    s - s.floor()
}

/// Point, first and second derivative with respect to the lap fraction `u`.
fn lemniscate(a: f64, u: f64) -> (Vec3, Vec3, Vec3) {
    let phi = TAU * u;
    let (s, c) = phi.sin_cos();
    let (s2, c2) = (2.0 * phi).sin_cos();
    let k = TAU;
    (
        Vec3::new(a * s, 0.5 * a * s2, 0.0),
        Vec3::new(a * c, a * c2, 0.0) * k,
        Vec3::new(-a * s, -2.0 * a * s2, 0.0) * (k * k),
    )
}

/// Uniform Catmull-Rom segment `seg` at parameter `u`.
fn catmull_rom(points: &[[f64; 3]], closed: bool, seg: usize, u: f64) -> (Vec3, Vec3, Vec3) {
    let n = points.len() as isize;
    let get = |i: isize| -> Vec3 {
        let j = if closed { i.rem_euclid(n) } else { i.clamp(0, n - 1) };
        Vec3::from(points[j as usize])
    };
    let i = seg as isize;
    let (p0, p1, p2, p3) = (get(i - 1), get(i), get(i + 1), get(i + 2));
    let a = p1 * 2.0;
    let b = p2 - p0;
    let c = p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3;
    let d = -p0 + p1 * 3.0 - p2 * 3.0 + p3;
    let (u2, u3) = (u * u, u * u * u);
    (
        (a + b * u + c * u2 + d * u3) * 0.5,
        (b + c * (2.0 * u) + d * (3.0 * u2)) * 0.5,
        (c * 2.0 + d * (6.0 * u)) * 0.5,
    )
}

/// Simpson integration of |dp/du| over u ∈ [0, 1].
fn arc_length(deriv: impl Fn(f64) -> Vec3, steps: usize) -> f64 {
    let n = steps + steps % 2;
    let h = 1.0 / n as f64;
    let mut sum = deriv(0.0).norm() + deriv(1.0).norm();
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * deriv(i as f64 * h).norm();
    }
    sum * h / 3.0
}
