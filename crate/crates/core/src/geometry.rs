//! Rigid transforms, Gaussian point summaries and the spherical projection
//! model shared by sweeps and panoramas.
//!
//! Frame convention: right-handed, z-up, x-forward at azimuth 0. Azimuth
//! grows counter-clockwise seen from above, column `c` is centred on azimuth
//! `c * 2π / cols`. Row 0 is the top of the vertical field of view and rows
//! are centred at half-offsets, so the horizon falls between the two middle
//! rows when `rows` is even.

use std::f64::consts::{PI, TAU};
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Default minimum valid range in meters.
pub const DEFAULT_MIN_RANGE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("lidar model needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("lidar model needs at least 8 columns, got {0}")]
    TooFewCols(usize),
    #[error("sweep period must be positive, got {0}")]
    BadPeriod(f64),
    #[error("vertical field of view must lie in (0, π], got {0}")]
    BadFov(f64),
    #[error("minimum range must be non-negative, got {0}")]
    BadMinRange(f64),
}

/// Rigid motion with a unit quaternion rotation and a translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation about z (yaw) followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation,
        )
    }

    /// Left-perturbation retraction: rotation `Exp(rot)` and additive
    /// translation, i.e. `x ↦ Exp(rot)·x + trans`.
    pub fn exp(rot: &Vec3, trans: &Vec3) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(*rot), *trans)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation * other.rotation;
        Pose {
            rotation: renormalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Rotation angle of `self⁻¹ ∘ other`, radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// Linear interpolation of translation and slerp of rotation.
    pub fn interpolate(&self, other: &Pose, alpha: f64) -> Pose {
        let rotation = self
            .rotation
            .try_slerp(&other.rotation, alpha, 1e-12)
            .unwrap_or(self.rotation);
        Pose {
            rotation,
            translation: self.translation.lerp(&other.translation, alpha),
        }
    }

    /// `[tx, ty, tz, qx, qy, qz, qw]`, scalar-last.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            q.i,
            q.j,
            q.k,
            q.w,
        ]
    }

    /// Inverse of [`Pose::to_array`]; the quaternion is normalized.
    pub fn from_array(a: [f64; 7]) -> Pose {
        Pose {
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(a[6], a[3], a[4], a[5])),
            translation: Vec3::new(a[0], a[1], a[2]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Skew-symmetric cross-product matrix: `skew(a) * b == a × b`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Mean, covariance and pixel count of a set of 3-D points.
///
/// Covariance is the maximum-likelihood (divide by `n`) scatter, so a single
/// point has zero covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3 {
    pub mean: Vec3,
    pub covariance: Mat3,
    pub weight: u32,
}

impl Default for Gaussian3 {
    fn default() -> Self {
        Self {
            mean: Vec3::zeros(),
            covariance: Mat3::zeros(),
            weight: 0,
        }
    }
}

impl Gaussian3 {
    /// Two-pass mean-then-scatter over `points`. The iterator is cloned for
    /// the second pass. Returns `None` for an empty set.
    pub fn from_points<I>(points: I) -> Option<Gaussian3>
    where
        I: Iterator<Item = Vec3> + Clone,
    {
        let mut sum = Vec3::zeros();
        let mut n = 0u32;
        for p in points.clone() {
            sum += p;
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let mean = sum / f64::from(n);
        let mut scatter = Mat3::zeros();
        for p in points {
            let d = p - mean;
            scatter += d * d.transpose();
        }
        Some(Gaussian3 {
            mean,
            covariance: symmetrize(scatter / f64::from(n)),
            weight: n,
        })
    }

    /// Pooled statistics of the union of the two underlying point sets.
    pub fn merge(&self, other: &Gaussian3) -> Gaussian3 {
        if self.weight == 0 {
            return *other;
        }
        if other.weight == 0 {
            return *self;
        }
        let na = f64::from(self.weight);
        let nb = f64::from(other.weight);
        let n = na + nb;
        let mean = (self.mean * na + other.mean * nb) / n;
        let da = self.mean - mean;
        let db = other.mean - mean;
        let cov = ((self.covariance + da * da.transpose()) * na
            + (other.covariance + db * db.transpose()) * nb)
            / n;
        Gaussian3 {
            mean,
            covariance: symmetrize(cov),
            weight: self.weight + other.weight,
        }
    }

    /// Covariance expressed in another frame: `R Σ Rᵀ`, mean transformed.
    pub fn transformed(&self, pose: &Pose) -> Gaussian3 {
        let r = pose.rotation_matrix();
        Gaussian3 {
            mean: pose.transform(&self.mean),
            covariance: symmetrize(r * self.covariance * r.transpose()),
            weight: self.weight,
        }
    }
}

fn symmetrize(m: Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Geometry of an ideal spinning lidar (or a panorama with the same
/// spherical projection).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarModel {
    pub rows: usize,
    pub cols: usize,
    /// Radians, centred on `elevation_offset`.
    pub vertical_fov: f64,
    /// Radians; elevation of the centre of the vertical field of view.
    pub elevation_offset: f64,
    /// Seconds per revolution.
    pub sweep_period: f64,
    /// Meters; returns closer than this are invalid.
    pub min_range: f64,
}

/// A point that landed inside the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub row: usize,
    pub col: usize,
    pub range: f64,
}

impl LidarModel {
    pub fn new(
        rows: usize,
        cols: usize,
        vertical_fov: f64,
        elevation_offset: f64,
        sweep_period: f64,
    ) -> Result<Self, ModelError> {
        let model = LidarModel {
            rows,
            cols,
            vertical_fov,
            elevation_offset,
            sweep_period,
            min_range: DEFAULT_MIN_RANGE,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_min_range(mut self, min_range: f64) -> Self {
        self.min_range = min_range;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rows < 2 {
            return Err(ModelError::TooFewRows(self.rows));
        }
        if self.cols < 8 {
            return Err(ModelError::TooFewCols(self.cols));
        }
        if !(self.sweep_period > 0.0 && self.sweep_period.is_finite()) {
            return Err(ModelError::BadPeriod(self.sweep_period));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov <= PI) {
            return Err(ModelError::BadFov(self.vertical_fov));
        }
        if !(self.min_range >= 0.0 && self.min_range.is_finite()) {
            return Err(ModelError::BadMinRange(self.min_range));
        }
        Ok(())
    }

    /// Time between two consecutive column firings.
    pub fn firing_interval(&self) -> f64 {
        self.sweep_period / self.cols as f64
    }

    pub fn row_height(&self) -> f64 {
        self.vertical_fov / self.rows as f64
    }

    pub fn col_width(&self) -> f64 {
        TAU / self.cols as f64
    }

    fn top_elevation(&self) -> f64 {
        self.elevation_offset + 0.5 * self.vertical_fov
    }

    /// Elevation of the centre of `row`.
    pub fn row_elevation(&self, row: usize) -> f64 {
        self.top_elevation() - (row as f64 + 0.5) * self.row_height()
    }

    /// Azimuth of the centre of `col`.
    pub fn col_azimuth(&self, col: usize) -> f64 {
        col as f64 * self.col_width()
    }

    /// Continuous image coordinates `(row, col)` of a direction, without
    /// bounds checks. Column is in `[0, cols)`.
    pub fn image_coords(&self, p: &Vec3) -> (f64, f64) {
        let horiz = p.x.hypot(p.y);
        let elevation = p.z.atan2(horiz);
        let mut azimuth = p.y.atan2(p.x);
        if azimuth < 0.0 {
            azimuth += TAU;
        }
        let row = (self.top_elevation() - elevation) / self.row_height();
        let col = azimuth / self.col_width();
        (row, col)
    }

    /// Spherical projection. Returns `None` when the point lies outside the
    /// vertical field of view or closer than `min_range`.
    pub fn project(&self, p: &Vec3) -> Option<Projection> {
        let range = p.norm();
        if !(range >= self.min_range) || range == 0.0 {
            return None;
        }
        let (row_f, col_f) = self.image_coords(p);
        if !(row_f >= 0.0 && row_f < self.rows as f64) {
            return None;
        }
        let col = (col_f.round() as usize) % self.cols;
        Some(Projection {
            row: row_f as usize,
            col,
            range,
        })
    }

    /// Unit direction through the centre of a pixel.
    pub fn direction(&self, row: usize, col: usize) -> Vec3 {
        debug_assert!(row < self.rows && col < self.cols);
        let el = self.row_elevation(row);
        let az = self.col_azimuth(col);
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }

    pub fn unproject(&self, row: usize, col: usize, range: f64) -> Vec3 {
        self.direction(row, col) * range
    }
}

/// Precomputed per-row and per-column trigonometry so that unprojecting a
/// pixel is three multiplies.
#[derive(Clone, Debug)]
pub struct DirectionTable {
    model: LidarModel,
    row_cos: Vec<f64>,
    row_sin: Vec<f64>,
    col_cos: Vec<f64>,
    col_sin: Vec<f64>,
}

impl DirectionTable {
    pub fn new(model: &LidarModel) -> Self {
        let (row_sin, row_cos) = (0..model.rows)
            .map(|r| model.row_elevation(r).sin_cos())
            .unzip();
        let (col_sin, col_cos) = (0..model.cols)
            .map(|c| model.col_azimuth(c).sin_cos())
            .unzip();
        Self {
            model: *model,
            row_cos,
            row_sin,
            col_cos,
            col_sin,
        }
    }

    pub fn model(&self) -> &LidarModel {
        &self.model
    }

    #[inline]
    pub fn direction(&self, row: usize, col: usize) -> Vec3 {
        let ce = self.row_cos[row];
        Vec3::new(
            ce * self.col_cos[col],
            ce * self.col_sin[col],
            self.row_sin[row],
        )
    }

    #[inline]
    pub fn unproject(&self, row: usize, col: usize, range: f64) -> Vec3 {
        self.direction(row, col) * range
    }
}
