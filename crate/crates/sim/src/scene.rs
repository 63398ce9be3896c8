//! Analytic scenes built from axis-aligned boxes and planes.
//!
//! Boxes are solid: a ray starting outside hits the entry face, a ray
//! starting inside hits the exit face. A room is therefore just a box that
//! contains the sensor.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scene has no primitives")]
    Empty,
    #[error("primitive {id} is not finite or has an inverted extent")]
    BadPrimitive { id: u32 },
    #[error("unknown scene `{0}` (known: room, warehouse, boxworld, corridor, forest, box)")]
    Unknown(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Solid axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Plane `normal · x = offset`, visible from both sides.
    Plane { normal: [f64; 3], offset: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: u32,
    pub shape: Shape,
}

impl Primitive {
    /// Distance along a unit ray to the first surface hit with `t > eps`.
    #[inline]
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, inv: &Vec3) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self.shape {
            Shape::Box { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for k in 0..3 {
                    if dir[k] == 0.0 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[k] - origin[k]) * inv[k];
                    let b = (max[k] - origin[k]) * inv[k];
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    t0 = t0.max(lo);
                    t1 = t1.min(hi);
                    if t0 > t1 {
                        return None;
                    }
                }
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Plane { normal, offset } => {
                let n = Vec3::from(normal);
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - n.dot(origin)) / denom;
                (t > EPS).then_some(t)
            }
        }
    }

    fn validate(&self) -> Result<(), SceneError> {
        let ok = match self.shape {
            Shape::Box { min, max } => (0..3).all(|k| {
                min[k].is_finite() && max[k].is_finite() && min[k] < max[k]
            }),
            Shape::Plane { normal, offset } => {
                let n = Vec3::from(normal);
                offset.is_finite() && n.iter().all(|v| v.is_finite()) && (n.norm() - 1.0).abs() < 1e-9
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SceneError::BadPrimitive { id: self.id })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    /// Extent of the finite primitives.
    pub bounds: ([f64; 3], [f64; 3]),
}

pub const SCENE_NAMES: [&str; 6] = ["room", "warehouse", "boxworld", "corridor", "forest", "box"];

impl Scene {
    pub fn new(name: impl Into<String>, primitives: Vec<Primitive>) -> Result<Self, SceneError> {
        if primitives.is_empty() {
            return Err(SceneError::Empty);
        }
        for p in &primitives {
            p.validate()?;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &primitives {
            if let Shape::Box { min, max } = p.shape {
                for k in 0..3 {
                    lo[k] = lo[k].min(min[k]);
                    hi[k] = hi[k].max(max[k]);
                }
            }
        }
        if lo[0] > hi[0] {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        Ok(Scene { name: name.into(), primitives, bounds: (lo, hi) })
    }

    /// Nearest hit along a unit direction, or `None` when nothing is hit.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best = f64::INFINITY;
        for p in &self.primitives {
            if let Some(t) = p.intersect(origin, dir, &inv) {
                if t < best {
                    best = t;
                }
            }
        }
        best.is_finite().then_some(best)
    }

    /// Looks up a named scene. `seed` only affects randomized layouts.
    pub fn named(name: &str, seed: u64) -> Result<Scene, SceneError> {
        match name {
            "room" => Ok(room()),
            "warehouse" => Ok(warehouse()),
            "boxworld" => Ok(boxworld()),
            "corridor" => Ok(corridor()),
            "forest" => Ok(forest(seed)),
            "box" => Ok(test_box()),
            other => Err(SceneError::Unknown(other.to_string())),
        }
    }
}

/// Builder that hands out sequential ids.
struct Layout {
    prims: Vec<Primitive>,
}

impl Layout {
    fn new() -> Self {
        Layout { prims: Vec::new() }
    }

    fn cuboid(&mut self, min: [f64; 3], max: [f64; 3]) -> &mut Self {
        let id = self.prims.len() as u32;
        self.prims.push(Primitive { id, shape: Shape::Box { min, max } });
        self
    }

    fn plane(&mut self, normal: [f64; 3], offset: f64) -> &mut Self {
        let id = self.prims.len() as u32;
        self.prims.push(Primitive { id, shape: Shape::Plane { normal, offset } });
        self
    }

    fn finish(&mut self, name: &str) -> Scene {
        Scene::new(name, std::mem::take(&mut self.prims)).expect("built-in scene is valid")
    }
}

/// A 10×10×4 m empty box with the floor at z = 0.
pub fn test_box() -> Scene {
    Layout::new().cuboid([-5.0, -5.0, 0.0], [5.0, 5.0, 4.0]).finish("box")
}

/// A furnished 5×5×3 m room.
pub fn room() -> Scene {
    Layout::new()
        .cuboid([-2.5, -2.5, 0.0], [2.5, 2.5, 3.0])
        .cuboid([1.5, -2.5, 0.0], [2.5, -1.2, 0.9])
        .cuboid([-2.5, 1.0, 0.0], [-2.0, 2.5, 2.0])
        .cuboid([-0.6, 1.6, 0.0], [0.6, 2.5, 0.75])
        .cuboid([1.9, 0.8, 1.2], [2.5, 1.6, 1.8])
        .cuboid([-2.5, -2.5, 2.6], [2.5, -2.2, 3.0])
        .finish("room")
}

/// A 50×30×8 m hall with shelf rows and columns.
pub fn warehouse() -> Scene {
    let mut l = Layout::new();
    l.cuboid([-25.0, -15.0, 0.0], [25.0, 15.0, 8.0]);
    for i in 0..4 {
        let y = -10.0 + 6.0 * i as f64;
        l.cuboid([-18.0, y, 0.0], [-4.0, y + 1.2, 4.0 + 0.5 * i as f64]);
        l.cuboid([4.0, y + 1.0, 0.0], [18.0, y + 2.2, 3.5 + 0.4 * i as f64]);
    }
    for i in 0..5 {
        let x = -20.0 + 10.0 * i as f64;
        l.cuboid([x - 0.3, 13.0, 0.0], [x + 0.3, 13.6, 8.0]);
        l.cuboid([x + 1.5, -14.2, 0.0], [x + 2.4, -13.0, 2.2]);
    }
    l.cuboid([21.0, -4.0, 0.0], [25.0, 4.0, 5.0]);
    l.finish("warehouse")
}

/// A 20×20×3 m walled yard with boxes of varied size and height. The layout
/// keeps a 6 m circle and a 7 m figure-eight around the origin clear.
pub fn boxworld() -> Scene {
    let mut l = Layout::new();
    l.cuboid([-10.0, -10.0, 0.0], [10.0, 10.0, 3.0]);
    // Inner obstacles, off both loops.
    l.cuboid([-0.4, 2.6, 0.0], [0.4, 3.4, 1.6]);
    l.cuboid([-0.5, -3.5, 0.0], [0.5, -2.5, 2.2]);
    l.cuboid([2.6, -0.3, 0.0], [3.2, 0.3, 1.2]);
    l.cuboid([-3.4, -0.4, 0.0], [-2.8, 0.4, 2.6]);
    // Outer ring between the loop and the walls.
    let ring: [([f64; 3], [f64; 3]); 10] = [
        ([7.6, -1.0, 0.0], [9.0, 0.6, 1.8]),
        ([6.0, 6.2, 0.0], [7.0, 7.6, 2.6]),
        ([-1.2, 7.5, 0.0], [0.8, 8.3, 1.2]),
        ([-7.8, 5.4, 0.0], [-6.6, 6.4, 2.0]),
        ([-9.0, -2.5, 0.0], [-7.8, -1.3, 2.8]),
        ([-6.8, -7.6, 0.0], [-5.2, -6.6, 1.0]),
        ([0.5, -9.0, 0.0], [1.7, -7.6, 2.4]),
        ([6.4, -7.4, 0.0], [7.2, -6.0, 1.6]),
        ([8.8, 4.0, 0.0], [10.0, 5.0, 3.0]),
        ([-10.0, 8.2, 1.0], [-8.4, 10.0, 3.0]),
    ];
    for (min, max) in ring {
        l.cuboid(min, max);
    }
    l.finish("boxworld")
}

/// A 40×3×3 m corridor with door recesses and pillars so the long axis is
/// observable.
pub fn corridor() -> Scene {
    let mut l = Layout::new();
    l.cuboid([-5.0, -1.5, 0.0], [35.0, 1.5, 3.0]);
    for i in 0..8 {
        let x = -2.0 + 4.7 * i as f64;
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        // A pillar sticking out of one wall and a lintel on the other.
        l.cuboid(
            [x, if side > 0.0 { 1.1 } else { -1.5 }, 0.0],
            [x + 0.4, if side > 0.0 { 1.5 } else { -1.1 }, 3.0],
        );
        l.cuboid(
            [x + 2.0, if side > 0.0 { -1.5 } else { 1.2 }, 2.2],
            [x + 3.0, if side > 0.0 { -1.2 } else { 1.5 }, 3.0],
        );
    }
    l.finish("corridor")
}

/// Ground plane with thin trunks scattered over 40×40 m.
pub fn forest(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = Layout::new();
    l.plane([0.0, 0.0, 1.0], 0.0);
    let mut placed = 0;
    while placed < 80 {
        let x: f64 = rng.random_range(-20.0..20.0);
        let y: f64 = rng.random_range(-20.0..20.0);
        if x.hypot(y) < 2.0 {
            continue;
        }
        let r: f64 = rng.random_range(0.08..0.25);
        let h: f64 = rng.random_range(3.0..8.0);
        l.cuboid([x - r, y - r, 0.0], [x + r, y + r, h]);
        placed += 1;
    }
    l.finish("forest")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn inside_box_hits_walls() {
        let s = test_box();
        let o = Vec3::new(0.0, 0.0, 1.5);
        assert_relative_eq!(s.raycast(&o, &Vec3::x()).unwrap(), 5.0, epsilon = 1e-12);
        assert_relative_eq!(s.raycast(&o, &-Vec3::y()).unwrap(), 5.0, epsilon = 1e-12);
        assert_relative_eq!(s.raycast(&o, &-Vec3::z()).unwrap(), 1.5, epsilon = 1e-12);
        assert_relative_eq!(s.raycast(&o, &Vec3::z()).unwrap(), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn outside_box_hits_entry_face() {
        let p = Primitive { id: 0, shape: Shape::Box { min: [2.0, -1.0, -1.0], max: [3.0, 1.0, 1.0] } };
        let d = Vec3::x();
        let inv = Vec3::new(1.0, f64::INFINITY, f64::INFINITY);
        assert_eq!(p.intersect(&Vec3::zeros(), &d, &inv), Some(2.0));
        assert_eq!(p.intersect(&Vec3::new(4.0, 0.0, 0.0), &d, &inv), None);
        // Axis-parallel ray outside the slab never hits.
        assert_eq!(p.intersect(&Vec3::new(0.0, 2.0, 0.0), &d, &inv), None);
    }

    #[test]
    fn parallel_ray_misses_ground() {
        let s = Scene::new("ground", vec![Primitive { id: 0, shape: Shape::Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 } }]).unwrap();
        let o = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(s.raycast(&o, &Vec3::x()), None);
        let down = Vec3::new(1.0, 0.0, -1.0).normalize();
        assert_relative_eq!(s.raycast(&o, &down).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn named_scenes_build() {
        for name in SCENE_NAMES {
            let s = Scene::named(name, 3).unwrap();
            assert!(!s.primitives.is_empty());
            assert_eq!(s.name, name);
        }
        assert!(matches!(Scene::named("moon", 0), Err(SceneError::Unknown(_))));
        assert_eq!(forest(4), forest(4));
    }

    #[test]
    fn invalid_primitives_rejected() {
        assert_eq!(Scene::new("x", vec![]), Err(SceneError::Empty));
        let bad = Primitive { id: 7, shape: Shape::Box { min: [1.0, 0.0, 0.0], max: [0.0, 1.0, 1.0] } };
        assert_eq!(Scene::new("x", vec![bad]), Err(SceneError::BadPrimitive { id: 7 }));
    }
}
