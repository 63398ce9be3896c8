//! Run configuration: a TOML document with fixed sections. Every key is
//! optional; unknown sections and keys are rejected, and every error names
//! the offending key.

use std::fmt;

use spinodom::odom::default_sensor;
use spinodom::{LidarModel, OdomConfig};
use spinodom_sim::scene::SCENE_NAMES;
use spinodom_sim::{Heading, ImuConfig, PathKind, RangeNoise, Scene, SimConfig, TrajectorySpec};
use toml::{Table, Value};

pub const SECTIONS: [&str; 8] = ["sensor", "pano", "grid", "icp", "odom", "sim", "trajectory", "output"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    /// Dotted key path, or a bare section name.
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(key: impl Into<String>, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { key: key.into(), message: message.into() })
}

/// Simulated input: scene, path, noise and IMU.
#[derive(Clone, Debug, PartialEq)]
pub struct SimSection {
    pub scene: String,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Feed synthetic IMU samples to the odometry.
    pub imu: bool,
    pub imu_rate: f64,
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub trajectory: TrajectorySpec,
    /// Columns per packet when writing packet files.
    pub packet_cols: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct OutputSection {
    /// Write a pano snapshot at every relocation and at the end of a run.
    pub pano_snapshots: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub odom: OdomConfig,
    pub sim: SimSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            odom: OdomConfig::default(),
            sim: SimSection {
                scene: "boxworld".into(),
                seed: 0,
                noise_sigma: 0.01,
                imu: false,
                imu_rate: 200.0,
                accel_sigma: 0.0,
                gyro_sigma: 0.0,
                trajectory: TrajectorySpec::circle([0.0, 0.0, 1.2], 6.0, 1.0, 1),
                packet_cols: spinodom_sim::wire::DEFAULT_PACKET_COLS,
            },
            output: OutputSection::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub divisor: Option<usize>,
    pub duration: Option<f64>,
    pub scene: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: Table = match text.parse() {
            Ok(t) => t,
            Err(e) => {
                let e: toml::de::Error = e;
                return err("<document>", e.message().to_string());
            }
        };
        Self::from_table(&table)
    }

    pub fn from_table(table: &Table) -> Result<Self, ConfigError> {
        for (name, v) in table {
            if !SECTIONS.contains(&name.as_str()) {
                return err(name.as_str(), format!("unknown section (expected one of {})", SECTIONS.join(", ")));
            }
            if !v.is_table() {
                return err(name.as_str(), "must be a section");
            }
        }
        let section = |name: &'static str| Section::new(name, table.get(name).and_then(Value::as_table));
        let mut cfg = RunConfig::default();
        let defaults = OdomConfig::default();
        let sensor_default = default_sensor();

        let mut s = section("sensor");
        let rate = s.f64_pos("rate_hz", 1.0 / sensor_default.sweep_period)?;
        cfg.odom.sensor = LidarModel {
            rows: s.usize_min("rows", sensor_default.rows, 1)?,
            cols: s.usize_min("cols", sensor_default.cols, 1)?,
            vertical_fov: s.f64_pos("vertical_fov_deg", sensor_default.vertical_fov.to_degrees())?.to_radians(),
            elevation_offset: s.f64("elevation_offset_deg", sensor_default.elevation_offset.to_degrees())?.to_radians(),
            sweep_period: 1.0 / rate,
            min_range: s.f64_nonneg("min_range", sensor_default.min_range)?,
        };
        s.finish()?;

        let mut s = section("pano");
        cfg.odom.pano_rows = s.usize_min("rows", defaults.pano_rows, 1)?;
        cfg.odom.pano_cols = s.usize_min("cols", defaults.pano_cols, 1)?;
        cfg.odom.pano_vertical_fov = s.f64_pos("vertical_fov_deg", defaults.pano_vertical_fov.to_degrees())?.to_radians();
        cfg.odom.fuse_tol = s.f64_pos("fuse_tol", defaults.fuse_tol)?;
        let k_max = s.usize_min("k_max", usize::from(defaults.k_max), 1)?;
        cfg.odom.k_max = match u8::try_from(k_max) {
            Ok(k) => k,
            Err(_) => return err("pano.k_max", format!("must be at most 255, got {k_max}")),
        };
        s.finish()?;

        let mut s = section("grid");
        cfg.odom.cell_rows = s.usize_min("cell_rows", defaults.cell_rows, 1)?;
        cfg.odom.cell_cols = s.usize_min("cell_cols", defaults.cell_cols, 1)?;
        cfg.odom.max_smooth = s.f64_nonneg("max_smooth", defaults.max_smooth)?;
        cfg.odom.max_var = s.f64_nonneg("max_var", defaults.max_var)?;
        cfg.odom.nms = s.bool("nms", defaults.nms)?;
        cfg.odom.max_candidates = s.usize_min("max_candidates", defaults.max_candidates, 0)?;
        s.finish()?;

        let mut s = section("icp");
        cfg.odom.assoc_tol = s.f64_pos("assoc_tol", defaults.assoc_tol)?;
        cfg.odom.huber_delta = s.f64_pos("huber_delta", defaults.huber_delta)?;
        cfg.odom.chi2_gate = s.opt_f64_pos("chi2_gate")?;
        cfg.odom.max_outer = s.usize_min("max_outer", defaults.max_outer, 1)?;
        cfg.odom.max_inner = s.usize_min("max_inner", defaults.max_inner, 1)?;
        cfg.odom.min_matches = s.usize_min("min_matches", defaults.min_matches, 0)?;
        cfg.odom.lm_lambda = s.f64_nonneg("lm_lambda", defaults.lm_lambda)?;
        cfg.odom.window_rows = s.opt_usize_min("window_rows", 1)?;
        cfg.odom.window_cols = s.opt_usize_min("window_cols", 1)?;
        s.finish()?;

        let mut s = section("odom");
        cfg.odom.divisor = s.usize_min("divisor", defaults.divisor, 1)?;
        if ![1, 2, 4, 8].contains(&cfg.odom.divisor) {
            return err("odom.divisor", format!("must be 1, 2, 4 or 8, got {}", cfg.odom.divisor));
        }
        cfg.odom.workers = s.usize_min("workers", defaults.workers, 1)?;
        cfg.odom.q_threshold = s.f64_pos("q_threshold", defaults.q_threshold)?;
        if cfg.odom.q_threshold > 1.0 {
            return err("odom.q_threshold", format!("must lie in (0, 1], got {}", cfg.odom.q_threshold));
        }
        s.finish()?;

        let mut s = section("sim");
        let d = cfg.sim.clone();
        cfg.sim.scene = s.string("scene", &d.scene)?;
        if !SCENE_NAMES.contains(&cfg.sim.scene.as_str()) {
            return err("sim.scene", format!("unknown scene `{}` (known: {})", cfg.sim.scene, SCENE_NAMES.join(", ")));
        }
        cfg.sim.seed = s.u64("seed", d.seed)?;
        cfg.sim.noise_sigma = s.f64_nonneg("noise_sigma", d.noise_sigma)?;
        cfg.sim.imu = s.bool("imu", d.imu)?;
        cfg.sim.imu_rate = s.f64_pos("imu_rate", d.imu_rate)?;
        cfg.sim.accel_sigma = s.f64_nonneg("accel_sigma", d.accel_sigma)?;
        cfg.sim.gyro_sigma = s.f64_nonneg("gyro_sigma", d.gyro_sigma)?;
        cfg.sim.packet_cols = s.usize_min("packet_cols", d.packet_cols, 1)?;
        s.finish()?;

        let mut s = section("trajectory");
        cfg.sim.trajectory = parse_trajectory(&mut s)?;
        s.finish()?;

        let mut s = section("output");
        cfg.output.pano_snapshots = s.bool("pano_snapshots", false)?;
        s.finish()?;

        cfg.check()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(seed) = o.seed {
            self.sim.seed = seed;
        }
        if let Some(w) = o.workers {
            if w == 0 {
                return err("--workers", "must be at least 1");
            }
            self.odom.workers = w;
        }
        if let Some(d) = o.divisor {
            if ![1, 2, 4, 8].contains(&d) {
                return err("--divisor", format!("must be 1, 2, 4 or 8, got {d}"));
            }
            self.odom.divisor = d;
        }
        if let Some(t) = o.duration {
            if !(t > 0.0 && t.is_finite()) {
                return err("--duration", format!("must be positive, got {t}"));
            }
            self.sim.trajectory.duration = t;
        }
        if let Some(name) = &o.scene {
            if !SCENE_NAMES.contains(&name.as_str()) {
                return err("--scene", format!("unknown scene `{name}` (known: {})", SCENE_NAMES.join(", ")));
            }
            self.sim.scene = name.clone();
        }
        self.check()
    }

    /// Cross-key checks that individual keys cannot express.
    fn check(&self) -> Result<(), ConfigError> {
        let o = &self.odom;
        if o.sensor.rows % o.cell_rows != 0 {
            return err("grid.cell_rows", format!("{} does not divide sensor.rows {}", o.cell_rows, o.sensor.rows));
        }
        if o.sensor.cols % o.divisor != 0 || (o.sensor.cols / o.divisor) % o.cell_cols != 0 {
            return err(
                "grid.cell_cols",
                format!("block width {}/{} is not a multiple of {}", o.sensor.cols, o.divisor, o.cell_cols),
            );
        }
        if let Err(e) = o.sensor.validate() {
            return err("sensor", e.to_string());
        }
        if let Err(e) = o.pano_model().validate() {
            return err("pano", e.to_string());
        }
        if let Err(e) = self.sim.trajectory.validate() {
            return err("trajectory", e.to_string());
        }
        if let Err(e) = o.validate() {
            return err("odom", e.to_string());
        }
        Ok(())
    }

    pub fn scene(&self) -> Scene {
        Scene::named(&self.sim.scene, self.sim.seed).expect("scene name checked at parse time")
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            scene: self.scene(),
            model: self.odom.sensor,
            trajectory: self.sim.trajectory.clone(),
            noise: RangeNoise { sigma: self.sim.noise_sigma, seed: self.sim.seed },
            imu: ImuConfig {
                rate: self.sim.imu_rate,
                accel_sigma: self.sim.accel_sigma,
                gyro_sigma: self.sim.gyro_sigma,
                seed: self.sim.seed,
            },
        }
    }
}

fn parse_trajectory(s: &mut Section) -> Result<TrajectorySpec, ConfigError> {
    let kind = s.string("kind", "circle")?;
    let speed = s.f64_nonneg("speed", 1.0)?;
    let laps = s.u64("laps", 1)?;
    let laps = match u32::try_from(laps) {
        Ok(l) if l >= 1 => l,
        _ => return err("trajectory.laps", format!("must lie in [1, {}], got {laps}", u32::MAX)),
    };
    let mut spec = match kind.as_str() {
        "static" => {
            let position = s.vec3("position", [0.0, 0.0, 1.2])?;
            let yaw = s.f64("yaw_deg", 0.0)?.to_radians();
            TrajectorySpec::stationary(position, yaw, 5.0)
        }
        "line" => {
            let start = s.vec3("start", [0.0, 0.0, 1.2])?;
            let heading = s.f64("heading_deg", 0.0)?.to_radians();
            TrajectorySpec::line(start, heading, speed, 10.0)
        }
        "circle" => {
            let center = s.vec3("center", [0.0, 0.0, 1.2])?;
            let radius = s.f64_pos("radius", 6.0)?;
            TrajectorySpec::circle(center, radius, speed, laps)
        }
        "figure-eight" => {
            let center = s.vec3("center", [0.0, 0.0, 1.2])?;
            let half_width = s.f64_pos("half_width", 7.0)?;
            TrajectorySpec::figure_eight(center, half_width, speed, laps)
        }
        "waypoints" => {
            let points = s.points("points")?;
            let closed = s.bool("closed", true)?;
            let mut spec = TrajectorySpec::closed_waypoints(points.clone(), speed, laps);
            if !closed {
                spec.kind = PathKind::Waypoints { points, closed: false };
                spec.duration = 10.0;
            }
            spec
        }
        other => {
            return err(
                "trajectory.kind",
                format!("unknown kind `{other}` (expected static, line, circle, figure-eight or waypoints)"),
            )
        }
    };
    if let Some(t) = s.opt_f64_pos("duration")? {
        spec.duration = t;
    }
    if let Some(rate) = s.opt_f64("spin_deg_per_s")? {
        spec.heading = Heading::Spin { yaw0: 0.0, rate: rate.to_radians() };
    }
    Ok(spec)
}

/// Typed access to one section; records which keys were read so that
/// leftovers can be reported as unknown.
struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
    seen: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn new(name: &'static str, table: Option<&'a Table>) -> Self {
        Section { name, table, seen: Vec::new() }
    }

    fn key(&self, k: &str) -> String {
        format!("{}.{k}", self.name)
    }

    fn get(&mut self, k: &'static str) -> Option<&'a Value> {
        self.seen.push(k);
        self.table.and_then(|t| t.get(k))
    }

    fn type_err<T>(&self, k: &str, want: &str, got: &Value) -> Result<T, ConfigError> {
        err(self.key(k), format!("expected {want}, found {}", got.type_str()))
    }

    fn opt_f64(&mut self, k: &'static str) -> Result<Option<f64>, ConfigError> {
        match self.get(k) {
            None => Ok(None),
            Some(Value::Float(x)) if x.is_finite() => Ok(Some(*x)),
            Some(Value::Float(x)) => err(self.key(k), format!("must be finite, got {x}")),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => self.type_err(k, "a number", v),
        }
    }

    fn f64(&mut self, k: &'static str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.opt_f64(k)?.unwrap_or(default))
    }

    fn opt_f64_pos(&mut self, k: &'static str) -> Result<Option<f64>, ConfigError> {
        match self.opt_f64(k)? {
            Some(x) if x <= 0.0 => err(self.key(k), format!("must be positive, got {x}")),
            v => Ok(v),
        }
    }

    fn f64_pos(&mut self, k: &'static str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.opt_f64_pos(k)?.unwrap_or(default))
    }

    fn f64_nonneg(&mut self, k: &'static str, default: f64) -> Result<f64, ConfigError> {
        let x = self.f64(k, default)?;
        if x < 0.0 {
            return err(self.key(k), format!("must be non-negative, got {x}"));
        }
        Ok(x)
    }

    fn opt_int(&mut self, k: &'static str) -> Result<Option<i64>, ConfigError> {
        match self.get(k) {
            None => Ok(None),
            Some(Value::Integer(i)) => Ok(Some(*i)),
            Some(v) => self.type_err(k, "an integer", v),
        }
    }

    fn opt_usize_min(&mut self, k: &'static str, min: usize) -> Result<Option<usize>, ConfigError> {
        match self.opt_int(k)? {
            None => Ok(None),
            Some(i) if i < min as i64 => err(self.key(k), format!("must be at least {min}, got {i}")),
            Some(i) => Ok(Some(i as usize)),
        }
    }

    fn usize_min(&mut self, k: &'static str, default: usize, min: usize) -> Result<usize, ConfigError> {
        Ok(self.opt_usize_min(k, min)?.unwrap_or(default))
    }

    fn u64(&mut self, k: &'static str, default: u64) -> Result<u64, ConfigError> {
        match self.opt_int(k)? {
            None => Ok(default),
            Some(i) if i < 0 => err(self.key(k), format!("must be non-negative, got {i}")),
            Some(i) => Ok(i as u64),
        }
    }

    fn bool(&mut self, k: &'static str, default: bool) -> Result<bool, ConfigError> {
        match self.get(k) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(v) => self.type_err(k, "a boolean", v),
        }
    }

    fn string(&mut self, k: &'static str, default: &str) -> Result<String, ConfigError> {
        match self.get(k) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(v) => self.type_err(k, "a string", v),
        }
    }

    fn triple(&self, k: &str, v: &Value) -> Result<[f64; 3], ConfigError> {
        let bad = || err(self.key(k), "expected an array of three numbers");
        let Some(a) = v.as_array() else { return bad() };
        if a.len() != 3 {
            return bad();
        }
        let mut out = [0.0; 3];
        for (o, x) in out.iter_mut().zip(a) {
            *o = match x {
                Value::Float(f) if f.is_finite() => *f,
                Value::Integer(i) => *i as f64,
                _ => return bad(),
            };
        }
        Ok(out)
    }

    fn vec3(&mut self, k: &'static str, default: [f64; 3]) -> Result<[f64; 3], ConfigError> {
        match self.get(k) {
            None => Ok(default),
            Some(v) => self.triple(k, v),
        }
    }

    fn points(&mut self, k: &'static str) -> Result<Vec<[f64; 3]>, ConfigError> {
        let Some(v) = self.get(k) else {
            return err(self.key(k), "required for waypoint trajectories");
        };
        let Some(a) = v.as_array() else {
            return self.type_err(k, "an array of [x, y, z] points", v);
        };
        if a.len() < 2 {
            return err(self.key(k), format!("needs at least two points, got {}", a.len()));
        }
        a.iter().map(|p| self.triple(k, p)).collect()
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !self.seen.contains(&k.as_str()) {
                    let mut known = self.seen.clone();
                    known.sort_unstable();
                    known.dedup();
                    return err(self.key(k), format!("unknown key (known: {})", known.join(", ")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("[odom]\ndivisr = 4\n").unwrap_err();
        assert_eq!(e.key, "odom.divisr");
        assert!(e.to_string().contains("odom.divisr"));
    }

    #[test]
    fn unknown_section_is_named() {
        let e = RunConfig::parse("[lidar]\nrows = 4\n").unwrap_err();
        assert_eq!(e.key, "lidar");
    }

    #[test]
    fn type_and_range_errors_are_named() {
        assert_eq!(RunConfig::parse("[sensor]\nrows = \"64\"\n").unwrap_err().key, "sensor.rows");
        assert_eq!(RunConfig::parse("[odom]\ndivisor = 3\n").unwrap_err().key, "odom.divisor");
        assert_eq!(RunConfig::parse("[icp]\nassoc_tol = -1\n").unwrap_err().key, "icp.assoc_tol");
        assert_eq!(RunConfig::parse("[sim]\nscene = \"moon\"\n").unwrap_err().key, "sim.scene");
        assert_eq!(RunConfig::parse("[trajectory]\nkind = \"spiral\"\n").unwrap_err().key, "trajectory.kind");
        assert_eq!(RunConfig::parse("[trajectory]\nkind = \"waypoints\"\n").unwrap_err().key, "trajectory.points");
        assert_eq!(RunConfig::parse("[grid]\ncell_cols = 48\n").unwrap_err().key, "grid.cell_cols");
    }

    #[test]
    fn keys_are_applied() {
        let cfg = RunConfig::parse(
            "[odom]\ndivisor = 8\nworkers = 2\n[sensor]\nrows = 32\ncols = 512\n\
             [trajectory]\nkind = \"static\"\nduration = 2.5\n[sim]\nscene = \"room\"\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.odom.divisor, 8);
        assert_eq!(cfg.odom.workers, 2);
        assert_eq!((cfg.odom.sensor.rows, cfg.odom.sensor.cols), (32, 512));
        assert_eq!(cfg.sim.trajectory.duration, 2.5);
        assert_eq!(cfg.sim_config().noise.seed, 9);
        assert_eq!(cfg.scene().name, "room");
    }

    #[test]
    fn overrides_win_and_are_checked() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides { divisor: Some(4), seed: Some(3), duration: Some(1.5), ..Default::default() }).unwrap();
        assert_eq!(cfg.odom.divisor, 4);
        assert_eq!(cfg.sim.seed, 3);
        assert_eq!(cfg.sim.trajectory.duration, 1.5);
        let e = cfg.apply(&Overrides { divisor: Some(5), ..Default::default() }).unwrap_err();
        assert_eq!(e.key, "--divisor");
    }
}
