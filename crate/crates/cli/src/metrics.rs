//! The metrics document written next to every trajectory.

use serde::Serialize;
use spinodom::{OdomOutput, Odometry, Pose};

use crate::config::RunConfig;
use crate::eval;

/// Milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
}

impl Percentiles {
    /// Nearest-rank percentiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Some(Percentiles {
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

/// Per-stage block timings. Association and solve only count blocks in
/// which registration ran; a stage that never ran is `null`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageMetrics {
    pub feature: Option<Percentiles>,
    pub associate: Option<Percentiles>,
    pub solve: Option<Percentiles>,
    pub fuse: Option<Percentiles>,
    pub total: Option<Percentiles>,
}

impl StageMetrics {
    pub fn from_outputs(outputs: &[OdomOutput]) -> Self {
        let ms = |f: &dyn Fn(&OdomOutput) -> u64, registered: bool| {
            let v: Vec<f64> = outputs
                .iter()
                .filter(|o| !registered || o.report.is_some())
                .map(|o| f(o) as f64 / 1e3)
                .collect();
            Percentiles::of(&v)
        };
        StageMetrics {
            feature: ms(&|o| o.timing.feature, false),
            associate: ms(&|o| o.timing.associate, true),
            solve: ms(&|o| o.timing.solve, true),
            fuse: ms(&|o| o.timing.fuse, false),
            total: ms(&|o| o.timing.total, false),
        }
    }
}

/// Every key is always present; values that could not be computed are
/// `null`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    /// `ok`, `framing_error`, `input_error` or `error`.
    pub status: String,
    pub error: Option<String>,
    /// `sim` or `packets`.
    pub source: String,
    pub scene: Option<String>,
    pub seed: Option<u64>,
    pub divisor: usize,
    pub workers: usize,
    pub blocks: usize,
    /// Seconds of input consumed.
    pub duration_s: f64,
    pub output_rate_hz: Option<f64>,
    /// Reference path length when ground truth exists, otherwise the
    /// estimated one.
    pub distance_m: f64,
    pub endpoint_error_m: Option<f64>,
    pub drift_pct: Option<f64>,
    pub relocations: usize,
    pub renders: usize,
    pub gap_columns: usize,
    pub degenerate_blocks: usize,
    pub q_mean: Option<f64>,
    pub q_min: Option<f64>,
    pub timing_ms: StageMetrics,
    pub pano_snapshots: Vec<String>,
}

impl RunMetrics {
    pub fn new(cfg: &RunConfig) -> Self {
        RunMetrics {
            status: "ok".into(),
            error: None,
            source: "sim".into(),
            scene: Some(cfg.sim.scene.clone()),
            seed: Some(cfg.sim.seed),
            divisor: cfg.odom.divisor,
            workers: cfg.odom.workers,
            blocks: 0,
            duration_s: 0.0,
            output_rate_hz: None,
            distance_m: 0.0,
            endpoint_error_m: None,
            drift_pct: None,
            relocations: 0,
            renders: 0,
            gap_columns: 0,
            degenerate_blocks: 0,
            q_mean: None,
            q_min: None,
            timing_ms: StageMetrics::default(),
            pano_snapshots: Vec::new(),
        }
    }

    /// Counts, rate and accuracy. `reference` holds ground-truth poses in
    /// the odometry frame.
    pub fn fill(&mut self, outputs: &[OdomOutput], duration: f64, reference: Option<&[(f64, Pose)]>, odo: &Odometry) {
        self.blocks = outputs.len();
        self.duration_s = duration;
        self.output_rate_hz = (duration > 0.0).then(|| outputs.len() as f64 / duration);
        self.relocations = odo.relocations();
        self.renders = odo.renders_started();
        self.gap_columns = outputs.iter().map(|o| o.gap_columns).sum();
        self.degenerate_blocks = outputs.iter().filter(|o| o.degenerate()).count();
        let qs: Vec<f64> = outputs.iter().filter_map(|o| o.q).collect();
        if !qs.is_empty() {
            self.q_mean = Some(qs.iter().sum::<f64>() / qs.len() as f64);
            self.q_min = qs.iter().copied().reduce(f64::min);
        }
        let est: Vec<(f64, Pose)> = outputs.iter().map(|o| (o.time, o.pose)).collect();
        let path = |p: &[(f64, Pose)]| p.windows(2).map(|w| (w[1].1.translation - w[0].1.translation).norm()).sum();
        self.distance_m = path(&est);
        let Some(reference) = reference else { return };
        let times: Vec<f64> = est.iter().map(|(t, _)| *t).collect();
        let pairs = eval::associate(&est, reference, eval::default_tolerance(&times).max(1e-9));
        let Some((e, r)) = pairs.last() else { return };
        let truth: Vec<(f64, Pose)> = pairs.iter().map(|(_, r)| (0.0, *r)).collect();
        self.distance_m = path(&truth);
        let err = (e.translation - r.translation).norm();
        self.endpoint_error_m = Some(err);
        self.drift_pct = (self.distance_m > 0.0).then(|| 100.0 * err / self.distance_m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_are_monotone_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let p = Percentiles::of(&v).unwrap();
        assert_eq!((p.p50, p.p90, p.p99), (50.0, 90.0, 99.0));
        assert_eq!(p.mean, 50.5);
        assert!(Percentiles::of(&[]).is_none());
        let one = Percentiles::of(&[3.0]).unwrap();
        assert_eq!((one.p50, one.p99), (3.0, 3.0));
    }

    #[test]
    fn every_key_is_present_when_nothing_ran() {
        let m = RunMetrics::new(&RunConfig::default());
        let v = serde_json::to_value(&m).unwrap();
        for k in [
            "status", "error", "source", "scene", "seed", "divisor", "workers", "blocks", "duration_s",
            "output_rate_hz", "distance_m", "endpoint_error_m", "drift_pct", "relocations", "renders",
            "gap_columns", "degenerate_blocks", "q_mean", "q_min", "timing_ms", "pano_snapshots",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        for k in ["feature", "associate", "solve", "fuse", "total"] {
            assert!(v["timing_ms"].get(k).unwrap().is_null());
        }
    }
}
