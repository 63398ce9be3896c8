//! Streaming odometry pipeline.
//!
//! Each block goes through: push into the sweep buffer, predict the local
//! trajectory, score the new grid columns, register the whole buffer against
//! the pano, fuse the ejected columns, and possibly schedule a pano render
//! at the current pose.

use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DirectionTable, LidarModel, ModelError, Pose, DEFAULT_MIN_RANGE};
use crate::grid::{CellState, FeatureGrid, DEFAULT_MAX_CANDIDATES, DEFAULT_MAX_SMOOTH, DEFAULT_MAX_VAR};
use crate::icp::{self, IcpParams, SolveReport};
use crate::pano::{DepthPano, FusionParams, DEFAULT_FUSE_TOL, DEFAULT_K_MAX};
use crate::sweep::{ColumnBlock, EjectedSpan, SweepBuffer, SweepError};
use crate::traj::{ImuSample, LocalTrajectory, TrajError};

pub const DEFAULT_Q_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error)]
pub enum OdomError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Imu(#[from] TrajError),
    #[error("block starting at t={got} is not after the previous block end t={expected}")]
    OutOfOrder { expected: f64, got: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdomConfig {
    pub sensor: LidarModel,
    pub pano_rows: usize,
    pub pano_cols: usize,
    /// Radians.
    pub pano_vertical_fov: f64,
    pub cell_rows: usize,
    pub cell_cols: usize,
    pub max_smooth: f64,
    pub max_var: f64,
    pub nms: bool,
    /// Candidate budget per block, 0 for no limit.
    pub max_candidates: usize,
    pub fuse_tol: f64,
    pub k_max: u8,
    pub assoc_tol: f64,
    pub q_threshold: f64,
    pub divisor: usize,
    pub workers: usize,
    pub huber_delta: f64,
    pub chi2_gate: Option<f64>,
    pub max_outer: usize,
    pub max_inner: usize,
    pub min_matches: usize,
    pub lm_lambda: f64,
    /// Pano window for target statistics; derived from the cell size when
    /// unset.
    pub window_rows: Option<usize>,
    pub window_cols: Option<usize>,
}

/// 64 beams over 45°, 1024 columns, 10 Hz. Beams are two default pano rows
/// apart; the field of view is tilted down by half a pano row so that beams
/// land on pano row centres rather than on row boundaries.
pub fn default_sensor() -> LidarModel {
    LidarModel {
        rows: 64,
        cols: 1024,
        vertical_fov: 45.0_f64.to_radians(),
        elevation_offset: -(45.0_f64 / 256.0).to_radians(),
        sweep_period: 0.1,
        min_range: DEFAULT_MIN_RANGE,
    }
}

impl Default for OdomConfig {
    fn default() -> Self {
        Self {
            sensor: default_sensor(),
            pano_rows: 256,
            pano_cols: 1024,
            pano_vertical_fov: std::f64::consts::FRAC_PI_2,
            cell_rows: 2,
            cell_cols: 16,
            max_smooth: DEFAULT_MAX_SMOOTH,
            max_var: DEFAULT_MAX_VAR,
            nms: true,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            fuse_tol: DEFAULT_FUSE_TOL,
            k_max: DEFAULT_K_MAX,
            assoc_tol: icp::DEFAULT_ASSOC_TOL,
            q_threshold: DEFAULT_Q_THRESHOLD,
            divisor: 1,
            workers: 1,
            huber_delta: 1.0,
            chi2_gate: None,
            max_outer: 5,
            max_inner: 3,
            min_matches: 10,
            lm_lambda: 1e-4,
            window_rows: None,
            window_cols: None,
        }
    }
}

impl OdomConfig {
    pub fn validate(&self) -> Result<(), OdomError> {
        let bad = |m: String| Err(OdomError::Config(m));
        self.sensor.validate()?;
        self.pano_model().validate()?;
        if ![1, 2, 4, 8].contains(&self.divisor) {
            return bad(format!("divisor must be 1, 2, 4 or 8, got {}", self.divisor));
        }
        let cols = self.sensor.cols;
        if cols % self.divisor != 0 || (cols / self.divisor) % self.cell_cols.max(1) != 0 {
            return bad(format!(
                "block width {cols}/{} must be a multiple of cell_cols {}",
                self.divisor, self.cell_cols
            ));
        }
        if self.cell_rows == 0 || self.cell_cols == 0 || self.sensor.rows % self.cell_rows != 0 {
            return bad(format!(
                "cell {}x{} does not tile {} rows",
                self.cell_rows, self.cell_cols, self.sensor.rows
            ));
        }
        if !(self.q_threshold > 0.0 && self.q_threshold <= 1.0) {
            return bad(format!("q_threshold must lie in (0, 1], got {}", self.q_threshold));
        }
        if self.k_max == 0 {
            return bad("k_max must be at least 1".into());
        }
        for (name, v) in [
            ("fuse_tol", self.fuse_tol),
            ("assoc_tol", self.assoc_tol),
            ("huber_delta", self.huber_delta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("max_smooth", self.max_smooth), ("max_var", self.max_var), ("lm_lambda", self.lm_lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return bad("max_outer and max_inner must be at least 1".into());
        }
        Ok(())
    }

    pub fn pano_model(&self) -> LidarModel {
        LidarModel {
            rows: self.pano_rows,
            cols: self.pano_cols,
            vertical_fov: self.pano_vertical_fov,
            elevation_offset: 0.0,
            sweep_period: self.sensor.sweep_period,
            min_range: self.sensor.min_range,
        }
    }

    pub fn block_width(&self) -> usize {
        self.sensor.cols / self.divisor
    }

    /// Cell footprint in pano pixels, at least 3×3: the span from the first
    /// to the last beam (or firing) of a cell, inclusive. A footprint below
    /// the minimum grows in steps of two so the window stays centred on the
    /// cell mean.
    pub fn window(&self) -> (usize, usize) {
        fn span(cells: usize, scale: f64) -> usize {
            let n = ((cells.max(1) - 1) as f64 * scale + 1.0).round() as usize;
            if n >= 3 {
                n
            } else if n % 2 == 0 {
                4
            } else {
                3
            }
        }
        let pano = self.pano_model();
        let rows = self
            .window_rows
            .unwrap_or_else(|| span(self.cell_rows, self.sensor.row_height() / pano.row_height()));
        let cols = self
            .window_cols
            .unwrap_or_else(|| span(self.cell_cols, self.sensor.col_width() / pano.col_width()));
        (rows.max(3), cols.max(3))
    }

    pub fn icp_params(&self) -> IcpParams {
        let (window_rows, window_cols) = self.window();
        IcpParams {
            assoc_tol: self.assoc_tol,
            window_rows,
            window_cols,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            min_matches: self.min_matches,
            lm_lambda: self.lm_lambda,
            huber_delta: self.huber_delta,
            chi2_gate: self.chi2_gate,
            ..IcpParams::default()
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            fuse_tol: self.fuse_tol,
            k_max: self.k_max,
        }
    }
}

/// Per-stage wall time of one block, microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTiming {
    pub feature: u64,
    pub associate: u64,
    pub solve: u64,
    pub fuse: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdomOutput {
    /// End time of the block (time of the column after the newest one).
    pub time: f64,
    /// Sensor pose in the odometry frame.
    pub pose: Pose,
    /// `None` until the pano exists.
    pub report: Option<SolveReport>,
    pub timing: StageTiming,
    pub q: Option<f64>,
    /// Columns zero-filled in front of this block.
    pub gap_columns: usize,
    /// A pano swap happened at the start of this block.
    pub relocated: bool,
    /// A render was requested at the end of this block.
    pub render_requested: bool,
}

impl OdomOutput {
    pub fn degenerate(&self) -> bool {
        self.report.is_some_and(|r| r.degenerate)
    }
}

/// Match quality: matched over candidate cells, 0 without candidates.
pub fn match_quality(report: &SolveReport) -> f64 {
    if report.candidate_count == 0 {
        0.0
    } else {
        report.match_count as f64 / report.candidate_count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelocationDecision {
    Keep,
    Scheduled,
    /// A render is already in flight; the request is merged into it.
    Coalesced,
}

struct PendingRender {
    rx: mpsc::Receiver<DepthPano>,
    /// Buffer columns pushed before the request; all of them are fused
    /// into the render.
    prefused: u64,
}

pub struct Odometry {
    cfg: OdomConfig,
    table: DirectionTable,
    icp: IcpParams,
    buffer: SweepBuffer,
    grid: FeatureGrid,
    traj: Option<LocalTrajectory>,
    pano: Option<DepthPano>,
    ejected: EjectedSpan,
    /// Columns with a push index below this are already in the pano and are
    /// skipped when they leave the buffer.
    prefused: u64,
    pool: Arc<rayon::ThreadPool>,
    render_pool: Arc<rayon::ThreadPool>,
    pending: Option<PendingRender>,
    imu_backlog: Vec<ImuSample>,
    relocations: usize,
    renders: usize,
    coalesced: usize,
    last_end: Option<f64>,
}

impl Odometry {
    pub fn new(cfg: OdomConfig) -> Result<Self, OdomError> {
        cfg.validate()?;
        let sensor = cfg.sensor;
        let grid = FeatureGrid::new(sensor.rows, sensor.cols, cfg.cell_rows, cfg.cell_cols)
            .map_err(|e| OdomError::Config(e.to_string()))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| OdomError::Config(e.to_string()))?;
        let render_pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| OdomError::Config(e.to_string()))?;
        Ok(Self {
            table: DirectionTable::new(&sensor),
            icp: cfg.icp_params(),
            buffer: SweepBuffer::new(sensor.rows, sensor.cols, sensor.firing_interval()),
            grid,
            traj: None,
            pano: None,
            ejected: EjectedSpan::default(),
            prefused: 0,
            pool: Arc::new(pool),
            render_pool: Arc::new(render_pool),
            pending: None,
            imu_backlog: Vec::new(),
            relocations: 0,
            renders: 0,
            coalesced: 0,
            last_end: None,
            cfg,
        })
    }

    pub fn config(&self) -> &OdomConfig {
        &self.cfg
    }

    pub fn pano(&self) -> Option<&DepthPano> {
        self.pano.as_ref()
    }

    pub fn trajectory(&self) -> Option<&LocalTrajectory> {
        self.traj.as_ref()
    }

    pub fn buffer(&self) -> &SweepBuffer {
        &self.buffer
    }

    pub fn grid(&self) -> &FeatureGrid {
        &self.grid
    }

    pub fn relocations(&self) -> usize {
        self.relocations
    }

    pub fn renders_started(&self) -> usize {
        self.renders
    }

    pub fn coalesced_requests(&self) -> usize {
        self.coalesced
    }

    pub fn render_in_flight(&self) -> bool {
        self.pending.is_some()
    }

    /// Queue an IMU sample. Samples must be strictly time-ordered.
    pub fn push_imu(&mut self, sample: ImuSample) -> Result<(), OdomError> {
        match &mut self.traj {
            Some(t) => t.push_imu(sample)?,
            None => {
                if let Some(last) = self.imu_backlog.last() {
                    if sample.time <= last.time {
                        return Err(TrajError::ImuOutOfOrder {
                            last: last.time,
                            got: sample.time,
                        }
                        .into());
                    }
                }
                self.imu_backlog.push(sample);
            }
        }
        Ok(())
    }

    /// Process one block of `cols / divisor` columns. Missing columns
    /// between the previous block and this one are zero-filled first.
    pub fn process_block(&mut self, block: &ColumnBlock) -> Result<OdomOutput, OdomError> {
        let width = self.cfg.block_width();
        if block.width != width || block.rows != self.cfg.sensor.rows || block.start_col % width != 0 {
            return Err(SweepError::Shape(format!(
                "expected aligned {}x{} blocks, got {}x{} at column {}",
                self.cfg.sensor.rows, width, block.rows, block.width, block.start_col
            ))
            .into());
        }
        let dt = self.buffer.firing_interval();
        let mut gap_columns = 0;
        if let Some(end) = self.last_end {
            let missing = ((block.t_start - end) / dt).round();
            if missing < 0.0 {
                return Err(OdomError::OutOfOrder {
                    expected: end,
                    got: block.t_start,
                });
            }
            let missing = missing as usize;
            let expected = self.buffer.expected_col().unwrap_or(0);
            let cols = self.cfg.sensor.cols;
            if (expected + missing) % cols != block.start_col || missing % width != 0 {
                return Err(SweepError::Gap {
                    expected,
                    received: block.start_col,
                }
                .into());
            }
            for k in 0..missing / width {
                let fill = ColumnBlock::zeros(
                    (expected + k * width) % cols,
                    block.rows,
                    width,
                    end + (k * width) as f64 * dt,
                );
                self.step(&fill)?;
            }
            gap_columns = missing;
        }
        let mut out = self.step(block)?;
        out.gap_columns = gap_columns;
        Ok(out)
    }

    fn step(&mut self, block: &ColumnBlock) -> Result<OdomOutput, OdomError> {
        let start = Instant::now();
        let relocated = self.finish_render();
        let pool = Arc::clone(&self.pool);
        let mut out = pool.install(|| self.step_inner(block))?;
        out.relocated = relocated;
        out.timing.total = start.elapsed().as_micros() as u64;
        Ok(out)
    }

    fn step_inner(&mut self, block: &ColumnBlock) -> Result<OdomOutput, OdomError> {
        let cfg = &self.cfg;
        let cols = cfg.sensor.cols;
        let cc = cfg.cell_cols;
        let dt = self.buffer.firing_interval();
        let end_time = block.t_start + block.width as f64 * dt;
        let mut timing = StageTiming::default();

        if self.traj.is_none() {
            // Laid out to end one block early; the prediction below shifts
            // it onto this block.
            let t0_end = end_time - block.width as f64 * dt;
            let mut t = LocalTrajectory::new(self.grid.cols, cc, dt, t0_end, Pose::identity());
            for s in self.imu_backlog.drain(..) {
                t.push_imu(s)?;
            }
            self.traj = Some(t);
        }

        self.buffer.push_into(block, &mut self.ejected)?;
        let traj = self.traj.as_mut().expect("trajectory");
        let fresh = block.width - self.ejected.width;
        let first_ejected = self.buffer.pushed_columns().saturating_sub((cols + self.ejected.width) as u64);
        let skip = self.prefused.saturating_sub(first_ejected).min(self.ejected.width as u64) as usize;
        let ejected_poses = traj.column_poses(fresh + skip, self.ejected.width - skip);
        self.ejected.drop_front(skip, cols);
        traj.predict(block.width / cc);

        let t_feature = Instant::now();
        self.grid
            .score_columns(&self.buffer, &self.table, block.start_col / cc, block.width / cc);
        let candidates = self.grid.filter(cfg.max_smooth, cfg.max_var, cfg.nms);
        let candidates = self.grid.thin(candidates, cfg.max_candidates);
        timing.feature = t_feature.elapsed().as_micros() as u64;

        let mut report = None;
        if let Some(pano) = &self.pano {
            let oldest = self.buffer.oldest_col().unwrap_or(0);
            let mut it = icp::IcpTiming::default();
            let (rep, matches) = icp::register_timed(&self.grid, &candidates, traj, pano, oldest, &self.icp, &mut it);
            for m in &matches {
                self.grid.cells[m.cell].state = CellState::Matched;
            }
            timing.associate = it.associate.as_micros() as u64;
            timing.solve = it.solve.as_micros() as u64;
            report = Some(rep);
        }

        let t_fuse = Instant::now();
        if let Some(pano) = &mut self.pano {
            if !self.ejected.is_empty() {
                pano.add_sweep_span(&self.ejected, &ejected_poses, &self.table);
            }
        } else if self.buffer.is_warm() {
            // Cold start: the first full revolution becomes the pano.
            let mut pano = DepthPano::new(cfg.pano_model(), Pose::identity(), cfg.fusion_params());
            let oldest = self.buffer.oldest_col().unwrap_or(0);
            let poses = traj.column_poses(0, cols);
            pano.add_buffer_columns(&self.buffer, oldest, cols, &poses, &self.table);
            self.pano = Some(pano);
            self.prefused = self.buffer.pushed_columns();
        }
        timing.fuse = t_fuse.elapsed().as_micros() as u64;

        let q = report.as_ref().map(match_quality);
        let mut render_requested = false;
        if let Some(q) = q {
            render_requested = self.maybe_relocate(q) == RelocationDecision::Scheduled;
        }
        let traj = self.traj.as_ref().expect("trajectory");
        let anchor = self.pano.as_ref().map(|p| p.pose).unwrap_or_default();
        let last = traj.last();
        self.last_end = Some(end_time);
        Ok(OdomOutput {
            time: last.time,
            pose: anchor.compose(&last.pose()),
            report,
            timing,
            q,
            gap_columns: 0,
            relocated: false,
            render_requested,
        })
    }

    /// Schedule a render of a new pano at the current pose when `q` is
    /// strictly below the threshold.
    pub fn maybe_relocate(&mut self, q: f64) -> RelocationDecision {
        if q >= self.cfg.q_threshold {
            return RelocationDecision::Keep;
        }
        let (Some(pano), Some(traj)) = (&self.pano, &self.traj) else {
            return RelocationDecision::Keep;
        };
        if self.pending.is_some() {
            self.coalesced += 1;
            return RelocationDecision::Coalesced;
        }
        let target = pano.pose.compose(&traj.last().pose());
        let snapshot = pano.clone();
        // The warp leaves holes where surfaces come closer; the current
        // buffer fills them from the new viewpoint.
        let to_new = target.inverse().compose(&pano.pose);
        let cols = self.buffer.cols();
        let poses: Vec<Pose> = traj.column_poses(0, cols).iter().map(|p| to_new.compose(p)).collect();
        let buffer = self.buffer.clone();
        let oldest = buffer.oldest_col().unwrap_or(0);
        let table = self.table.clone();
        let (tx, rx) = mpsc::channel();
        self.render_pool.spawn(move || {
            let mut new = snapshot.render(&target);
            new.add_buffer_columns(&buffer, oldest, cols, &poses, &table);
            let _ = tx.send(new);
        });
        self.renders += 1;
        self.pending = Some(PendingRender { rx, prefused: self.buffer.pushed_columns() });
        RelocationDecision::Scheduled
    }

    /// Swap in a finished render. Blocks until the render is done, so the
    /// swap always happens at the first block boundary after the request.
    fn finish_render(&mut self) -> bool {
        let Some(p) = self.pending.take() else {
            return false;
        };
        let Ok(new) = p.rx.recv() else {
            return false;
        };
        if let (Some(old), Some(traj)) = (&self.pano, &mut self.traj) {
            let new_from_old = new.pose.inverse().compose(&old.pose);
            traj.reexpress(&new_from_old);
        }
        self.pano = Some(new);
        self.prefused = p.prefused;
        self.relocations += 1;
        true
    }

    /// Wait for an in-flight render and swap it in.
    pub fn flush(&mut self) -> bool {
        self.finish_render()
    }
}

/// Groups fixed-width packets into aligned blocks of `cols / divisor`
/// columns, zero-filling columns that never arrived.
#[derive(Clone, Debug)]
pub struct BlockAssembler {
    rows: usize,
    cols: usize,
    width: usize,
    dt: f64,
    current: Option<ColumnBlock>,
    filled: usize,
    zero_filled: usize,
    next: Option<(usize, f64)>,
}

/// A completed block and the number of its columns that were zero-filled.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledBlock {
    pub block: ColumnBlock,
    pub zero_filled: usize,
}

impl BlockAssembler {
    pub fn new(model: &LidarModel, divisor: usize) -> Self {
        Self {
            rows: model.rows,
            cols: model.cols,
            width: model.cols / divisor,
            dt: model.firing_interval(),
            current: None,
            filled: 0,
            zero_filled: 0,
            next: None,
        }
    }

    pub fn block_width(&self) -> usize {
        self.width
    }

    /// Append a packet; returns the blocks it completed.
    pub fn push(&mut self, packet: &ColumnBlock) -> Result<Vec<AssembledBlock>, SweepError> {
        if packet.rows != self.rows || packet.start_col + packet.width > self.cols {
            return Err(SweepError::Shape(format!(
                "packet {}x{} at column {} does not fit {}x{}",
                packet.rows, packet.width, packet.start_col, self.rows, self.cols
            )));
        }
        let mut out = Vec::new();
        match self.next {
            None => {
                // Pad from the enclosing block boundary.
                let lead = packet.start_col % self.width;
                self.begin(packet.start_col - lead, packet.t_start - lead as f64 * self.dt);
                self.fill_zeros(lead, &mut out);
            }
            Some((col, t)) => {
                let missing = ((packet.t_start - t) / self.dt).round();
                if missing < 0.0 || (col + missing as usize) % self.cols != packet.start_col {
                    return Err(SweepError::Gap {
                        expected: col,
                        received: packet.start_col,
                    });
                }
                self.fill_zeros(missing as usize, &mut out);
            }
        }
        for j in 0..packet.width {
            self.put_column(|r| packet.range(r, j), &mut out);
        }
        self.next = Some((
            packet.end_col(self.cols),
            packet.t_start + packet.width as f64 * self.dt,
        ));
        Ok(out)
    }

    /// Zero-fill and emit the partially assembled block, if any.
    pub fn finish(&mut self) -> Option<AssembledBlock> {
        if self.filled == 0 {
            return None;
        }
        let mut out = Vec::new();
        let rest = self.width - self.filled;
        self.fill_zeros(rest, &mut out);
        out.pop()
    }

    fn begin(&mut self, start_col: usize, t_start: f64) {
        self.current = Some(ColumnBlock::zeros(start_col, self.rows, self.width, t_start));
        self.filled = 0;
        self.zero_filled = 0;
    }

    fn fill_zeros(&mut self, n: usize, out: &mut Vec<AssembledBlock>) {
        for _ in 0..n {
            self.zero_filled += 1;
            self.put_column(|_| 0.0, out);
        }
    }

    fn put_column<F: Fn(usize) -> f32>(&mut self, value: F, out: &mut Vec<AssembledBlock>) {
        let b = self.current.as_mut().expect("begin() runs before the first column");
        for r in 0..self.rows {
            b.ranges[r * self.width + self.filled] = value(r);
        }
        self.filled += 1;
        if self.filled == self.width {
            let next_start = b.end_col(self.cols);
            let next_t = b.t_start + self.width as f64 * self.dt;
            let done = self.current.take().expect("block");
            out.push(AssembledBlock {
                block: done,
                zero_filled: self.zero_filled,
            });
            self.begin(next_start, next_t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn small_config() -> OdomConfig {
        OdomConfig {
            sensor: LidarModel {
                rows: 32,
                cols: 512,
                elevation_offset: -(45.0_f64 / 128.0).to_radians(),
                ..default_sensor()
            },
            pano_rows: 128,
            pano_cols: 512,
            ..OdomConfig::default()
        }
    }

    /// Ranges of a sensor at the centre of a 10×10×3 m box, 1.5 m above
    /// the floor.
    fn box_block(model: &LidarModel, start_col: usize, width: usize, t: f64) -> ColumnBlock {
        let mut b = ColumnBlock::zeros(start_col, model.rows, width, t);
        for r in 0..model.rows {
            for j in 0..width {
                let d = model.direction(r, (start_col + j) % model.cols);
                let mut best = f64::INFINITY;
                for (k, lo, hi) in [(0, -5.0, 5.0), (1, -5.0, 5.0), (2, -1.5, 1.5)] {
                    let v: f64 = d[k];
                    if v > 1e-12 {
                        best = best.min(hi / v);
                    } else if v < -1e-12 {
                        best = best.min(lo / v);
                    }
                }
                b.ranges[r * width + j] = best as f32;
            }
        }
        b
    }

    #[test]
    fn defaults_validate() {
        let cfg = OdomConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.window(), (3, 16));
        assert_eq!(cfg.block_width(), 1024);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            OdomConfig { divisor: 3, ..OdomConfig::default() },
            OdomConfig { q_threshold: 0.0, ..OdomConfig::default() },
            OdomConfig { q_threshold: 1.5, ..OdomConfig::default() },
            OdomConfig { cell_cols: 48, ..OdomConfig::default() },
            OdomConfig { workers: 0, ..OdomConfig::default() },
            OdomConfig { k_max: 0, ..OdomConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(OdomError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn quality_boundary() {
        let r = SolveReport {
            match_count: 45,
            candidate_count: 50,
            ..SolveReport::default()
        };
        assert_eq!(match_quality(&r), 0.9);
        let none = SolveReport::default();
        assert_eq!(match_quality(&none), 0.0);
        let mut odo = Odometry::new(small_config()).unwrap();
        assert_eq!(odo.maybe_relocate(0.9), RelocationDecision::Keep);
    }

    #[test]
    fn stationary_box_run() {
        let cfg = OdomConfig { divisor: 4, ..small_config() };
        let model = cfg.sensor;
        let w = cfg.block_width();
        let dt = model.firing_interval();
        let mut odo = Odometry::new(cfg).unwrap();
        let mut outs = Vec::new();
        for k in 0..24 {
            let start = (k * w) % model.cols;
            outs.push(odo.process_block(&box_block(&model, start, w, (k * w) as f64 * dt)).unwrap());
        }
        // Pano exists after the first revolution; ICP from block 4 on.
        assert!(outs[3].report.is_none());
        assert!(outs[4].report.is_some());
        // The first registration settles on the fixed point of the window
        // versus cell supports; after that the pose must not move.
        let first = outs[4].pose;
        for o in &outs[4..] {
            let rel = first.inverse() * o.pose;
            assert!(rel.translation.norm() < 1e-3, "{:?}", o.pose);
            assert!(rel.rotation.angle() < 0.05f64.to_radians());
        }
        for o in &outs {
            assert!(o.pose.translation.norm() < 5e-3, "{:?}", o.pose);
        }
        for pair in outs.windows(2) {
            assert!(pair[1].time > pair[0].time);
        }
        let q = outs.last().unwrap().q.unwrap();
        assert!(q >= 0.9, "q = {q}");
        assert_eq!(odo.relocations(), 0);
    }

    #[test]
    fn render_requests_coalesce() {
        let cfg = OdomConfig { divisor: 2, ..small_config() };
        let model = cfg.sensor;
        let w = cfg.block_width();
        let dt = model.firing_interval();
        let mut odo = Odometry::new(cfg).unwrap();
        for k in 0..3 {
            odo.process_block(&box_block(&model, (k * w) % model.cols, w, (k * w) as f64 * dt)).unwrap();
        }
        assert_eq!(odo.maybe_relocate(0.5), RelocationDecision::Scheduled);
        assert_eq!(odo.maybe_relocate(0.1), RelocationDecision::Coalesced);
        assert!(odo.flush());
        assert_eq!(odo.renders_started(), 1);
        assert_eq!(odo.relocations(), 1);
        assert_eq!(odo.coalesced_requests(), 1);
    }

    #[test]
    fn gap_is_zero_filled() {
        let cfg = OdomConfig { divisor: 8, ..small_config() };
        let model = cfg.sensor;
        let w = cfg.block_width();
        let dt = model.firing_interval();
        let mut odo = Odometry::new(cfg).unwrap();
        odo.process_block(&box_block(&model, 0, w, 0.0)).unwrap();
        let out = odo.process_block(&box_block(&model, 3 * w, w, (3 * w) as f64 * dt)).unwrap();
        assert_eq!(out.gap_columns, 2 * w);
        assert_eq!(odo.buffer().pushed_columns(), 4 * w as u64);
        assert_eq!(odo.buffer().range(10, w + 5), 0.0);
        let back = odo.process_block(&box_block(&model, 0, w, 0.0));
        assert!(matches!(back, Err(OdomError::OutOfOrder { .. })));
    }

    #[test]
    fn imu_backlog_must_be_ordered() {
        let mut odo = Odometry::new(small_config()).unwrap();
        let s = ImuSample { time: 0.5, accel: Vec3::zeros(), gyro: Vec3::zeros() };
        odo.push_imu(s).unwrap();
        assert!(odo.push_imu(s).is_err());
    }

    fn packet(model: &LidarModel, start: usize, t: f64) -> ColumnBlock {
        let mut p = ColumnBlock::zeros(start, model.rows, 16, t);
        for r in 0..model.rows {
            for j in 0..16 {
                p.ranges[r * 16 + j] = (start + j) as f32 + 0.5;
            }
        }
        p
    }

    #[test]
    fn assembler_groups_packets() {
        let model = small_config().sensor;
        let dt = model.firing_interval();
        let mut asm = BlockAssembler::new(&model, 8);
        assert_eq!(asm.block_width(), 64);
        let mut blocks = Vec::new();
        for k in 0..64 {
            let start = (k * 16) % 512;
            blocks.extend(asm.push(&packet(&model, start, (k * 16) as f64 * dt)).unwrap());
        }
        assert_eq!(blocks.len(), 16);
        for (i, b) in blocks.iter().enumerate() {
            assert_eq!(b.block.start_col, (i * 64) % 512);
            assert_eq!(b.zero_filled, 0);
            assert!((b.block.t_start - (i * 64) as f64 * dt).abs() < 1e-12);
            assert_eq!(b.block.range(3, 5), ((i * 64) % 512 + 5) as f32 + 0.5);
        }
        assert!(asm.finish().is_none());
    }

    #[test]
    fn assembler_fills_gaps_and_leading_columns() {
        let model = small_config().sensor;
        let dt = model.firing_interval();
        let mut asm = BlockAssembler::new(&model, 8);
        // Starts mid-block at column 32.
        assert!(asm.push(&packet(&model, 32, 32.0 * dt)).unwrap().is_empty());
        let done = asm.push(&packet(&model, 48, 48.0 * dt)).unwrap();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].zero_filled, 32);
        assert_eq!(done[0].block.range(0, 0), 0.0);
        assert_eq!(done[0].block.range(0, 40), 40.5);
        // Skip columns 64..96.
        assert!(asm.push(&packet(&model, 96, 96.0 * dt)).unwrap().is_empty());
        let tail = asm.finish().unwrap();
        assert_eq!(tail.zero_filled, 64 - 16);
        assert_eq!(tail.block.range(0, 0), 0.0);
        assert_eq!(tail.block.range(0, 32), 96.5);
        assert!(asm.push(&packet(&model, 0, 0.0)).is_err());
    }
}
