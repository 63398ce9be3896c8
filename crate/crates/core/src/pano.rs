//! Depth panorama local map.
//!
//! A fixed-size spherical depth image anchored at a pose in the odometry
//! frame. Each pixel keeps a depth and a small fusion counter; new
//! measurements either average in, wear the counter down, or (once it is
//! exhausted) replace the stored depth.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{DirectionTable, Gaussian3, LidarModel, Mat3, Pose, Vec3};
use crate::sweep::{EjectedSpan, SweepBuffer};

pub const DEFAULT_FUSE_TOL: f64 = 0.05;
pub const DEFAULT_K_MAX: u8 = 16;
/// Snapshot depth resolution.
pub const TICKS_PER_METER: f64 = 512.0;

const SNAPSHOT_MAGIC: &[u8; 4] = b"LPAN";
const SNAPSHOT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad snapshot magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported snapshot version {0}")]
    Version(u16),
    #[error("snapshot is {rows}x{cols}, model expects {model_rows}x{model_cols}")]
    Size {
        rows: usize,
        cols: usize,
        model_rows: usize,
        model_cols: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionParams {
    /// Relative depth gate: `|d' − d| ≤ fuse_tol · d` counts as agreement.
    pub fuse_tol: f64,
    pub k_max: u8,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            fuse_tol: DEFAULT_FUSE_TOL,
            k_max: DEFAULT_K_MAX,
        }
    }
}

/// One step of the per-pixel counter filter. Returns the new `(d, k)`.
#[inline]
pub fn fuse_depth(d: f32, k: u8, new: f32, params: &FusionParams) -> (f32, u8) {
    if k == 0 {
        return (new, 1);
    }
    let (df, nf) = (f64::from(d), f64::from(new));
    if (nf - df).abs() <= params.fuse_tol * df {
        let kf = f64::from(k);
        let avg = (kf * df + nf) / (kf + 1.0);
        (avg as f32, k.saturating_add(1).min(params.k_max))
    } else if k == 1 {
        (new, 1)
    } else {
        (d, k - 1)
    }
}

#[derive(Clone, Debug)]
pub struct DepthPano {
    model: LidarModel,
    table: DirectionTable,
    /// Meters, 0 = empty.
    depth: Vec<f32>,
    count: Vec<u8>,
    /// Pano frame expressed in the odometry frame.
    pub pose: Pose,
    pub params: FusionParams,
}

impl DepthPano {
    pub fn new(model: LidarModel, pose: Pose, params: FusionParams) -> Self {
        let n = model.rows * model.cols;
        Self {
            table: DirectionTable::new(&model),
            model,
            depth: vec![0.0; n],
            count: vec![0; n],
            pose,
            params,
        }
    }

    pub fn model(&self) -> &LidarModel {
        &self.model
    }

    pub fn table(&self) -> &DirectionTable {
        &self.table
    }

    pub fn rows(&self) -> usize {
        self.model.rows
    }

    pub fn cols(&self) -> usize {
        self.model.cols
    }

    pub fn depths(&self) -> &[f32] {
        &self.depth
    }

    pub fn counts(&self) -> &[u8] {
        &self.count
    }

    #[inline]
    pub fn depth(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.model.cols + col]
    }

    #[inline]
    pub fn count(&self, row: usize, col: usize) -> u8 {
        self.count[row * self.model.cols + col]
    }

    pub fn valid_pixels(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn clear(&mut self) {
        self.depth.fill(0.0);
        self.count.fill(0);
    }

    pub fn fuse_pixel(&mut self, row: usize, col: usize, d: f32) -> (f32, u8) {
        let i = row * self.model.cols + col;
        let (nd, nk) = fuse_depth(self.depth[i], self.count[i], d, &self.params);
        self.depth[i] = nd;
        self.count[i] = nk;
        (nd, nk)
    }

    /// Fuse an ejected span. `poses[j]` is the sensor pose (pano frame) at
    /// span column `j`. Returns the number of pixels that landed in the pano.
    pub fn add_sweep_span(
        &mut self,
        span: &EjectedSpan,
        poses: &[Pose],
        sensor: &DirectionTable,
    ) -> usize {
        debug_assert_eq!(poses.len(), span.width);
        let cols = sensor.model().cols;
        self.fuse_sources(span.rows, span.width, poses, sensor, |r, j| {
            (span.range(r, j), (span.start_col + j) % cols)
        })
    }

    /// Fuse `width` buffer columns starting at `first_col`, with `poses[j]`
    /// the sensor pose at column `first_col + j`.
    pub fn add_buffer_columns(
        &mut self,
        buffer: &SweepBuffer,
        first_col: usize,
        width: usize,
        poses: &[Pose],
        sensor: &DirectionTable,
    ) -> usize {
        debug_assert_eq!(poses.len(), width);
        let cols = buffer.cols();
        self.fuse_sources(buffer.rows(), width, poses, sensor, |r, j| {
            let c = (first_col + j) % cols;
            (buffer.range(r, c), c)
        })
    }

    /// Projection of every valid source pixel, then a fusion pass in which
    /// each worker owns whole pano rows. Sources hitting the same pixel are
    /// applied in source order, so the result does not depend on the number
    /// of workers.
    fn fuse_sources<F>(
        &mut self,
        rows: usize,
        width: usize,
        poses: &[Pose],
        sensor: &DirectionTable,
        sample: F,
    ) -> usize
    where
        F: Fn(usize, usize) -> (f32, usize) + Sync,
    {
        let model = self.model;
        let hits: Vec<Vec<(u32, f32)>> = (0..rows)
            .into_par_iter()
            .map(|r| {
                let mut out = Vec::with_capacity(width);
                for (j, pose) in poses.iter().enumerate().take(width) {
                    let (range, col) = sample(r, j);
                    if range <= 0.0 {
                        continue;
                    }
                    let p = pose.transform(&sensor.unproject(r, col, f64::from(range)));
                    if let Some(px) = model.project(&p) {
                        out.push(((px.row * model.cols + px.col) as u32, px.range as f32));
                    }
                }
                out
            })
            .collect();
        let sorted = bucket_by_row(hits.iter().flatten().copied(), model.rows, model.cols);
        let (offsets, entries) = (&sorted.0, &sorted.1);
        let params = self.params;
        self.depth
            .par_chunks_mut(model.cols)
            .zip(self.count.par_chunks_mut(model.cols))
            .enumerate()
            .for_each(|(r, (drow, krow))| {
                for &(idx, d) in &entries[offsets[r]..offsets[r + 1]] {
                    let c = idx as usize % model.cols;
                    let (nd, nk) = fuse_depth(drow[c], krow[c], d, &params);
                    drow[c] = nd;
                    krow[c] = nk;
                }
            });
        entries.len()
    }

    /// Gaussian of the valid pixels in a `win_rows × win_cols` window centred
    /// on `(row, col)`, in the pano frame. Rows are clamped to the image and
    /// columns wrap around the panorama. `None` unless strictly more than
    /// half of the window is valid.
    pub fn window_stats(
        &self,
        row: usize,
        col: usize,
        win_rows: usize,
        win_cols: usize,
    ) -> Option<Gaussian3> {
        let (rows, cols) = (self.model.rows, self.model.cols);
        let win_rows = win_rows.min(rows);
        let win_cols = win_cols.min(cols);
        let r0 = row.saturating_sub(win_rows / 2).min(rows - win_rows);
        let c0 = (col + cols - win_cols / 2) % cols;
        self.window_at(r0, c0, win_rows, win_cols)
    }

    /// Like [`DepthPano::window_stats`], but centred on continuous image
    /// coordinates as returned by [`LidarModel::image_coords`] (row `r`
    /// spans `[r, r + 1)`, column `c` is centred on `c`). Even-sized windows
    /// then straddle the projected point instead of leaning to one side.
    pub fn window_stats_near(
        &self,
        row_f: f64,
        col_f: f64,
        win_rows: usize,
        win_cols: usize,
    ) -> Option<Gaussian3> {
        let (rows, cols) = (self.model.rows, self.model.cols);
        let win_rows = win_rows.min(rows);
        let win_cols = win_cols.min(cols);
        let r0 = (row_f - 0.5 - 0.5 * (win_rows - 1) as f64).round();
        let r0 = r0.clamp(0.0, (rows - win_rows) as f64) as usize;
        let c0 = (col_f - 0.5 * (win_cols - 1) as f64).round() as i64;
        let c0 = c0.rem_euclid(cols as i64) as usize;
        self.window_at(r0, c0, win_rows, win_cols)
    }

    fn window_at(&self, r0: usize, c0: usize, win_rows: usize, win_cols: usize) -> Option<Gaussian3> {
        let cols = self.model.cols;
        // One pass; moments are taken about the first valid point so the
        // covariance does not suffer from cancellation far from the origin.
        let mut origin: Option<Vec3> = None;
        let mut sum = Vec3::zeros();
        let mut outer = Mat3::zeros();
        let mut n = 0u32;
        for i in 0..win_rows {
            let r = r0 + i;
            let row = &self.depth[r * cols..(r + 1) * cols];
            for j in 0..win_cols {
                let c = (c0 + j) % cols;
                let d = row[c];
                if d <= 0.0 {
                    continue;
                }
                let p = self.table.unproject(r, c, f64::from(d));
                let o = *origin.get_or_insert(p);
                let q = p - o;
                sum += q;
                outer += q * q.transpose();
                n += 1;
            }
        }
        if 2 * n as usize <= win_rows * win_cols {
            return None;
        }
        let nf = f64::from(n);
        let mean_q = sum / nf;
        let cov = outer / nf - mean_q * mean_q.transpose();
        Some(Gaussian3 {
            mean: origin? + mean_q,
            covariance: (cov + cov.transpose()) * 0.5,
            weight: n,
        })
    }

    /// Forward-warp this panorama to a new anchor pose (odometry frame).
    /// Collisions keep the nearer depth, ties keep the larger counter.
    pub fn render(&self, new_pose: &Pose) -> DepthPano {
        let mut out = DepthPano::new(self.model, *new_pose, self.params);
        let new_from_old = new_pose.inverse().compose(&self.pose);
        let (rows, cols) = (self.model.rows, self.model.cols);
        let model = self.model;
        let hits: Vec<Vec<(u32, f32, u8)>> = (0..rows)
            .into_par_iter()
            .map(|r| {
                let mut v = Vec::new();
                for c in 0..cols {
                    let d = self.depth[r * cols + c];
                    if d <= 0.0 {
                        continue;
                    }
                    let p = new_from_old.transform(&self.table.unproject(r, c, f64::from(d)));
                    if let Some(px) = model.project(&p) {
                        v.push(((px.row * cols + px.col) as u32, px.range as f32, self.count[r * cols + c]));
                    }
                }
                v
            })
            .collect();
        for &(idx, d, k) in hits.iter().flatten() {
            let i = idx as usize;
            let (od, ok) = (out.depth[i], out.count[i]);
            if od == 0.0 || d < od || (d == od && k > ok) {
                out.depth[i] = d;
                out.count[i] = k;
            }
        }
        out
    }

    /// Write the `LPAN` snapshot: little-endian header, u16 depth ticks and
    /// u8 counters, both row-major.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = Vec::with_capacity(46);
        header.extend_from_slice(SNAPSHOT_MAGIC);
        header.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.model.rows as u16).to_le_bytes());
        header.extend_from_slice(&(self.model.cols as u16).to_le_bytes());
        header.extend_from_slice(&((1.0 / TICKS_PER_METER) as f32).to_le_bytes());
        for v in self.pose.to_array() {
            header.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&header)?;
        let mut body = Vec::with_capacity(self.depth.len() * 3);
        for &d in &self.depth {
            body.extend_from_slice(&depth_to_ticks(d).to_le_bytes());
        }
        body.extend_from_slice(&self.count);
        w.write_all(&body)
    }

    /// Read a snapshot written by [`DepthPano::write_snapshot`]. The
    /// projection geometry is not stored and comes from `model`.
    pub fn read_snapshot<R: Read>(
        mut r: R,
        model: LidarModel,
        params: FusionParams,
    ) -> Result<DepthPano, SnapshotError> {
        let header = read_snapshot_header(&mut r)?;
        if header.rows != model.rows || header.cols != model.cols {
            return Err(SnapshotError::Size {
                rows: header.rows,
                cols: header.cols,
                model_rows: model.rows,
                model_cols: model.cols,
            });
        }
        let mut pano = DepthPano::new(model, header.pose, params);
        let (ticks, counts) = read_snapshot_body(&mut r, &header)?;
        for (i, t) in ticks.into_iter().enumerate() {
            pano.depth[i] = (f64::from(t) * f64::from(header.meters_per_tick)) as f32;
        }
        pano.count = counts;
        Ok(pano)
    }
}

/// Parsed `LPAN` header.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotHeader {
    pub rows: usize,
    pub cols: usize,
    pub meters_per_tick: f32,
    pub pose: Pose,
}

pub fn read_snapshot_header<R: Read>(r: &mut R) -> Result<SnapshotHeader, SnapshotError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(SnapshotError::Magic(magic));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != SNAPSHOT_VERSION {
        return Err(SnapshotError::Version(version));
    }
    r.read_exact(&mut b2)?;
    let rows = u16::from_le_bytes(b2) as usize;
    r.read_exact(&mut b2)?;
    let cols = u16::from_le_bytes(b2) as usize;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let meters_per_tick = f32::from_le_bytes(b4);
    let mut pose = [0.0f64; 7];
    for v in pose.iter_mut() {
        r.read_exact(&mut b4)?;
        *v = f64::from(f32::from_le_bytes(b4));
    }
    Ok(SnapshotHeader {
        rows,
        cols,
        meters_per_tick,
        pose: Pose::from_array(pose),
    })
}

/// Depth ticks and counters following a snapshot header.
pub fn read_snapshot_body<R: Read>(
    r: &mut R,
    header: &SnapshotHeader,
) -> Result<(Vec<u16>, Vec<u8>), SnapshotError> {
    let n = header.rows * header.cols;
    let mut raw = vec![0u8; 2 * n];
    r.read_exact(&mut raw)?;
    let ticks = raw
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let mut counts = vec![0u8; n];
    r.read_exact(&mut counts)?;
    Ok((ticks, counts))
}

fn depth_to_ticks(d: f32) -> u16 {
    (f64::from(d) * TICKS_PER_METER).round().clamp(0.0, f64::from(u16::MAX)) as u16
}

/// Stable counting sort of `(pixel index, value)` pairs by pano row.
fn bucket_by_row<I>(items: I, rows: usize, cols: usize) -> (Vec<usize>, Vec<(u32, f32)>)
where
    I: Iterator<Item = (u32, f32)> + Clone,
{
    let mut offsets = vec![0usize; rows + 1];
    for (idx, _) in items.clone() {
        offsets[idx as usize / cols + 1] += 1;
    }
    for r in 0..rows {
        offsets[r + 1] += offsets[r];
    }
    let mut cursor = offsets.clone();
    let mut entries = vec![(0u32, 0f32); offsets[rows]];
    for (idx, d) in items {
        let r = idx as usize / cols;
        entries[cursor[r]] = (idx, d);
        cursor[r] += 1;
    }
    (offsets, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn params() -> FusionParams {
        FusionParams::default()
    }

    #[test]
    fn first_observation() {
        assert_eq!(fuse_depth(0.0, 0, 5.0, &params()), (5.0, 1));
    }

    #[test]
    fn agreement_is_a_fixed_point() {
        assert_eq!(fuse_depth(5.0, 3, 5.0, &params()), (5.0, 4));
        assert_eq!(fuse_depth(5.0, 16, 5.0, &params()), (5.0, 16));
    }

    #[test]
    fn outliers_wear_down_then_replace() {
        let p = params();
        let (d, k) = fuse_depth(5.0, 2, 8.0, &p);
        assert_eq!((d, k), (5.0, 1));
        // Second outlier exhausts the counter and replaces the depth.
        let (d, k) = fuse_depth(d, k, 8.0, &p);
        assert_eq!((d, k), (8.0, 1));
        let (d, k) = fuse_depth(d, k, 8.0, &p);
        assert_eq!((d, k), (8.0, 2));
    }

    #[test]
    fn weighted_average() {
        let (d, k) = fuse_depth(10.0, 3, 10.4, &params());
        assert!((d - 10.1).abs() < 1e-6);
        assert_eq!(k, 4);
    }

    proptest! {
        #[test]
        fn counter_stays_in_bounds(seq in proptest::collection::vec(prop_oneof![1.0f32..2.0, 5.0f32..6.0, 20.0f32..40.0], 1..200)) {
            let p = params();
            let (mut d, mut k) = (0.0f32, 0u8);
            for x in seq {
                let (nd, nk) = fuse_depth(d, k, x, &p);
                prop_assert!(nk >= 1 && nk <= p.k_max);
                // Fusing the stored value itself never moves d or lowers k.
                let (fd, fk) = fuse_depth(nd, nk, nd, &p);
                prop_assert_eq!(fd, nd);
                prop_assert!(fk >= nk);
                d = nd;
                k = nk;
            }
        }

        #[test]
        fn transient_cannot_overwrite_stronger_pixel(k0 in 2u8..=16, n in 1u8..16) {
            prop_assume!(n < k0);
            let p = params();
            let (mut d, mut k) = (5.0f32, k0);
            for _ in 0..n {
                let r = fuse_depth(d, k, 9.0, &p);
                d = r.0;
                k = r.1;
            }
            prop_assert_eq!(d, 5.0);
            prop_assert_eq!(k, k0 - n);
        }
    }

    /// Pano with the same geometry as a sensor centred in an axis-aligned box.
    fn box_depth(model: &LidarModel, half: f64, r: usize, c: usize) -> f64 {
        let d = model.direction(r, c);
        let mut t = f64::INFINITY;
        for (k, h) in [(0, half), (1, half), (2, 2.0)] {
            if d[k].abs() > 1e-12 {
                t = t.min(h / d[k].abs());
            }
        }
        t
    }

    fn room_model() -> LidarModel {
        LidarModel::new(32, 256, FRAC_PI_2, 0.0, 0.1).unwrap()
    }

    fn room_pano() -> DepthPano {
        let model = room_model();
        let mut pano = DepthPano::new(model, Pose::identity(), params());
        for r in 0..model.rows {
            for c in 0..model.cols {
                pano.fuse_pixel(r, c, box_depth(&model, 5.0, r, c) as f32);
            }
        }
        pano
    }

    #[test]
    fn identity_sweep_fusion_preserves_depth() {
        let model = room_model();
        let table = DirectionTable::new(&model);
        let mut buf = SweepBuffer::new(model.rows, model.cols, model.firing_interval());
        let mut ranges = vec![0.0f32; model.rows * model.cols];
        for r in 0..model.rows {
            for c in 0..model.cols {
                ranges[r * model.cols + c] = box_depth(&model, 5.0, r, c) as f32;
            }
        }
        buf.push(&crate::sweep::ColumnBlock::new(0, model.rows, model.cols, 0.0, ranges.clone()))
            .unwrap();
        let mut pano = DepthPano::new(model, Pose::identity(), params());
        let poses = vec![Pose::identity(); model.cols];
        let n = pano.add_buffer_columns(&buf, 0, model.cols, &poses, &table);
        assert_eq!(n, model.rows * model.cols);
        for (a, b) in pano.depths().iter().zip(&ranges) {
            assert!((a - b).abs() < 1e-5);
        }
        // A second identical pass bumps every counter to 2.
        pano.add_buffer_columns(&buf, 0, model.cols, &poses, &table);
        assert!(pano.counts().iter().all(|&k| k == 2));
    }

    #[test]
    fn ejected_span_fusion() {
        let model = room_model();
        let table = DirectionTable::new(&model);
        let span = EjectedSpan {
            start_col: 250,
            width: 8,
            rows: model.rows,
            ranges: (0..model.rows * 8).map(|i| if i % 3 == 0 { 0.0 } else { 4.0 }).collect(),
            col_times: vec![0.0; 8],
        };
        let mut pano = DepthPano::new(model, Pose::identity(), params());
        let n = pano.add_sweep_span(&span, &vec![Pose::identity(); 8], &table);
        let valid = span.ranges.iter().filter(|&&r| r > 0.0).count();
        assert_eq!(n, valid);
        assert_eq!(pano.valid_pixels(), valid);
        assert_eq!(pano.depth(1, 250), 4.0);
        assert_eq!(pano.depth(1, 0), 4.0);
        assert_eq!(pano.depth(1, 1), 0.0);
    }

    #[test]
    fn window_stats_thresholds() {
        let pano = room_pano();
        let g = pano.window_stats(16, 0, 3, 9).unwrap();
        assert_eq!(g.weight, 27);
        let eig = g.covariance.symmetric_eigenvalues();
        assert!(eig.min().abs() < 1e-6 * eig.max());

        // The 1x10 window at column 102 spans columns 97..=106. Exactly half
        // valid is insufficient; one more pixel is enough.
        let model = room_model();
        let mut sparse = DepthPano::new(model, Pose::identity(), params());
        for j in 0..5 {
            sparse.fuse_pixel(10, 100 + j, 5.0);
        }
        assert!(sparse.window_stats(10, 102, 1, 10).is_none());
        sparse.fuse_pixel(10, 107, 5.0);
        assert!(sparse.window_stats(10, 102, 1, 10).is_none());
        sparse.fuse_pixel(10, 105, 5.0);
        assert_eq!(sparse.window_stats(10, 102, 1, 10).unwrap().weight, 6);
    }

    #[test]
    fn window_wraps_columns_and_clamps_rows() {
        let pano = room_pano();
        let g = pano.window_stats(0, 0, 3, 5).unwrap();
        let pts = (0..3).flat_map(|r| [254usize, 255, 0, 1, 2].map(|c| (r, c))).map(|(r, c)| {
            pano.table().unproject(r, c, f64::from(pano.depth(r, c)))
        });
        let expect = Gaussian3::from_points(pts.collect::<Vec<_>>().into_iter()).unwrap();
        assert!((g.mean - expect.mean).norm() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn window_stats_match_brute_force(r in 0usize..32, c in 0usize..256, wr in 1usize..7, wc in 1usize..21, holes in proptest::collection::vec(0usize..8192, 0..3000)) {
            let mut pano = room_pano();
            for h in holes {
                pano.depth[h] = 0.0;
                pano.count[h] = 0;
            }
            let (rows, cols) = (32usize, 256usize);
            // Brute force with explicit index arithmetic.
            let r0 = if r < wr / 2 { 0 } else { (r - wr / 2).min(rows - wr) };
            let mut pts = Vec::new();
            for i in 0..wr {
                for j in 0..wc {
                    let rr = r0 + i;
                    let cc = ((c as i64 - (wc / 2) as i64 + j as i64).rem_euclid(cols as i64)) as usize;
                    let d = pano.depth[rr * cols + cc];
                    if d > 0.0 {
                        pts.push(pano.model().unproject(rr, cc, f64::from(d)));
                    }
                }
            }
            let got = pano.window_stats(r, c, wr, wc);
            if 2 * pts.len() <= wr * wc {
                prop_assert!(got.is_none());
            } else {
                let g = got.unwrap();
                let n = pts.len() as f64;
                let mean = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
                let mut cov = crate::geometry::Mat3::zeros();
                for p in &pts {
                    cov += (p - mean) * (p - mean).transpose() / n;
                }
                prop_assert_eq!(g.weight as usize, pts.len());
                prop_assert!((g.mean - mean).norm() < 1e-9);
                prop_assert!((g.covariance - cov).abs().max() < 1e-9);
            }
        }
    }

    #[test]
    fn centred_window_straddles_point() {
        let pano = room_pano();
        // Halfway between columns 7 and 8 a 16-wide window covers 0..=15.
        let a = pano.window_stats_near(16.5, 7.5, 3, 16).unwrap();
        let b = pano.window_stats(16, 8, 3, 16).unwrap();
        assert!((a.mean - b.mean).norm() < 1e-12);
        // Slightly left of that still picks the same window.
        let c = pano.window_stats_near(16.5, 7.45, 3, 16).unwrap();
        assert_eq!(a, c);
        // Near the seam the window wraps: 248..=255 then 0..=7.
        let w = pano.window_stats_near(16.5, 255.6, 3, 16).unwrap();
        let e = pano.window_stats(16, 0, 3, 16).unwrap();
        assert!((w.mean - e.mean).norm() < 1e-12);
        // Rows clamp at the border.
        let top = pano.window_stats_near(0.2, 30.0, 3, 5).unwrap();
        assert_eq!(top, pano.window_stats(1, 30, 3, 5).unwrap());
    }

    #[test]
    fn identity_render_is_lossless() {
        let pano = room_pano();
        let out = pano.render(&Pose::identity());
        let same = pano
            .depths()
            .iter()
            .zip(out.depths())
            .filter(|(a, b)| (*a - *b).abs() < 1e-5)
            .count();
        assert!(same as f64 >= 0.99 * pano.depths().len() as f64);
        assert_eq!(pano.counts(), out.counts());
    }

    #[test]
    fn moving_toward_wall_enlarges_it() {
        // Only the wall at x = +5 is populated.
        let model = room_model();
        let mut pano = DepthPano::new(model, Pose::identity(), params());
        for r in 0..model.rows {
            for c in 0..model.cols {
                let d = model.direction(r, c);
                if d.x > 0.0 && (5.0 / d.x) <= box_depth(&model, 5.0, r, c) + 1e-9 {
                    pano.fuse_pixel(r, c, (5.0 / d.x) as f32);
                }
            }
        }
        let closer = pano.render(&Pose::from_translation(Vec3::new(2.0, 0.0, 0.0)));
        let extent = |p: &DepthPano| {
            (0..256)
                .filter(|&c| p.depth(16, c) > 0.0)
                .map(|c| if c < 128 { c } else { 256 - c })
                .max()
                .unwrap()
        };
        // Half-width grows from 45° to about 59°.
        assert_eq!(extent(&pano), 32);
        assert!((41..=42).contains(&extent(&closer)));
        assert!((closer.depth(16, 0) - pano.depth(16, 0) + 2.0).abs() < 0.05);
    }

    #[test]
    fn render_round_trip() {
        let pano = room_pano();
        let shift = Pose::new(
            nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.0, 0.05),
            Vec3::new(0.3, -0.2, 0.05),
        );
        let back = pano.render(&shift).render(&Pose::identity());
        // Each round-tripped depth comes from a nearby source pixel, so it
        // must lie within the depth range of the original 3x3 neighbourhood.
        let mut n = 0;
        for r in 0..32 {
            for c in 0..256 {
                let a = back.depth(r, c);
                if a == 0.0 {
                    continue;
                }
                n += 1;
                let (mut lo, mut hi) = (f32::INFINITY, 0.0f32);
                for rr in r.saturating_sub(1)..(r + 2).min(32) {
                    for dc in [255, 0, 1] {
                        let d = pano.depth(rr, (c + dc) % 256);
                        lo = lo.min(d);
                        hi = hi.max(d);
                    }
                }
                assert!(a >= lo - 0.02 && a <= hi + 0.02, "pixel ({r},{c}): {a} not in [{lo},{hi}]");
            }
        }
        assert!(n > 6000);
    }

    #[test]
    fn render_is_order_independent() {
        // Reversing source order cannot change a min-depth reduction; check
        // by rendering a pano and its row-reversed twin back into one frame.
        let pano = room_pano();
        let target = Pose::from_translation(Vec3::new(0.7, 0.1, 0.0));
        let a = pano.render(&target);
        let mut entries = Vec::new();
        let t = target.inverse().compose(&pano.pose);
        for i in (0..pano.depths().len()).rev() {
            let d = pano.depths()[i];
            if d > 0.0 {
                let (r, c) = (i / 256, i % 256);
                let p = t.transform(&pano.table().unproject(r, c, f64::from(d)));
                if let Some(px) = pano.model().project(&p) {
                    entries.push((px.row * 256 + px.col, px.range as f32, pano.counts()[i]));
                }
            }
        }
        let mut depth = vec![0.0f32; 8192];
        let mut count = vec![0u8; 8192];
        for (i, d, k) in entries {
            if depth[i] == 0.0 || d < depth[i] || (d == depth[i] && k > count[i]) {
                depth[i] = d;
                count[i] = k;
            }
        }
        assert_eq!(a.depths(), &depth[..]);
        assert_eq!(a.counts(), &count[..]);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut pano = room_pano();
        pano.pose = Pose::from_yaw(0.3, Vec3::new(1.0, 2.0, 3.0));
        let mut bytes = Vec::new();
        pano.write_snapshot(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"LPAN");
        assert_eq!(bytes.len(), 4 + 2 + 2 + 2 + 4 + 28 + 8192 * 3);
        let back = DepthPano::read_snapshot(&bytes[..], room_model(), params()).unwrap();
        for (a, b) in pano.depths().iter().zip(back.depths()) {
            assert!((a - b).abs() <= 0.5 / 512.0 + 1e-6);
        }
        assert_eq!(pano.counts(), back.counts());
        assert!((back.pose.translation - pano.pose.translation).norm() < 1e-6);
        let err = DepthPano::read_snapshot(&b"XPAN\x01\x00"[..], room_model(), params());
        assert!(matches!(err, Err(SnapshotError::Magic(_))));
    }
}
