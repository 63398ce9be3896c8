//! Coarse grid of planar candidate cells over the sweep.
//!
//! Each cell gets a smoothness score, the variance of its ranges and, when it
//! is usable, a Gaussian summary of its 3-D points in the sensor frame.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{DirectionTable, Gaussian3};
use crate::sweep::SweepBuffer;

pub const DEFAULT_MAX_SMOOTH: f64 = 0.03;
pub const DEFAULT_MAX_VAR: f64 = 0.1;
/// Candidate budget per block; bounds association and solve cost.
pub const DEFAULT_MAX_CANDIDATES: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("cell size {cell_rows}x{cell_cols} does not tile a {rows}x{cols} sweep")]
    NotTiling {
        rows: usize,
        cols: usize,
        cell_rows: usize,
        cell_cols: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CellState {
    /// Too few valid pixels or the middle pixel is missing.
    #[default]
    Invalid,
    /// Scored but rejected by the thresholds or suppression.
    Scored,
    Candidate,
    /// Candidate that found a correspondence in the last association.
    Matched,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Cell {
    pub smoothness: f64,
    pub range_variance: f64,
    pub stats: Gaussian3,
    pub state: CellState,
}

impl Cell {
    pub fn is_scored(&self) -> bool {
        self.state != CellState::Invalid
    }

    pub fn is_candidate(&self) -> bool {
        matches!(self.state, CellState::Candidate | CellState::Matched)
    }
}

/// Smoothness and range variance of one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellScore {
    pub smoothness: f64,
    pub range_variance: f64,
    pub valid: usize,
}

/// Score the pixels of one cell (0 = invalid). `mid` indexes the reference
/// pixel `r_m`.
///
/// `s = |Σ (r_n / r_m − 1)| / |C|` over the valid pixels; the variance is
/// the unbiased sample variance of the valid ranges. Returns `None` when
/// fewer than half of the pixels are valid or `r_m` is invalid.
pub fn score_cell(pixels: &[f32], mid: usize) -> Option<CellScore> {
    let rm = f64::from(pixels[mid]);
    if rm <= 0.0 {
        return None;
    }
    let mut n = 0usize;
    let mut dev = 0.0;
    let mut sum = 0.0;
    for &r in pixels {
        if r > 0.0 {
            let r = f64::from(r);
            n += 1;
            dev += r / rm - 1.0;
            sum += r;
        }
    }
    if 2 * n < pixels.len() {
        return None;
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for &r in pixels {
        if r > 0.0 {
            let d = f64::from(r) - mean;
            ss += d * d;
        }
    }
    let range_variance = if n > 1 { ss / (n - 1) as f64 } else { 0.0 };
    Some(CellScore {
        smoothness: dev.abs() / n as f64,
        range_variance,
        valid: n,
    })
}

/// Gaussian of the unprojected valid pixels of a cell whose top-left pixel
/// is `(row0, col0)`; `pixels` is row-major with `cell_cols` columns.
pub fn compute_stats(
    pixels: &[f32],
    cell_cols: usize,
    table: &DirectionTable,
    row0: usize,
    col0: usize,
) -> Option<Gaussian3> {
    let cols = table.model().cols;
    let points = pixels.iter().enumerate().filter(|(_, &r)| r > 0.0).map(move |(i, &r)| {
        let row = row0 + i / cell_cols;
        let col = (col0 + i % cell_cols) % cols;
        table.unproject(row, col, f64::from(r))
    });
    Gaussian3::from_points(points)
}

#[derive(Clone, Debug)]
pub struct FeatureGrid {
    pub cell_rows: usize,
    pub cell_cols: usize,
    /// Number of cell rows.
    pub rows: usize,
    /// Number of cell columns.
    pub cols: usize,
    pub cells: Vec<Cell>,
}

impl FeatureGrid {
    pub fn new(
        sweep_rows: usize,
        sweep_cols: usize,
        cell_rows: usize,
        cell_cols: usize,
    ) -> Result<Self, GridError> {
        if cell_rows == 0
            || cell_cols == 0
            || sweep_rows % cell_rows != 0
            || sweep_cols % cell_cols != 0
        {
            return Err(GridError::NotTiling {
                rows: sweep_rows,
                cols: sweep_cols,
                cell_rows,
                cell_cols,
            });
        }
        let rows = sweep_rows / cell_rows;
        let cols = sweep_cols / cell_cols;
        Ok(Self {
            cell_rows,
            cell_cols,
            rows,
            cols,
            cells: vec![Cell::default(); rows * cols],
        })
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[self.index(row, col)]
    }

    /// Re-score the `count` grid columns starting at `first_col` (wrapping)
    /// from the buffer contents. Parallel over grid rows.
    pub fn score_columns(
        &mut self,
        buffer: &SweepBuffer,
        table: &DirectionTable,
        first_col: usize,
        count: usize,
    ) {
        let (cell_rows, cell_cols, grid_cols) = (self.cell_rows, self.cell_cols, self.cols);
        let mid = (cell_rows / 2) * cell_cols + cell_cols / 2;
        self.cells
            .par_chunks_mut(grid_cols)
            .enumerate()
            .for_each(|(gr, row_cells)| {
                let mut pixels = vec![0.0f32; cell_rows * cell_cols];
                for k in 0..count.min(grid_cols) {
                    let gc = (first_col + k) % grid_cols;
                    let (r0, c0) = (gr * cell_rows, gc * cell_cols);
                    for i in 0..cell_rows {
                        let row = &buffer.ranges()[(r0 + i) * buffer.cols()..];
                        pixels[i * cell_cols..(i + 1) * cell_cols]
                            .copy_from_slice(&row[c0..c0 + cell_cols]);
                    }
                    row_cells[gc] = score_pixels(&pixels, mid, cell_cols, table, r0, c0);
                }
            });
    }

    pub fn score_all(&mut self, buffer: &SweepBuffer, table: &DirectionTable) {
        let cols = self.cols;
        self.score_columns(buffer, table, 0, cols);
    }

    /// Mark candidates and return their indices in row-major order.
    ///
    /// A scored cell passes when `s ≤ max_smooth` and the range variance is
    /// `≤ max_var`. With `nms`, it must also have strictly lower smoothness
    /// than its horizontal neighbours; a tie with the left neighbour is lost
    /// only if that neighbour was itself selected, so runs of equal cells
    /// keep every other one starting from the lowest column.
    pub fn filter(&mut self, max_smooth: f64, max_var: f64, nms: bool) -> Vec<usize> {
        let mut out = Vec::new();
        for gr in 0..self.rows {
            let base = gr * self.cols;
            let mut left_selected = false;
            for gc in 0..self.cols {
                let cell = self.cells[base + gc];
                let mut pass = cell.is_scored()
                    && cell.smoothness <= max_smooth
                    && cell.range_variance <= max_var;
                if pass && nms {
                    let s = cell.smoothness;
                    if gc > 0 {
                        let left = &self.cells[base + gc - 1];
                        if left.is_scored()
                            && (left.smoothness < s || (left.smoothness == s && left_selected))
                        {
                            pass = false;
                        }
                    }
                    if gc + 1 < self.cols {
                        let right = &self.cells[base + gc + 1];
                        if right.is_scored() && right.smoothness < s {
                            pass = false;
                        }
                    }
                }
                let c = &mut self.cells[base + gc];
                if c.is_scored() {
                    c.state = if pass {
                        CellState::Candidate
                    } else {
                        CellState::Scored
                    };
                }
                if pass {
                    out.push(base + gc);
                }
                left_selected = pass;
            }
        }
        out
    }

    /// Keep at most `budget` of `candidates` (0 keeps all), evenly spaced
    /// in row-major order; the rest go back to `Scored`.
    pub fn thin(&mut self, candidates: Vec<usize>, budget: usize) -> Vec<usize> {
        let n = candidates.len();
        if budget == 0 || n <= budget {
            return candidates;
        }
        let kept: Vec<usize> = (0..budget).map(|i| candidates[i * n / budget]).collect();
        for &c in &candidates {
            self.cells[c].state = CellState::Scored;
        }
        for &c in &kept {
            self.cells[c].state = CellState::Candidate;
        }
        kept
    }
}

fn score_pixels(
    pixels: &[f32],
    mid: usize,
    cell_cols: usize,
    table: &DirectionTable,
    row0: usize,
    col0: usize,
) -> Cell {
    match score_cell(pixels, mid) {
        None => Cell::default(),
        Some(score) => {
            let stats = compute_stats(pixels, cell_cols, table, row0, col0).unwrap_or_default();
            Cell {
                smoothness: score.smoothness,
                range_variance: score.range_variance,
                stats,
                state: CellState::Scored,
            }
        }
    }
}
