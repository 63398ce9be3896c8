//! Circular range-image buffer holding exactly one revolution.
//!
//! Partial sweeps are pushed as contiguous column blocks. Whatever the block
//! overwrites is handed back as an [`EjectedSpan`] so the caller can fuse it
//! into the map before it is lost.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SweepError {
    #[error("non-contiguous block: expected start column {expected}, received {received}")]
    Gap { expected: usize, received: usize },
    #[error("block shape mismatch: {0}")]
    Shape(String),
}

/// Contiguous columns of a partial sweep, row-major `rows × width`.
/// A range of 0 marks an invalid return.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnBlock {
    pub start_col: usize,
    pub width: usize,
    pub rows: usize,
    /// Time of the first column, seconds.
    pub t_start: f64,
    pub ranges: Vec<f32>,
}

impl ColumnBlock {
    pub fn new(start_col: usize, rows: usize, width: usize, t_start: f64, ranges: Vec<f32>) -> Self {
        debug_assert_eq!(ranges.len(), rows * width);
        Self {
            start_col,
            width,
            rows,
            t_start,
            ranges,
        }
    }

    /// A block with every return marked invalid.
    pub fn zeros(start_col: usize, rows: usize, width: usize, t_start: f64) -> Self {
        Self::new(start_col, rows, width, t_start, vec![0.0; rows * width])
    }

    #[inline]
    pub fn range(&self, row: usize, j: usize) -> f32 {
        self.ranges[row * self.width + j]
    }

    /// Column index (revolution coordinates) one past the last column.
    pub fn end_col(&self, cols: usize) -> usize {
        (self.start_col + self.width) % cols
    }
}

/// Data overwritten by a push, in the same layout as [`ColumnBlock`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EjectedSpan {
    pub start_col: usize,
    pub width: usize,
    pub rows: usize,
    pub ranges: Vec<f32>,
    pub col_times: Vec<f64>,
}

impl EjectedSpan {
    pub fn is_empty(&self) -> bool {
        self.width == 0
    }

    #[inline]
    pub fn range(&self, row: usize, j: usize) -> f32 {
        self.ranges[row * self.width + j]
    }

    /// Discard the first `n` columns (all of them if `n >= width`).
    pub fn drop_front(&mut self, n: usize, cols: usize) {
        let n = n.min(self.width);
        if n == 0 {
            return;
        }
        let w = self.width - n;
        let mut ranges = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            ranges.extend_from_slice(&self.ranges[r * self.width + n..(r + 1) * self.width]);
        }
        self.ranges = ranges;
        self.col_times.drain(..n);
        self.start_col = (self.start_col + n) % cols;
        self.width = w;
    }
}

#[derive(Clone, Debug)]
pub struct SweepBuffer {
    rows: usize,
    cols: usize,
    firing_interval: f64,
    ranges: Vec<f32>,
    col_times: Vec<f64>,
    /// Column the next block must start at; `None` before the first push.
    next_col: Option<usize>,
    /// Total columns pushed since creation.
    pushed: u64,
    /// Time of column `anchor_index`. Column times are `anchor_time` plus a
    /// whole number of intervals, so they do not depend on how the stream
    /// was cut into blocks.
    anchor_time: f64,
    anchor_index: u64,
}

impl SweepBuffer {
    pub fn new(rows: usize, cols: usize, firing_interval: f64) -> Self {
        Self {
            rows,
            cols,
            firing_interval,
            ranges: vec![0.0; rows * cols],
            col_times: vec![f64::NAN; cols],
            next_col: None,
            pushed: 0,
            anchor_time: 0.0,
            anchor_index: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn firing_interval(&self) -> f64 {
        self.firing_interval
    }

    /// True once a full revolution has been written.
    pub fn is_warm(&self) -> bool {
        self.pushed >= self.cols as u64
    }

    pub fn pushed_columns(&self) -> u64 {
        self.pushed
    }

    /// Most recently written column.
    pub fn head(&self) -> Option<usize> {
        self.next_col.map(|c| (c + self.cols - 1) % self.cols)
    }

    /// Column the next block is expected to start at.
    pub fn expected_col(&self) -> Option<usize> {
        self.next_col
    }

    /// Oldest column in the buffer, i.e. the next one to be overwritten.
    pub fn oldest_col(&self) -> Option<usize> {
        self.next_col
    }

    /// Acquisition time of the column after the head.
    pub fn next_time(&self) -> Option<f64> {
        self.head()
            .map(|h| self.col_times[h] + self.firing_interval)
    }

    pub fn ranges(&self) -> &[f32] {
        &self.ranges
    }

    pub fn col_times(&self) -> &[f64] {
        &self.col_times
    }

    #[inline]
    pub fn range(&self, row: usize, col: usize) -> f32 {
        self.ranges[row * self.cols + col]
    }

    /// Stored acquisition timestamp of `col`.
    pub fn column_time(&self, col: usize) -> f64 {
        self.col_times[col]
    }

    /// Whether `col` holds data from the current stream.
    pub fn is_written(&self, col: usize) -> bool {
        match self.next_col {
            None => false,
            Some(next) => {
                let age = (next + self.cols - col - 1) % self.cols;
                (age as u64) < self.pushed
            }
        }
    }

    pub fn push(&mut self, block: &ColumnBlock) -> Result<EjectedSpan, SweepError> {
        let mut ejected = EjectedSpan::default();
        self.push_into(block, &mut ejected)?;
        Ok(ejected)
    }

    /// Like [`SweepBuffer::push`] but reuses the allocation of `ejected`.
    pub fn push_into(
        &mut self,
        block: &ColumnBlock,
        ejected: &mut EjectedSpan,
    ) -> Result<(), SweepError> {
        self.check_shape(block)?;
        if let Some(expected) = self.next_col {
            if block.start_col != expected {
                return Err(SweepError::Gap {
                    expected,
                    received: block.start_col,
                });
            }
        }

        // Columns in the block whose previous content came from this stream.
        // Pushes are contiguous, so these form a suffix of the block.
        let fresh = (self.cols as u64).saturating_sub(self.pushed).min(block.width as u64) as usize;
        let eject_width = block.width - fresh;
        ejected.rows = self.rows;
        ejected.width = eject_width;
        ejected.start_col = (block.start_col + fresh) % self.cols;
        ejected.ranges.clear();
        ejected.ranges.resize(self.rows * eject_width, 0.0);
        ejected.col_times.clear();
        for j in 0..eject_width {
            let col = (ejected.start_col + j) % self.cols;
            ejected.col_times.push(self.col_times[col]);
            for r in 0..self.rows {
                ejected.ranges[r * eject_width + j] = self.ranges[r * self.cols + col];
            }
        }

        // A block whose start time is off the running clock restarts it.
        let dt = self.firing_interval;
        let expected_t = self.anchor_time + (self.pushed - self.anchor_index) as f64 * dt;
        if self.pushed == 0 || (block.t_start - expected_t).abs() > 0.5 * dt {
            self.anchor_time = block.t_start;
            self.anchor_index = self.pushed;
        }
        let first = self.pushed - self.anchor_index;
        for j in 0..block.width {
            let col = (block.start_col + j) % self.cols;
            self.col_times[col] = self.anchor_time + (first + j as u64) as f64 * dt;
        }
        for r in 0..self.rows {
            let src = &block.ranges[r * block.width..(r + 1) * block.width];
            let dst_row = &mut self.ranges[r * self.cols..(r + 1) * self.cols];
            let first = (self.cols - block.start_col).min(block.width);
            dst_row[block.start_col..block.start_col + first].copy_from_slice(&src[..first]);
            dst_row[..block.width - first].copy_from_slice(&src[first..]);
        }

        self.next_col = Some(block.end_col(self.cols));
        self.pushed += block.width as u64;
        Ok(())
    }

    fn check_shape(&self, block: &ColumnBlock) -> Result<(), SweepError> {
        if block.rows != self.rows {
            return Err(SweepError::Shape(format!(
                "block has {} rows, buffer has {}",
                block.rows, self.rows
            )));
        }
        if block.width == 0 || block.width > self.cols {
            return Err(SweepError::Shape(format!(
                "block width {} outside [1, {}]",
                block.width, self.cols
            )));
        }
        if block.start_col >= self.cols {
            return Err(SweepError::Shape(format!(
                "start column {} outside [0, {})",
                block.start_col, self.cols
            )));
        }
        if block.ranges.len() != block.rows * block.width {
            return Err(SweepError::Shape(format!(
                "expected {} range values, got {}",
                block.rows * block.width,
                block.ranges.len()
            )));
        }
        Ok(())
    }
}
