//! Rolling-shutter range image synthesis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spinodom::{ColumnBlock, DirectionTable, LidarModel, Pose};

use crate::scene::Scene;

/// Ranges are quantized to the wire resolution so that encoding a simulated
/// block is lossless.
pub const TICKS_PER_METER: f64 = 512.0;
/// Largest range representable in a `u16` tick count.
pub const MAX_RANGE: f64 = (u16::MAX as f64) / TICKS_PER_METER;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeNoise {
    /// Standard deviation of additive Gaussian range noise, meters.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for RangeNoise {
    fn default() -> Self {
        RangeNoise { sigma: 0.01, seed: 0 }
    }
}

impl RangeNoise {
    pub fn none() -> Self {
        RangeNoise { sigma: 0.0, seed: 0 }
    }
}

/// Quantize a range to ticks, or 0 when out of range.
#[inline]
pub fn to_ticks(range: f64) -> u16 {
    if !(range > 0.0) || range >= MAX_RANGE {
        return 0;
    }
    (range * TICKS_PER_METER).round() as u16
}

#[inline]
pub fn from_ticks(ticks: u16) -> f32 {
    (f64::from(ticks) / TICKS_PER_METER) as f32
}

/// Generator for one column's noise. Seeding by the absolute firing index
/// makes the noise independent of how the stream is cut into blocks.
fn column_rng(seed: u64, column: u64) -> ChaCha8Rng {
    let mut z = seed ^ column.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Casts `poses.len()` columns starting at absolute firing index
/// `first_column`, each from its own pose (world from sensor).
pub fn raycast_block(
    scene: &Scene,
    model: &LidarModel,
    table: &DirectionTable,
    first_column: u64,
    poses: &[Pose],
    noise: &RangeNoise,
) -> ColumnBlock {
    let rows = model.rows;
    let width = poses.len();
    let cols = model.cols as u64;
    let normal = Normal::new(0.0, noise.sigma.max(0.0)).expect("finite sigma");
    let mut by_col = vec![0f32; rows * width];
    by_col.par_chunks_mut(rows).enumerate().for_each(|(j, out)| {
        let column = first_column + j as u64;
        let col = (column % cols) as usize;
        let pose = &poses[j];
        let rot = pose.rotation_matrix();
        let origin = pose.translation;
        let mut rng = (noise.sigma > 0.0).then(|| column_rng(noise.seed, column));
        for (r, slot) in out.iter_mut().enumerate() {
            let dir = rot * table.direction(r, col);
            let mut range = match scene.raycast(&origin, &dir) {
                Some(t) => t,
                None => 0.0,
            };
            if let Some(rng) = rng.as_mut() {
                // Draw even for misses so each pixel keeps its own variate.
                let e = normal.sample(rng);
                if range > 0.0 {
                    range += e;
                }
            }
            *slot = if range < model.min_range { 0.0 } else { from_ticks(to_ticks(range)) };
        }
    });
    let mut ranges = vec![0f32; rows * width];
    for j in 0..width {
        for r in 0..rows {
            ranges[r * width + j] = by_col[j * rows + r];
        }
    }
    let dt = model.firing_interval();
    ColumnBlock::new((first_column % cols) as usize, rows, width, first_column as f64 * dt, ranges)
}
