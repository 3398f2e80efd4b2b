//! Sparse inputs from dense depth. A base pattern is drawn first; a ratio
//! then keeps a prefix of one fixed seeded permutation of the base points,
//! so smaller ratios always observe subsets of larger ones.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseDepthMap;

/// The ratios used for generalisation sweeps.
pub const SWEEP_RATIOS: [f64; 8] = [0.025, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SparsePattern {
    /// Horizontal scan lines with per-column vertical jitter and random
    /// dropout, mimicking a spinning LiDAR.
    LidarLines {
        lines: usize,
        /// Maximum vertical offset of a return from its line, in rows.
        jitter: usize,
        keep: f64,
    },
    /// Every valid pixel.
    UniformRandom,
}

impl Default for SparsePattern {
    fn default() -> Self {
        SparsePattern::LidarLines {
            lines: 16,
            jitter: 1,
            keep: 0.9,
        }
    }
}

const BASE_STREAM: u64 = 0x5EED_BA5E;
const ORDER_STREAM: u64 = 0x0DDE_5EED;

/// Cells observed by the base pattern, in raster order.
pub fn base_cells(dense: &SparseDepthMap, pattern: SparsePattern, seed: u64) -> Result<Vec<usize>> {
    let (w, h) = (dense.width(), dense.height());
    match pattern {
        SparsePattern::UniformRandom => Ok(dense.observed_cells()),
        SparsePattern::LidarLines { lines, jitter, keep } => {
            if lines == 0 || lines > h || !(keep > 0.0 && keep <= 1.0) {
                return Err(Error::Argument(format!(
                    "lidar pattern needs 1..={h} lines and keep in (0, 1], got {lines} and {keep}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BASE_STREAM);
            let mut hit = vec![false; w * h];
            for line in 0..lines {
                let row = ((line as f64 + 0.5) * h as f64 / lines as f64) as i64;
                for u in 0..w {
                    let off = rng.random_range(-(jitter as i64)..=jitter as i64);
                    let drop = rng.random::<f64>() >= keep;
                    let v = (row + off).clamp(0, h as i64 - 1) as usize;
                    let p = v * w + u;
                    if !drop && dense.mask()[p] {
                        hit[p] = true;
                    }
                }
            }
            Ok(hit.iter().enumerate().filter_map(|(p, &m)| m.then_some(p)).collect())
        }
    }
}

/// Keep `round(ratio · base count)` base points.
pub fn sparsify(dense: &SparseDepthMap, pattern: SparsePattern, ratio: f64, seed: u64) -> Result<SparseDepthMap> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Argument(format!(
            "sparsity ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let mut cells = base_cells(dense, pattern, seed)?;
    let keep = (ratio * cells.len() as f64).round() as usize;
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ ORDER_STREAM));
    cells.truncate(keep);
    Ok(dense.restrict_to(&cells))
}

/// Observed fraction of all pixels.
pub fn density(map: &SparseDepthMap) -> f64 {
    map.observed_count() as f64 / (map.width() * map.height()).max(1) as f64
}
