//! Multi-scale graphs over observed pixels.
//!
//! The sparse depth map is max-pooled once per level, a fixed number of
//! observed pixels is sampled at every level, and each sampled node is
//! connected to its `k` nearest neighbours in pixel or camera coordinates.

mod knn;
mod pyramid;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use knn::{knn_graph, sq_dist, KnnResult};
pub use pyramid::{build_pyramid, build_pyramid_with, CoordSystem, GraphConfig, GraphLevel, Pyramid};

/// Depth in meters on an `H×W` grid with an explicit observation mask.
/// Unobserved cells hold depth 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthMap {
    width: usize,
    height: usize,
    depth: Vec<f32>,
    mask: Vec<bool>,
}

impl SparseDepthMap {
    /// Build from raw depths; a cell is observed iff its depth is positive.
    /// Non-positive and non-finite values become unobserved zeros.
    pub fn from_depth(width: usize, height: usize, mut depth: Vec<f32>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::Argument(format!(
                "{} depth values for a {width}x{height} map",
                depth.len()
            )));
        }
        let mask = depth
            .iter_mut()
            .map(|d| {
                if d.is_finite() && *d > 0.0 {
                    true
                } else {
                    *d = 0.0;
                    false
                }
            })
            .collect();
        Ok(Self {
            width,
            height,
            depth,
            mask,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            mask: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.width + u]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Flat indices of observed cells in raster order.
    pub fn observed_cells(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Keep only the listed cells (which must be observed here).
    pub fn restrict_to(&self, cells: &[usize]) -> Self {
        let mut out = Self::empty(self.width, self.height);
        for &c in cells {
            if self.mask[c] {
                out.depth[c] = self.depth[c];
                out.mask[c] = true;
            }
        }
        out
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Argument(format!(
                "focal lengths must be positive, got {fx}, {fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics of the grid downsampled `level` times by 2.
    pub fn at_level(&self, level: usize) -> Self {
        let s = 0.5f64.powi(level as i32);
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
        }
    }
}

/// Halve resolution by taking the max over each 2×2 block.
pub fn downsample_sparse(map: &SparseDepthMap) -> Result<SparseDepthMap> {
    let (w, h) = (map.width, map.height);
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Argument(format!(
            "cannot max-pool a {w}x{h} map: dimensions must be even"
        )));
    }
    let (ow, oh) = (w / 2, h / 2);
    let mut depth = vec![0.0f32; ow * oh];
    let mut mask = vec![false; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut best = 0.0f32;
            let mut seen = false;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let i = (2 * y + dy) * w + 2 * x + dx;
                if map.mask[i] {
                    seen = true;
                    best = best.max(map.depth[i]);
                }
            }
            depth[y * ow + x] = best;
            mask[y * ow + x] = seen;
        }
    }
    Ok(SparseDepthMap {
        width: ow,
        height: oh,
        depth,
        mask,
    })
}

/// Pixels drawn for one graph level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSample {
    /// `(u, v)` coordinates, sorted in raster order.
    pub pixels: Vec<[usize; 2]>,
    /// No observed pixel was available; callers fall back to convolution only.
    pub empty: bool,
}

/// Uniformly sample `min(n, observed)` distinct observed pixels.
pub fn sample_nodes(map: &SparseDepthMap, n: usize, seed: u64) -> Result<NodeSample> {
    if n == 0 {
        return Err(Error::Argument("node count must be at least 1".into()));
    }
    let cells = map.observed_cells();
    if cells.is_empty() {
        log::warn!("no observed pixels in {}x{} map; graph is empty", map.width, map.height);
        return Ok(NodeSample {
            pixels: Vec::new(),
            empty: true,
        });
    }
    let chosen: Vec<usize> = if n >= cells.len() {
        cells
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = index::sample(&mut rng, cells.len(), n)
            .into_iter()
            .map(|i| cells[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    Ok(NodeSample {
        pixels: chosen.iter().map(|&c| [c % map.width, c / map.width]).collect(),
        empty: false,
    })
}

/// Back-project pixel `(u, v)` at depth `d` into camera coordinates.
pub fn unproject(u: f64, v: f64, d: f64, k: &CameraIntrinsics) -> Result<[f64; 3]> {
    if !(d > 0.0) {
        return Err(Error::Argument(format!("unprojection needs positive depth, got {d}")));
    }
    let z = d;
    Ok([z * (u - k.cx) / k.fx, z * (v - k.cy) / k.fy, z])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_block() {
        let m = SparseDepthMap::from_depth(2, 2, vec![0.0, 3.0, 2.0, 0.0]).unwrap();
        let d = downsample_sparse(&m).unwrap();
        assert_eq!(d.depth(), &[3.0]);
        assert_eq!(d.mask(), &[true]);
        let z = downsample_sparse(&SparseDepthMap::empty(4, 4)).unwrap();
        assert_eq!(z.observed_count(), 0);
        assert!(z.depth().iter().all(|&v| v == 0.0));
        assert!(downsample_sparse(&SparseDepthMap::empty(3, 4)).is_err());
    }

    #[test]
    fn mask_follows_depth() {
        let m = SparseDepthMap::from_depth(3, 1, vec![1.0, -2.0, f32::NAN]).unwrap();
        assert_eq!(m.mask(), &[true, false, false]);
        assert_eq!(m.depth(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn unproject_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
        assert_eq!(unproject(50.0, 0.0, 2.0, &k).unwrap(), [1.0, 0.0, 2.0]);
        let k2 = CameraIntrinsics::new(80.0, 90.0, 31.5, 20.0).unwrap();
        assert_eq!(unproject(31.5, 20.0, 1.0, &k2).unwrap(), [0.0, 0.0, 1.0]);
        assert!(unproject(1.0, 1.0, 0.0, &k).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn sampling_clamps_and_flags_empty() {
        let m = SparseDepthMap::from_depth(4, 1, vec![1.0, 0.0, 2.0, 3.0]).unwrap();
        let s = sample_nodes(&m, 10, 0).unwrap();
        assert_eq!(s.pixels, vec![[0, 0], [2, 0], [3, 0]]);
        assert!(!s.empty);
        let e = sample_nodes(&SparseDepthMap::empty(4, 4), 5, 0).unwrap();
        assert!(e.empty && e.pixels.is_empty());
        assert!(sample_nodes(&m, 0, 0).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_distinct() {
        let depth: Vec<f32> = (0..256)
            .map(|i| if i % 3 == 0 { 1.0 + i as f32 } else { 0.0 })
            .collect();
        let m = SparseDepthMap::from_depth(16, 16, depth).unwrap();
        let a = sample_nodes(&m, 20, 7).unwrap();
        let b = sample_nodes(&m, 20, 7).unwrap();
        let c = sample_nodes(&m, 20, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.pixels.len(), 20);
        let mut uniq = a.pixels.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 20);
        assert!(a.pixels.iter().all(|&[u, v]| m.mask()[v * 16 + u]));
    }
}
