//! Seeded street-like scenes: a ground plane, a distant back wall and a few
//! fronto-parallel boxes standing on the ground, each surface with its own
//! flat colour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{CameraIntrinsics, SparseDepthMap};

pub const MIN_DEPTH: f32 = 1.0;
pub const MAX_DEPTH: f32 = 40.0;
/// Camera height above the ground plane in meters.
pub const CAMERA_HEIGHT: f64 = 3.0;
pub const RGB_NOISE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    /// Dense depth in meters, row-major.
    pub depth: Vec<f32>,
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    pub intrinsics: CameraIntrinsics,
    /// Surface index per pixel (0 = ground, 1 = wall, 2.. = boxes).
    pub surface: Vec<u8>,
    pub seed: u64,
}

impl SyntheticScene {
    /// The dense depth as a fully labelled map.
    pub fn ground_truth(&self) -> SparseDepthMap {
        SparseDepthMap::from_depth(self.width, self.height, self.depth.clone()).expect("dimensions match")
    }
}

/// Intrinsics used for generated scenes: about 56° horizontal field of view,
/// principal point at the image centre.
pub fn scene_intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    let f = 60.0 * width as f64 / 64.0;
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    }
}

fn distinct_colour(rng: &mut ChaCha8Rng, taken: &[[f64; 3]]) -> [f64; 3] {
    let mut best = [0.5; 3];
    let mut best_gap = -1.0;
    for _ in 0..64 {
        let c = [
            rng.random_range(0.1..0.95),
            rng.random_range(0.1..0.95),
            rng.random_range(0.1..0.95),
        ];
        let gap = taken
            .iter()
            .map(|t| (0..3).map(|i| (t[i] - c[i]).abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if gap >= 0.35 {
            return c;
        }
        if gap > best_gap {
            best_gap = gap;
            best = c;
        }
    }
    best
}

/// Generate a scene. Box depths lie in `[2, 30]` m, the wall in `[36, 40]` m
/// and all depths are clamped to `[1, 40]` m.
pub fn generate_scene(width: usize, height: usize, seed: u64) -> Result<SyntheticScene> {
    if width < 8 || height < 8 {
        return Err(Error::Argument(format!("scene of {width}x{height} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = scene_intrinsics(width, height);
    let wall = rng.random_range(36.0..40.0);
    let mut depth = vec![0.0f64; width * height];
    let mut surface = vec![0u8; width * height];
    for v in 0..height {
        // Ray through the pixel centre hits the ground when it points down.
        let dv = v as f64 + 0.5 - k.cy;
        let ground = if dv > 0.0 {
            CAMERA_HEIGHT * k.fy / dv
        } else {
            f64::INFINITY
        };
        for u in 0..width {
            let p = v * width + u;
            if ground < wall {
                depth[p] = ground;
                surface[p] = 0;
            } else {
                depth[p] = wall;
                surface[p] = 1;
            }
        }
    }
    let n_boxes = rng.random_range(2..=5);
    for b in 0..n_boxes {
        let z: f64 = rng.random_range(2.0..30.0);
        let w_m: f64 = rng.random_range(1.0..6.0);
        let h_m: f64 = rng.random_range(1.0..4.0);
        let x_c: f64 = rng.random_range(-0.6..0.6) * z * k.cx / k.fx;
        let u0 = ((x_c - w_m / 2.0) * k.fx / z + k.cx).floor().max(0.0) as usize;
        let u1 = (((x_c + w_m / 2.0) * k.fx / z + k.cx).ceil().max(0.0) as usize).min(width);
        let v_ground = CAMERA_HEIGHT * k.fy / z + k.cy;
        let v0 = ((CAMERA_HEIGHT - h_m) * k.fy / z + k.cy).floor().max(0.0) as usize;
        let v1 = (v_ground.ceil().max(0.0) as usize).min(height);
        for v in v0..v1 {
            for u in u0..u1 {
                let p = v * width + u;
                if z < depth[p] {
                    depth[p] = z;
                    surface[p] = 2 + b as u8;
                }
            }
        }
    }
    let mut colours: Vec<[f64; 3]> = Vec::new();
    for _ in 0..2 + n_boxes {
        let c = distinct_colour(&mut rng, &colours);
        colours.push(c);
    }
    let noise = Normal::new(0.0, RGB_NOISE).expect("valid sigma");
    let plane = width * height;
    let mut rgb = vec![0.0f32; 3 * plane];
    let depth: Vec<f32> = depth
        .into_iter()
        .map(|d| (d as f32).clamp(MIN_DEPTH, MAX_DEPTH))
        .collect();
    for p in 0..plane {
        let shade = 1.0 - 0.25 * (depth[p] - MIN_DEPTH) as f64 / (MAX_DEPTH - MIN_DEPTH) as f64;
        let c = colours[surface[p] as usize];
        for ch in 0..3 {
            let v = c[ch] * shade + noise.sample(&mut rng);
            rgb[ch * plane + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(SyntheticScene {
        width,
        height,
        depth,
        rgb: Tensor::new(vec![3, height, width], rgb)?,
        intrinsics: k,
        surface,
        seed,
    })
}
