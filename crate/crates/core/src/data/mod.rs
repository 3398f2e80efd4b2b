//! Depth PNG I/O, synthetic scenes, sparsification, dataset manifests and
//! the nearest-observed-fill baseline.

mod baseline;
mod manifest;
mod png;
mod sparsify;
mod synth;

pub use baseline::nearest_fill;
pub use manifest::{derive_seed, write_dataset, DatasetManifest, ManifestEntry, Sample, Split, SyntheticSpec};
pub use png::{load_depth_png, load_rgb_png, save_depth_png, save_gray_png, save_rgb_png, DEPTH_PNG_SCALE};
pub use sparsify::{base_cells, density, sparsify, SparsePattern, SWEEP_RATIOS};
pub use synth::{generate_scene, scene_intrinsics, SyntheticScene, CAMERA_HEIGHT, MAX_DEPTH, MIN_DEPTH, RGB_NOISE};
