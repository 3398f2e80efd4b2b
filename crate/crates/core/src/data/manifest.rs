use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::png::{load_depth_png, load_rgb_png, save_depth_png, save_rgb_png};
use super::sparsify::{sparsify, SparsePattern};
use super::synth::generate_scene;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{CameraIntrinsics, SparseDepthMap};
use crate::io::atomic_write;
use crate::parallel::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Eval => 2,
        }
    }
}

/// One input/target pair held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: Tensor<f32>,
    pub sparse: SparseDepthMap,
    pub ground_truth: SparseDepthMap,
    pub intrinsics: CameraIntrinsics,
    /// Seed the scene and its sparse pattern were drawn from.
    pub seed: u64,
}

/// Independent 64-bit seed for item `index` of stream `stream`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How a synthetic split is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub pattern: SparsePattern,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            train_scenes: 200,
            eval_scenes: 50,
            pattern: SparsePattern::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_scenes,
            Split::Eval => self.eval_scenes,
        }
    }

    /// Scene seed of sample `i`; train and eval scenes never share seeds.
    pub fn scene_seed(&self, split: Split, i: usize) -> u64 {
        derive_seed(self.seed, split.stream(), i as u64)
    }

    /// Generate one split with inputs sparsified at `ratio`.
    pub fn samples(&self, split: Split, ratio: f64, exec: Exec) -> Result<Vec<Sample>> {
        parallel::map_range(exec, self.count(split), |i| {
            let seed = self.scene_seed(split, i);
            let scene = generate_scene(self.width, self.height, seed)?;
            let gt = scene.ground_truth();
            let sparse = sparsify(&gt, self.pattern, ratio, seed)?;
            Ok(Sample {
                id: format!(
                    "{}-{i:04}",
                    match split {
                        Split::Train => "train",
                        Split::Eval => "eval",
                    }
                ),
                rgb: scene.rgb,
                sparse,
                ground_truth: gt,
                intrinsics: scene.intrinsics,
                seed,
            })
        })
        .into_iter()
        .collect()
    }
}

/// Files of one sample, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub sparse: PathBuf,
    pub ground_truth: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub split: Split,
    pub seed: u64,
}

/// Index of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SyntheticSpec,
    pub ratio: f64,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Read the samples of `split` (all samples when `None`), resolving
    /// paths against `root`.
    pub fn read_samples(&self, root: &Path, split: Option<Split>, exec: Exec) -> Result<Vec<Sample>> {
        let entries: Vec<&ManifestEntry> = self
            .samples
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .collect();
        parallel::map(exec, &entries, |_, e| {
            Ok(Sample {
                id: e.id.clone(),
                rgb: load_rgb_png(&root.join(&e.rgb))?,
                sparse: load_depth_png(&root.join(&e.sparse))?,
                ground_truth: load_depth_png(&root.join(&e.ground_truth))?,
                intrinsics: e.intrinsics,
                seed: e.seed,
            })
        })
        .into_iter()
        .collect()
    }
}

/// Generate both splits into `dir` as PNGs plus `manifest.json`.
pub fn write_dataset(dir: &Path, spec: &SyntheticSpec, ratio: f64, exec: Exec) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Eval] {
        let samples = spec.samples(split, ratio, exec)?;
        let written: Vec<Result<ManifestEntry>> = parallel::map(exec, &samples, |_, s| {
            let rgb = PathBuf::from(format!("{}_rgb.png", s.id));
            let sparse = PathBuf::from(format!("{}_sparse.png", s.id));
            let gt = PathBuf::from(format!("{}_gt.png", s.id));
            save_rgb_png(&s.rgb, &dir.join(&rgb))?;
            save_depth_png(&s.sparse, &dir.join(&sparse))?;
            save_depth_png(&s.ground_truth, &dir.join(&gt))?;
            Ok(ManifestEntry {
                id: s.id.clone(),
                rgb,
                sparse,
                ground_truth: gt,
                intrinsics: s.intrinsics,
                split,
                seed: s.seed,
            })
        });
        for e in written {
            entries.push(e?);
        }
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        ratio,
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    atomic_write(&dir.join("manifest.json"), |w| Ok(w.write_all(json.as_bytes())?))?;
    Ok(manifest)
}
