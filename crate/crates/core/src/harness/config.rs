use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Sample, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::parallel::Exec;

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Steps that count as one epoch for the learning-rate schedule.
    pub steps_per_epoch: usize,
    /// The learning rate halves after this many epochs.
    pub halve_every_epochs: usize,
    /// Sparsity ratio of training inputs.
    pub ratio: f64,
    /// Seeds batch order and graph node sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            steps_per_epoch: 200,
            halve_every_epochs: 10,
            ratio: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let period = self.steps_per_epoch * self.halve_every_epochs;
        if period == 0 {
            return self.lr;
        }
        self.lr * 0.5f64.powi((step / period) as i32)
    }
}

/// Everything one run needs. Defaults give the 64×64 desk-scale profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    /// Read samples from this dataset manifest instead of generating them.
    pub manifest: Option<PathBuf>,
    /// Sparsity ratio of evaluation inputs.
    pub eval_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            manifest: None,
            eval_ratio: 0.05,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Use `seed` for initialisation, batch order and node sampling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Samples of `split`: read from `manifest` when set, otherwise generated
    /// at `train.ratio` (train) or `eval_ratio` (eval).
    pub fn samples(&self, split: Split, exec: Exec) -> Result<Vec<Sample>> {
        let ratio = match split {
            Split::Train => self.train.ratio,
            Split::Eval => self.eval_ratio,
        };
        match &self.manifest {
            Some(path) => {
                let m = DatasetManifest::load(path)?;
                if m.ratio != ratio {
                    log::warn!(
                        "dataset {} was written at ratio {}, config asks for {ratio}",
                        path.display(),
                        m.ratio
                    );
                }
                let root = path.parent().unwrap_or(Path::new("."));
                m.read_samples(root, Some(split), exec)
            }
            None => self.data.samples(split, ratio, exec),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_input(self.data.width, self.data.height)?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config(format!(
                "invalid optimiser settings lr={} beta1={} beta2={}",
                t.lr, t.beta1, t.beta2
            )));
        }
        for r in [t.ratio, self.eval_ratio] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("sparsity ratio must lie in (0, 1], got {r}")));
            }
        }
        Ok(())
    }
}
