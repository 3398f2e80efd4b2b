use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::graph::{CoordSystem, GraphConfig};

/// How the final prediction is formed from the two decoder branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integration {
    /// Confidence-weighted blend of the two branch predictions.
    End,
    /// Progressive fusion of the branches' intermediate features.
    Feature,
}

/// Where graph propagation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Encoder,
    Decoder,
    Both,
    None,
}

impl Placement {
    pub fn encoder(self) -> bool {
        matches!(self, Placement::Encoder | Placement::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, Placement::Decoder | Placement::Both)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Placement::Encoder => "encoder",
            Placement::Decoder => "decoder",
            Placement::Both => "both",
            Placement::None => "none",
        }
    }
}

/// Architecture and loss hyperparameters. Defaults describe the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of downsampling levels `L`.
    pub levels: usize,
    /// Feature width of levels `1..=L`; the stems use the level-1 width.
    pub channels: Vec<usize>,
    /// Neighbours per graph node.
    pub k: usize,
    pub nodes_per_level: Vec<usize>,
    pub coord_system: CoordSystem,
    pub fusion: FusionStrategy,
    pub integration: Integration,
    pub propagation_placement: Placement,
    /// Edge weights of each stream also see the partner stream.
    pub co_attention: bool,
    /// Width of the feature-integration convolutions.
    pub integration_channels: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub leaky_slope: f64,
    /// Depth in meters is divided by this before entering the network and
    /// predictions are multiplied by it.
    pub depth_scale: f64,
    /// Weight initialisation seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            channels: vec![64; 3],
            k: 6,
            nodes_per_level: vec![10_000, 5_000, 2_500],
            coord_system: CoordSystem::Camera3d,
            fusion: FusionStrategy::Sg,
            integration: Integration::Feature,
            propagation_placement: Placement::Encoder,
            co_attention: true,
            integration_channels: 64,
            gamma1: 0.5,
            gamma2: 0.01,
            leaky_slope: 0.2,
            depth_scale: 10.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reduced model for 64×64 scenes: 32 channels and a few hundred nodes.
    pub fn desk() -> Self {
        Self {
            channels: vec![32; 3],
            nodes_per_level: vec![256, 128, 64],
            integration_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.channels.len() != self.levels || self.nodes_per_level.len() != self.levels {
            return Err(Error::Config(format!(
                "{} levels need {} channel widths and node counts, got {} and {}",
                self.levels,
                self.levels,
                self.channels.len(),
                self.nodes_per_level.len()
            )));
        }
        if self.channels.contains(&0)
            || self.nodes_per_level.contains(&0)
            || self.k == 0
            || self.integration_channels == 0
        {
            return Err(Error::Config(
                "channel widths, node counts and k must be positive".into(),
            ));
        }
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {} and {}",
                self.gamma1, self.gamma2
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(Error::Config(format!(
                "depth scale must be positive, got {}",
                self.depth_scale
            )));
        }
        Ok(())
    }

    /// Width at pyramid level `l` (`0..=L`).
    pub fn width(&self, l: usize) -> usize {
        self.channels[l.saturating_sub(1)]
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            levels: self.levels,
            k: self.k,
            nodes_per_level: self.nodes_per_level.clone(),
            coord_system: self.coord_system,
        }
    }

    /// Inputs must be divisible by `2^L`.
    pub fn check_input(&self, width: usize, height: usize) -> Result<()> {
        let m = 1usize << self.levels;
        if width % m != 0 || height % m != 0 || width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "input {width}x{height} is not a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Graph-setting name such as `10K_3D_6NN` (first level's node count).
    pub fn graph_tag(&self) -> String {
        let n = self.nodes_per_level[0];
        let count = if n >= 1000 && n % 1000 == 0 {
            format!("{}K", n / 1000)
        } else {
            n.to_string()
        };
        format!("{count}_{}_{}NN", self.coord_system.tag(), self.k)
    }
}
