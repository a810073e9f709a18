use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::LongTailSpec;

/// Training hyper-parameters and the switches the ablations flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Scenes drawn from the image bank per batch.
    pub n_ibr: usize,
    pub batch_size: usize,
    /// Total epochs, warm-up included.
    pub epochs: usize,
    /// Leading epochs trained on the classification loss alone.
    pub warmup_epochs: usize,
    pub lr: f64,
    /// Down-scale factor of the multi-scale consistency term.
    pub scale_factor: f64,
    pub seed: u64,
    pub use_ibr: bool,
    pub use_dw_p: bool,
    pub use_dw_w: bool,
    pub dc_in_p: bool,
    pub dc_in_w: bool,
    pub use_pcm: bool,
    pub proto_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_ibr: 4,
            batch_size: 16,
            epochs: 220,
            warmup_epochs: 200,
            lr: 4.0,
            scale_factor: 0.5,
            seed: 0,
            use_ibr: true,
            use_dw_p: true,
            use_dw_w: true,
            dc_in_p: true,
            dc_in_w: true,
            use_pcm: false,
            proto_threshold: 0.3,
        }
    }
}

impl TrainConfig {
    /// Classification loss only, no bank.
    pub fn cls_only() -> Self {
        Self {
            use_ibr: false,
            use_dw_p: false,
            use_dw_w: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            return bad(format!("scale_factor {} must lie in (0, 1)", self.scale_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.proto_threshold) {
            return bad(format!("proto_threshold {} must lie in [0, 1]", self.proto_threshold));
        }
        Ok(())
    }
}

/// World, model size, training setup and seed list for one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: LongTailSpec,
    pub depth: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

impl ExperimentConfig {
    pub fn default_long_tail() -> Self {
        Self {
            world: LongTailSpec::default_long_tail(0),
            depth: 16,
            train: TrainConfig::default(),
            seeds: default_seeds(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        // a textured background needs one direction outside the basis
        let required = self.world.class_count + 1 + usize::from(self.world.background_texture > 0.0);
        if self.depth < required {
            return Err(Error::DepthTooSmall {
                depth: self.depth,
                required,
            });
        }
        Ok(())
    }
}
