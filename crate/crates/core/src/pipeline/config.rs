use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::Connectivity;
use crate::phantom::PhantomConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the distance loss. Zero trains on classification alone.
    pub lambda: f64,
    pub seed: u64,
    pub threshold_frac: f64,
    pub suv_frac: f64,
    pub optimizer: AdamConfig,
    /// Width of the first conv layer; later layers are 1, 2, 2, 4, 4, 8, 8 times this.
    pub base_width: usize,
    pub max_suv: f32,
    pub target_spacing: [f64; 3],
    pub connectivity: Connectivity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 60,
            learning_rate: 1e-3,
            lambda: 1.0,
            seed: 0,
            threshold_frac: 0.4,
            suv_frac: 0.4,
            optimizer: AdamConfig::default(),
            base_width: 32,
            max_suv: 30.0,
            target_spacing: [2.0, 2.0, 2.0],
            connectivity: Connectivity::Six,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.threshold_frac > 0.0 && self.threshold_frac < 1.0) {
            return bad("threshold_frac must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.suv_frac) {
            return bad("suv_frac must lie in [0, 1]");
        }
        if self.base_width == 0 {
            return bad("base_width must be at least 1");
        }
        if !(self.max_suv > 0.0) {
            return bad("max_suv must be positive");
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Everything one experiment needs, as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub n_per_class: usize,
    pub folds: usize,
    /// Number of cases rendered as CAM/mask overlays by the report.
    pub overlay_samples: usize,
    /// Distance-loss weights run by `crossval --sweep`.
    pub lambda_sweep: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phantom: PhantomConfig::default(),
            train: TrainConfig::default(),
            n_per_class: 50,
            folds: 5,
            overlay_samples: 4,
            lambda_sweep: vec![0.0, 0.3, 1.0, 3.0],
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale benchmark: 100 cases of 64×64×96 with confounders,
    /// 5 folds, 60 epochs, and a classifier with widths 8..64 so that both
    /// distance-loss settings train in a few minutes on one CPU core.
    pub fn standard_benchmark() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.train.base_width = 8;
        cfg.train.epochs = 60;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.train.validate()?;
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("need at least two folds".into()));
        }
        if self.lambda_sweep.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("lambda_sweep entries must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
