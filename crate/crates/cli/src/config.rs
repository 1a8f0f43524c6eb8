//! Run configuration: one TOML document, with command-line flags layered on top.

use std::path::{Path, PathBuf};

use cfam_core::compat::{CompatConfig, Mode};
use cfam_core::data::ItemShape;
use cfam_core::gan::GanConfig;
use cfam_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Synthetic class glyphs.
    Procedural,
    /// Two-dimensional Gaussian clusters.
    Gaussian,
    /// MNIST-style IDX files.
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    /// Directory holding a generated dataset.
    pub dir: PathBuf,
    pub per_class: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub shifts: Vec<usize>,
    pub ratios: [f64; 3],
    pub pairs_per_item: usize,
    pub mixture_std: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Procedural,
            dir: PathBuf::from("data"),
            per_class: 200,
            image_size: 16,
            num_classes: 10,
            shifts: vec![1, 2],
            ratios: [0.6, 0.2, 0.2],
            pairs_per_item: 1,
            mixture_std: 0.03,
            idx_images: None,
            idx_labels: None,
        }
    }
}

/// Model hyperparameters; the item shape comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub k: usize,
    pub n: usize,
    pub trunk: Vec<usize>,
    pub lambda_m: f64,
    pub init_c: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pcd,
            k: 2,
            n: 20,
            trunk: vec![64, 64],
            lambda_m: 0.0,
            init_c: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn compat(&self, image: ItemShape) -> CompatConfig {
        CompatConfig {
            trunk: self.trunk.clone(),
            lambda_m: self.lambda_m,
            init_c: self.init_c,
            ..CompatConfig::new(self.mode, self.k, self.n, image)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub top_n: usize,
    /// Number of queries for `recommend`; `None` uses every item of the split.
    pub queries: Option<usize>,
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_n: 10,
            queries: None,
            samples: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds every stage; per-section `seed` keys must stay unset.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gan: GanConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: Self = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if config.train.seed != 0 || config.gan.seed != 0 {
            return Err(CliError::Usage(
                "set the top-level `seed` instead of a section seed".into(),
            ));
        }
        Ok(config)
    }

    /// Pushes the run seed into the sections that carry their own.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.gan.seed = self.seed;
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(
            (c.train.learning_rate, c.train.beta1, c.train.beta2),
            (0.001, 0.9, 0.999)
        );
        assert_eq!((c.train.batch_size, c.train.epochs), (100, 50));
        assert_eq!((c.gan.learning_rate, c.gan.beta1, c.gan.beta2), (0.0002, 0.5, 0.999));
        assert_eq!((c.gan.z_dim, c.gan.lambda_gp, c.gan.lambda_dra), (20, 0.5, 0.5));
        assert_eq!((c.model.k + 1) * c.model.n, 60);
        assert_eq!(c.data.shifts, [1, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("seed = 3\n[model]\nk = 5\n").is_ok());
        assert!(toml::from_str::<RunConfig>("[model]\nkk = 5\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nmomentum = 0.9\n").is_err());
    }
}
