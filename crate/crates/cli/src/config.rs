//! JSON run configuration.
//!
//! ```json
//! {
//!   "config_version": 1,
//!   "model": { "layers": 2, "heads": 4, "channels": 32, "slices": 8,
//!              "mlp_ratio": 2.0, "tau0": 0.5, "tau_min": 0.1,
//!              "eps_denom": 1e-8, "seed": 1,
//!              "variant": { "ada_temp": true, "reparam": true, "f_projection": false } },
//!   "train": { "epochs": 200, "lr": 0.001, "weight_decay": 1e-5,
//!              "schedule": "cosine", "batch_size": 1, "loss_groups": [],
//!              "seed": 1, "ranks": 1, "record_time": true },
//!   "data": { "train_samples": 8, "test_samples": 4, "n_points": 512, "seed": 7 },
//!   "eval": { "pressure_channel": 0, "rho": 1.0, "v_inf": 1.0, "ref_area": null },
//!   "parallel": { "comm_ranks": 4, "comm_points": [1000, 10000, 100000, 1000000],
//!                 "check_ranks": [1, 2, 4, 8], "check_points": 64 },
//!   "ablation": { "seeds": [1, 2, 3] }
//! }
//! ```
//!
//! Every section and key is optional; the values above are the defaults.
//! Input and output widths come from the data. `--seed` replaces
//! `model.seed`, `train.seed` and `data.seed`, and makes `ablation.seeds`
//! that single seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use eidetic::attention::AttentionVariant;
use eidetic::model::ModelConfig;
use eidetic::train::{CoefficientOptions, TrainConfig};
use eidetic::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub channels: usize,
    pub slices: usize,
    pub mlp_ratio: f64,
    pub tau0: f64,
    pub tau_min: f64,
    pub eps_denom: f64,
    pub seed: u64,
    pub variant: AttentionVariant,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::new(2, 4, 32, 8, 1, 1);
        Self {
            layers: base.layers,
            heads: base.heads,
            channels: base.channels,
            slices: base.slices,
            mlp_ratio: base.mlp_ratio,
            tau0: base.tau0,
            tau_min: base.tau_min,
            eps_denom: base.eps_denom,
            seed: 1,
            variant: base.variant,
        }
    }
}

impl ModelSection {
    pub fn build(&self, d_in: usize, d_out: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            channels: self.channels,
            slices: self.slices,
            d_in,
            d_out,
            mlp_ratio: self.mlp_ratio,
            tau0: self.tau0,
            tau_min: self.tau_min,
            eps_denom: self.eps_denom,
            seed: self.seed,
            variant: self.variant,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_samples: usize,
    pub test_samples: usize,
    pub n_points: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train_samples: 8, test_samples: 4, n_points: 512, seed: 7 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelSection {
    pub comm_ranks: usize,
    pub comm_points: Vec<usize>,
    pub check_ranks: Vec<usize>,
    pub check_points: usize,
}

impl Default for ParallelSection {
    fn default() -> Self {
        Self {
            comm_ranks: 4,
            comm_points: vec![1_000, 10_000, 100_000, 1_000_000],
            check_ranks: vec![1, 2, 4, 8],
            check_points: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3] }
    }
}

fn default_train() -> TrainConfig {
    let mut t = TrainConfig::new(200);
    t.seed = 1;
    t
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: CoefficientOptions,
    #[serde(default)]
    pub parallel: ParallelSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: 1,
            model: ModelSection::default(),
            train: default_train(),
            data: DataSection::default(),
            eval: CoefficientOptions::default(),
            parallel: ParallelSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if cfg.config_version != 1 {
            return Err(Error::Config(format!("unsupported config_version {}", cfg.config_version)));
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
        self.ablation.seeds = vec![seed];
    }
}
