use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::BlobConfig;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::pipeline::{DpConfig, EncoderKind, ExperimentPlan, LabelConfig, Seeds, TransportKind};
use crate::watermark::EmbedConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Everything one experiment needs. Every seed is explicit so that a config
/// file alone fixes the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: BlobConfig,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub plan: ExperimentPlan,
    /// When false the trainers freeze without embedding and the chain check
    /// is skipped.
    pub watermark: bool,
    pub gate_threshold: f64,
    pub verify_eta_goal: f64,
    pub transport: TransportKind,
    /// Also run the clustering and extraction attacks on the finished run.
    #[serde(default)]
    pub attacks: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if cfg.schema_version > CONFIG_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "config schema {} is newer than supported {}",
                cfg.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Re-derives every role seed and the data seeds from one base seed.
    pub fn reseed(&mut self, seed: u64) {
        self.plan.reseed(seed);
        self.data.seed = crate::rng::derive_seed(seed, "data");
        self.split_seed = crate::rng::derive_seed(seed, "split");
    }

    /// Sets a uniform label expansion factor and resizes the last trainer's
    /// output to the new pseudo-class count.
    pub fn set_gamma(&mut self, g: usize) {
        let q = self.plan.label.q;
        self.plan.label.g = vec![g; q];
        if let Some(last) = self.plan.trainer_dims.last_mut().and_then(|d| d.last_mut()) {
            *last = q * g;
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let q = 4;
        let g = 2;
        let trainer_dims = vec![vec![8, 128, 128], vec![128, 128, 128], vec![128, 128, q * g]];
        let n = trainer_dims.len();
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            data: BlobConfig::default(),
            test_fraction: 0.25,
            split_seed: 11,
            plan: ExperimentPlan {
                client_dims: vec![64, 8],
                trainer_dims,
                encoder: EncoderKind::CentredLinear,
                trainer_activation: Activation::Identity,
                epochs: 20,
                lr: 0.005,
                momentum: 0.9,
                batch_size: 32,
                weight_decay: 0.0,
                early_stop: false,
                dp: DpConfig {
                    epsilon: Some(5.0),
                    clip_radius: 1.6,
                },
                label: LabelConfig::uniform(q, g, 0.05),
                watermark: EmbedConfig::default(),
                identities: (1..=n).map(|i| format!("trainer-{i}")).collect(),
                nonces: vec![0x5eed_0001, 0x5eed_0002, 0x5eed_0003],
                seeds: Seeds::from_base(2024, n),
            },
            watermark: true,
            gate_threshold: 0.9,
            verify_eta_goal: crate::verifier::DEFAULT_ETA_GOAL,
            transport: TransportKind::Inproc,
            attacks: false,
        }
    }
}
