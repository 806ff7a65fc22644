use crate::datagen::DataConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::models::{LmConfig, MoeSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything a run needs. Seeds inside the nested stage configs are
/// ignored: every stage derives its own seed from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub max_seq_len: usize,
    pub data: DataConfig,
    /// Families drawn for devices.
    pub device_families: Vec<String>,
    /// Family of the distilled bases and the MoE backbone.
    pub backbone_family: String,
    /// Number of knowledge clusters, which is also the number of experts.
    pub clusters: usize,
    /// Experts active per token.
    pub top_k: usize,
    /// Weight proxy averages by shard size instead of a plain mean.
    pub weighted_average: bool,
    pub local: TrainConfig,
    /// Light public-corpus pre-training of the shared student init.
    pub seed_base: TrainConfig,
    pub distill: DistillConfig,
    pub tune: TrainConfig,
    /// Rounds `R` of the multi-round baseline in the cost comparison.
    pub baseline_rounds: usize,
}

impl Default for PipelineConfig {
    /// The desk-scale fixture: 12 devices over 3 domains.
    fn default() -> Self {
        let train = |epochs, lr| TrainConfig {
            epochs,
            lr,
            batch_size: 16,
            seq_len: 16,
            seed: 0,
            grad_clip: Some(1.0),
        };
        PipelineConfig {
            seed: 7,
            max_seq_len: 16,
            data: DataConfig::default(),
            device_families: vec!["tinyA".into(), "tinyB".into()],
            backbone_family: "base".into(),
            clusters: 3,
            top_k: 2,
            weighted_average: false,
            local: train(8, 3e-3),
            seed_base: train(1, 3e-3),
            distill: DistillConfig {
                epochs: 3,
                ..DistillConfig::default()
            },
            tune: train(2, 2e-3),
            baseline_rounds: 10,
        }
    }
}

impl PipelineConfig {
    /// Small four-device, two-domain configuration for quick checks.
    pub fn smoke() -> Self {
        let mut c = PipelineConfig::default();
        c.data.num_domains = 2;
        c.data.devices_per_domain = 2;
        c.data.tokens_per_device = 1024;
        c.data.public_tokens = 1024;
        c.data.test_tokens = 512;
        c.clusters = 2;
        c.top_k = 1;
        c.backbone_family = "tinyA".into();
        c.local.epochs = 2;
        c.distill.epochs = 1;
        c.tune.epochs = 1;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_families.is_empty() {
            return Err(Error::Config("device_families is empty".into()));
        }
        for f in self.device_families.iter().chain([&self.backbone_family]) {
            LmConfig::family(f, self.data.vocab_size, self.max_seq_len)?;
        }
        MoeSpec {
            num_experts: self.clusters,
            top_k: self.top_k,
        }
        .validate()?;
        let n = self.data.num_domains * self.data.devices_per_domain;
        if n < self.clusters {
            return Err(Error::Config(format!(
                "{n} devices cannot form {} clusters",
                self.clusters
            )));
        }
        if self.baseline_rounds == 0 {
            return Err(Error::Config("baseline_rounds must be at least 1".into()));
        }
        self.distill.validate()
    }

    pub fn data_config(&self, seed: u64) -> DataConfig {
        DataConfig {
            seed,
            max_seq_len: self.max_seq_len,
            ..self.data.clone()
        }
    }

    pub fn family_config(&self, family: &str) -> Result<LmConfig> {
        LmConfig::family(family, self.data.vocab_size, self.max_seq_len)
    }

    pub fn moe_spec(&self) -> MoeSpec {
        MoeSpec {
            num_experts: self.clusters,
            top_k: self.top_k,
        }
    }

    /// Reads either a bare config or a run manifest (whose `config` field is
    /// used), so any manifest can be replayed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let cfg = match value.get("config") {
            Some(inner) if value.get("seeds").is_some() => serde_json::from_value(inner.clone())?,
            _ => serde_json::from_value(value)?,
        };
        Ok(cfg)
    }

    /// Canonical JSON: fixed field order, pretty-printed.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
