use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture hyper-parameters of a decoder-only LM.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LmConfig {
    pub arch_family: String,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    /// Reuse the token embedding as the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

/// Expert count and routing width of an MoE LM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MoeSpec {
    pub num_experts: usize,
    pub top_k: usize,
}

/// Built-in architecture families. The three `tiny*` families are the
/// heterogeneous on-device models; `base` is the backbone of the MoE.
pub const FAMILIES: [&str; 4] = ["tinyA", "tinyB", "tinyC", "base"];

impl LmConfig {
    /// One of the built-in families over a shared vocabulary.
    pub fn family(tag: &str, vocab_size: usize, max_seq_len: usize) -> Result<Self> {
        let (n_layers, d_model, d_ffn) = match tag {
            "tinyA" => (2, 32, 128),
            "tinyB" => (3, 48, 192),
            "tinyC" => (4, 64, 128),
            "base" => (4, 64, 256),
            other => return Err(Error::Config(format!("unknown arch family `{other}`"))),
        };
        let cfg = LmConfig {
            arch_family: tag.to_string(),
            vocab_size,
            d_model,
            n_layers,
            n_heads: 4,
            d_ffn,
            max_seq_len,
            tie_embeddings: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("d_ffn and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters of one FFN (two weight matrices and their biases).
    pub fn ffn_params(&self) -> usize {
        2 * self.d_model * self.d_ffn + self.d_ffn + self.d_model
    }

    fn shared_params(&self) -> usize {
        let d = self.d_model;
        let embed = self.vocab_size * d + self.max_seq_len * d;
        let head = if self.tie_embeddings { 0 } else { d * self.vocab_size };
        // per layer: two layer norms and four attention projections
        embed + self.n_layers * (4 * d * d + 4 * d) + 2 * d + head
    }

    /// Exact parameter count of the dense LM with this config.
    pub fn parameter_count(&self) -> usize {
        self.shared_params() + self.n_layers * self.ffn_params()
    }

    /// Exact parameter count of the MoE LM built on this backbone.
    pub fn moe_parameter_count(&self, moe: &MoeSpec) -> usize {
        self.shared_params() + self.n_layers * (self.d_model * moe.num_experts + moe.num_experts * self.ffn_params())
    }
}

impl MoeSpec {
    /// `k == K` is accepted so that dense-equivalence checks can be run.
    pub fn validate(&self) -> Result<()> {
        if self.num_experts < 2 {
            return Err(Error::Config("an MoE needs at least two experts".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k {} must be in [1, {}]",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_are_valid_and_distinct() {
        let cfgs: Vec<_> = FAMILIES.iter().map(|f| LmConfig::family(f, 64, 16).unwrap()).collect();
        for (i, a) in cfgs.iter().enumerate() {
            for b in &cfgs[i + 1..] {
                assert_ne!((a.n_layers, a.d_model, a.d_ffn), (b.n_layers, b.d_model, b.d_ffn));
            }
        }
        assert!(LmConfig::family("tinyZ", 64, 16).is_err());
    }

    #[test]
    fn validation() {
        let mut c = LmConfig::family("tinyA", 64, 16).unwrap();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        assert!(MoeSpec {
            num_experts: 4,
            top_k: 0
        }
        .validate()
        .is_err());
        assert!(MoeSpec {
            num_experts: 4,
            top_k: 5
        }
        .validate()
        .is_err());
        assert!(MoeSpec {
            num_experts: 4,
            top_k: 2
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn parameter_count_by_hand_tiny_a() {
        // V=64, T=16, d=32, L=2, f=128
        let c = LmConfig::family("tinyA", 64, 16).unwrap();
        let per_layer = 2 * 32 + 4 * 32 * 32 + 2 * 32 + (32 * 128 + 128 + 128 * 32 + 32);
        let want = 64 * 32 + 16 * 32 + 2 * per_layer + 2 * 32 + 32 * 64;
        assert_eq!(c.parameter_count(), want);
    }

    #[test]
    fn parameter_counts_match_documented_table() {
        // V=64, T=16; values from the README table
        for (tag, want) in [("tinyA", 29_824), ("tinyB", 91_248), ("tinyC", 142_208), ("base", 208_256)] {
            assert_eq!(LmConfig::family(tag, 64, 16).unwrap().parameter_count(), want, "{tag}");
        }
        let base = LmConfig::family("base", 64, 16).unwrap();
        for (k, want) in [(2, 341_120), (3, 473_728), (4, 606_336)] {
            let spec = MoeSpec { num_experts: k, top_k: 2 };
            assert_eq!(base.moe_parameter_count(&spec), want, "K={k}");
        }
    }
}
