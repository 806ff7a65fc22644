//! Merging distilled dense bases into one MoE, tuning it with experts
//! frozen, and routing diagnostics.

use crate::error::{Error, Result};
use crate::models::{
    forward_values, is_expert_param, param_layout, train_lm, DenseLm, LmConfig, LossCurve, MoeLm, MoeSpec, ParamSet,
    Token, TokenBatch, TrainConfig,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

const ROUTING_BATCH: usize = 32;

/// Standard deviation of the freshly initialized gate.
pub const GATE_INIT_STD: f64 = 0.02;

/// Where one MoE tensor came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Bit copy of `source` in base model `base`.
    Expert { base: usize, source: String },
    /// Elementwise mean of the same tensor over all bases, ascending order.
    SharedMean { bases: usize },
    /// Fresh `N(0, GATE_INIT_STD²)` draw.
    GateInit { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    /// One entry per MoE tensor, in parameter order.
    pub provenance: Vec<(String, Provenance)>,
    /// Hex SHA-256 of every expert tensor right after the merge.
    pub expert_checksums: BTreeMap<String, String>,
}

/// Hex SHA-256 of a tensor's shape and little-endian values.
pub fn tensor_checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(t.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn expert_checksums(params: &ParamSet) -> BTreeMap<String, String> {
    params
        .iter()
        .filter(|(n, _)| is_expert_param(n))
        .map(|(n, t)| (n.to_string(), tensor_checksum(t)))
        .collect()
}

/// Maps `layers.{l}.experts.{e}.{w}` to `(e, layers.{l}.ffn.{w})`.
fn expert_source(name: &str) -> Option<(usize, String)> {
    let (head, rest) = name.split_once(".experts.")?;
    let (e, w) = rest.split_once('.')?;
    Some((e.parse().ok()?, format!("{head}.ffn.{w}")))
}

/// Builds the MoE from `K` same-config bases: expert `i` of every layer is
/// base `i`'s FFN (bit copy), every other non-gate tensor is the mean of the
/// bases, and gates are fresh seeded draws.
pub fn merge(bases: &[DenseLm], top_k: usize, seed: u64) -> Result<(MoeLm, MergeReport)> {
    let first = bases.first().ok_or(Error::Empty("base models"))?;
    let config = first.config.clone();
    if let Some((i, _)) = bases.iter().enumerate().find(|(_, b)| b.config != config) {
        return Err(Error::Config(format!("base {i} config differs from base 0")));
    }
    let moe = MoeSpec {
        num_experts: bases.len(),
        top_k,
    };
    moe.validate()?;
    let mut params = ParamSet::new();
    let mut provenance = Vec::new();
    for (name, shape) in param_layout(&config, Some(&moe)) {
        let (t, p) = if let Some((e, source)) = expert_source(&name) {
            let t = bases[e]
                .params
                .get(&source)
                .ok_or_else(|| Error::Config(format!("base {e} lacks `{source}`")))?
                .clone();
            (t, Provenance::Expert { base: e, source })
        } else if name.ends_with(".gate") {
            let layer: u64 = name
                .trim_start_matches("layers.")
                .split('.')
                .next()
                .and_then(|l| l.parse().ok())
                .expect("gate names carry a layer index");
            let s = derive_seed(seed, "gate-init", layer);
            (
                Tensor::randn(&shape, GATE_INIT_STD, &mut rng_from_seed(s)),
                Provenance::GateInit { seed: s },
            )
        } else {
            let ts = bases
                .iter()
                .map(|b| {
                    b.params
                        .get(&name)
                        .ok_or_else(|| Error::Config(format!("base lacks `{name}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            (Tensor::mean_of(&ts)?, Provenance::SharedMean { bases: bases.len() })
        };
        provenance.push((name.clone(), p));
        params.insert(name, t);
    }
    let model = MoeLm::from_params(config, moe, params)?;
    let report = MergeReport {
        provenance,
        expert_checksums: expert_checksums(&model.params),
    };
    Ok((model, report))
}

/// Share of MoE parameters that stay trainable when experts are frozen.
pub fn trainable_fraction(config: &LmConfig, moe: &MoeSpec) -> f64 {
    let (mut train, mut total) = (0usize, 0usize);
    for (name, shape) in param_layout(config, Some(moe)) {
        let n: usize = shape.iter().product();
        total += n;
        if !is_expert_param(&name) {
            train += n;
        }
    }
    train as f64 / total as f64
}

/// Trains every non-expert tensor (embeddings, attention, norms, gates,
/// head) on next-token loss, then verifies that every expert tensor still
/// hashes to its pre-tuning checksum.
pub fn tune_global(moe: &MoeLm, public: &[Token], cfg: &TrainConfig) -> Result<(MoeLm, LossCurve)> {
    if public.is_empty() {
        return Err(Error::Empty("public corpus"));
    }
    let before = expert_checksums(&moe.params);
    let mut m = moe.clone();
    let curve = train_lm(&mut m, public, cfg, |n| !is_expert_param(n))?;
    let after = expert_checksums(&m.params);
    if let Some((name, _)) = before.iter().find(|(n, c)| after.get(*n) != Some(c)) {
        return Err(Error::FrozenViolation(format!(
            "expert tensor `{name}` changed during tuning"
        )));
    }
    Ok((m, curve))
}

/// Expert activation frequencies, in percent of scored tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub num_experts: usize,
    pub tokens: usize,
    /// `[layer][expert]`
    pub per_layer: Vec<Vec<f64>>,
    /// Layer-averaged `[expert]`.
    pub overall: Vec<f64>,
}

impl RoutingStats {
    /// Expert with the highest layer-averaged activation (lowest index on ties).
    pub fn most_active(&self) -> usize {
        let mut best = 0;
        for (e, &f) in self.overall.iter().enumerate() {
            if f > self.overall[best] {
                best = e;
            }
        }
        best
    }
}

/// Routes every token of `corpus` (teacher-forced windows of `seq_len`) and
/// counts how often each expert is among the top-k.
pub fn routing_stats(moe: &MoeLm, corpus: &[Token], seq_len: usize) -> Result<RoutingStats> {
    let k = moe.moe.num_experts;
    let layers = moe.config.n_layers;
    let mut counts = vec![vec![0usize; k]; layers];
    let mut tokens = 0usize;
    let seq_len = seq_len.min(moe.config.max_seq_len);
    let windows: Vec<&[Token]> = corpus.chunks(seq_len).collect();
    if windows.is_empty() {
        return Err(Error::Empty("routing corpus"));
    }
    let mut start = 0;
    while start < windows.len() {
        let len = windows[start].len();
        let mut end = start;
        while end < windows.len() && end - start < ROUTING_BATCH && windows[end].len() == len {
            end += 1;
        }
        let batch = TokenBatch::from_windows(&windows[start..end])?;
        let fv = forward_values(moe, &batch)?;
        for (l, sel) in fv.routing.iter().enumerate() {
            for token in sel {
                for &e in token {
                    counts[l][e] += 1;
                }
            }
        }
        tokens += batch.batch * len;
        start = end;
    }
    let per_layer: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| 100.0 * c as f64 / tokens as f64).collect())
        .collect();
    let overall = (0..k)
        .map(|e| per_layer.iter().map(|r| r[e]).sum::<f64>() / layers as f64)
        .collect();
    Ok(RoutingStats {
        num_experts: k,
        tokens,
        per_layer,
        overall,
    })
}

/// Routing statistics for each test domain; row `i` is domain `i`.
pub fn domain_routing(moe: &MoeLm, domains: &[Vec<Token>], seq_len: usize) -> Result<Vec<RoutingStats>> {
    domains.iter().map(|d| routing_stats(moe, d, seq_len)).collect()
}
