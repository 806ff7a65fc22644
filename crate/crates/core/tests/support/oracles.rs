//! Measurements against the reference implementation and closed forms.

use super::reference::{brute_force_moe, reference_logits, Ffn};
use fedmoe::models::{
    evaluate_lm, forward, forward_values, loss_ce, moe_block_forward, DenseLm, FfnVars, LanguageModel, LmConfig, MoeLm,
    MoeSpec, ParamSet, Token, TokenBatch,
};
use fedmoe::rng::rng_from_seed;
use fedmoe::tensor::{Graph, Tensor};
use rand::Rng;

pub const FORWARD_TOL: f64 = 1e-10;
pub const BRUTE_FORCE_TOL: f64 = 1e-12;
pub const BRUTE_FORCE_TOKENS: usize = 1000;
pub const DENSE_EQUIV_TOL: f64 = 1e-10;
pub const PPL_REL_TOL: f64 = 1e-9;
pub const PPL_PAIRS: u64 = 50;
pub const UNIFORM_TOL: f64 = 1e-9;

pub fn small_config(seed: u64) -> LmConfig {
    LmConfig {
        arch_family: "tinyA".into(),
        vocab_size: 11,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 12,
        max_seq_len: 6,
        tie_embeddings: seed % 2 == 1,
    }
}

/// Re-draws every parameter with a wider spread than the training init so
/// attention and routing are far from uniform.
fn perturb(ps: &mut ParamSet, rng: &mut impl Rng) {
    for t in ps.tensors_mut() {
        *t = Tensor::randn(t.shape(), 0.5, rng);
    }
}

fn random_ids(n: usize, v: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

fn logits_vs_reference<M: LanguageModel>(model: &M, batch: &TokenBatch) -> f64 {
    let v = model.config().vocab_size;
    let got = forward_values(model, batch).unwrap().logits;
    let mut worst = 0.0f64;
    for b in 0..batch.batch {
        let ids = &batch.ids[b * batch.len..(b + 1) * batch.len];
        for (t, row) in reference_logits(model, ids).iter().enumerate() {
            for (a, want) in row.iter().enumerate() {
                let have = got.data()[(b * batch.len + t) * v + a];
                worst = worst.max((have - want).abs());
            }
        }
    }
    worst
}

/// Largest absolute logit difference between the graph forward pass and the
/// straight-line reference, over dense and top-k MoE models.
pub fn forward_oracle_error(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let r = &mut rng_from_seed(seed);
        let cfg = small_config(seed);
        let batch = TokenBatch::new(3, cfg.max_seq_len, random_ids(3 * cfg.max_seq_len, cfg.vocab_size, r)).unwrap();
        let mut dense = DenseLm::init(cfg.clone(), r).unwrap();
        perturb(&mut dense.params, r);
        worst = worst.max(logits_vs_reference(&dense, &batch));
        let spec = MoeSpec {
            num_experts: 4,
            top_k: 1 + (seed % 3) as usize,
        };
        let mut moe = MoeLm::init(cfg, spec, r).unwrap();
        perturb(&mut moe.params, r);
        worst = worst.max(logits_vs_reference(&moe, &batch));
    }
    worst
}

/// One MoE block on `BRUTE_FORCE_TOKENS` random tokens against exhaustive
/// subset search: largest absolute output difference and whether every
/// token selected the same experts.
pub fn moe_brute_force(seed: u64) -> (f64, bool) {
    let r = &mut rng_from_seed(seed);
    let (n, d, f, k_total, k) = (BRUTE_FORCE_TOKENS, 6, 10, 5, 2);
    let mut ps = ParamSet::new();
    for e in 0..k_total {
        ps.insert(format!("e.{e}.w1"), Tensor::randn(&[d, f], 0.5, r));
        ps.insert(format!("e.{e}.b1"), Tensor::randn(&[f], 0.5, r));
        ps.insert(format!("e.{e}.w2"), Tensor::randn(&[f, d], 0.5, r));
        ps.insert(format!("e.{e}.b2"), Tensor::randn(&[d], 0.5, r));
    }
    ps.insert("gate", Tensor::randn(&[d, k_total], 1.0, r));
    let x = Tensor::randn(&[n, d], 1.0, r);
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, |_| false);
    let xv = g.constant(x.clone());
    let experts: Vec<FfnVars> = (0..k_total)
        .map(|e| FfnVars::bind(&bound, &format!("e.{e}")).unwrap())
        .collect();
    let (y, routing) = moe_block_forward(&mut g, xv, bound.get("gate").unwrap(), &experts, k).unwrap();
    let y = g.value(y).data().to_vec();
    let oracle_experts: Vec<Ffn> = (0..k_total).map(|e| Ffn::from_params(&ps, &format!("e.{e}"))).collect();
    let gate = ps.get("gate").unwrap().data();
    let mut worst = 0.0f64;
    let mut same_routing = true;
    for t in 0..n {
        let (want, chosen) = brute_force_moe(&x.data()[t * d..(t + 1) * d], gate, &oracle_experts, k);
        for (a, b) in y[t * d..(t + 1) * d].iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        let mut sel = routing[t].clone();
        sel.sort_unstable();
        same_routing &= sel == chosen;
    }
    (worst, same_routing)
}

/// MoE whose experts all equal the dense FFN, with `k = K`, against the
/// dense model: largest absolute logit difference.
pub fn dense_equivalence_error(seeds: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let r = &mut rng_from_seed(seed);
        let cfg = small_config(seed);
        let mut dense = DenseLm::init(cfg.clone(), r).unwrap();
        perturb(&mut dense.params, r);
        let k_total = 2 + (seed % 3) as usize;
        let spec = MoeSpec {
            num_experts: k_total,
            top_k: k_total,
        };
        let mut moe = MoeLm::init(cfg.clone(), spec, r).unwrap();
        for (name, t) in moe.params.iter_mut() {
            if let Some(rest) = name.split_once(".experts.") {
                let (layer, tail) = (rest.0, rest.1.split_once('.').unwrap().1);
                *t = dense.params.get(&format!("{layer}.ffn.{tail}")).unwrap().clone();
            } else if name.ends_with(".gate") {
                *t = Tensor::randn(t.shape(), 1.0, r);
            } else {
                *t = dense.params.get(name).unwrap().clone();
            }
        }
        let batch = TokenBatch::new(4, cfg.max_seq_len, random_ids(4 * cfg.max_seq_len, cfg.vocab_size, r)).unwrap();
        let a = forward_values(&dense, &batch).unwrap().logits;
        let b = forward_values(&moe, &batch).unwrap().logits;
        worst = worst.max(a.max_abs_diff(&b));
    }
    worst
}

/// Largest `|Γ − exp(L_CE)| / Γ` over random model/corpus pairs, where
/// `Γ` comes from corpus evaluation and `L_CE` from the training loss on
/// the same windows.
pub fn perplexity_identity_error(pairs: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..pairs {
        let r = &mut rng_from_seed(1_000 + seed);
        let cfg = small_config(seed);
        let mut m = DenseLm::init(cfg.clone(), r).unwrap();
        perturb(&mut m.params, r);
        let windows = 1 + r.random_range(0..40usize);
        let ids = random_ids(windows * cfg.max_seq_len, cfg.vocab_size, r);
        let corpus: Vec<Token> = ids.iter().map(|&i| i as Token).collect();
        let gamma = evaluate_lm(&m, &corpus, cfg.max_seq_len).unwrap().ppl;
        let batch = TokenBatch::new(windows, cfg.max_seq_len, ids).unwrap();
        let mut g = Graph::new();
        let bound = m.params.bind(&mut g, |_| false);
        let out = forward(&mut g, &m, &bound, &batch).unwrap();
        let ce = loss_ce(&mut g, out.logits, &batch).unwrap();
        let via_loss = g.value(ce).item().exp();
        worst = worst.max((gamma - via_loss).abs() / gamma);
    }
    worst
}

/// `|Γ − V|` for the all-zero (uniform) model.
pub fn uniform_perplexity_error() -> f64 {
    let mut worst = 0.0f64;
    for v in [2, 7, 64, 300] {
        let mut cfg = small_config(0);
        cfg.vocab_size = v;
        let m = DenseLm::zeros(cfg).unwrap();
        let r = &mut rng_from_seed(v as u64);
        let corpus: Vec<Token> = (0..50).map(|_| r.random_range(0..v) as Token).collect();
        let gamma = evaluate_lm(&m, &corpus, 6).unwrap().ppl;
        worst = worst.max((gamma - v as f64).abs());
    }
    worst
}
