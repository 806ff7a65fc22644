use super::batch::TokenBatch;
use super::config::{LmConfig, MoeSpec};
use super::params::{init_params, param_layout, zero_params, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;
/// Additive causal mask value; finite so every op output stays finite, and
/// large enough that masked probabilities underflow to exactly zero.
const MASK_NEG: f64 = -1e30;

/// Common surface of the dense and MoE LMs.
pub trait LanguageModel: Send + Sync {
    fn config(&self) -> &LmConfig;
    fn moe(&self) -> Option<&MoeSpec> {
        None
    }
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    fn parameter_count(&self) -> usize {
        self.params().numel()
    }
}

/// Dense decoder-only transformer: learned absolute positions, pre-norm
/// blocks, GELU FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLm {
    pub config: LmConfig,
    pub params: ParamSet,
}

/// Transformer whose every FFN is replaced by `K` gated expert FFNs.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLm {
    pub config: LmConfig,
    pub moe: MoeSpec,
    pub params: ParamSet,
}

impl DenseLm {
    pub fn init<R: Rng + ?Sized>(config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, None, rng);
        Ok(DenseLm { config, params })
    }

    pub fn zeros(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let params = zero_params(&config, None);
        Ok(DenseLm { config, params })
    }

    pub fn from_params(config: LmConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        check_layout(&config, None, &params)?;
        Ok(DenseLm { config, params })
    }
}

impl MoeLm {
    pub fn init<R: Rng + ?Sized>(config: LmConfig, moe: MoeSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        moe.validate()?;
        let params = init_params(&config, Some(&moe), rng);
        Ok(MoeLm { config, moe, params })
    }

    pub fn from_params(config: LmConfig, moe: MoeSpec, params: ParamSet) -> Result<Self> {
        config.validate()?;
        moe.validate()?;
        check_layout(&config, Some(&moe), &params)?;
        Ok(MoeLm { config, moe, params })
    }
}

pub(crate) fn check_layout(config: &LmConfig, moe: Option<&MoeSpec>, params: &ParamSet) -> Result<()> {
    let layout = param_layout(config, moe);
    if layout.len() != params.len() {
        return Err(Error::shape(
            "params",
            format!("expected {} tensors, got {}", layout.len(), params.len()),
        ));
    }
    for ((name, shape), (pn, t)) in layout.iter().zip(params.iter()) {
        if name != pn || shape.as_slice() != t.shape() {
            return Err(Error::shape(
                "params",
                format!("expected {name} {shape:?}, got {pn} {:?}", t.shape()),
            ));
        }
    }
    Ok(())
}

impl LanguageModel for DenseLm {
    fn config(&self) -> &LmConfig {
        &self.config
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl LanguageModel for MoeLm {
    fn config(&self) -> &LmConfig {
        &self.config
    }
    fn moe(&self) -> Option<&MoeSpec> {
        Some(&self.moe)
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Graph handles of one FFN.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(FfnVars {
            w1: bound.get(&format!("{prefix}.w1"))?,
            b1: bound.get(&format!("{prefix}.b1"))?,
            w2: bound.get(&format!("{prefix}.w2"))?,
            b2: bound.get(&format!("{prefix}.b2"))?,
        })
    }
}

/// `gelu(x·W1 + b1)·W2 + b2` over the last axis.
pub fn ffn_forward(g: &mut Graph, x: Var, f: &FfnVars) -> Result<Var> {
    let h = g.matmul(x, f.w1)?;
    let h = g.add(h, f.b1)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, f.w2)?;
    g.add(y, f.b2)
}

/// Top-`k` expert ids per token, ordered by descending gate probability
/// with ties broken by lower expert index.
pub fn top_k_experts(probs: &[f64], num_experts: usize, k: usize) -> Vec<Vec<usize>> {
    probs
        .chunks(num_experts)
        .map(|row| {
            let mut idx: Vec<usize> = (0..num_experts).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect()
}

/// One MoE block on token states `x: [N, d]`:
/// `p = softmax(x·G)`, `y = Σ_{i ∈ top_k(p)} p_i · expert_i(x)`.
///
/// The selected probabilities are used as-is (no renormalization over the
/// top-k subset). Experts are evaluated densely and combined through a
/// masked weight matrix, so unselected experts contribute exactly zero.
/// Returns the output and the selected expert ids of every token.
pub fn moe_block_forward(
    g: &mut Graph,
    x: Var,
    gate: Var,
    experts: &[FfnVars],
    top_k: usize,
) -> Result<(Var, Vec<Vec<usize>>)> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 {
        return Err(Error::shape("moe_block", format!("expected [N, d], got {xs:?}")));
    }
    let (n, d) = (xs[0], xs[1]);
    let k_total = experts.len();
    if g.shape(gate) != [d, k_total] {
        return Err(Error::shape(
            "moe_block",
            format!("gate {:?} for {k_total} experts of width {d}", g.shape(gate)),
        ));
    }
    if top_k == 0 || top_k > k_total {
        return Err(Error::Config(format!("top_k {top_k} outside [1, {k_total}]")));
    }
    let logits = g.matmul(x, gate)?;
    let probs = g.softmax(logits, 1)?;
    let routing = top_k_experts(g.value(probs).data(), k_total, top_k);
    let mut mask = vec![0.0; n * k_total];
    for (t, sel) in routing.iter().enumerate() {
        for &e in sel {
            mask[t * k_total + e] = 1.0;
        }
    }
    let mask = g.constant(Tensor::from_parts(vec![n, k_total], mask));
    let weights = g.mul(probs, mask)?;
    let weights = g.reshape(weights, &[n, 1, k_total])?;
    let mut outs = Vec::with_capacity(k_total);
    for e in experts {
        let y = ffn_forward(g, x, e)?;
        outs.push(g.reshape(y, &[n, 1, d])?);
    }
    let stacked = g.concat(&outs, 1)?;
    let y = g.matmul(weights, stacked)?;
    Ok((g.reshape(y, &[n, d])?, routing))
}

/// Graph outputs of one forward pass.
pub struct LmOutput {
    /// `[B, T, V]`
    pub logits: Var,
    /// Residual stream after each block, `[B, T, d]`.
    pub hidden: Vec<Var>,
    /// Per MoE layer, the selected experts of every token (empty for dense).
    pub routing: Vec<Vec<Vec<usize>>>,
}

fn attention(g: &mut Graph, h: Var, bound: &Bound, l: usize, cfg: &LmConfig, b: usize, t: usize) -> Result<Var> {
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = cfg.head_dim();
    let heads = |w: &str, g: &mut Graph| -> Result<Var> {
        let p = g.matmul(h, bound.get(&format!("layers.{l}.attn.{w}"))?)?;
        let p = g.reshape(p, &[b, t, nh, hd])?;
        g.permute(p, &[0, 2, 1, 3])
    };
    let q = heads("wq", g)?;
    let k = heads("wk", g)?;
    let v = heads("wv", g)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let mut mask = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            mask[i * t + j] = MASK_NEG;
        }
    }
    let mask = g.constant(Tensor::from_parts(vec![t, t], mask));
    let scores = g.add(scores, mask)?;
    let att = g.softmax(scores, 3)?;
    let out = g.matmul(att, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, t, d])?;
    g.matmul(out, bound.get(&format!("layers.{l}.attn.wo"))?)
}

/// Full forward pass of a dense or MoE LM on `batch`.
pub fn forward<M: LanguageModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    bound: &Bound,
    batch: &TokenBatch,
) -> Result<LmOutput> {
    let cfg = model.config();
    batch.validate(cfg.vocab_size, cfg.max_seq_len)?;
    let (b, t, d) = (batch.batch, batch.len, cfg.d_model);
    let tok = g.embedding(bound.get("tok_emb")?, &batch.ids)?;
    let tok = g.reshape(tok, &[b, t, d])?;
    let pos = g.slice(bound.get("pos_emb")?, 0, 0, t)?;
    let mut x = g.add(tok, pos)?;
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    let mut routing = Vec::new();
    for l in 0..cfg.n_layers {
        let h = g.layer_norm(
            x,
            bound.get(&format!("layers.{l}.ln1.gain"))?,
            bound.get(&format!("layers.{l}.ln1.bias"))?,
            LN_EPS,
        )?;
        let a = attention(g, h, bound, l, cfg, b, t)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(
            x,
            bound.get(&format!("layers.{l}.ln2.gain"))?,
            bound.get(&format!("layers.{l}.ln2.bias"))?,
            LN_EPS,
        )?;
        let f = match model.moe() {
            None => ffn_forward(g, h, &FfnVars::bind(bound, &format!("layers.{l}.ffn"))?)?,
            Some(spec) => {
                let experts = (0..spec.num_experts)
                    .map(|e| FfnVars::bind(bound, &format!("layers.{l}.experts.{e}")))
                    .collect::<Result<Vec<_>>>()?;
                let flat = g.reshape(h, &[b * t, d])?;
                let gate = bound.get(&format!("layers.{l}.gate"))?;
                let (y, sel) = moe_block_forward(g, flat, gate, &experts, spec.top_k)?;
                routing.push(sel);
                g.reshape(y, &[b, t, d])?
            }
        };
        x = g.add(x, f)?;
        hidden.push(x);
    }
    let x = g.layer_norm(x, bound.get("ln_f.gain")?, bound.get("ln_f.bias")?, LN_EPS)?;
    let head = if cfg.tie_embeddings {
        let e = bound.get("tok_emb")?;
        g.transpose(e)?
    } else {
        bound.get("lm_head")?
    };
    let logits = g.matmul(x, head)?;
    Ok(LmOutput {
        logits,
        hidden,
        routing,
    })
}

/// Forward values without gradient tracking.
pub struct ForwardValues {
    pub logits: Tensor,
    pub hidden: Vec<Tensor>,
    pub routing: Vec<Vec<Vec<usize>>>,
}

pub fn forward_values<M: LanguageModel + ?Sized>(model: &M, batch: &TokenBatch) -> Result<ForwardValues> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g, |_| false);
    let out = forward(&mut g, model, &bound, batch)?;
    Ok(ForwardValues {
        logits: g.value(out.logits).detached(),
        hidden: out.hidden.iter().map(|&h| g.value(h).detached()).collect(),
        routing: out.routing,
    })
}
