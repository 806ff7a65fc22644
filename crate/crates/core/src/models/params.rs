use super::config::{LmConfig, MoeSpec};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;

pub(crate) const INIT_STD: f64 = 0.02;

/// Named parameter tensors in a fixed, config-determined order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

/// Graph handles of a bound [`ParamSet`], keyed by parameter name.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Inserts every tensor into `g`; `trainable(name)` selects which ones
    /// take part in backward.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.param(t, trainable(name))))
            .collect();
        Bound { vars }
    }

    /// Copies leaf gradients from `grads` into the matching tensors; tensors
    /// that received no gradient are cleared.
    pub fn store_grads(&mut self, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            match bound.vars.get(name).and_then(|v| grads.take(*v)) {
                Some(gr) => t.set_grad(gr)?,
                None => t.clear_grad(),
            }
        }
        Ok(())
    }

    /// Scales all stored gradients so their global L2 norm is at most
    /// `max_norm`. Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let sq: f64 = self
            .tensors
            .values()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            for t in self.tensors.values_mut() {
                if let Some(mut g) = t.take_grad() {
                    g.iter_mut().for_each(|v| *v *= s);
                    t.set_grad(g).expect("same length");
                }
            }
        }
        norm
    }
}

/// `(name, shape)` of every parameter in canonical order.
pub fn param_layout(config: &LmConfig, moe: Option<&MoeSpec>) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, t) = (config.vocab_size, config.d_model, config.d_ffn, config.max_seq_len);
    let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![t, d])];
    let ffn = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{prefix}.w1"), vec![d, f]));
        out.push((format!("{prefix}.b1"), vec![f]));
        out.push((format!("{prefix}.w2"), vec![f, d]));
        out.push((format!("{prefix}.b2"), vec![d]));
    };
    for l in 0..config.n_layers {
        out.push((format!("layers.{l}.ln1.gain"), vec![d]));
        out.push((format!("layers.{l}.ln1.bias"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("layers.{l}.attn.{w}"), vec![d, d]));
        }
        out.push((format!("layers.{l}.ln2.gain"), vec![d]));
        out.push((format!("layers.{l}.ln2.bias"), vec![d]));
        match moe {
            None => ffn(&format!("layers.{l}.ffn"), &mut out),
            Some(m) => {
                out.push((format!("layers.{l}.gate"), vec![d, m.num_experts]));
                for e in 0..m.num_experts {
                    ffn(&format!("layers.{l}.experts.{e}"), &mut out);
                }
            }
        }
    }
    out.push(("ln_f.gain".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    if !config.tie_embeddings {
        out.push(("lm_head".to_string(), vec![d, v]));
    }
    out
}

/// Whether a parameter name belongs to an expert FFN.
pub fn is_expert_param(name: &str) -> bool {
    name.contains(".experts.")
}

/// Standard initialization: `N(0, 0.02²)` for matrices (residual outputs
/// scaled by `1/√(2L)`), zeros for biases, ones for norm gains.
pub fn init_params<R: Rng + ?Sized>(config: &LmConfig, moe: Option<&MoeSpec>, rng: &mut R) -> ParamSet {
    let resid_std = INIT_STD / ((2 * config.n_layers) as f64).sqrt();
    let mut ps = ParamSet::new();
    for (name, shape) in param_layout(config, moe) {
        let t = if name.ends_with(".gain") {
            Tensor::ones(&shape)
        } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
            Tensor::zeros(&shape)
        } else if name.ends_with(".wo") || name.ends_with(".w2") {
            Tensor::randn(&shape, resid_std, rng)
        } else {
            Tensor::randn(&shape, INIT_STD, rng)
        };
        ps.insert(name, t);
    }
    ps
}

/// All-zero parameters (norm gains included), which make the LM emit
/// uniform next-token distributions.
pub fn zero_params(config: &LmConfig, moe: Option<&MoeSpec>) -> ParamSet {
    let mut ps = ParamSet::new();
    for (name, shape) in param_layout(config, moe) {
        ps.insert(name, Tensor::zeros(&shape));
    }
    ps
}
