//! Straight-line reference implementation of the LM forward pass over plain
//! vectors, with an exhaustive top-k search for the MoE blocks.

use fedmoe::models::{LanguageModel, LmConfig, ParamSet};

type Mat = Vec<Vec<f64>>;

fn p<'a>(ps: &'a ParamSet, name: &str) -> &'a [f64] {
    ps.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

/// `x · W` with `W` row-major `[rows(x[0]), cols]`.
fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let s = (var + 1e-5).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) / s * g + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub struct Ffn<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
}

impl<'a> Ffn<'a> {
    pub fn from_params(ps: &'a ParamSet, prefix: &str) -> Self {
        Ffn {
            w1: p(ps, &format!("{prefix}.w1")),
            b1: p(ps, &format!("{prefix}.b1")),
            w2: p(ps, &format!("{prefix}.w2")),
            b2: p(ps, &format!("{prefix}.b2")),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (f, d) = (self.b1.len(), self.b2.len());
        let h: Vec<f64> = matvec(x, self.w1, f)
            .iter()
            .zip(self.b1)
            .map(|(a, b)| gelu(a + b))
            .collect();
        matvec(&h, self.w2, d).iter().zip(self.b2).map(|(a, b)| a + b).collect()
    }
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

/// `Σ_{i∈S} p_i·E_i(x)` where `S` is the size-`k` subset with the largest
/// total gate probability, found by enumerating every subset.
pub fn brute_force_moe(x: &[f64], gate: &[f64], experts: &[Ffn<'_>], k: usize) -> (Vec<f64>, Vec<usize>) {
    let n = experts.len();
    let probs = softmax(&matvec(x, gate, n));
    let best = subsets(n, k)
        .into_iter()
        .max_by(|a, b| {
            let sa: f64 = a.iter().map(|&i| probs[i]).sum();
            let sb: f64 = b.iter().map(|&i| probs[i]).sum();
            sa.total_cmp(&sb)
        })
        .unwrap();
    let mut y = vec![0.0; x.len()];
    for &i in &best {
        for (acc, v) in y.iter_mut().zip(experts[i].apply(x)) {
            *acc += probs[i] * v;
        }
    }
    (y, best)
}

/// Logits `[T][V]` of one sequence.
pub fn reference_logits<M: LanguageModel + ?Sized>(model: &M, ids: &[usize]) -> Mat {
    let cfg: &LmConfig = model.config();
    let ps = model.params();
    let (d, v, nh) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
    let hd = d / nh;
    let tok = p(ps, "tok_emb");
    let pos = p(ps, "pos_emb");
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| tok[id * d + j] + pos[t * d + j]).collect())
        .collect();
    let t_len = ids.len();
    for l in 0..cfg.n_layers {
        let ln = |x: &[f64], which: &str| {
            layer_norm(
                x,
                p(ps, &format!("layers.{l}.{which}.gain")),
                p(ps, &format!("layers.{l}.{which}.bias")),
            )
        };
        let h: Mat = x.iter().map(|r| ln(r, "ln1")).collect();
        let proj = |w: &str| -> Mat {
            let w = p(ps, &format!("layers.{l}.attn.{w}"));
            h.iter().map(|r| matvec(r, w, d)).collect()
        };
        let (q, k, vv) = (proj("wq"), proj("wk"), proj("wv"));
        let mut att = vec![vec![0.0; d]; t_len];
        for head in 0..nh {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..t_len {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for (j, wj) in w.iter().enumerate() {
                    for c in cols.clone() {
                        att[i][c] += wj * vv[j][c];
                    }
                }
            }
        }
        let wo = p(ps, &format!("layers.{l}.attn.wo"));
        for i in 0..t_len {
            for (a, b) in x[i].iter_mut().zip(matvec(&att[i], wo, d)) {
                *a += b;
            }
        }
        for i in 0..t_len {
            let h = ln(&x[i], "ln2");
            let f = match model.moe() {
                None => Ffn::from_params(ps, &format!("layers.{l}.ffn")).apply(&h),
                Some(spec) => {
                    let experts: Vec<Ffn> = (0..spec.num_experts)
                        .map(|e| Ffn::from_params(ps, &format!("layers.{l}.experts.{e}")))
                        .collect();
                    brute_force_moe(&h, p(ps, &format!("layers.{l}.gate")), &experts, spec.top_k).0
                }
            };
            for (a, b) in x[i].iter_mut().zip(f) {
                *a += b;
            }
        }
    }
    let head: Vec<f64> = if cfg.tie_embeddings {
        let mut t = vec![0.0; d * v];
        for a in 0..v {
            for j in 0..d {
                t[j * v + a] = tok[a * d + j];
            }
        }
        t
    } else {
        p(ps, "lm_head").to_vec()
    };
    x.iter()
        .map(|r| matvec(&layer_norm(r, p(ps, "ln_f.gain"), p(ps, "ln_f.bias")), &head, v))
        .collect()
}
