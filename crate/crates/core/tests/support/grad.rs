//! Central finite-difference harness and the catalogue of checked cases.

use fedmoe::distill::{loss_fm, vaa_forward, VaaConfig, VaaModule};
use fedmoe::models::{forward, loss_ce, DenseLm, LanguageModel, LmConfig, MoeLm, MoeSpec, TokenBatch};
use fedmoe::rng::rng_from_seed;
use fedmoe::tensor::{Graph, Tensor, Var};
use fedmoe::Result;
use rand::Rng;

pub const SEEDS: u64 = 100;
pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Coordinates probed per parameter tensor in the whole-model cases.
const LM_COORDS: usize = 6;

pub type Build = dyn Fn(&mut Graph, &[Tensor]) -> Result<(Var, Vec<Var>)>;

/// One instance: inputs, a graph builder returning `(root, input vars)`,
/// and an optional per-input cap on probed coordinates.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
    pub coords: Option<usize>,
}

pub struct Case {
    pub name: &'static str,
    pub make: fn(u64) -> Instance,
}

/// Reduces any output to a scalar with fixed random weights so every
/// output element contributes a distinct coefficient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    if g.value(y).is_scalar() {
        return Ok(y);
    }
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng_from_seed(seed ^ 0x9e37)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let (root, _) = build(&mut g, inputs).unwrap();
    g.value(root).item()
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` over all probed coordinates of all
/// inputs, `a` analytic and `n` the central difference.
pub fn rel_error(inst: &Instance, seed: u64) -> f64 {
    let build = &*inst.build;
    let mut g = Graph::new();
    let (root, vars) = build(&mut g, &inst.inputs).unwrap();
    let grads = g.backward(root).unwrap();
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for (i, (t, v)) in inst.inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let idx: Vec<usize> = match inst.coords {
            Some(n) if n < t.numel() => {
                let mut r = rng_from_seed(seed.wrapping_mul(7919).wrapping_add(i as u64));
                (0..n).map(|_| r.random_range(0..t.numel())).collect()
            }
            _ => (0..t.numel()).collect(),
        };
        for j in idx {
            let mut plus = inst.inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inst.inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * STEP);
            diff += (analytic[j] - numeric).powi(2);
            norm_a += analytic[j].powi(2);
            norm_n += numeric.powi(2);
        }
    }
    diff.sqrt() / (norm_a.sqrt() + norm_n.sqrt()).max(1e-12)
}

/// Worst error over `SEEDS` seeds, or the first failing seed.
pub fn run_case(case: &Case) -> std::result::Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let e = rel_error(&(case.make)(seed), seed);
        if !(e < REL_TOL) {
            return Err(format!("{} seed {seed}: relative error {e:e}", case.name));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Every input is a trainable leaf and the op output is projected.
fn op_case(seed: u64, inputs: Vec<Tensor>, op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Instance {
    let build = move |g: &mut Graph, xs: &[Tensor]| {
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t, true)).collect();
        let y = op(g, &vars)?;
        Ok((project(g, y, seed)?, vars))
    };
    Instance {
        inputs,
        build: Box::new(build),
        coords: None,
    }
}

pub const CASES: &[Case] = &[
    Case {
        name: "matmul/weight",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[2, 3, 4], r), randn(&[4, 5], r)], |g, v| {
                g.matmul(v[0], v[1])
            })
        },
    },
    Case {
        name: "matmul/batched",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[2, 3, 4], r), randn(&[2, 4, 3], r)], |g, v| {
                g.matmul(v[0], v[1])
            })
        },
    },
    Case {
        name: "add",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[3, 4], r), randn(&[3, 4], r)], |g, v| g.add(v[0], v[1]))
        },
    },
    Case {
        name: "add/bias",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[2, 3, 4], r), randn(&[4], r)], |g, v| g.add(v[0], v[1]))
        },
    },
    Case {
        name: "mul",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[3, 4], r), randn(&[3, 4], r)], |g, v| g.mul(v[0], v[1]))
        },
    },
    Case {
        name: "mul/self",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[5], r)], |g, v| g.mul(v[0], v[0]))
        },
    },
    Case {
        name: "scale",
        make: |s| {
            let r = &mut rng_from_seed(s);
            let c = r.random_range(-2.0..2.0);
            op_case(s, vec![randn(&[3, 4], r)], move |g, v| g.scale(v[0], c))
        },
    },
    Case {
        name: "gelu",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![Tensor::randn(&[12], 2.0, r)], |g, v| g.gelu(v[0]))
        },
    },
    Case {
        name: "sum",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[3, 4], r)], |g, v| g.sum(v[0]))
        },
    },
    Case {
        name: "permute",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[2, 3, 4], r)], |g, v| g.permute(v[0], &[2, 0, 1]))
        },
    },
    Case {
        name: "transpose",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[2, 3, 4], r)], |g, v| g.transpose(v[0]))
        },
    },
    Case {
        name: "reshape",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[2, 6], r)], |g, v| g.reshape(v[0], &[3, 4]))
        },
    },
    Case {
        name: "concat",
        make: |s| {
            let r = &mut rng_from_seed(s);
            let axis = (s % 3) as usize;
            let mut b = vec![2, 3, 2];
            b[axis] = 1;
            op_case(s, vec![randn(&[2, 3, 2], r), randn(&b, r)], move |g, v| {
                g.concat(v, axis)
            })
        },
    },
    Case {
        name: "slice",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[3, 5, 2], r)], |g, v| g.slice(v[0], 1, 1, 4))
        },
    },
    Case {
        name: "mean_pool",
        make: |s| {
            let r = &mut rng_from_seed(s);
            let segments = 1 + (s % 3) as usize;
            op_case(s, vec![randn(&[2, 7, 3], r)], move |g, v| g.mean_pool(v[0], segments))
        },
    },
    Case {
        name: "embedding",
        make: |s| {
            let r = &mut rng_from_seed(s);
            let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
            op_case(s, vec![randn(&[5, 3], r)], move |g, v| g.embedding(v[0], &ids))
        },
    },
    Case {
        name: "layer_norm",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[3, 5], r), randn(&[5], r), randn(&[5], r)], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            })
        },
    },
    Case {
        name: "softmax",
        make: |s| {
            let r = &mut rng_from_seed(s);
            let axis = (s % 3) as usize;
            op_case(s, vec![randn(&[2, 3, 4], r)], move |g, v| g.softmax(v[0], axis))
        },
    },
    Case {
        name: "log_softmax",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[3, 6], r)], |g, v| g.log_softmax(v[0]))
        },
    },
    Case {
        name: "cross_entropy",
        make: |s| {
            let r = &mut rng_from_seed(s);
            let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
            op_case(s, vec![randn(&[4, 6], r)], move |g, v| g.cross_entropy(v[0], &targets))
        },
    },
    Case {
        name: "mse",
        make: |s| {
            let r = &mut rng_from_seed(s);
            op_case(s, vec![randn(&[3, 4], r), randn(&[3, 4], r)], |g, v| g.mse(v[0], v[1]))
        },
    },
    Case {
        name: "kl_div_logits",
        make: kl_case,
    },
    Case {
        name: "vaa→loss_fm",
        make: vaa_case,
    },
    Case {
        name: "dense lm→loss_ce",
        make: |s| lm_case(s, false),
    },
    Case {
        name: "moe lm (k=K)→loss_ce",
        make: |s| lm_case(s, true),
    },
];

/// Student side only; the teacher operand is detached by construction.
fn kl_case(s: u64) -> Instance {
    let r = &mut rng_from_seed(s);
    let teacher = Tensor::randn(&[4, 6], 2.0, r);
    let tau = r.random_range(0.5..4.0);
    let build = move |g: &mut Graph, xs: &[Tensor]| {
        let st = g.param(&xs[0], true);
        let tt = g.constant(teacher.clone());
        Ok((g.kl_div_logits(st, tt, tau)?, vec![st]))
    };
    Instance {
        inputs: vec![Tensor::randn(&[4, 6], 2.0, r)],
        build: Box::new(build),
        coords: None,
    }
}

/// Student stage features and every adapter weight, through the adapter
/// and the feature-matching loss against fixed teacher features.
fn vaa_case(s: u64) -> Instance {
    let r = &mut rng_from_seed(s);
    let cfg = VaaConfig {
        positions: 4,
        width: 4,
        heads: 2,
        stages: 2,
        single_head: false,
    };
    let (ds, dt, b, t) = (3, 5, 2, 6);
    let module = VaaModule::init(cfg, ds, dt, r).unwrap();
    let targets: Vec<Tensor> = (0..2).map(|_| randn(&[b, 2, dt], r)).collect();
    let mut inputs: Vec<Tensor> = (0..2).map(|_| randn(&[b, t, ds], r)).collect();
    let names: Vec<String> = module.params.names().map(str::to_string).collect();
    inputs.extend(module.params.tensors().cloned());
    let build = move |g: &mut Graph, xs: &[Tensor]| {
        let mut m = module.clone();
        for (name, x) in names.iter().zip(&xs[2..]) {
            *m.params.get_mut(name).unwrap() = x.clone();
        }
        let feats: Vec<Var> = xs[..2].iter().map(|x| g.param(x, true)).collect();
        let bound = m.params.bind(g, |_| true);
        let blended = vaa_forward(g, &m, &bound, &feats)?;
        let tv: Vec<Var> = targets.iter().map(|x| g.constant(x.clone())).collect();
        let loss = loss_fm(g, &tv, &blended)?;
        let mut vars = feats;
        vars.extend(names.iter().map(|n| bound.get(n).unwrap()));
        Ok((loss, vars))
    };
    Instance {
        inputs,
        build: Box::new(build),
        coords: None,
    }
}

pub fn tiny_config() -> LmConfig {
    LmConfig {
        arch_family: "tinyA".into(),
        vocab_size: 6,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 8,
        max_seq_len: 4,
        tie_embeddings: false,
    }
}

fn with_params<M: LanguageModel + Clone>(m: &M, xs: &[Tensor]) -> M {
    let mut out = m.clone();
    for (t, x) in out.params_mut().tensors_mut().zip(xs) {
        *t = x.clone();
    }
    out
}

/// Whole LM through the cross-entropy loss. The MoE variant routes every
/// token to all experts, so no perturbation can switch the routing.
fn lm_case(s: u64, moe: bool) -> Instance {
    let r = &mut rng_from_seed(s);
    let mut cfg = tiny_config();
    cfg.tie_embeddings = s % 2 == 1;
    let ids: Vec<usize> = (0..2 * cfg.max_seq_len)
        .map(|_| r.random_range(0..cfg.vocab_size))
        .collect();
    let batch = TokenBatch::new(2, cfg.max_seq_len, ids).unwrap();
    fn finish<M: LanguageModel + Clone + 'static>(mut model: M, batch: TokenBatch, r: &mut impl Rng) -> Instance {
        for t in model.params_mut().tensors_mut() {
            *t = Tensor::randn(t.shape(), 0.5, r);
        }
        let names: Vec<String> = model.params().names().map(str::to_string).collect();
        let inputs: Vec<Tensor> = model.params().tensors().cloned().collect();
        let build = move |g: &mut Graph, xs: &[Tensor]| {
            let m = with_params(&model, xs);
            let bound = m.params().bind(g, |_| true);
            let out = forward(g, &m, &bound, &batch)?;
            let loss = loss_ce(g, out.logits, &batch)?;
            Ok((loss, names.iter().map(|n| bound.get(n).unwrap()).collect()))
        };
        Instance {
            inputs,
            build: Box::new(build),
            coords: Some(LM_COORDS),
        }
    }
    if moe {
        let spec = MoeSpec {
            num_experts: 2,
            top_k: 2,
        };
        finish(MoeLm::init(cfg, spec, r).unwrap(), batch, r)
    } else {
        finish(DenseLm::init(cfg, r).unwrap(), batch, r)
    }
}
