use crate::error::{Error, Result};
use crate::models::{Bound, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Shape hyper-parameters of the view-aligned attention adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaaConfig {
    /// Total pooled positions `P_q` across all stages.
    pub positions: usize,
    /// Attention width `d`.
    pub width: usize,
    pub heads: usize,
    pub stages: usize,
    /// Single head scaled by `1/√d` instead of `heads` heads scaled by
    /// `1/√(d/heads)`.
    pub single_head: bool,
}

impl Default for VaaConfig {
    fn default() -> Self {
        VaaConfig {
            positions: 8,
            width: 32,
            heads: 2,
            stages: 2,
            single_head: false,
        }
    }
}

impl VaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.positions == 0 || self.positions % self.stages != 0 {
            return Err(Error::Config(format!(
                "positions {} must be a positive multiple of stages {}",
                self.positions, self.stages
            )));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Pooled positions per stage, `P_q / J`.
    pub fn segments(&self) -> usize {
        self.positions / self.stages
    }

    fn effective_heads(&self) -> usize {
        if self.single_head {
            1
        } else {
            self.heads
        }
    }
}

/// Adapter that blends multi-stage student features into the teacher's
/// stage-feature shape. Parameters:
/// `in_proj.{j}: [d_student, d]`, `wq`, `wk`, `wv: [d, d]`,
/// `out_proj.{j}: [d, d_teacher]`. No biases, so `wv = 0` yields zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct VaaModule {
    pub config: VaaConfig,
    pub student_width: usize,
    pub teacher_width: usize,
    pub params: ParamSet,
}

impl VaaModule {
    /// Scaled-normal init with std `1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(
        config: VaaConfig,
        student_width: usize,
        teacher_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut params = ParamSet::new();
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        for j in 0..config.stages {
            params.insert(
                format!("in_proj.{j}"),
                Tensor::randn(&[student_width, d], std(student_width), rng),
            );
        }
        for w in ["wq", "wk", "wv"] {
            params.insert(w, Tensor::randn(&[d, d], std(d), rng));
        }
        for j in 0..config.stages {
            params.insert(format!("out_proj.{j}"), Tensor::randn(&[d, teacher_width], std(d), rng));
        }
        Ok(VaaModule {
            config,
            student_width,
            teacher_width,
            params,
        })
    }
}

/// Blends student stage features `[B, T, d_student]` (one per stage) into
/// `J` tensors of shape `[B, P_q/J, d_teacher]`:
///
/// 1. mean-pool each stage to `P_q/J` positions and project to width `d`;
/// 2. concatenate to `[B, P_q, d]` and apply multi-head self-attention
///    `softmax(Q·Kᵀ/√d_head)·V` with `Q, K, V = F·W_q, F·W_k, F·W_v`;
/// 3. split back per stage and project to the teacher width.
pub fn vaa_forward(g: &mut Graph, module: &VaaModule, bound: &Bound, features: &[Var]) -> Result<Vec<Var>> {
    let cfg = &module.config;
    if features.len() != cfg.stages {
        return Err(Error::shape(
            "vaa",
            format!("{} stage features for {} stages", features.len(), cfg.stages),
        ));
    }
    let seg = cfg.segments();
    let mut pooled = Vec::with_capacity(cfg.stages);
    let mut batch = None;
    for (j, &f) in features.iter().enumerate() {
        let s = g.shape(f).to_vec();
        if s.len() != 3 || s[2] != module.student_width || batch.is_some_and(|b| b != s[0]) {
            return Err(Error::shape(
                "vaa",
                format!("stage {j} feature {s:?}, student width {}", module.student_width),
            ));
        }
        if s[1] < seg {
            return Err(Error::shape(
                "vaa",
                format!("sequence length {} shorter than {seg} pooled positions", s[1]),
            ));
        }
        batch = Some(s[0]);
        let p = g.mean_pool(f, seg)?;
        pooled.push(g.matmul(p, bound.get(&format!("in_proj.{j}"))?)?);
    }
    let b = batch.unwrap_or(0);
    let (p, d) = (cfg.positions, cfg.width);
    let h = cfg.effective_heads();
    let hd = d / h;
    let x = g.concat(&pooled, 1)?;
    let heads = |w: &str, g: &mut Graph| -> Result<Var> {
        let y = g.matmul(x, bound.get(w)?)?;
        let y = g.reshape(y, &[b, p, h, hd])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = heads("wq", g)?;
    let k = heads("wk", g)?;
    let v = heads("wv", g)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let att = g.softmax(scores, 3)?;
    let y = g.matmul(att, v)?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    let y = g.reshape(y, &[b, p, d])?;
    (0..cfg.stages)
        .map(|j| {
            let part = g.slice(y, 1, j * seg, (j + 1) * seg)?;
            g.matmul(part, bound.get(&format!("out_proj.{j}"))?)
        })
        .collect()
}
