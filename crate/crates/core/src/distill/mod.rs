//! Cross-architecture distillation of a proxy teacher into a dense student
//! through a view-aligned attention (VAA) adapter.
//!
//! The student minimizes `L_KD = L_CE + α·L_FM + β·L_KL` on the public
//! corpus: next-token cross-entropy on hard labels, feature matching
//! between the adapter's blended student view and pooled teacher stage
//! features, and temperature-scaled KL to the teacher's predictions.

mod stages;
mod vaa;

pub use stages::{plan_stages, split_layers, StagePlan};
pub use vaa::{vaa_forward, VaaConfig, VaaModule};

use crate::error::{Error, Result};
use crate::models::{
    diverged, epoch_batches, epoch_order, evaluate_lm, forward, forward_values, loss_ce, training_windows, Bound,
    DenseLm, Token, TokenBatch,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Teacher forward passes per batch when building the teacher cache.
const TEACHER_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Gradient-norm clip, applied separately to student and adapter.
    pub grad_clip: Option<f64>,
    pub vaa: VaaConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1.0,
            beta: 1.0,
            tau: 2.0,
            epochs: 1,
            lr: 3e-3,
            batch_size: 16,
            seq_len: 16,
            seed: 0,
            grad_clip: Some(1.0),
            vaa: VaaConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        self.vaa.validate()
    }
}

/// Sum over stages of the per-stage mean squared error.
pub fn loss_fm(g: &mut Graph, teacher: &[Var], blended: &[Var]) -> Result<Var> {
    if teacher.len() != blended.len() || teacher.is_empty() {
        return Err(Error::shape(
            "loss_fm",
            format!("{} teacher vs {} student stages", teacher.len(), blended.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&t, &s) in teacher.iter().zip(blended) {
        let m = g.mse(t, s)?;
        total = Some(match total {
            None => m,
            Some(acc) => g.add(acc, m)?,
        });
    }
    Ok(total.unwrap())
}

/// `τ²·mean_positions KL(softmax(teacher/τ) ‖ softmax(student/τ))` over
/// logits of any shape `[..., V]`; the teacher side is detached.
pub fn loss_kl(g: &mut Graph, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    let s = g.shape(student).to_vec();
    if g.shape(teacher) != s.as_slice() || s.is_empty() {
        return Err(Error::shape("loss_kl", format!("{:?} vs {s:?}", g.shape(teacher))));
    }
    let v = *s.last().unwrap();
    let rows = s.iter().product::<usize>() / v.max(1);
    let st = g.reshape(student, &[rows, v])?;
    let tt = g.reshape(teacher, &[rows, v])?;
    g.kl_div_logits(st, tt, tau)
}

/// Teacher outputs for one batch: logits `[B, T, V]` and one pooled stage
/// feature `[B, P_q/J, d_teacher]` per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherView {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

pub fn teacher_view(teacher: &DenseLm, plan: &StagePlan, segments: usize, batch: &TokenBatch) -> Result<TeacherView> {
    let fv = forward_values(teacher, batch)?;
    let mut g = Graph::new();
    let features = plan
        .teacher_feature_layers()
        .into_iter()
        .map(|l| {
            let h = g.constant(fv.hidden[l].clone());
            let p = g.mean_pool(h, segments)?;
            Ok(g.value(p).detached())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherView {
        logits: fv.logits,
        features,
    })
}

/// Graph handles of the three loss terms and their weighted total.
pub struct KdLoss {
    pub total: Var,
    pub ce: Var,
    pub fm: Var,
    pub kl: Var,
}

/// Builds `L_KD = L_CE + α·L_FM + β·L_KL` for one batch. Terms with a zero
/// weight are still computed (for logging) but left out of the total, so
/// `α = β = 0` gives exactly `L_CE`.
#[allow(clippy::too_many_arguments)]
pub fn loss_kd(
    g: &mut Graph,
    batch: &TokenBatch,
    student: &DenseLm,
    student_bound: &Bound,
    vaa: &VaaModule,
    vaa_bound: &Bound,
    plan: &StagePlan,
    teacher: &TeacherView,
    cfg: &DistillConfig,
) -> Result<KdLoss> {
    let out = forward(g, student, student_bound, batch)?;
    let ce = loss_ce(g, out.logits, batch)?;
    let feats: Vec<Var> = plan
        .student_feature_layers()
        .into_iter()
        .map(|l| out.hidden[l])
        .collect();
    let blended = vaa_forward(g, vaa, vaa_bound, &feats)?;
    let tf: Vec<Var> = teacher.features.iter().map(|t| g.constant(t.clone())).collect();
    let fm = loss_fm(g, &tf, &blended)?;
    let tl = g.constant(teacher.logits.clone());
    let kl = loss_kl(g, tl, out.logits, cfg.tau)?;
    let mut total = ce;
    if cfg.alpha != 0.0 {
        let t = g.scale(fm, cfg.alpha)?;
        total = g.add(total, t)?;
    }
    if cfg.beta != 0.0 {
        let t = g.scale(kl, cfg.beta)?;
        total = g.add(total, t)?;
    }
    Ok(KdLoss { total, ce, fm, kl })
}

/// Mean minibatch losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub fm: f64,
    pub kl: f64,
    pub kd: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillCurve {
    /// Student log-perplexity on the public corpus before training.
    pub initial: f64,
    pub epochs: Vec<DistillEpoch>,
}

impl DistillCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_CE,L_FM,L_KL,L_KD\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.ce, e.fm, e.kl, e.kd));
        }
        s
    }
}

pub struct DistillOutput {
    pub student: DenseLm,
    pub curve: DistillCurve,
    pub plan: StagePlan,
}

fn cat_rows(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("cached teacher rows are finite")
}

/// Per-window teacher outputs, computed once for the whole corpus.
struct TeacherCache {
    views: Vec<TeacherView>,
}

impl TeacherCache {
    fn build(teacher: &DenseLm, plan: &StagePlan, segments: usize, windows: &[&[Token]]) -> Result<Self> {
        let mut views = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(TEACHER_BATCH) {
            let batch = TokenBatch::from_windows(chunk)?;
            let v = teacher_view(teacher, plan, segments, &batch)?;
            for r in 0..chunk.len() {
                let row = |t: &Tensor| {
                    let mut s = t.shape().to_vec();
                    let per = t.numel() / s[0];
                    s[0] = 1;
                    Tensor::new(s, t.data()[r * per..(r + 1) * per].to_vec()).expect("finite")
                };
                views.push(TeacherView {
                    logits: row(&v.logits),
                    features: v.features.iter().map(row).collect(),
                });
            }
        }
        Ok(TeacherCache { views })
    }

    fn gather(&self, idx: &[usize]) -> TeacherView {
        let logits: Vec<&Tensor> = idx.iter().map(|&i| &self.views[i].logits).collect();
        let stages = self.views[0].features.len();
        TeacherView {
            logits: cat_rows(&logits),
            features: (0..stages)
                .map(|j| cat_rows(&idx.iter().map(|&i| &self.views[i].features[j]).collect::<Vec<_>>()))
                .collect(),
        }
    }
}

/// Trains a copy of `student` and a fresh VAA adapter against the frozen
/// `teacher` on `public`. Window order matches [`crate::models::train_lm`]
/// for the same seed, so with `α = β = 0` the result equals plain training
/// on the public corpus. The adapter is discarded.
pub fn distill(teacher: &DenseLm, student: &DenseLm, public: &[Token], cfg: &DistillConfig) -> Result<DistillOutput> {
    cfg.validate()?;
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::Config(format!(
            "teacher vocab {} differs from student vocab {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    let plan = plan_stages(&teacher.config, &student.config, cfg.vaa.stages)?;
    let seq_len = cfg
        .seq_len
        .min(student.config.max_seq_len)
        .min(teacher.config.max_seq_len);
    let segments = cfg.vaa.segments();
    if seq_len < segments.max(2) {
        return Err(Error::Config(format!(
            "sequence length {seq_len} shorter than {segments} pooled positions"
        )));
    }
    let windows = training_windows(public, seq_len);
    if windows.is_empty() {
        return Err(Error::Empty("public corpus shorter than one window"));
    }
    let mut student = student.clone();
    let mut curve = DistillCurve {
        initial: evaluate_lm(&student, public, seq_len)?.log_ppl,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    if cfg.epochs == 0 {
        return Ok(DistillOutput { student, curve, plan });
    }
    let mut vaa = VaaModule::init(
        cfg.vaa,
        student.config.d_model,
        teacher.config.d_model,
        &mut rng_from_seed(derive_seed(cfg.seed, "vaa-init", 0)),
    )?;
    let cache = TeacherCache::build(teacher, &plan, segments, &windows)?;
    let mut student_opt = AdamState::new(student.params.tensors(), AdamConfig::with_lr(cfg.lr));
    let mut vaa_opt = AdamState::new(vaa.params.tensors(), AdamConfig::with_lr(cfg.lr));
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0; 4];
        let batches = epoch_batches(&windows, cfg.batch_size, cfg.seed, epoch);
        let order = epoch_order(windows.len(), cfg.seed, epoch);
        let mut cursor = 0;
        for (step, rows) in batches.iter().enumerate() {
            let idx = &order[cursor..cursor + rows.len()];
            cursor += rows.len();
            let batch = TokenBatch::from_windows(rows)?;
            let tv = cache.gather(idx);
            let mut g = Graph::new();
            let sb = student.params.bind(&mut g, |_| true);
            let vb = vaa.params.bind(&mut g, |_| true);
            let loss =
                loss_kd(&mut g, &batch, &student, &sb, &vaa, &vb, &plan, &tv, cfg).map_err(diverged(epoch, step))?;
            let vals = [loss.ce, loss.fm, loss.kl, loss.total].map(|v| g.value(v).item());
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(diverged(epoch, step)(Error::NonFinite { op: "loss_kd" }));
            }
            sums.iter_mut().zip(vals).for_each(|(s, v)| *s += v);
            let mut grads = g.backward(loss.total)?;
            student.params.store_grads(&sb, &mut grads)?;
            vaa.params.store_grads(&vb, &mut grads)?;
            if let Some(c) = cfg.grad_clip {
                student.params.clip_grad_norm(c);
                vaa.params.clip_grad_norm(c);
            }
            student_opt.step(student.params.tensors_mut())?;
            vaa_opt.step(vaa.params.tensors_mut())?;
        }
        let n = batches.len() as f64;
        curve.epochs.push(DistillEpoch {
            epoch,
            ce: sums[0] / n,
            fm: sums[1] / n,
            kl: sums[2] / n,
            kd: sums[3] / n,
        });
    }
    Ok(DistillOutput { student, curve, plan })
}
