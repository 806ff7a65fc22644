//! End-to-end one-shot simulation: stages, the communication ledger, the
//! cost model, evaluation, ablation and the run manifest.
//!
//! Each stage reads its inputs from and writes its outputs to a run
//! directory (see [`RunPaths`]), so stages can be run one at a time from
//! the CLI or all together with [`run_pipeline`]. "Uploading" a model is
//! writing its checkpoint and appending the byte count to the ledger.

mod config;
mod eval;
mod ledger;
mod pipeline;

pub use config::PipelineConfig;
pub use eval::{evaluate_model, find, metrics_csv, MetricRow, METRICS_HEADER};
pub use ledger::{baseline_comm_cost, comm_cost, kind_bytes, CommLedger, LedgerEntry, PayloadKind};
pub use pipeline::{
    cluster, comm_summary, distill_stage, evaluate_stage, family_init, gen_data, merge_stage, run_pipeline, run_stage,
    seed_base, train_devices, tune_stage, write_manifest, ClusterEntry, ClusterFile, CommSummary, DistillReport,
    DistillRun, ManifestDevice, RunManifest, RunPaths, StageSeeds, TuneReport, ONE_SHOT_ROUND, STAGES,
};

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Paired metric of the two ablation arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub stage: String,
    pub model: String,
    pub domain: String,
    pub vaa_log_ppl: f64,
    pub logits_log_ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Every device checkpoint is byte-identical across arms.
    pub devices_identical: bool,
    pub clusters_identical: bool,
    pub ledgers_identical: bool,
    pub rows: Vec<AblationRow>,
    pub vaa_mixed_log_ppl: f64,
    pub logits_mixed_log_ppl: f64,
    /// Whether the feature-matching arm is at least as good on the mixed set.
    pub vaa_not_worse: bool,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,model,domain,vaa_log_ppl,logits_log_ppl,delta\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.stage,
                r.model,
                r.domain,
                r.vaa_log_ppl,
                r.logits_log_ppl,
                r.vaa_log_ppl - r.logits_log_ppl
            );
        }
        s
    }
}

fn same_file(a: &std::path::Path, b: &std::path::Path) -> Result<bool> {
    Ok(std::fs::read(a)? == std::fs::read(b)?)
}

/// Runs the pipeline twice from one master seed: as configured (`vaa/`)
/// and with `α = 0` (`logits/`), then pairs the distilled-base and MoE
/// metrics. Arms share every stage before distillation bit-exactly.
pub fn ablate(cfg: &PipelineConfig, out: &RunPaths) -> Result<AblationReport> {
    let vaa_paths = RunPaths::new(out.root.join("vaa"));
    let logit_paths = RunPaths::new(out.root.join("logits"));
    let mut logits_cfg = cfg.clone();
    logits_cfg.distill.alpha = 0.0;
    let a = run_pipeline(cfg, &vaa_paths)?;
    let b = run_pipeline(&logits_cfg, &logit_paths)?;
    let n = a.devices.len();
    let mut devices_identical = n == b.devices.len();
    for d in 0..n {
        devices_identical &= same_file(&vaa_paths.device(d), &logit_paths.device(d))?;
    }
    let clusters_identical = a.clusters == b.clusters
        && (0..cfg.clusters).try_fold(true, |ok, i| {
            Ok::<_, crate::Error>(ok && same_file(&vaa_paths.proxy(i), &logit_paths.proxy(i))?)
        })?;
    let ledgers_identical = same_file(&vaa_paths.ledger(), &logit_paths.ledger())?;
    let rows: Vec<AblationRow> = a
        .metrics
        .iter()
        .filter(|r| matches!(r.stage.as_str(), "base" | "merged" | "tuned"))
        .filter_map(|r| {
            find(&b.metrics, &r.stage, &r.model, &r.domain).map(|o| AblationRow {
                stage: r.stage.clone(),
                model: r.model.clone(),
                domain: r.domain.clone(),
                vaa_log_ppl: r.log_ppl,
                logits_log_ppl: o.log_ppl,
            })
        })
        .collect();
    let mixed = |m: &[MetricRow]| find(m, "tuned", "moe", "mixed").map(|r| r.log_ppl).unwrap_or(f64::NAN);
    let (va, lo) = (mixed(&a.metrics), mixed(&b.metrics));
    let report = AblationReport {
        devices_identical,
        clusters_identical,
        ledgers_identical,
        rows,
        vaa_mixed_log_ppl: va,
        logits_mixed_log_ppl: lo,
        vaa_not_worse: va <= lo,
    };
    std::fs::write(out.root.join("ablation.csv"), report.to_csv())?;
    std::fs::write(
        out.root.join("ablation.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

/// Per domain: the tuned MoE's most active expert and the expert distilled
/// from that domain's cluster, if any cluster's majority is that domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpecialization {
    pub domain: usize,
    pub most_active: usize,
    pub own_expert: Option<usize>,
}

impl DomainSpecialization {
    pub fn matches(&self) -> bool {
        self.own_expert == Some(self.most_active)
    }
}

/// Reads `clusters.json` and `moe/tune.json` of a finished run.
pub fn domain_specialization(out: &RunPaths) -> Result<Vec<DomainSpecialization>> {
    let clusters: ClusterFile = serde_json::from_str(&std::fs::read_to_string(out.clusters())?)?;
    let tune: TuneReport = serde_json::from_str(&std::fs::read_to_string(out.tune_report())?)?;
    Ok(tune
        .domain_routing
        .iter()
        .enumerate()
        .map(|(domain, stats)| DomainSpecialization {
            domain,
            most_active: stats.most_active(),
            own_expert: clusters.clusters.iter().position(|c| c.domain == domain),
        })
        .collect())
}

/// Human-readable summary of a finished run directory (and of an ablation
/// if one was run there).
pub fn report(out: &RunPaths) -> Result<String> {
    let mut s = String::new();
    let ablation = out.root.join("ablation.json");
    if ablation.exists() {
        let a: AblationReport = serde_json::from_str(&std::fs::read_to_string(&ablation)?)?;
        let _ = writeln!(s, "ablation (feature matching vs logits only)");
        let _ = writeln!(
            s,
            "  shared devices/clusters/ledger: {}/{}/{}",
            a.devices_identical, a.clusters_identical, a.ledgers_identical
        );
        let _ = writeln!(
            s,
            "  tuned MoE mixed log-ppl: vaa {:.4}  logits {:.4}  ({})",
            a.vaa_mixed_log_ppl,
            a.logits_mixed_log_ppl,
            if a.vaa_not_worse {
                "vaa not worse"
            } else {
                "logits-only better"
            }
        );
        for arm in ["vaa", "logits"] {
            let p = RunPaths::new(out.root.join(arm));
            if p.manifest().exists() {
                let _ = writeln!(s, "\n[{arm}]");
                s.push_str(&report(&p)?);
            }
        }
        return Ok(s);
    }
    let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(out.manifest())?)?;
    let _ = writeln!(
        s,
        "devices {}  clusters {}  top-k {}  seed {}",
        m.devices.len(),
        m.clusters.len(),
        m.config.top_k,
        m.config.seed
    );
    for (i, c) in m.clusters.iter().enumerate() {
        let _ = writeln!(s, "  cluster {i}: devices {c:?}");
    }
    if !m.excluded_devices.is_empty() {
        let _ = writeln!(s, "  excluded from proxy averages: {:?}", m.excluded_devices);
    }
    let c = &m.comm;
    let _ = writeln!(
        s,
        "one-shot upload {} B over {} models (+{} B embeddings); {}-round baseline {} B; saving {:.1}%",
        c.model_bytes,
        c.model_entries,
        c.embedding_bytes,
        c.baseline_rounds,
        c.baseline_bytes,
        100.0 * c.saving
    );
    if out.tune_report().exists() {
        let spec = domain_specialization(out)?;
        let hits = spec.iter().filter(|d| d.matches()).count();
        let _ = write!(s, "domain routing (most active / own expert):");
        for d in &spec {
            let own = d.own_expert.map_or("-".to_string(), |e| e.to_string());
            let _ = write!(s, " d{}:{}/{}", d.domain, d.most_active, own);
        }
        let _ = writeln!(s, "  ({hits}/{} specialized)", spec.len());
    }
    let _ = writeln!(
        s,
        "{:<10} {:<10} {:<10} {:>9} {:>9}",
        "stage", "model", "domain", "log_ppl", "acc%"
    );
    for r in &m.metrics {
        let _ = writeln!(
            s,
            "{:<10} {:<10} {:<10} {:>9.4} {:>9.2}",
            r.stage, r.model, r.domain, r.log_ppl, r.token_acc
        );
    }
    Ok(s)
}
