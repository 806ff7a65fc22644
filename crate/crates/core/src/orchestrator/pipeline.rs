use super::config::PipelineConfig;
use super::eval::{evaluate_model, metrics_csv, MetricRow};
use super::ledger::{baseline_comm_cost, comm_cost, kind_bytes, CommLedger, LedgerEntry, PayloadKind};
use crate::clustering::{
    build_proxy_with, kmeans_domains, similarity_matrix, ClusterReport, DeviceModel, SimilarityMatrix,
};
use crate::datagen::{gen_corpora, read_tokens, DataManifest, DeviceEntry, EmbeddingProjection, EMBED_DIM};
use crate::distill::{distill, DistillCurve, StagePlan};
use crate::error::{Error, Result};
use crate::fusion::{domain_routing, expert_checksums, merge, tune_global, MergeReport, RoutingStats};
use crate::models::checkpoint::load_file;
use crate::models::{train_lm, train_local, Checkpoint, DenseLm, LossCurve, MoeLm, Token, TrainConfig};
use crate::rng::{derive_seed, rng_from_seed};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Pipeline stages in execution order.
pub const STAGES: [&str; 7] = [
    "gen-data",
    "train-devices",
    "cluster",
    "distill",
    "merge",
    "tune",
    "evaluate",
];

/// Upload round of the one-shot protocol.
pub const ONE_SHOT_ROUND: u32 = 1;

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    fn p(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }
    pub fn data_manifest(&self) -> PathBuf {
        self.p("data/manifest.json")
    }
    pub fn shard(&self, n: usize) -> PathBuf {
        self.p(format!("data/shard_{n}.tok"))
    }
    pub fn public(&self) -> PathBuf {
        self.p("data/public.tok")
    }
    pub fn test(&self, domain: usize) -> PathBuf {
        self.p(format!("data/test_{domain}.tok"))
    }
    pub fn mixed_test(&self) -> PathBuf {
        self.p("data/test_mixed.tok")
    }
    pub fn device(&self, n: usize) -> PathBuf {
        self.p(format!("devices/device_{n}.ckpt"))
    }
    pub fn device_curve(&self, n: usize) -> PathBuf {
        self.p(format!("devices/device_{n}_loss.csv"))
    }
    pub fn ledger(&self) -> PathBuf {
        self.p("ledger.json")
    }
    pub fn clusters(&self) -> PathBuf {
        self.p("clusters.json")
    }
    pub fn proxy(&self, i: usize) -> PathBuf {
        self.p(format!("proxies/proxy_{i}.ckpt"))
    }
    pub fn seed_base(&self) -> PathBuf {
        self.p("bases/seed_base.ckpt")
    }
    pub fn base(&self, i: usize) -> PathBuf {
        self.p(format!("bases/base_{i}.ckpt"))
    }
    pub fn distill_curve(&self, i: usize) -> PathBuf {
        self.p(format!("bases/distill_{i}_loss.csv"))
    }
    pub fn distill_report(&self) -> PathBuf {
        self.p("distill.json")
    }
    pub fn merged(&self) -> PathBuf {
        self.p("moe/merged.ckpt")
    }
    pub fn merge_report(&self) -> PathBuf {
        self.p("moe/merge_report.json")
    }
    pub fn tuned(&self) -> PathBuf {
        self.p("moe/tuned.ckpt")
    }
    pub fn tune_report(&self) -> PathBuf {
        self.p("moe/tune.json")
    }
    pub fn tune_curve(&self) -> PathBuf {
        self.p("moe/tune_loss.csv")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.p("metrics.csv")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.p("metrics.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.p("manifest.json")
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<usize> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes.as_ref())?;
    Ok(bytes.as_ref().len())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn save_ckpt<M: Checkpoint>(model: &M, path: &Path) -> Result<u64> {
    Ok(write_file(path, model.to_bytes())? as u64)
}

fn curve_csv(curve: &LossCurve) -> String {
    let mut s = format!("epoch,loss\ninitial,{}\n", curve.initial);
    for (i, l) in curve.epochs.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// Every derived seed of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub datagen: u64,
    pub family_init: BTreeMap<String, u64>,
    pub local_train: Vec<u64>,
    pub kmeans: u64,
    pub seed_base_init: u64,
    pub seed_base_train: u64,
    pub distill: Vec<u64>,
    pub merge: u64,
    pub tune: u64,
}

impl StageSeeds {
    pub fn derive(cfg: &PipelineConfig) -> Self {
        let m = cfg.seed;
        let n = cfg.data.num_domains * cfg.data.devices_per_domain;
        StageSeeds {
            datagen: derive_seed(m, "datagen", 0),
            family_init: cfg
                .device_families
                .iter()
                .enumerate()
                .map(|(i, f)| (f.clone(), derive_seed(m, "family-init", i as u64)))
                .collect(),
            local_train: (0..n).map(|d| derive_seed(m, "local-train", d as u64)).collect(),
            kmeans: derive_seed(m, "kmeans", 0),
            seed_base_init: derive_seed(m, "seed-base-init", 0),
            seed_base_train: derive_seed(m, "seed-base-train", 0),
            distill: (0..cfg.clusters).map(|i| derive_seed(m, "distill", i as u64)).collect(),
            merge: derive_seed(m, "merge", 0),
            tune: derive_seed(m, "tune", 0),
        }
    }
}

fn with_seed(t: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..t.clone() }
}

fn load_data(paths: &RunPaths) -> Result<DataManifest> {
    read_json(&paths.data_manifest())
}

fn load_tokens(path: &Path) -> Result<Vec<Token>> {
    Ok(read_tokens(path)?.1)
}

fn load_dense(path: &Path) -> Result<DenseLm> {
    load_file(path)?.into_dense()
}

fn load_moe(path: &Path) -> Result<MoeLm> {
    load_file(path)?.into_moe()
}

/// Generates corpora, writes token files, and computes device embeddings.
pub fn gen_data(cfg: &PipelineConfig, paths: &RunPaths) -> Result<DataManifest> {
    cfg.validate()?;
    let seeds = StageSeeds::derive(cfg);
    let dcfg = cfg.data_config(seeds.datagen);
    let corpora = gen_corpora(&dcfg, &cfg.device_families)?;
    let projection = EmbeddingProjection::new(dcfg.vocab_size, dcfg.seed);
    let v = dcfg.vocab_size;
    let rel = |p: PathBuf| p.strip_prefix(&paths.root).unwrap_or(&p).to_string_lossy().into_owned();
    let mut devices = Vec::with_capacity(corpora.shards.len());
    for s in &corpora.shards {
        write_file(&paths.shard(s.device), crate::datagen::encode_tokens(&s.tokens, v))?;
        devices.push(DeviceEntry {
            device: s.device,
            arch_family: s.arch_family.clone(),
            shard_path: rel(paths.shard(s.device)),
            domain: s.domain,
            tokens: s.tokens.len(),
            embedding: projection.embed(&s.tokens)?,
        });
    }
    write_file(&paths.public(), crate::datagen::encode_tokens(&corpora.public, v))?;
    for (i, t) in corpora.tests.iter().enumerate() {
        write_file(&paths.test(i), crate::datagen::encode_tokens(t, v))?;
    }
    write_file(
        &paths.mixed_test(),
        crate::datagen::encode_tokens(&corpora.mixed_test, v),
    )?;
    let manifest = DataManifest {
        config: dcfg,
        devices,
        public_path: rel(paths.public()),
        test_paths: (0..corpora.tests.len()).map(|i| rel(paths.test(i))).collect(),
        mixed_test_path: rel(paths.mixed_test()),
    };
    write_json(&paths.data_manifest(), &manifest)?;
    Ok(manifest)
}

/// Shared initial weights of every device of one family.
pub fn family_init(cfg: &PipelineConfig, family: &str) -> Result<DenseLm> {
    let seeds = StageSeeds::derive(cfg);
    let seed = *seeds
        .family_init
        .get(family)
        .ok_or_else(|| Error::Config(format!("family `{family}` is not a device family")))?;
    DenseLm::init(cfg.family_config(family)?, &mut rng_from_seed(seed))
}

/// Local training on every device, then the one-shot upload of each
/// model and embedding, recorded in the ledger.
pub fn train_devices(cfg: &PipelineConfig, paths: &RunPaths) -> Result<Vec<LedgerEntry>> {
    let data = load_data(paths)?;
    let seeds = StageSeeds::derive(cfg);
    let inits: BTreeMap<String, DenseLm> = cfg
        .device_families
        .iter()
        .map(|f| Ok((f.clone(), family_init(cfg, f)?)))
        .collect::<Result<_>>()?;
    let ledger = CommLedger::new();
    data.devices
        .par_iter()
        .map(|d| {
            let shard = load_tokens(&paths.root.join(&d.shard_path))?;
            let init = &inits[&d.arch_family];
            let (model, curve) = train_local(init, &shard, &with_seed(&cfg.local, seeds.local_train[d.device]))?;
            let bytes = save_ckpt(&model, &paths.device(d.device))?;
            write_file(&paths.device_curve(d.device), curve_csv(&curve))?;
            ledger.upload(d.device, PayloadKind::Model, bytes, ONE_SHOT_ROUND)?;
            ledger.upload(d.device, PayloadKind::Embedding, (EMBED_DIM * 8) as u64, ONE_SHOT_ROUND)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    write_file(&paths.ledger(), ledger.to_json() + "\n")?;
    Ok(ledger.entries())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    #[serde(flatten)]
    pub report: ClusterReport,
    /// Majority ground-truth domain of the members (lowest on ties).
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterFile {
    pub similarity: SimilarityMatrix,
    pub clusters: Vec<ClusterEntry>,
}

/// Groups devices by embedding and writes one proxy teacher per cluster.
pub fn cluster(cfg: &PipelineConfig, paths: &RunPaths) -> Result<ClusterFile> {
    let data = load_data(paths)?;
    let seeds = StageSeeds::derive(cfg);
    let embeddings: Vec<Vec<f64>> = data.devices.iter().map(|d| d.embedding.clone()).collect();
    let sim = similarity_matrix(&embeddings)?;
    let groups = kmeans_domains(&embeddings, cfg.clusters, seeds.kmeans)?;
    let models: Vec<DenseLm> = data
        .devices
        .iter()
        .map(|d| load_dense(&paths.device(d.device)))
        .collect::<Result<_>>()?;
    let mut clusters = Vec::with_capacity(groups.len());
    for (id, members) in groups.iter().enumerate() {
        let dm: Vec<DeviceModel<'_>> = members
            .iter()
            .map(|&n| DeviceModel {
                device: n,
                tokens: data.devices[n].tokens,
                model: &models[n],
            })
            .collect();
        let kc = build_proxy_with(id, &dm, cfg.weighted_average)?;
        save_ckpt(&kc.proxy, &paths.proxy(id))?;
        let mut votes = vec![0usize; cfg.data.num_domains];
        members.iter().for_each(|&n| votes[data.devices[n].domain] += 1);
        let domain = (0..votes.len()).fold(0, |b, d| if votes[d] > votes[b] { d } else { b });
        clusters.push(ClusterEntry {
            report: ClusterReport::new(&kc, &sim),
            domain,
        });
    }
    let file = ClusterFile {
        similarity: sim,
        clusters,
    };
    write_json(&paths.clusters(), &file)?;
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRun {
    pub cluster: usize,
    pub teacher_family: String,
    pub seed: u64,
    pub plan: StagePlan,
    pub curve: DistillCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub seed_base_curve: LossCurve,
    pub runs: Vec<DistillRun>,
}

/// The common student init: the backbone lightly trained on public data.
pub fn seed_base(cfg: &PipelineConfig, public: &[Token]) -> Result<(DenseLm, LossCurve)> {
    let seeds = StageSeeds::derive(cfg);
    let mut m = DenseLm::init(
        cfg.family_config(&cfg.backbone_family)?,
        &mut rng_from_seed(seeds.seed_base_init),
    )?;
    let curve = train_lm(
        &mut m,
        public,
        &with_seed(&cfg.seed_base, seeds.seed_base_train),
        |_| true,
    )?;
    Ok((m, curve))
}

/// Builds the shared student init and distills every proxy into a copy.
pub fn distill_stage(cfg: &PipelineConfig, paths: &RunPaths) -> Result<DistillReport> {
    let seeds = StageSeeds::derive(cfg);
    let public = load_tokens(&paths.public())?;
    let (base, base_curve) = seed_base(cfg, &public)?;
    save_ckpt(&base, &paths.seed_base())?;
    let proxies: Vec<DenseLm> = (0..cfg.clusters)
        .map(|i| load_dense(&paths.proxy(i)))
        .collect::<Result<_>>()?;
    let runs = proxies
        .par_iter()
        .enumerate()
        .map(|(i, proxy)| {
            let dcfg = crate::distill::DistillConfig {
                seed: seeds.distill[i],
                ..cfg.distill.clone()
            };
            let out = distill(proxy, &base, &public, &dcfg)?;
            save_ckpt(&out.student, &paths.base(i))?;
            write_file(&paths.distill_curve(i), out.curve.to_csv())?;
            Ok(DistillRun {
                cluster: i,
                teacher_family: proxy.config.arch_family.clone(),
                seed: dcfg.seed,
                plan: out.plan,
                curve: out.curve,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = DistillReport {
        seed_base_curve: base_curve,
        runs,
    };
    write_json(&paths.distill_report(), &report)?;
    Ok(report)
}

pub fn merge_stage(cfg: &PipelineConfig, paths: &RunPaths) -> Result<MergeReport> {
    let seeds = StageSeeds::derive(cfg);
    let bases: Vec<DenseLm> = (0..cfg.clusters)
        .map(|i| load_dense(&paths.base(i)))
        .collect::<Result<_>>()?;
    let (moe, report) = merge(&bases, cfg.top_k, seeds.merge)?;
    save_ckpt(&moe, &paths.merged())?;
    write_json(&paths.merge_report(), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub curve: LossCurve,
    /// Number of expert tensors whose checksum matched the merge report.
    pub experts_verified: usize,
    pub trainable_fraction: f64,
    /// Routing of the tuned MoE on each domain's test set.
    pub domain_routing: Vec<RoutingStats>,
}

/// Tunes the merged MoE with experts frozen and checks the freeze against
/// the checksums recorded at merge time.
pub fn tune_stage(cfg: &PipelineConfig, paths: &RunPaths) -> Result<TuneReport> {
    let seeds = StageSeeds::derive(cfg);
    let public = load_tokens(&paths.public())?;
    let merged = load_moe(&paths.merged())?;
    let merge_report: MergeReport = read_json(&paths.merge_report())?;
    let (tuned, curve) = tune_global(&merged, &public, &with_seed(&cfg.tune, seeds.tune))?;
    let after = expert_checksums(&tuned.params);
    if after != merge_report.expert_checksums {
        return Err(Error::FrozenViolation(
            "expert checksums differ from the merge report".into(),
        ));
    }
    save_ckpt(&tuned, &paths.tuned())?;
    write_file(&paths.tune_curve(), curve_csv(&curve))?;
    let tests: Vec<Vec<Token>> = (0..cfg.data.num_domains)
        .map(|i| load_tokens(&paths.test(i)))
        .collect::<Result<_>>()?;
    let report = TuneReport {
        curve,
        experts_verified: after.len(),
        trainable_fraction: crate::fusion::trainable_fraction(&tuned.config, &tuned.moe),
        domain_routing: domain_routing(&tuned, &tests, cfg.max_seq_len)?,
    };
    write_json(&paths.tune_report(), &report)?;
    Ok(report)
}

/// Scores proxies, the seed base, the distilled bases and the MoE before
/// and after tuning on every domain test set and the mixed test set.
pub fn evaluate_stage(cfg: &PipelineConfig, paths: &RunPaths) -> Result<Vec<MetricRow>> {
    let mut tests: Vec<(String, Vec<Token>)> = (0..cfg.data.num_domains)
        .map(|i| Ok((format!("domain_{i}"), load_tokens(&paths.test(i))?)))
        .collect::<Result<_>>()?;
    tests.push(("mixed".into(), load_tokens(&paths.mixed_test())?));
    let t = cfg.max_seq_len;
    let mut rows = Vec::new();
    for i in 0..cfg.clusters {
        rows.extend(evaluate_model(
            &load_dense(&paths.proxy(i))?,
            "proxy",
            &format!("proxy_{i}"),
            &tests,
            t,
        )?);
    }
    rows.extend(evaluate_model(
        &load_dense(&paths.seed_base())?,
        "seed_base",
        "seed_base",
        &tests,
        t,
    )?);
    for i in 0..cfg.clusters {
        rows.extend(evaluate_model(
            &load_dense(&paths.base(i))?,
            "base",
            &format!("base_{i}"),
            &tests,
            t,
        )?);
    }
    rows.extend(evaluate_model(&load_moe(&paths.merged())?, "merged", "moe", &tests, t)?);
    rows.extend(evaluate_model(&load_moe(&paths.tuned())?, "tuned", "moe", &tests, t)?);
    write_file(&paths.metrics_csv(), metrics_csv(&rows))?;
    write_json(&paths.metrics_json(), &rows)?;
    Ok(rows)
}

/// One-shot upload totals against the multi-round baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub model_entries: usize,
    pub model_bytes: u64,
    pub embedding_bytes: u64,
    /// Checkpoint size of one backbone with a single FFN per layer.
    pub baseline_local_bytes: u64,
    pub baseline_rounds: u64,
    pub baseline_bytes: u64,
    /// `1 − model_bytes / baseline_bytes`
    pub saving: f64,
}

pub fn comm_summary(cfg: &PipelineConfig, ledger: &[LedgerEntry]) -> Result<CommSummary> {
    let n = ledger.iter().filter(|e| e.kind == PayloadKind::Model).count();
    let b_loc = DenseLm::zeros(cfg.family_config(&cfg.backbone_family)?)?
        .to_bytes()
        .len() as u64;
    let model_bytes = comm_cost(ledger);
    let r = cfg.baseline_rounds as u64;
    let baseline = baseline_comm_cost(n as u64, b_loc, r);
    Ok(CommSummary {
        model_entries: n,
        model_bytes,
        embedding_bytes: kind_bytes(ledger, PayloadKind::Embedding),
        baseline_local_bytes: b_loc,
        baseline_rounds: r,
        baseline_bytes: baseline,
        saving: 1.0 - model_bytes as f64 / baseline as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestDevice {
    pub device: usize,
    pub arch_family: String,
    pub domain: usize,
    pub tokens: usize,
}

/// What was run and what came out; its `config` replays the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub seeds: StageSeeds,
    pub devices: Vec<ManifestDevice>,
    pub clusters: Vec<Vec<usize>>,
    pub excluded_devices: Vec<usize>,
    pub stage_plans: Vec<StagePlan>,
    pub comm: CommSummary,
    pub metrics: Vec<MetricRow>,
}

/// Assembles the manifest from a completed run directory.
pub fn write_manifest(cfg: &PipelineConfig, paths: &RunPaths) -> Result<RunManifest> {
    let data = load_data(paths)?;
    let clusters: ClusterFile = read_json(&paths.clusters())?;
    let distill: DistillReport = read_json(&paths.distill_report())?;
    let ledger = CommLedger::from_json(&std::fs::read_to_string(paths.ledger())?)?;
    let metrics: Vec<MetricRow> = read_json(&paths.metrics_json())?;
    let manifest = RunManifest {
        config: cfg.clone(),
        seeds: StageSeeds::derive(cfg),
        devices: data
            .devices
            .iter()
            .map(|d| ManifestDevice {
                device: d.device,
                arch_family: d.arch_family.clone(),
                domain: d.domain,
                tokens: d.tokens,
            })
            .collect(),
        clusters: clusters.clusters.iter().map(|c| c.report.members.clone()).collect(),
        excluded_devices: clusters
            .clusters
            .iter()
            .flat_map(|c| c.report.excluded.clone())
            .collect(),
        stage_plans: distill.runs.iter().map(|r| r.plan.clone()).collect(),
        comm: comm_summary(cfg, &ledger.entries())?,
        metrics,
    };
    write_json(&paths.manifest(), &manifest)?;
    Ok(manifest)
}

/// Runs one named stage; errors carry the stage name.
pub fn run_stage(stage: &str, cfg: &PipelineConfig, paths: &RunPaths) -> Result<()> {
    let r = match stage {
        "gen-data" => gen_data(cfg, paths).map(drop),
        "train-devices" => train_devices(cfg, paths).map(drop),
        "cluster" => cluster(cfg, paths).map(drop),
        "distill" => distill_stage(cfg, paths).map(drop),
        "merge" => merge_stage(cfg, paths).map(drop),
        "tune" => tune_stage(cfg, paths).map(drop),
        "evaluate" => evaluate_stage(cfg, paths)
            .and_then(|_| write_manifest(cfg, paths))
            .map(drop),
        other => Err(Error::Config(format!("unknown stage `{other}`"))),
    };
    r.map_err(|e| e.in_stage(stage))
}

/// Every stage in order; artifacts of finished stages stay on disk if a
/// later stage fails.
pub fn run_pipeline(cfg: &PipelineConfig, paths: &RunPaths) -> Result<RunManifest> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    std::fs::create_dir_all(&paths.root)?;
    write_file(&paths.root.join("config.json"), cfg.to_json() + "\n")?;
    for stage in STAGES {
        run_stage(stage, cfg, paths)?;
    }
    read_json(&paths.manifest())
}
