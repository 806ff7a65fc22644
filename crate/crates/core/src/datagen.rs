//! Synthetic multi-domain corpora, device shards and data embeddings.
//!
//! Each knowledge domain is a first-order Markov chain over the shared
//! vocabulary. Domains own disjoint "core" token subsets: from any token a
//! domain moves into its own core with probability `separation`, and
//! uniformly anywhere otherwise. Unigram statistics therefore separate the
//! domains, which gives clustering a known ground truth.

use crate::error::{Error, Result};
use crate::models::Token;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Dimension of the device data embedding.
pub const EMBED_DIM: usize = 32;

pub const TOKEN_MAGIC: &[u8; 4] = b"DFTK";
pub const TOKEN_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub vocab_size: usize,
    pub num_domains: usize,
    pub devices_per_domain: usize,
    /// Mean shard length; actual lengths are a seeded Dirichlet split.
    pub tokens_per_device: usize,
    pub public_tokens: usize,
    /// Held-out tokens per domain (the mixed test set has the same length).
    pub test_tokens: usize,
    /// Probability of moving into the domain's own core tokens.
    pub separation: f64,
    /// Successors per token inside the core.
    pub branching: usize,
    /// Dirichlet concentration of the shard-size split; smaller is more uneven.
    pub size_concentration: f64,
    /// Fraction of a shard drawn from other domains.
    pub shard_mixture: f64,
    /// Length of the single-domain segments that make up mixed corpora.
    pub segment_len: usize,
    /// Model context length; shards must hold at least `max_seq_len + 1` tokens.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            vocab_size: 64,
            num_domains: 3,
            devices_per_domain: 4,
            tokens_per_device: 3072,
            public_tokens: 8192,
            test_tokens: 2048,
            separation: 0.9,
            branching: 3,
            size_concentration: 4.0,
            shard_mixture: 0.0,
            segment_len: 32,
            max_seq_len: 16,
            seed: 0,
        }
    }
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
fn dirichlet(alpha: f64, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet concentration {alpha}: {e}")))?;
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Ok(vec![1.0 / n as f64; n]);
    }
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// One Markov domain: a row-stochastic `V×V` transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    pub core: Vec<Token>,
    pub transitions: Vec<f64>,
    pub vocab_size: usize,
}

impl DomainSpec {
    /// Builds domain `id` of `cores.len()`, whose core tokens are `cores[id]`.
    pub fn new(id: usize, cores: &[Vec<Token>], cfg: &DataConfig) -> Result<Self> {
        let v = cfg.vocab_size;
        let core = cores[id].clone();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "domain", id as u64));
        let floor = (1.0 - cfg.separation) / v as f64;
        let mut transitions = vec![floor; v * v];
        let branching = cfg.branching.clamp(1, core.len());
        for a in 0..v {
            let succ: Vec<Token> = core.choose_multiple(&mut rng, branching).copied().collect();
            let w = dirichlet(1.0, branching, &mut rng)?;
            for (s, wi) in succ.iter().zip(&w) {
                transitions[a * v + *s as usize] += cfg.separation * wi;
            }
        }
        Ok(DomainSpec {
            id,
            core,
            transitions,
            vocab_size: v,
        })
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.transitions[a * self.vocab_size..(a + 1) * self.vocab_size]
    }

    /// Appends `len` tokens continuing from `prev` (or from a random core
    /// token when `prev` is `None`).
    pub fn sample_into(&self, len: usize, prev: Option<Token>, rng: &mut Rng, out: &mut Vec<Token>) {
        let mut cur = match prev {
            Some(p) => p,
            None => {
                let t = *self.core.choose(rng).expect("non-empty core");
                out.push(t);
                if len == 0 {
                    return;
                }
                t
            }
        };
        let start = out.len();
        let target = if prev.is_none() { start + len - 1 } else { start + len };
        while out.len() < target {
            let row = self.row(cur as usize);
            let mut u: f64 = rng.random();
            let mut next = row.len() - 1;
            for (i, &p) in row.iter().enumerate() {
                if u < p {
                    next = i;
                    break;
                }
                u -= p;
            }
            cur = next as Token;
            out.push(cur);
        }
    }
}

/// Disjoint core subsets: a seeded permutation of the vocabulary cut into
/// `num_domains` nearly equal chunks.
pub fn domain_cores(cfg: &DataConfig) -> Vec<Vec<Token>> {
    let mut perm: Vec<Token> = (0..cfg.vocab_size as Token).collect();
    perm.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, "cores", 0)));
    let k = cfg.num_domains;
    (0..k)
        .map(|i| {
            let (lo, hi) = (i * perm.len() / k, (i + 1) * perm.len() / k);
            let mut c = perm[lo..hi].to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// A device's private data shard.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub device: usize,
    pub domain: usize,
    pub arch_family: String,
    pub tokens: Vec<Token>,
}

/// Everything the simulation needs from the data generator.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub domains: Vec<DomainSpec>,
    pub shards: Vec<Shard>,
    /// Server-side public data: uniform mixture over all domains.
    pub public: Vec<Token>,
    /// Held-out test stream per domain.
    pub tests: Vec<Vec<Token>>,
    /// Held-out uniform mixture.
    pub mixed_test: Vec<Token>,
}

fn mixed_stream(domains: &[DomainSpec], len: usize, segment_len: usize, rng: &mut Rng) -> Vec<Token> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let d = rng.random_range(0..domains.len());
        let seg = segment_len.min(len - out.len());
        domains[d].sample_into(seg, None, rng, &mut out);
    }
    out
}

fn validate(cfg: &DataConfig) -> Result<()> {
    if cfg.num_domains < 1 || cfg.num_domains > cfg.vocab_size {
        return Err(Error::Config(format!(
            "num_domains {} must be in [1, vocab_size]",
            cfg.num_domains
        )));
    }
    if cfg.devices_per_domain == 0 {
        return Err(Error::Config("devices_per_domain must be positive".into()));
    }
    if cfg.tokens_per_device < cfg.max_seq_len + 1 {
        return Err(Error::Config(format!(
            "tokens_per_device {} is shorter than one training window ({})",
            cfg.tokens_per_device,
            cfg.max_seq_len + 1
        )));
    }
    if !(0.0..=1.0).contains(&cfg.separation) || !(0.0..=1.0).contains(&cfg.shard_mixture) {
        return Err(Error::Config("separation and shard_mixture must lie in [0, 1]".into()));
    }
    if cfg.vocab_size > Token::MAX as usize + 1 || cfg.segment_len == 0 {
        return Err(Error::Config("vocab_size or segment_len out of range".into()));
    }
    Ok(())
}

/// Generates domains, device shards, the public corpus and test sets.
///
/// Devices are assigned `devices_per_domain` per domain in a seeded random
/// order; architecture families are drawn uniformly from `families`.
pub fn gen_corpora(cfg: &DataConfig, families: &[String]) -> Result<Corpora> {
    validate(cfg)?;
    if families.is_empty() {
        return Err(Error::Config("no architecture families given".into()));
    }
    let cores = domain_cores(cfg);
    let domains = (0..cfg.num_domains)
        .map(|i| DomainSpec::new(i, &cores, cfg))
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.num_domains * cfg.devices_per_domain;

    let mut assign_rng = rng_from_seed(derive_seed(cfg.seed, "assign", 0));
    let mut domain_of: Vec<usize> = (0..n).map(|i| i % cfg.num_domains).collect();
    domain_of.shuffle(&mut assign_rng);
    let family_of: Vec<String> = (0..n)
        .map(|_| families[assign_rng.random_range(0..families.len())].clone())
        .collect();
    let sizes: Vec<usize> = if n == 1 {
        vec![cfg.tokens_per_device]
    } else {
        let w = dirichlet(cfg.size_concentration, n, &mut assign_rng)?;
        w.iter()
            .map(|wi| {
                let s = cfg.tokens_per_device as f64 * (0.5 + 0.5 * n as f64 * wi);
                (s.round() as usize).max(cfg.max_seq_len + 1)
            })
            .collect()
    };

    let shards = (0..n)
        .map(|dev| {
            let mut rng = rng_from_seed(derive_seed(cfg.seed, "shard", dev as u64));
            let dom = domain_of[dev];
            let mut tokens = Vec::with_capacity(sizes[dev]);
            while tokens.len() < sizes[dev] {
                let seg = cfg.segment_len.min(sizes[dev] - tokens.len());
                let src = if cfg.num_domains > 1 && rng.random::<f64>() < cfg.shard_mixture {
                    let other = rng.random_range(0..cfg.num_domains - 1);
                    if other >= dom {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    dom
                };
                domains[src].sample_into(seg, None, &mut rng, &mut tokens);
            }
            Shard {
                device: dev,
                domain: dom,
                arch_family: family_of[dev].clone(),
                tokens,
            }
        })
        .collect();

    let public = mixed_stream(
        &domains,
        cfg.public_tokens,
        cfg.segment_len,
        &mut rng_from_seed(derive_seed(cfg.seed, "public", 0)),
    );
    let tests = domains
        .iter()
        .map(|d| {
            let mut rng = rng_from_seed(derive_seed(cfg.seed, "test", d.id as u64));
            let mut out = Vec::with_capacity(cfg.test_tokens);
            d.sample_into(cfg.test_tokens, None, &mut rng, &mut out);
            out
        })
        .collect();
    let mixed_test = mixed_stream(
        &domains,
        cfg.test_tokens,
        cfg.segment_len,
        &mut rng_from_seed(derive_seed(cfg.seed, "test-mixed", 0)),
    );
    Ok(Corpora {
        domains,
        shards,
        public,
        tests,
        mixed_test,
    })
}

/// The global random projection shared by every device: `EMBED_DIM × V`
/// standard-normal entries.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingProjection {
    vocab_size: usize,
    matrix: Vec<f64>,
}

impl EmbeddingProjection {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, "projection", 0));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let matrix = (0..EMBED_DIM * vocab_size).map(|_| normal.sample(&mut rng)).collect();
        EmbeddingProjection { vocab_size, matrix }
    }

    /// `e = P·(h − 1/V) / ‖P·(h − 1/V)‖₂` where `h` is the shard's unigram
    /// frequency histogram. Subtracting the uniform histogram removes the
    /// component every shard shares, so unrelated domains land near or
    /// below zero cosine.
    pub fn embed(&self, shard: &[Token]) -> Result<Vec<f64>> {
        if shard.is_empty() {
            return Err(Error::Empty("shard"));
        }
        let v = self.vocab_size;
        let mut hist = vec![0.0; v];
        for &t in shard {
            let t = t as usize;
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            hist[t] += 1.0;
        }
        let n = shard.len() as f64;
        let centered: Vec<f64> = hist.iter().map(|c| c / n - 1.0 / v as f64).collect();
        let mut e: Vec<f64> = (0..EMBED_DIM)
            .map(|r| {
                self.matrix[r * v..(r + 1) * v]
                    .iter()
                    .zip(&centered)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Config(
                "shard histogram is exactly uniform; embedding undefined".into(),
            ));
        }
        e.iter_mut().for_each(|x| *x /= norm);
        Ok(e)
    }
}

/// Data embedding of a shard under the global projection.
pub fn compute_embedding(shard: &[Token], projection: &EmbeddingProjection) -> Result<Vec<f64>> {
    projection.embed(shard)
}

pub fn encode_tokens(tokens: &[Token], vocab_size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 2 * tokens.len());
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&TOKEN_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(vocab_size as u32).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Returns `(vocab_size, tokens)`.
pub fn decode_tokens(bytes: &[u8]) -> Result<(usize, Vec<Token>)> {
    if bytes.len() < 12 || &bytes[..4] != TOKEN_MAGIC {
        return Err(Error::Format("not a token stream".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TOKEN_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported token stream version {version}")));
    }
    let vocab = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() % 2 != 0 {
        return Err(Error::Format("odd token payload length".into()));
    }
    let tokens: Vec<Token> = body
        .chunks_exact(2)
        .map(|c| Token::from_le_bytes([c[0], c[1]]))
        .collect();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id: t as usize, vocab });
    }
    Ok((vocab, tokens))
}

pub fn write_tokens(path: &Path, tokens: &[Token], vocab_size: usize) -> Result<usize> {
    let bytes = encode_tokens(tokens, vocab_size);
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_tokens(path: &Path) -> Result<(usize, Vec<Token>)> {
    decode_tokens(&std::fs::read(path)?)
}

/// One line of the data manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub device: usize,
    pub arch_family: String,
    pub shard_path: String,
    pub domain: usize,
    pub tokens: usize,
    pub embedding: Vec<f64>,
}

/// Device → (arch family, shard file, domain, embedding), plus the server-side
/// and held-out corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config: DataConfig,
    pub devices: Vec<DeviceEntry>,
    pub public_path: String,
    pub test_paths: Vec<String>,
    pub mixed_test_path: String,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
