//! Similarity of device data embeddings, k-means grouping into knowledge
//! domains, and weight-averaged proxy teachers.

use crate::error::{Error, Result};
use crate::models::{DenseLm, ParamSet};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

const MAX_ITERS: usize = 300;
const SHIFT_TOL: f64 = 1e-9;

/// Pairwise cosine similarities, row-major `N×N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_embeddings(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = embeddings.first().ok_or(Error::Empty("embeddings"))?.len();
    embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.len() != dim {
                return Err(Error::shape(
                    "embeddings",
                    format!("embedding {i} has dim {}, expected {dim}", e.len()),
                ));
            }
            let n = norm(e);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Config(format!("embedding {i} has zero or non-finite norm")));
            }
            Ok(n)
        })
        .collect()
}

pub fn similarity_matrix(embeddings: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let norms = check_embeddings(embeddings)?;
    let n = embeddings.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Groups `N` embeddings into `k` clusters with Lloyd iterations on the
/// unit sphere (Euclidean distance) from a seeded k-means++ start.
///
/// Ties go to the lower index everywhere: nearest centroid, the k-means++
/// fallback when every remaining point coincides with a centroid, and the
/// member taken from the largest cluster to refill an empty one. Clusters
/// are returned ordered by their smallest member, members ascending.
pub fn kmeans_domains(embeddings: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let norms = check_embeddings(embeddings)?;
    let n = embeddings.len();
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} embeddings")));
    }
    let points: Vec<Vec<f64>> = embeddings
        .iter()
        .zip(&norms)
        .map(|(e, nrm)| e.iter().map(|x| x / nrm).collect())
        .collect();

    let mut rng = rng_from_seed(derive_seed(seed, "kmeans", 0));
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                chosen
                    .iter()
                    .map(|&c| dist2(p, &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&c| points[c].clone()).collect();

    let mut assign = vec![0usize; n];
    for _ in 0..MAX_ITERS {
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, cen) in centroids.iter().enumerate() {
                let d = dist2(p, cen);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assign[i] = best.1;
        }
        repair_empty(&points, &centroids, &mut assign, k);

        let mut shift: f64 = 0.0;
        for (c, cen) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            let mut m = vec![0.0; cen.len()];
            for &i in &members {
                m.iter_mut().zip(&points[i]).for_each(|(a, x)| *a += x);
            }
            m.iter_mut().for_each(|a| *a /= members.len() as f64);
            shift = shift.max(dist2(&m, cen).sqrt());
            *cen = m;
        }
        if shift < SHIFT_TOL {
            break;
        }
    }

    let mut clusters: Vec<Vec<usize>> = (0..k).map(|c| (0..n).filter(|&i| assign[i] == c).collect()).collect();
    clusters.sort_by_key(|m| m[0]);
    Ok(clusters)
}

/// Moves the farthest member of the largest cluster into each empty one.
fn repair_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        assign.iter().for_each(|&c| sizes[c] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b });
        let mut far = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            if assign[i] == largest {
                let d = dist2(p, &centroids[largest]);
                if d > far.0 {
                    far = (d, i);
                }
            }
        }
        assign[far.1] = empty;
    }
}

/// A trained device model as seen by the server.
#[derive(Clone, Copy, Debug)]
pub struct DeviceModel<'a> {
    pub device: usize,
    /// Size of the device's training shard, used only to break family ties.
    pub tokens: usize,
    pub model: &'a DenseLm,
}

/// Majority family by member count, then by aggregate training tokens,
/// then lexicographically smallest tag.
pub fn dominant_family(members: &[DeviceModel<'_>]) -> Result<String> {
    let mut tally: Vec<(String, usize, usize)> = Vec::new();
    for m in members {
        let fam = &m.model.config.arch_family;
        match tally.iter_mut().find(|t| &t.0 == fam) {
            Some(t) => {
                t.1 += 1;
                t.2 += m.tokens;
            }
            None => tally.push((fam.clone(), 1, m.tokens)),
        }
    }
    tally
        .into_iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)))
        .map(|t| t.0)
        .ok_or(Error::Empty("cluster"))
}

/// Elementwise mean of same-architecture parameter sets, accumulated in
/// list order (see [`Tensor::mean_of`]).
pub fn average_params(sets: &[&ParamSet]) -> Result<ParamSet> {
    let first = sets.first().ok_or(Error::Empty("parameter sets"))?;
    let mut out = ParamSet::new();
    for (name, _) in first.iter() {
        let ts = sets
            .iter()
            .map(|s| {
                s.get(name)
                    .ok_or_else(|| Error::Config(format!("parameter `{name}` missing from a model")))
            })
            .collect::<Result<Vec<&Tensor>>>()?;
        out.insert(name, Tensor::mean_of(&ts)?);
    }
    if sets.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Config("parameter sets differ in size".into()));
    }
    Ok(out)
}

/// `Σ wᵢ·θᵢ / Σ wᵢ`, accumulated in list order.
pub fn weighted_average_params(sets: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
    if sets.len() != weights.len() || sets.is_empty() {
        return Err(Error::Config("one weight per parameter set required".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config("weights must be non-negative with a positive sum".into()));
    }
    let mut out = ParamSet::new();
    for (name, first) in sets[0].iter() {
        let mut acc = vec![0.0; first.numel()];
        for (s, w) in sets.iter().zip(weights) {
            let t = s
                .get(name)
                .filter(|t| t.shape() == first.shape())
                .ok_or_else(|| Error::Config(format!("parameter `{name}` missing or reshaped")))?;
            acc.iter_mut().zip(t.data()).for_each(|(a, x)| *a += w * x);
        }
        acc.iter_mut().for_each(|a| *a /= total);
        out.insert(name, Tensor::new(first.shape().to_vec(), acc)?);
    }
    Ok(out)
}

/// One knowledge domain and its proxy teacher.
#[derive(Clone, Debug)]
pub struct KnowledgeCluster {
    pub id: usize,
    pub members: Vec<usize>,
    pub dominant_family: String,
    /// Members of other families, left out of the average.
    pub excluded: Vec<usize>,
    pub proxy: DenseLm,
}

/// Averages the members of the dominant family in ascending device order.
pub fn build_proxy(id: usize, members: &[DeviceModel<'_>]) -> Result<KnowledgeCluster> {
    build_proxy_with(id, members, false)
}

/// As [`build_proxy`]; `weighted` weights each member by its shard size.
pub fn build_proxy_with(id: usize, members: &[DeviceModel<'_>], weighted: bool) -> Result<KnowledgeCluster> {
    let family = dominant_family(members)?;
    let mut sorted: Vec<&DeviceModel<'_>> = members.iter().collect();
    sorted.sort_by_key(|m| m.device);
    let ids: Vec<usize> = sorted.iter().map(|m| m.device).collect();
    let (kept, excluded): (Vec<&DeviceModel<'_>>, Vec<&DeviceModel<'_>>) =
        sorted.into_iter().partition(|m| m.model.config.arch_family == family);
    let config = kept[0].model.config.clone();
    if let Some(bad) = kept.iter().find(|m| m.model.config != config) {
        return Err(Error::Config(format!(
            "device {} shares family `{family}` but has a different config",
            bad.device
        )));
    }
    let sets: Vec<&ParamSet> = kept.iter().map(|m| &m.model.params).collect();
    let params = if weighted {
        let w: Vec<f64> = kept.iter().map(|m| m.tokens as f64).collect();
        weighted_average_params(&sets, &w)?
    } else {
        average_params(&sets)?
    };
    let proxy = DenseLm::from_params(config, params)?;
    Ok(KnowledgeCluster {
        id,
        members: ids,
        dominant_family: family,
        excluded: excluded.iter().map(|m| m.device).collect(),
        proxy,
    })
}

/// JSON-facing summary of a cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub id: usize,
    pub members: Vec<usize>,
    pub dominant_family: String,
    pub excluded: Vec<usize>,
    /// Mean pairwise cosine among members (1 for singletons).
    pub intra_mean_cosine: f64,
    pub proxy_parameters: usize,
}

impl ClusterReport {
    pub fn new(cluster: &KnowledgeCluster, sim: &SimilarityMatrix) -> Self {
        let m = &cluster.members;
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                total += sim.get(i, j);
                pairs += 1;
            }
        }
        ClusterReport {
            id: cluster.id,
            members: m.clone(),
            dominant_family: cluster.dominant_family.clone(),
            excluded: cluster.excluded.clone(),
            intra_mean_cosine: if pairs == 0 { 1.0 } else { total / pairs as f64 },
            proxy_parameters: cluster.proxy.params.numel(),
        }
    }
}
