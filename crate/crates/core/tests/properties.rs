//! Property tests of clustering, losses, merging and serialization.

use fedmoe::clustering::{average_params, kmeans_domains, similarity_matrix};
use fedmoe::datagen::{decode_tokens, encode_tokens};
use fedmoe::distill::{loss_kl, split_layers};
use fedmoe::fusion::merge;
use fedmoe::models::checkpoint::{load, Checkpoint};
use fedmoe::models::{forward_values, top_k_experts, DenseLm, LmConfig, Token, TokenBatch};
use fedmoe::orchestrator::{comm_cost, CommLedger, PayloadKind};
use fedmoe::rng::rng_from_seed;
use fedmoe::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn tiny(seed: u64) -> LmConfig {
    LmConfig {
        arch_family: "tinyA".into(),
        vocab_size: 9,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 12,
        max_seq_len: 5,
        tie_embeddings: seed % 2 == 0,
    }
}

fn random_dense(seed: u64) -> DenseLm {
    let r = &mut rng_from_seed(seed);
    let mut m = DenseLm::init(tiny(0), r).unwrap();
    for t in m.params.tensors_mut() {
        *t = Tensor::randn(t.shape(), 0.5, r);
    }
    m
}

/// `k` well-separated groups of noisy points in `dim` dimensions.
fn clustered_points(seed: u64, n: usize, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let r = &mut rng_from_seed(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| Tensor::randn(&[dim], 1.0, r).into_data()).collect();
    (0..n)
        .map(|i| {
            centers[i % k]
                .iter()
                .map(|c| c + 0.05 * r.random_range(-1.0..1.0))
                .collect()
        })
        .collect()
}

/// Random orthogonal matrix by Gram–Schmidt on Gaussian columns.
fn random_rotation(seed: u64, dim: usize) -> Vec<Vec<f64>> {
    let r = &mut rng_from_seed(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < dim {
        let mut v = Tensor::randn(&[dim], 1.0, r).into_data();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= dot * b;
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.iter().map(|a| a / n).collect());
        }
    }
    q
}

fn rotate(points: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            q.iter()
                .map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

fn embedding_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..8, 2usize..10).prop_flat_map(|(dim, n)| {
        prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)),
            n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal(emb in embedding_strategy()) {
        let s = similarity_matrix(&emb).unwrap();
        for i in 0..s.n {
            prop_assert!((s.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..s.n {
                prop_assert_eq!(s.get(i, j), s.get(j, i));
                prop_assert!((-1.0..=1.0).contains(&s.get(i, j)));
            }
        }
    }

    #[test]
    fn similarity_is_permutation_equivariant(emb in embedding_strategy(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..emb.len()).collect();
        perm.shuffle(&mut rng_from_seed(seed));
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| emb[i].clone()).collect();
        let a = similarity_matrix(&emb).unwrap();
        let b = similarity_matrix(&permuted).unwrap();
        for i in 0..a.n {
            for j in 0..a.n {
                prop_assert_eq!(b.get(i, j), a.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn kmeans_partition_is_rotation_invariant(seed in 0u64..10_000, k in 2usize..5, dim in 3usize..9) {
        let points = clustered_points(seed, 4 * k, k, dim);
        let rotated = rotate(&points, &random_rotation(seed ^ 0xabc, dim));
        let a = kmeans_domains(&points, k, seed).unwrap();
        let b = kmeans_domains(&rotated, k, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn kmeans_clusters_partition_the_devices(emb in embedding_strategy(), seed in any::<u64>()) {
        let k = 1 + (seed as usize % emb.len());
        let clusters = kmeans_domains(&emb, k, seed).unwrap();
        prop_assert_eq!(clusters.len(), k);
        let mut all: Vec<usize> = clusters.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..emb.len()).collect::<Vec<_>>());
        prop_assert!(clusters.iter().all(|c| !c.is_empty()));
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_identical_logits(
        seed in any::<u64>(), rows in 1usize..6, v in 2usize..12, tau in 0.1f64..8.0,
    ) {
        let r = &mut rng_from_seed(seed);
        let t = Tensor::randn(&[rows, v], 3.0, r);
        let s = Tensor::randn(&[rows, v], 3.0, r);
        let mut g = Graph::new();
        let (tv, sv) = (g.constant(t.clone()), g.constant(s));
        let kl = loss_kl(&mut g, tv, sv, tau).unwrap();
        prop_assert!(g.value(kl).item() >= 0.0);
        let same = g.constant(t);
        let zero = loss_kl(&mut g, tv, same, tau).unwrap();
        prop_assert!(g.value(zero).item().abs() < 1e-12);
    }

    #[test]
    fn merge_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..5) {
        let bases: Vec<DenseLm> = (0..n as u64).map(|i| random_dense(seed.wrapping_add(i))).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng_from_seed(seed));
        let permuted: Vec<DenseLm> = perm.iter().map(|&i| bases[i].clone()).collect();
        let (a, _) = merge(&bases, n, 3).unwrap();
        let (b, _) = merge(&permuted, n, 3).unwrap();
        for (name, tb) in b.params.iter() {
            if let Some((head, rest)) = name.split_once(".experts.") {
                let (e, tail) = rest.split_once('.').unwrap();
                let src = perm[e.parse::<usize>().unwrap()];
                let ta = a.params.get(&format!("{head}.experts.{src}.{tail}")).unwrap();
                prop_assert!(ta.bit_eq(tb), "{} differs from expert {}", name, src);
            } else if name.ends_with(".gate") {
                prop_assert!(a.params.get(name).unwrap().bit_eq(tb));
            } else {
                prop_assert!(a.params.get(name).unwrap().max_abs_diff(tb) <= 1e-15);
            }
        }
        // Permuting the gate columns back makes the two MoEs compute the same function.
        let mut c = b.clone();
        for (name, t) in c.params.iter_mut() {
            if name.ends_with(".gate") {
                let src = a.params.get(name).unwrap();
                let cols = n;
                for row in 0..t.shape()[0] {
                    for e in 0..cols {
                        let inv = perm.iter().position(|&p| p == e).unwrap();
                        t.data_mut()[row * cols + inv] = src.data()[row * cols + e];
                    }
                }
            }
        }
        let r = &mut rng_from_seed(seed ^ 1);
        let ids: Vec<usize> = (0..10).map(|_| r.random_range(0..9)).collect();
        let batch = TokenBatch::new(2, 5, ids).unwrap();
        let la = forward_values(&a, &batch).unwrap().logits;
        let lc = forward_values(&c, &batch).unwrap().logits;
        prop_assert!(la.max_abs_diff(&lc) < 1e-10);
    }

    #[test]
    fn averaging_identical_sets_is_exact(seed in any::<u64>(), copies in 1usize..6) {
        let m = random_dense(seed);
        let sets: Vec<_> = (0..copies).map(|_| &m.params).collect();
        let avg = average_params(&sets).unwrap();
        for ((_, a), (_, b)) in avg.iter().zip(m.params.iter()) {
            prop_assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>()) {
        let m = random_dense(seed);
        let bytes = m.to_bytes();
        let back = load(&bytes).unwrap().into_dense().unwrap();
        prop_assert_eq!(&back.config, &m.config);
        for ((na, a), (nb, b)) in back.params.iter().zip(m.params.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert!(a.bit_eq(b));
        }
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn token_files_round_trip(tokens in prop::collection::vec(0u16..500, 0..300)) {
        let bytes = encode_tokens(&tokens, 500);
        let (v, back): (usize, Vec<Token>) = decode_tokens(&bytes).unwrap();
        prop_assert_eq!(v, 500);
        prop_assert_eq!(back, tokens);
    }

    #[test]
    fn top_k_is_sorted_by_probability(seed in any::<u64>(), n in 1usize..7) {
        let r = &mut rng_from_seed(seed);
        let probs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let k = 1 + (seed as usize % n);
        let sel = &top_k_experts(&probs, n, k)[0];
        prop_assert_eq!(sel.len(), k);
        for w in sel.windows(2) {
            prop_assert!(probs[w[0]] >= probs[w[1]]);
        }
        let floor = probs[*sel.last().unwrap()];
        prop_assert!((0..n).filter(|i| !sel.contains(i)).all(|i| probs[i] <= floor));
    }

    #[test]
    fn stage_split_covers_every_layer_in_order(layers in 1usize..20, stages in 1usize..6) {
        prop_assume!(stages <= layers);
        let split = split_layers(layers, stages).unwrap();
        prop_assert_eq!(split.len(), stages);
        let flat: Vec<usize> = split.iter().flatten().copied().collect();
        prop_assert_eq!(flat, (0..layers).collect::<Vec<_>>());
        let sizes: Vec<usize> = split.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn comm_cost_sums_model_uploads(sizes in prop::collection::vec(1u64..1_000_000, 1..20)) {
        let ledger = CommLedger::new();
        for (d, &b) in sizes.iter().enumerate() {
            ledger.upload(d, PayloadKind::Model, b, 1).unwrap();
            ledger.upload(d, PayloadKind::Embedding, 256, 1).unwrap();
        }
        prop_assert_eq!(comm_cost(&ledger.entries()), sizes.iter().sum::<u64>());
    }
}
