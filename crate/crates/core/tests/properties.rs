//! Invariants of the numeric building blocks, checked against independent
//! implementations and over random inputs.

use std::collections::HashSet;

use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccfrec::archive::TensorArchive;
use ccfrec::evaluator::{
    ndcg_from_ranks, rank_full, read_rep_cache, recall_from_ranks, target_rank, RepCache,
};
use ccfrec::objectives::{loss_ce, loss_msa};
use ccfrec::quantizer::{
    assign_codes, fit_kmeans, quantization_error, read_codes, write_codes, Codebook, CodesHeader, QuantMethod,
};
use ccfrec::tensor::Matrix;
use ccfrec::textenc::{fit_pca, RawEmbeddings};

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn to_dmatrix(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn random_raw(items: usize, views: usize, dim: usize, seed: u64) -> RawEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RawEmbeddings {
        item_ids: (0..items).map(|i| format!("it{i}")).collect(),
        views,
        rows: Matrix::from_fn(items * views, dim, |_, _| rng.random_range(-1.0f32..1.0)),
    }
}

// ---------------------------------------------------------------------------
// PCA

#[test]
fn pca_matches_an_svd_of_the_centred_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Anisotropic data so the leading directions are well separated.
    let mut x = random_matrix(80, 6, &mut rng);
    for r in 0..x.rows() {
        for (c, v) in x.row_mut(r).iter_mut().enumerate() {
            *v *= (6 - c) as f64;
        }
    }
    let pca = fit_pca(&x, 4).unwrap();

    let n = x.rows();
    let mut centred = to_dmatrix(&x);
    for c in 0..centred.ncols() {
        let mean = centred.column(c).mean();
        centred.column_mut(c).add_scalar_mut(-mean);
    }
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    for (k, &s) in order.iter().take(4).enumerate() {
        let sigma = svd.singular_values[s];
        assert_relative_eq!(pca.explained_variance[k], sigma * sigma / (n - 1) as f64, max_relative = 1e-9);
        let alignment: f64 = (0..6).map(|r| pca.components.get(r, k) * v_t[(s, r)]).sum();
        assert_relative_eq!(alignment.abs(), 1.0, epsilon = 1e-9);
    }
    let gram = pca.components.t_matmul(&pca.components);
    assert!(gram.max_abs_diff(&Matrix::identity(4)) < 1e-12);
}

#[test]
fn full_width_pca_reconstructs_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_matrix(30, 5, &mut rng);
    let pca = fit_pca(&x, 5).unwrap();
    let back = pca.reconstruct(&pca.project(&x).unwrap());
    assert!(back.max_abs_diff(&x) < 1e-12);
    let ratio: f64 = pca.explained_variance_ratio.iter().sum();
    assert_relative_eq!(ratio, 1.0, epsilon = 1e-12);
}

// ---------------------------------------------------------------------------
// Quantization

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kmeans_objective_never_increases(seed in 0u64..1000, c in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(40, 3, &mut rng);
        let fit = fit_kmeans(&x, c, seed).unwrap();
        for w in fit.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.objective_history);
        }
        let last = *fit.objective_history.last().unwrap();
        prop_assert!((quantization_error(&x, &fit.centroids) - last).abs() <= 1e-9 * last.max(1.0));
    }

    #[test]
    fn codes_are_in_range_and_decode_to_their_centroids(
        seed in 0u64..1000,
        rq in any::<bool>(),
        k in 1usize..4,
    ) {
        let raw = random_raw(30, 2, 12, seed);
        let method = if rq { QuantMethod::Rq } else { QuantMethod::Pq };
        let book: Codebook<f32> = Codebook::fit(&raw, method, k, 5, seed).unwrap();
        let tuples = assign_codes(&raw, &book, &raw.item_ids).unwrap();
        prop_assert_eq!(tuples.len(), 30);
        for (i, t) in tuples.iter().enumerate() {
            prop_assert_eq!(t.codes.len(), 2 * k);
            prop_assert!(t.codes.iter().all(|&c| c < 5));
            for v in 0..2 {
                let codes = &t.codes[v * k..(v + 1) * k];
                let x = raw.rows.row(i * 2 + v);
                prop_assert_eq!(book.encode_view(v, x), codes.to_vec());
                // Independent decode: PQ concatenates, RQ sums.
                let mut expect = vec![0.0f32; if rq { 12 } else { 0 }];
                for (j, &c) in codes.iter().enumerate() {
                    let row = book.level(v, j).row(c as usize);
                    if rq {
                        expect.iter_mut().zip(row).for_each(|(e, r)| *e += r);
                    } else {
                        expect.extend_from_slice(row);
                    }
                }
                prop_assert_eq!(book.decode_view(v, codes), expect);
            }
        }
    }
}

#[test]
fn code_files_round_trip() {
    let raw = random_raw(12, 3, 8, 1);
    let book: Codebook<f32> = Codebook::fit(&raw, QuantMethod::Pq, 2, 4, 1).unwrap();
    let tuples = assign_codes(&raw, &book, &raw.item_ids).unwrap();
    let header = CodesHeader { version: 1, config_hash: 0xfeed, views: 3, levels: 2, size: 4 };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.codes");
    write_codes(&path, &tuples, &header).unwrap();
    let (h, back) = read_codes(&path).unwrap();
    assert_eq!(h, header);
    assert_eq!(back, tuples);
}

// ---------------------------------------------------------------------------
// Ranking metrics

fn scores_strategy() -> impl Strategy<Value = (Vec<i32>, usize, Vec<usize>)> {
    (3usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(-5i32..5, n),
            0..n,
            proptest::collection::vec(0..n, 0..n / 2),
        )
    })
}

proptest! {
    #[test]
    fn target_rank_agrees_with_the_full_ranking((scores, target, excl) in scores_strategy()) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let exclude: HashSet<usize> = excl.into_iter().filter(|&v| v != target).collect();
        let order = rank_full(&scores, &exclude);
        prop_assert!(order.iter().all(|v| !exclude.contains(v)));
        prop_assert_eq!(order.len(), scores.len() - exclude.len());
        let pos = order.iter().position(|&v| v == target).unwrap() + 1;
        prop_assert_eq!(target_rank(&scores, target, &exclude), pos);
        for w in order.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn metrics_are_bounded_and_monotone_in_k(ranks in proptest::collection::vec(1usize..60, 1..50)) {
        let mut prev = (0.0, 0.0);
        for k in 1..=60 {
            let (r, n) = (recall_from_ranks(&ranks, k), ndcg_from_ranks(&ranks, k));
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&n));
            prop_assert!(n <= r + 1e-15);
            prop_assert!(r >= prev.0 && n >= prev.1);
            prev = (r, n);
        }
        prop_assert_eq!(recall_from_ranks(&ranks, 60), 1.0);
        prop_assert_eq!(ndcg_from_ranks(&[1], 1), 1.0);
    }
}

// ---------------------------------------------------------------------------
// Losses

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ce_depends_only_on_directions(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let negs: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let base = loss_ce(&r, &t, &negs, 0.1).unwrap();
        let scaled: Vec<f64> = r.iter().map(|x| x * scale).collect();
        let scaled_negs: Vec<Vec<f64>> = negs.iter().map(|n| n.iter().map(|x| x / scale).collect()).collect();
        prop_assert!((loss_ce(&scaled, &t, &scaled_negs, 0.1).unwrap() - base).abs() < 1e-10);
        prop_assert!(base > 0.0);
        // Cross-entropy over five candidates is bounded by the all-miss case.
        prop_assert!(base <= 2.0 / 0.1 + 5f64.ln() + 1e-9);
    }

    #[test]
    fn msa_is_symmetric_in_its_two_views(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(5, 4, &mut rng);
        let b = random_matrix(5, 4, &mut rng);
        let ab = loss_msa(&a, &b, 0.2).unwrap();
        let ba = loss_msa(&b, &a, 0.2).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
    }
}

#[test]
fn ce_approaches_zero_for_a_perfect_match_at_low_temperature() {
    let r = vec![1.0, 0.0, 0.0];
    let negs = vec![vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 0.0]];
    let loss = loss_ce(&r, &r, &negs, 0.01).unwrap();
    assert!(loss < 1e-40, "{loss}");
    assert!(loss_ce(&r, &r, &negs, 1.0).unwrap() > loss);
}

// ---------------------------------------------------------------------------
// Persistence

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tensor_archives_round_trip(
        shapes in proptest::collection::vec((0usize..5, 0usize..5), 0..4),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut archive = TensorArchive::new(serde_json::json!({ "seed": seed, "note": "x" }));
        for (i, (r, c)) in shapes.iter().enumerate() {
            archive.push(format!("t{i}"), random_matrix(*r, *c, &mut rng));
        }
        let back: TensorArchive<f64> = TensorArchive::from_bytes(&archive.to_bytes(), "mem".as_ref()).unwrap();
        prop_assert_eq!(back.meta, archive.meta);
        prop_assert_eq!(back.tensors.len(), archive.tensors.len());
        for ((na, a), (nb, b)) in archive.tensors.iter().zip(&back.tensors) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn truncated_archives_are_rejected() {
    let mut archive = TensorArchive::new(serde_json::json!({}));
    archive.push("w", Matrix::<f64>::filled(2, 2, 1.5));
    let bytes = archive.to_bytes();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(TensorArchive::<f64>::from_bytes(&bytes[..cut], "mem".as_ref()).is_err(), "cut {cut}");
    }
    // An f64 archive is not readable as f32.
    assert!(TensorArchive::<f32>::from_bytes(&bytes, "mem".as_ref()).is_err());
}

#[test]
fn rep_caches_round_trip() {
    let reps = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f32 - 5.0);
    let ids: Vec<String> = (0..4).map(|i| format!("item-{i}")).collect();
    let cache = RepCache::new(ids.clone(), reps.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reps.bin");
    cache.write(&path, 42).unwrap();
    let (hash, back) = read_rep_cache(&path).unwrap();
    assert_eq!(hash, 42);
    assert_eq!(back.item_ids, ids);
    assert_eq!(back.reps, reps);
    let user = [1.0f32, -2.0, 0.5];
    assert_eq!(back.scores(&user), cache.scores(&user));
}
