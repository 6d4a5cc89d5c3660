use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svkit::pooling::{attention_weights, gsp, mqmha, MqmhaParams, Pooling};

fn random_frames(t: usize, c: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((t, c), |_| rng.random_range(-2.0..2.0))
}

/// Two-pass mean/std over frames for one column, with explicit weights.
fn weighted_two_pass(col: &[f64], w: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    for (x, a) in col.iter().zip(w) {
        mean += a * x;
    }
    let mut var = 0.0;
    for (x, a) in col.iter().zip(w) {
        var += a * (x - mean) * (x - mean);
    }
    (mean, var.max(1e-10).sqrt())
}

#[test]
fn gsp_matches_two_pass() {
    let x = random_frames(13, 5, 1);
    let out = gsp(x.view());
    let w = vec![1.0 / 13.0; 13];
    for c in 0..5 {
        let col: Vec<f64> = x.column(c).to_vec();
        let (m, s) = weighted_two_pass(&col, &w);
        assert!((out[c] - m).abs() < 1e-12);
        assert!((out[5 + c] - s).abs() < 1e-12);
    }
}

#[test]
fn mqmha_matches_brute_force() {
    let (t, c, heads, queries) = (9, 8, 2, 3);
    let x = random_frames(t, c, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = MqmhaParams::zeros(c, heads, queries).unwrap();
    p.query_weights.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let out = mqmha(x.view(), &p).unwrap();
    let hd = c / heads;
    let mut expected = Vec::new();
    for q in 0..queries {
        for h in 0..heads {
            let logits: Vec<f64> = (0..t)
                .map(|i| (0..hd).map(|d| x[[i, h * hd + d]] * p.query_weights[[q * heads + h, d]]).sum())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
            let stats: Vec<(f64, f64)> =
                (0..hd).map(|d| weighted_two_pass(&x.column(h * hd + d).to_vec(), &w)).collect();
            expected.extend(stats.iter().map(|s| s.0));
            expected.extend(stats.iter().map(|s| s.1));
        }
    }
    assert_eq!(out.len(), expected.len());
    for (a, b) in out.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_queries_reduce_to_gsp_per_head() {
    let x = random_frames(6, 4, 4);
    let p = MqmhaParams::zeros(4, 2, 1).unwrap();
    let out = mqmha(x.view(), &p).unwrap();
    let g = gsp(x.view());
    let expected = [g[0], g[1], g[4], g[5], g[2], g[3], g[6], g[7]];
    for (a, b) in out.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn output_dims() {
    assert_eq!(Pooling::Gsp.output_dim(64), 128);
    let p = MqmhaParams::zeros(64, 4, 2).unwrap();
    assert_eq!(Pooling::Mqmha(p).output_dim(64), 256);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gsp_permutation_invariant(t in 2usize..12, c in 1usize..6, seed in any::<u64>()) {
        let x = random_frames(t, c, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut order: Vec<usize> = (0..t).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let shuffled = Array2::from_shape_fn((t, c), |(i, j)| x[[order[i], j]]);
        let (a, b) = (gsp(x.view()), gsp(shuffled.view()));
        for (p, q) in a.iter().zip(b.iter()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(t in 1usize..15, seed in any::<u64>(), scale in 0.0f64..20.0) {
        let x = random_frames(t, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let mut p = MqmhaParams::zeros(6, 3, 2).unwrap();
        p.query_weights.mapv_inplace(|_| scale * rng.random_range(-1.0..1.0));
        let w = attention_weights(x.view(), &p).unwrap();
        for row in w.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn std_is_nonnegative(t in 1usize..8, seed in any::<u64>()) {
        let x = random_frames(t, 4, seed);
        let out: Array1<f64> = gsp(x.view());
        prop_assert!(out.slice(ndarray::s![4..]).iter().all(|&s| s >= 1e-5));
    }
}
