//! Independent oracles for derived analysis values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freqformer::analysis::{
    coherence, kolmogorov_q, ks_test, permutation_entropy, projection_experiment, restricted_projection_errors,
    svd_entropy, ProjectionParams,
};
use freqformer::Tensor;

/// One-sided Jacobi SVD of a tall `m×n` row-major matrix: returns singular
/// values (descending) and the matching left singular vectors as columns.
fn jacobi_svd(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
                let beta: f64 = cols[q].iter().map(|v| v * v).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = cols
        .into_iter()
        .map(|c| {
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u = if norm > 0.0 { c.iter().map(|v| v / norm).collect() } else { c };
            (norm, u)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs.into_iter().unzip()
}

#[test]
fn coherence_matches_jacobi_leverage() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = Tensor::randn(&[32, 8], 1.0, &mut rng);
    let (_, u) = jacobi_svd(a.data(), 32, 8);
    let k = 4;
    let max_lev = (0..32).map(|i| (0..k).map(|j| u[j][i] * u[j][i]).sum::<f64>()).fold(0.0, f64::max);
    let want = 32.0 / k as f64 * max_lev;
    let got = coherence(&a, k).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn svd_truncation_error_matches_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (m, d, k) = (24, 10, 3);
    let a = Tensor::randn(&[m, d], 1.0, &mut rng);
    let (sv, _) = jacobi_svd(a.data(), m, d);
    let want = sv[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
    let all: Vec<usize> = (0..d).collect();
    let (err, best) = restricted_projection_errors(&a, &all, k).unwrap();
    assert!((best - want).abs() < 1e-9 * want.max(1.0));
    // every column selected: the span holds A_k
    assert!((err - best).abs() < 1e-9 * want);
}

#[test]
fn noise_free_low_rank_projection_is_exact() {
    let p = ProjectionParams { m: 40, d: 30, k_true: 4, k: 4, s: 6, trials: 20, noise: 0.0, epsilon: 0.5, seed: 3 };
    let r = projection_experiment(&p).unwrap();
    assert!(r.ratios.iter().all(|x| (x - 1.0).abs() < 1e-8), "{:?}", r.ratios);
    let full = ProjectionParams { s: 30, noise: 0.05, ..p };
    let r = projection_experiment(&full).unwrap();
    assert!(r.ratios.iter().all(|x| (x - 1.0).abs() < 1e-8));
}

#[test]
fn permutation_entropy_of_iid_noise_near_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
    let h = permutation_entropy(&x, 3, 1).unwrap();
    assert!((h - 1.0).abs() < 0.05, "{h}");
}

#[test]
fn svd_entropy_of_white_noise_near_one_and_sinusoid_low() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Tensor::randn(&[10_000], 1.0, &mut rng);
    let h = svd_entropy(noise.data(), 10, 1).unwrap();
    assert!((h - 1.0).abs() < 0.1, "{h}");
    // a sinusoid's delay embedding has rank 2 (3 before centering)
    let sine: Vec<f64> = (0..2000).map(|t| (0.13 * t as f64).sin()).collect();
    let hs = svd_entropy(&sine, 10, 1).unwrap();
    let (sv, _) = {
        let rows = 2000 - 9;
        let mut m = vec![0.0; rows * 10];
        for r in 0..rows {
            let mean = (0..10).map(|c| sine[r + c]).sum::<f64>() / 10.0;
            for c in 0..10 {
                m[r * 10 + c] = sine[r + c] - mean;
            }
        }
        jacobi_svd(&m, rows, 10)
    };
    let total: f64 = sv.iter().sum();
    let want = -sv.iter().filter(|&&s| s > 0.0).map(|s| s / total * (s / total).ln()).sum::<f64>() / 10f64.ln();
    assert!((hs - want).abs() < 1e-9, "{hs} vs {want}");
    assert!(hs < 0.4);
}

#[test]
fn ks_p_value_against_series_oracle() {
    // 1 - Q(λ) is the Kolmogorov CDF; at λ=1 it is 0.7300003...
    assert!((1.0 - kolmogorov_q(1.0) - 0.730_000_328).abs() < 1e-8);
    let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
    let b: Vec<f64> = (0..50).map(|i| i as f64 + 10.5).collect();
    let r = ks_test(&a, &b).unwrap();
    assert!((r.statistic - 0.22).abs() < 1e-12);
    let lambda = 0.22 * (25.0f64).sqrt();
    let q: f64 = 2.0 * (1..200).map(|j| (-1f64).powi(j - 1) * (-2.0 * (j * j) as f64 * lambda * lambda).exp()).sum::<f64>();
    assert!((r.p_value - q).abs() < 1e-10);
}
