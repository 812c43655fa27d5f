//! Verification tools: two-sample KS test, column-subset projection
//! experiment, coherence, permutation and SVD entropy, and a timing probe.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use faer::Mat;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{Forecaster, Normalizer, Window};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub m: usize,
}

impl KsResult {
    /// Critical distance `√(−½ ln(α/2))·√((n+m)/(nm))`.
    pub fn critical_value(&self, alpha: f64) -> f64 {
        let (n, m) = (self.n as f64, self.m as f64);
        (-0.5 * (alpha / 2.0).ln()).sqrt() * ((n + m) / (n * m)).sqrt()
    }

    /// Whether equality of distributions is rejected at level `alpha`.
    pub fn rejects(&self, alpha: f64) -> bool {
        self.statistic > self.critical_value(alpha)
    }
}

/// Asymptotic Kolmogorov survival function `Q(λ) = P(K > λ)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        // Jacobi-theta form converges fast for small λ
        let c = std::f64::consts::PI * std::f64::consts::PI / (8.0 * lambda * lambda);
        let mut s = 0.0;
        for j in 1..=50 {
            let t = (-((2 * j - 1) as f64).powi(2) * c).exp();
            s += t;
            if t < 1e-17 {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        let mut s = 0.0;
        for j in 1..=100 {
            let t = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
            s += if j % 2 == 1 { t } else { -t };
            if t < 1e-17 {
                break;
            }
        }
        2.0 * s
    };
    q.clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("KS samples contain NaN".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] == v {
            i += 1;
        }
        while j < m && y[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    // once one sample is exhausted the gap only shrinks toward 0
    let (nf, mf) = (n as f64, m as f64);
    let lambda = d * (nf * mf / (nf + mf)).sqrt();
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(lambda), n, m })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KsRow {
    pub horizon: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub m: usize,
}

/// For each horizon, pools the first `h` predicted rows and the input rows
/// (denormalized) of test windows spaced `input_len` apart, and compares the
/// two pools.
pub fn ks_forecast_report<F: Forecaster + ?Sized>(
    model: &F,
    windows: &[Window],
    norm: &Normalizer,
    horizons: &[usize],
) -> Result<Vec<KsRow>> {
    let Some(first) = windows.first() else {
        return Err(Error::EmptySample);
    };
    let input_len = first.input.shape()[0];
    let picked: Vec<&Window> = {
        let mut out: Vec<&Window> = Vec::new();
        for w in windows {
            if out.last().is_none_or(|p| w.start >= p.start + input_len) {
                out.push(w);
            }
        }
        out
    };
    let preds: Vec<Tensor> = picked
        .par_iter()
        .map(|w| norm.denormalize(&model.forecast(&w.input)?))
        .collect::<Result<_>>()?;
    let mut inputs = Vec::new();
    for w in &picked {
        inputs.extend_from_slice(norm.denormalize(&w.input)?.data());
    }
    let mut rows = Vec::new();
    for &h in horizons {
        let pred_len = preds[0].shape()[0];
        if h == 0 || h > pred_len {
            return Err(Error::InvalidArgument(format!("horizon {h} outside 1..={pred_len}")));
        }
        let mut pooled = Vec::new();
        for p in &preds {
            pooled.extend_from_slice(p.slice_first(0, h)?.data());
        }
        let r = ks_test(&pooled, &inputs)?;
        rows.push(KsRow { horizon: h, statistic: r.statistic, p_value: r.p_value, n: r.n, m: r.m });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub m: usize,
    pub d: usize,
    pub k_true: usize,
    pub k: usize,
    pub s: usize,
    pub trials: usize,
    pub noise: f64,
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionReport {
    pub ratios: Vec<f64>,
    pub s: usize,
    pub k: usize,
    pub epsilon: f64,
    pub fraction_within_bound: f64,
    pub coherence: f64,
}

fn to_matrix(t: &Tensor) -> Result<Mat<f64>> {
    let [r, c] = t.dims2("to_matrix")?;
    let d = t.data();
    Ok(Mat::from_fn(r, c, |i, j| d[i * c + j]))
}

/// Thin SVD; singular values come back in nonincreasing order.
fn thin_svd(a: &Mat<f64>) -> Result<(Mat<f64>, Vec<f64>, Mat<f64>)> {
    let svd = a.thin_svd().map_err(|_| Error::NoConvergence)?;
    let s = svd.S().column_vector().iter().copied().collect();
    Ok((svd.U().to_owned(), s, svd.V().to_owned()))
}

/// Best rank-`k` approximation by truncated SVD.
fn truncate(a: &Mat<f64>, k: usize) -> Result<Mat<f64>> {
    let (u, s, v) = thin_svd(a)?;
    let r = k.min(s.len());
    let us = Mat::from_fn(a.nrows(), r, |i, j| u[(i, j)] * s[j]);
    Ok(&us * v.subcols(0, r).transpose())
}

/// Error of the best rank-`k` approximation of `a` inside the column span
/// of `a[:, cols]`, next to the unrestricted SVD truncation error.
pub fn restricted_projection_errors(a: &Tensor, cols: &[usize], k: usize) -> Result<(f64, f64)> {
    let a = to_matrix(a)?;
    if let Some(&bad) = cols.iter().find(|&&c| c >= a.ncols()) {
        return Err(Error::InvalidArgument(format!("column {bad} out of range for {} columns", a.ncols())));
    }
    let sub = Mat::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])]);
    let (u, sv, _) = thin_svd(&sub)?;
    let tol = sv.first().copied().unwrap_or(0.0) * 1e-12 * (a.nrows().max(cols.len()) as f64);
    let rank = sv.iter().take_while(|&&s| s > tol).count();
    let q = u.subcols(0, rank);
    let b = q.transpose() * &a;
    let approx = q * truncate(&b, k)?;
    let best = truncate(&a, k)?;
    Ok(((&a - &approx).norm_l2(), (&a - &best).norm_l2()))
}

/// Monte-Carlo check of the column-subset projection bound: a noisy
/// low-rank matrix, `s` uniformly sampled columns per trial, and the ratio
/// of the in-span rank-`k` error to the SVD truncation error.
pub fn projection_experiment(p: &ProjectionParams) -> Result<ProjectionReport> {
    if p.k == 0 || p.k > p.s || p.s > p.d || p.k_true == 0 || p.k_true > p.m.min(p.d) || p.trials == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ k ≤ s ≤ d and 1 ≤ k_true ≤ min(m,d), got m={} d={} k_true={} k={} s={}",
            p.m, p.d, p.k_true, p.k, p.s
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let left = Tensor::randn(&[p.m, p.k_true], 1.0, &mut rng);
    let right = Tensor::randn(&[p.k_true, p.d], 1.0, &mut rng);
    let noise = Tensor::randn(&[p.m, p.d], p.noise, &mut rng);
    let a = left.matmul(&right)?.zip_map(&noise, |x, y| x + y)?;
    let scale = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let ratios: Vec<f64> = (0..p.trials)
        .into_par_iter()
        .map(|t| {
            let mut r = ChaCha8Rng::seed_from_u64(p.seed);
            r.set_stream(t as u64 + 1);
            let mut cols = index::sample(&mut r, p.d, p.s).into_vec();
            cols.sort_unstable();
            let (err, best) = restricted_projection_errors(&a, &cols, p.k)?;
            // both errors at rounding level: the span holds A_k exactly
            let tiny = 1e-10 * scale;
            Ok(if err <= tiny && best <= tiny { 1.0 } else { err / best })
        })
        .collect::<Result<_>>()?;
    let within = ratios.iter().filter(|&&r| r <= 1.0 + p.epsilon).count();
    Ok(ProjectionReport {
        fraction_within_bound: within as f64 / ratios.len() as f64,
        ratios,
        s: p.s,
        k: p.k,
        epsilon: p.epsilon,
        coherence: coherence(&a, p.k)?,
    })
}

/// `(n/k)·max_i ‖U_k[i,:]‖²` for the top-`k` left singular vectors of an
/// `n×c` matrix.
pub fn coherence(a: &Tensor, k: usize) -> Result<f64> {
    let [n, c] = a.dims2("coherence")?;
    if k == 0 || k > n.min(c) {
        return Err(Error::InvalidArgument(format!("k={k} outside 1..={}", n.min(c))));
    }
    let (u, _, _) = thin_svd(&to_matrix(a)?)?;
    let max_lev = (0..n)
        .map(|i| (0..k).map(|j| u[(i, j)] * u[(i, j)]).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(n as f64 / k as f64 * max_lev)
}

/// Bandt-Pompe ordinal-pattern entropy, normalized by `ln(order!)`. Ties are
/// ranked by position.
pub fn permutation_entropy(x: &[f64], order: usize, delay: usize) -> Result<f64> {
    if order < 2 || delay == 0 {
        return Err(Error::InvalidArgument("order must be ≥ 2 and delay ≥ 1".into()));
    }
    if x.len() <= order * delay {
        return Err(Error::SeriesTooShort { len: x.len(), need: order * delay + 1 });
    }
    let count = x.len() - (order - 1) * delay;
    let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut idx: Vec<usize> = Vec::with_capacity(order);
    for start in 0..count {
        idx.clear();
        idx.extend(0..order);
        idx.sort_by(|&i, &j| x[start + i * delay].total_cmp(&x[start + j * delay]).then(i.cmp(&j)));
        *freq.entry(idx.clone()).or_default() += 1;
    }
    let h: f64 = freq
        .values()
        .map(|&c| {
            let p = c as f64 / count as f64;
            -p * p.ln()
        })
        .sum();
    let norm: f64 = (2..=order).map(|i| (i as f64).ln()).sum();
    Ok((h / norm).max(0.0))
}

/// Normalized Shannon entropy of the singular spectrum of the row-centered
/// delay embedding.
pub fn svd_entropy(x: &[f64], embed_dim: usize, delay: usize) -> Result<f64> {
    if embed_dim < 2 || delay == 0 {
        return Err(Error::InvalidArgument("embed_dim must be ≥ 2 and delay ≥ 1".into()));
    }
    if x.len() <= embed_dim * delay {
        return Err(Error::SeriesTooShort { len: x.len(), need: embed_dim * delay + 1 });
    }
    let rows = x.len() - (embed_dim - 1) * delay;
    let means: Vec<f64> = (0..rows)
        .map(|r| (0..embed_dim).map(|c| x[r + c * delay]).sum::<f64>() / embed_dim as f64)
        .collect();
    let m = Mat::from_fn(rows, embed_dim, |r, c| x[r + c * delay] - means[r]);
    let sv: Vec<f64> = m.singular_values().map_err(|_| Error::NoConvergence)?;
    let total: f64 = sv.iter().sum();
    let max_abs = x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    if total <= 1e-12 * max_abs * (rows as f64).sqrt() {
        return Ok(0.0);
    }
    let h: f64 = sv
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(h / (embed_dim as f64).ln())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRow {
    pub len: usize,
    pub forward_ms: f64,
    /// Forward plus backward.
    pub backward_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median forward and forward+backward times per prediction length `L`, with
/// `input_len = 2L` so every transform length stays a power of two.
pub fn scaling_probe(base: &ModelConfig, lengths: &[usize], repeats: usize) -> Result<Vec<ScalingRow>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    if let Some(&bad) = lengths.iter().find(|l| !l.is_power_of_two()) {
        return Err(Error::InvalidArgument(format!("length {bad} is not a power of two")));
    }
    let mut rows = Vec::new();
    for &len in lengths {
        let cfg = ModelConfig { input_len: 2 * len, pred_len: len, ..base.clone() };
        let model = Model::new(cfg.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let x = Tensor::randn(&[cfg.input_len, cfg.raw_dim], 1.0, &mut rng);
        let target = Tensor::randn(&[cfg.pred_len, cfg.raw_dim], 1.0, &mut rng);
        let (mut fwd, mut bwd) = (Vec::new(), Vec::new());
        for rep in 0..=repeats {
            let t0 = Instant::now();
            let mut g = Graph::new();
            let y = model.forward(&mut g, &x)?;
            let f_ms = t0.elapsed().as_secs_f64() * 1e3;
            let tv = g.constant(target.clone());
            let loss = g.mse(y, tv)?;
            let grads = g.backward(loss, &model.store)?;
            let b_ms = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(grads);
            // first pass warms caches and allocator
            if rep > 0 {
                fwd.push(f_ms);
                bwd.push(b_ms);
            }
        }
        rows.push(ScalingRow { len, forward_ms: median(fwd), backward_ms: median(bwd) });
    }
    Ok(rows)
}

/// Median of consecutive forward-time ratios.
pub fn median_doubling_ratio(rows: &[ScalingRow]) -> Option<f64> {
    if rows.len() < 2 {
        return None;
    }
    Some(median(rows.windows(2).map(|w| w[1].forward_ms / w[0].forward_ms).collect()))
}

/// Renders a CSV report: `# key=value` comment lines, one header line, rows.
pub fn render_csv(params: &[(&str, String)], header: &str, rows: &[String]) -> String {
    let mut s = String::new();
    for (k, v) in params {
        let _ = writeln!(s, "# {k}={v}");
    }
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

pub fn write_report(path: &Path, params: &[(&str, String)], header: &str, rows: &[String]) -> Result<()> {
    std::fs::write(path, render_csv(params, header, rows))?;
    Ok(())
}
