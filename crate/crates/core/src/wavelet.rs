//! Legendre multiwavelet filter banks and the two-scale recursion.
//!
//! Coefficient tensors are laid out `T×k×D`: time blocks, polynomial basis
//! index, feature channel. One decomposition step maps `2T` fine blocks to
//! `T` coarse and `T` detail blocks:
//!
//! ```text
//! s_l = H0·x_{2l} + H1·x_{2l+1}        x_{2l}   = H0ᵀ·s_l + G0ᵀ·d_l
//! d_l = G0·x_{2l} + G1·x_{2l+1}        x_{2l+1} = H1ᵀ·s_l + G1ᵀ·d_l
//! ```

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const MAX_DEGREE: usize = 8;

/// The four `k×k` two-scale filters, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    k: usize,
    pub h0: Vec<f64>,
    pub h1: Vec<f64>,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
}

impl FilterBank {
    pub fn k(&self) -> usize {
        self.k
    }

    /// The stacked `2k×2k` matrix `[[H0, H1], [G0, G1]]`, row-major.
    pub fn stacked(&self) -> Vec<f64> {
        let k = self.k;
        let n = 2 * k;
        let mut m = vec![0.0; n * n];
        for i in 0..k {
            for j in 0..k {
                m[i * n + j] = self.h0[i * k + j];
                m[i * n + k + j] = self.h1[i * k + j];
                m[(k + i) * n + j] = self.g0[i * k + j];
                m[(k + i) * n + k + j] = self.g1[i * k + j];
            }
        }
        m
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]` (weights sum to 1).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        // Chebyshev initial guess, Newton refinement on P_n
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes.push((x + 1.0) / 2.0);
        weights.push(w / 2.0);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for m in 2..=n {
        let p2 = ((2 * m - 1) as f64 * x * p1 - (m - 1) as f64 * p0) / m as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Orthonormal shifted Legendre basis `φ_i(x) = √(2i+1)·P_i(2x−1)` on `[0,1]`.
pub fn shifted_legendre(i: usize, x: f64) -> f64 {
    let t = 2.0 * x - 1.0;
    let p = if i == 0 { 1.0 } else { legendre_with_derivative(i, t).0 };
    ((2 * i + 1) as f64).sqrt() * p
}

/// Multiwavelet filter bank for polynomial degree `k`.
///
/// Scaling filters come from k-point Gauss–Legendre quadrature of
/// `H0_ij = (1/√2)∫₀¹ φ_i(x/2) φ_j(x) dx` (and the right-half analogue for H1).
/// Wavelet filters come from Gram–Schmidt in the fine-scale coefficient space,
/// starting from the left-half scaling functions.
pub fn legendre_filters(k: usize) -> Result<FilterBank> {
    if !(1..=MAX_DEGREE).contains(&k) {
        return Err(Error::UnsupportedDegree(k));
    }
    let (nodes, weights) = gauss_legendre(k);
    let s2 = std::f64::consts::SQRT_2;
    let mut h0 = vec![0.0; k * k];
    let mut h1 = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (mut a, mut b) = (0.0, 0.0);
            for (&x, &w) in nodes.iter().zip(&weights) {
                let pj = shifted_legendre(j, x);
                a += w * shifted_legendre(i, x / 2.0) * pj;
                b += w * shifted_legendre(i, (x + 1.0) / 2.0) * pj;
            }
            h0[i * k + j] = a / s2;
            h1[i * k + j] = b / s2;
        }
    }
    let n = 2 * k;
    let scaling: Vec<Vec<f64>> = (0..k)
        .map(|i| [&h0[i * k..(i + 1) * k], &h1[i * k..(i + 1) * k]].concat())
        .collect();
    let mut wavelets: Vec<Vec<f64>> = Vec::with_capacity(k);
    for start in 0..k {
        let mut v = vec![0.0; n];
        v[start] = 1.0;
        for basis in scaling.iter().chain(wavelets.iter()) {
            let p: f64 = v.iter().zip(basis).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(basis).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        wavelets.push(v);
    }
    let mut g0 = vec![0.0; k * k];
    let mut g1 = vec![0.0; k * k];
    for (i, w) in wavelets.iter().enumerate() {
        g0[i * k..(i + 1) * k].copy_from_slice(&w[..k]);
        g1[i * k..(i + 1) * k].copy_from_slice(&w[k..]);
    }
    Ok(FilterBank { k, h0, h1, g0, g1 })
}

fn block_dims(x: &Tensor, k: usize, op: &'static str) -> Result<(usize, usize)> {
    match x.shape()[..] {
        [t, kk, d] if kk == k => Ok((t, d)),
        _ => shape_err(op, format!("expected T×{k}×D, got {:?}", x.shape())),
    }
}

/// `out_block += F · in_block` for `k×D` blocks.
fn apply_filter(f: &[f64], input: &[f64], out: &mut [f64], k: usize, d: usize) {
    for i in 0..k {
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..k {
            let c = f[i * k + j];
            if c == 0.0 {
                continue;
            }
            for (o, &v) in orow.iter_mut().zip(&input[j * d..(j + 1) * d]) {
                *o += c * v;
            }
        }
    }
}

/// `out_block += Fᵀ · in_block`.
fn apply_filter_t(f: &[f64], input: &[f64], out: &mut [f64], k: usize, d: usize) {
    for i in 0..k {
        let irow = &input[i * d..(i + 1) * d];
        for j in 0..k {
            let c = f[i * k + j];
            if c == 0.0 {
                continue;
            }
            for (o, &v) in out[j * d..(j + 1) * d].iter_mut().zip(irow) {
                *o += c * v;
            }
        }
    }
}

/// One decomposition step: `2T×k×D` → (coarse, detail), each `T×k×D`.
pub fn mw_decompose(fine: &Tensor, bank: &FilterBank) -> Result<(Tensor, Tensor)> {
    let k = bank.k;
    let (t2, d) = block_dims(fine, k, "mw_decompose")?;
    if t2 % 2 != 0 {
        return shape_err("mw_decompose", format!("odd time extent {t2}"));
    }
    let t = t2 / 2;
    let blk = k * d;
    let mut s = vec![0.0; t * blk];
    let mut dd = vec![0.0; t * blk];
    let x = fine.data();
    for l in 0..t {
        let even = &x[2 * l * blk..(2 * l + 1) * blk];
        let odd = &x[(2 * l + 1) * blk..(2 * l + 2) * blk];
        let so = &mut s[l * blk..(l + 1) * blk];
        apply_filter(&bank.h0, even, so, k, d);
        apply_filter(&bank.h1, odd, so, k, d);
        let dout = &mut dd[l * blk..(l + 1) * blk];
        apply_filter(&bank.g0, even, dout, k, d);
        apply_filter(&bank.g1, odd, dout, k, d);
    }
    Ok((Tensor::new(&[t, k, d], s)?, Tensor::new(&[t, k, d], dd)?))
}

/// Inverse of [`mw_decompose`] (transpose reconstruction).
pub fn mw_reconstruct(coarse: &Tensor, detail: &Tensor, bank: &FilterBank) -> Result<Tensor> {
    let k = bank.k;
    let (t, d) = block_dims(coarse, k, "mw_reconstruct")?;
    if coarse.shape() != detail.shape() {
        return shape_err(
            "mw_reconstruct",
            format!("coarse {:?} vs detail {:?}", coarse.shape(), detail.shape()),
        );
    }
    let blk = k * d;
    let mut out = vec![0.0; 2 * t * blk];
    let (s, dd) = (coarse.data(), detail.data());
    for l in 0..t {
        let sl = &s[l * blk..(l + 1) * blk];
        let dl = &dd[l * blk..(l + 1) * blk];
        let (even, odd) = out[2 * l * blk..(2 * l + 2) * blk].split_at_mut(blk);
        apply_filter_t(&bank.h0, sl, even, k, d);
        apply_filter_t(&bank.g0, dl, even, k, d);
        apply_filter_t(&bank.h1, sl, odd, k, d);
        apply_filter_t(&bank.g1, dl, odd, k, d);
    }
    Tensor::new(&[2 * t, k, d], out)
}

/// Records how an `L×D` series was packed into `T×k×D` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Packing {
    pub len: usize,
    pub pad: usize,
    pub k: usize,
}

impl Packing {
    /// Packing for `len` steps so that the block count is a multiple of `2^depth`.
    pub fn new(len: usize, k: usize, depth: usize) -> Self {
        let unit = k << depth;
        let padded = len.div_ceil(unit) * unit;
        Self {
            len,
            pad: padded - len,
            k,
        }
    }

    pub fn blocks(&self) -> usize {
        (self.len + self.pad) / self.k
    }
}

/// Largest usable depth for a length-`len` series packed with degree `k`.
pub fn max_depth(len: usize, k: usize) -> usize {
    let blocks = len.div_ceil(k).max(1);
    (usize::BITS - 1 - blocks.leading_zeros()) as usize
}

/// Zero-pads `L×D` on the right and views it as `(L+pad)/k × k × D`.
pub fn time_to_multiwavelet(x: &Tensor, packing: &Packing) -> Result<Tensor> {
    let [len, d] = x.dims2("time_to_multiwavelet")?;
    if len != packing.len {
        return shape_err("time_to_multiwavelet", format!("length {len} vs packing {}", packing.len));
    }
    let mut data = x.data().to_vec();
    data.resize((len + packing.pad) * d, 0.0);
    Tensor::new(&[packing.blocks(), packing.k, d], data)
}

/// Inverse of [`time_to_multiwavelet`]: drops the padding rows.
pub fn multiwavelet_to_time(x: &Tensor, packing: &Packing) -> Result<Tensor> {
    let (t, d) = block_dims(x, packing.k, "multiwavelet_to_time")?;
    if t != packing.blocks() {
        return shape_err("multiwavelet_to_time", format!("{t} blocks vs packing {}", packing.blocks()));
    }
    Tensor::new(&[packing.len, d], x.data()[..packing.len * d].to_vec())
}

/// Coefficients of a full `depth`-level decomposition.
#[derive(Clone, Debug)]
pub struct MultiwaveletState {
    /// Coarse coefficients per scale: the packed input first, coarsest last.
    pub coarse: Vec<Tensor>,
    /// Detail coefficients of each level, finest first.
    pub details: Vec<Tensor>,
    pub depth: usize,
    pub packing: Packing,
}

pub fn decompose_series(x: &Tensor, bank: &FilterBank, depth: usize) -> Result<MultiwaveletState> {
    let [len, _] = x.dims2("decompose_series")?;
    if depth > max_depth(len, bank.k) {
        return Err(Error::DepthTooLarge { depth, len });
    }
    let packing = Packing::new(len, bank.k, depth);
    let mut coarse = vec![time_to_multiwavelet(x, &packing)?];
    let mut details = Vec::with_capacity(depth);
    for _ in 0..depth {
        let (s, d) = mw_decompose(coarse.last().expect("non-empty"), bank)?;
        details.push(d);
        coarse.push(s);
    }
    Ok(MultiwaveletState {
        coarse,
        details,
        depth,
        packing,
    })
}

/// Rebuilds the series from the coarsest level and every detail level.
pub fn reconstruct_series(state: &MultiwaveletState, bank: &FilterBank) -> Result<Tensor> {
    let mut cur = match state.coarse.last() {
        Some(c) => c.clone(),
        None => return Err(Error::InvalidArgument("empty decomposition".into())),
    };
    for d in state.details.iter().rev() {
        cur = mw_reconstruct(&cur, d, bank)?;
    }
    multiwavelet_to_time(&cur, &state.packing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const R2: f64 = std::f64::consts::SQRT_2;

    fn assert_mat(got: &[f64], want: &[f64], tol: f64) {
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < tol, "got {got:?}\nwant {want:?}");
        }
    }

    #[test]
    fn haar_bank() {
        let b = legendre_filters(1).unwrap();
        assert_mat(&b.h0, &[1.0 / R2], 1e-14);
        assert_mat(&b.h1, &[1.0 / R2], 1e-14);
        assert_mat(&b.g0, &[1.0 / R2], 1e-14);
        assert_mat(&b.g1, &[-1.0 / R2], 1e-14);
    }

    #[test]
    fn degree_three_printed_matrices() {
        let b = legendre_filters(3).unwrap();
        let (s3, s15) = (3f64.sqrt(), 15f64.sqrt());
        let q = 2.0 * R2;
        let e = 4.0 * R2;
        assert_mat(&b.h0, &[1.0 / R2, 0.0, 0.0, -s3 / q, 1.0 / q, 0.0, 0.0, -s15 / e, 1.0 / e], 1e-12);
        assert_mat(&b.h1, &[1.0 / R2, 0.0, 0.0, s3 / q, 1.0 / q, 0.0, 0.0, s15 / e, 1.0 / e], 1e-12);
        assert_mat(&b.g0, &[1.0 / q, s3 / q, 0.0, 0.0, 1.0 / e, s15 / e, 0.0, 0.0, 1.0 / R2], 1e-12);
        assert_mat(&b.g1, &[-1.0 / q, s3 / q, 0.0, 0.0, -1.0 / e, s15 / e, 0.0, 0.0, -1.0 / R2], 1e-12);
    }

    #[test]
    fn degree_bounds() {
        assert!(matches!(legendre_filters(0), Err(Error::UnsupportedDegree(0))));
        assert!(legendre_filters(9).is_err());
    }

    #[test]
    fn quadrature_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        // exact up to degree 9
        let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(9)).sum();
        assert!((approx - 0.1).abs() < 1e-14);
    }

    #[test]
    fn haar_step_by_hand() {
        let b = legendre_filters(1).unwrap();
        let x = Tensor::new(&[2, 1, 1], vec![3.0, 1.0]).unwrap();
        let (s, d) = mw_decompose(&x, &b).unwrap();
        assert!((s.item() - 4.0 / R2).abs() < 1e-14);
        assert!((d.item() - 2.0 / R2).abs() < 1e-14);
        let spread = mw_reconstruct(&s, &Tensor::zeros(&[1, 1, 1]), &b).unwrap();
        assert_mat(spread.data(), &[2.0, 2.0], 1e-14);
        let zero = mw_reconstruct(&Tensor::zeros(&[3, 1, 2]), &Tensor::zeros(&[3, 1, 2]), &b).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_extent_and_mismatch_rejected() {
        let b = legendre_filters(2).unwrap();
        assert!(mw_decompose(&Tensor::zeros(&[3, 2, 1]), &b).is_err());
        assert!(mw_reconstruct(&Tensor::zeros(&[2, 2, 1]), &Tensor::zeros(&[3, 2, 1]), &b).is_err());
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 1..=MAX_DEGREE {
            let b = legendre_filters(k).unwrap();
            let x = Tensor::randn(&[16, k, 2], 1.0, &mut rng);
            let (s, d) = mw_decompose(&x, &b).unwrap();
            let y = mw_reconstruct(&s, &d, &b).unwrap();
            assert!(x.max_abs_diff(&y) < 1e-10, "k={k}");
        }
    }

    #[test]
    fn packing_round_trip() {
        let x = Tensor::new(&[10, 1], (0..10).map(f64::from).collect()).unwrap();
        let p = Packing::new(10, 3, 0);
        assert_eq!((p.pad, p.blocks()), (2, 4));
        let packed = time_to_multiwavelet(&x, &p).unwrap();
        assert_eq!(packed.shape(), &[4, 3, 1]);
        assert_eq!(packed.sum_squares(), x.sum_squares());
        assert_eq!(multiwavelet_to_time(&packed, &p).unwrap(), x);
        let p1 = Packing::new(10, 1, 0);
        assert_eq!(time_to_multiwavelet(&x, &p1).unwrap().data(), x.data());
    }

    #[test]
    fn multi_level_round_trip_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = legendre_filters(3).unwrap();
        let x = Tensor::randn(&[29, 2], 1.0, &mut rng);
        let st = decompose_series(&x, &b, 3).unwrap();
        assert_eq!(st.packing.blocks(), 16);
        assert_eq!(st.coarse.last().unwrap().shape(), &[2, 3, 2]);
        assert!(reconstruct_series(&st, &b).unwrap().max_abs_diff(&x) < 1e-10);
        assert!(matches!(decompose_series(&x, &b, 4), Err(Error::DepthTooLarge { .. })));
    }
}
