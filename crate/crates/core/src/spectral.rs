//! Real-input discrete Fourier transforms and frequency-mode selection.
//!
//! Spectra of real series are kept in half-spectrum form: bins `0..=L/2`.
//! The forward transform uses `X_l = Σ_n x_n e^{-2πi ln/L}` (unnormalized) and
//! the inverse carries the `1/L` factor.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Dense complex tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl ComplexTensor {
    pub fn new(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return shape_err(
                "ComplexTensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Element `(row, col)` of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn real(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|c| c.re).collect()).expect("same shape")
    }

    pub fn imag(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|c| c.im).collect()).expect("same shape")
    }
}

/// In-place unnormalized DFT. `inverse` flips the exponent sign.
/// Power-of-two lengths use iterative radix-2; other lengths fall back to
/// the direct O(n²) sum.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    if !n.is_power_of_two() {
        let src = buf.to_vec();
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &v) in src.iter().enumerate() {
                let theta = sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64;
                acc += v * Complex64::from_polar(1.0, theta);
            }
            *out = acc;
        }
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = Complex64::from_polar(1.0, step * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Number of half-spectrum bins for a length-`len` real series.
pub fn half_len(len: usize) -> usize {
    len / 2 + 1
}

/// Half-spectrum of one real column.
pub fn rfft_column(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf.truncate(half_len(x.len()));
    buf
}

/// Inverse of [`rfft_column`]. The full spectrum is rebuilt with conjugate
/// symmetry; imaginary parts of the DC and Nyquist bins are ignored.
pub fn irfft_column(spec: &[Complex64], len: usize) -> Vec<f64> {
    debug_assert_eq!(spec.len(), half_len(len));
    let mut full = vec![Complex64::new(0.0, 0.0); len];
    full[0] = Complex64::new(spec[0].re, 0.0);
    for l in 1..spec.len() {
        if 2 * l == len {
            full[l] = Complex64::new(spec[l].re, 0.0);
        } else {
            full[l] = spec[l];
            full[len - l] = spec[l].conj();
        }
    }
    fft_in_place(&mut full, true);
    full.iter().map(|c| c.re / len as f64).collect()
}

/// Column-wise half-spectrum of an `L×D` series: `(L/2+1)×D`.
pub fn rfft(x: &Tensor) -> Result<ComplexTensor> {
    let [len, dim] = x.dims2("rfft")?;
    let h = half_len(len);
    let mut out = ComplexTensor::zeros(&[h, dim]);
    let mut col = vec![0.0; len];
    for d in 0..dim {
        for (t, c) in col.iter_mut().enumerate() {
            *c = x.data()[t * dim + d];
        }
        for (l, v) in rfft_column(&col).into_iter().enumerate() {
            out.data[l * dim + d] = v;
        }
    }
    Ok(out)
}

/// Column-wise inverse of [`rfft`] back to `len` time steps.
pub fn irfft(spec: &ComplexTensor, len: usize) -> Result<Tensor> {
    let (rows, dim) = match spec.shape[..] {
        [r, c] => (r, c),
        _ => return shape_err("irfft", format!("expected rank 2, got {:?}", spec.shape)),
    };
    if len == 0 || rows != half_len(len) {
        return shape_err(
            "irfft",
            format!("{rows} spectrum rows do not match length {len} (need {})", half_len(len)),
        );
    }
    let mut out = vec![0.0; len * dim];
    let mut col = vec![Complex64::new(0.0, 0.0); rows];
    for d in 0..dim {
        for (l, c) in col.iter_mut().enumerate() {
            *c = spec.data[l * dim + d];
        }
        for (t, v) in irfft_column(&col, len).into_iter().enumerate() {
            out[t * dim + d] = v;
        }
    }
    Tensor::new(&[len, dim], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeKind {
    /// The lowest `M` bins.
    FixedLowest,
    /// `M` bins drawn uniformly without replacement.
    RandomUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModePolicy {
    pub kind: ModeKind,
    pub mode_count: usize,
    pub seed: u64,
    /// Force the DC bin into random draws.
    pub include_dc: bool,
}

impl ModePolicy {
    pub fn fixed(mode_count: usize) -> Self {
        Self {
            kind: ModeKind::FixedLowest,
            mode_count,
            seed: 0,
            include_dc: true,
        }
    }

    pub fn random(mode_count: usize, seed: u64) -> Self {
        Self {
            kind: ModeKind::RandomUniform,
            mode_count,
            seed,
            include_dc: true,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_mode_count(self, mode_count: usize) -> Self {
        Self { mode_count, ..self }
    }
}

/// Sorted bin indices kept by `policy` for a length-`len` series.
///
/// Random draws come from a ChaCha stream keyed by `(seed, len)`, so the
/// result depends only on the arguments.
pub fn select_modes(policy: &ModePolicy, len: usize) -> Vec<usize> {
    let available = half_len(len.max(1));
    let m = policy.mode_count.max(1);
    if m >= available {
        return (0..available).collect();
    }
    match policy.kind {
        ModeKind::FixedLowest => (0..m).collect(),
        ModeKind::RandomUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            rng.set_stream(len as u64);
            let mut modes: Vec<usize> = if policy.include_dc {
                let mut v: Vec<usize> = index::sample(&mut rng, available - 1, m - 1)
                    .into_iter()
                    .map(|i| i + 1)
                    .collect();
                v.push(0);
                v
            } else {
                index::sample(&mut rng, available, m).into_vec()
            };
            modes.sort_unstable();
            modes
        }
    }
}

/// Selected frequency coefficients of a length-`original_length` series.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    values: ComplexTensor,
    mode_indices: Vec<usize>,
    original_length: usize,
}

impl ComplexSpectrum {
    pub fn new(values: ComplexTensor, mode_indices: Vec<usize>, original_length: usize) -> Result<Self> {
        if values.shape.len() != 2 || values.shape[0] != mode_indices.len() {
            return shape_err(
                "ComplexSpectrum::new",
                format!("{} modes for values of shape {:?}", mode_indices.len(), values.shape),
            );
        }
        let h = half_len(original_length);
        if mode_indices.windows(2).any(|w| w[0] >= w[1]) || mode_indices.iter().any(|&i| i >= h) {
            return shape_err(
                "ComplexSpectrum::new",
                format!("mode indices {mode_indices:?} not strictly increasing within 0..{h}"),
            );
        }
        Ok(Self {
            values,
            mode_indices,
            original_length,
        })
    }

    /// Keeps rows `modes` of a full half-spectrum.
    pub fn select(full: &ComplexTensor, modes: &[usize], original_length: usize) -> Result<Self> {
        let [rows, dim] = match full.shape[..] {
            [r, c] => [r, c],
            _ => return shape_err("ComplexSpectrum::select", "expected rank 2"),
        };
        if rows != half_len(original_length) {
            return shape_err("ComplexSpectrum::select", "spectrum rows do not match length");
        }
        let mut data = Vec::with_capacity(modes.len() * dim);
        for &m in modes {
            if m >= rows {
                return shape_err("ComplexSpectrum::select", format!("mode {m} out of range"));
            }
            data.extend_from_slice(&full.data[m * dim..(m + 1) * dim]);
        }
        Self::new(ComplexTensor::new(&[modes.len(), dim], data)?, modes.to_vec(), original_length)
    }

    pub fn values(&self) -> &ComplexTensor {
        &self.values
    }

    pub fn mode_indices(&self) -> &[usize] {
        &self.mode_indices
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }
}

/// Embeds the selected rows into a zero half-spectrum.
pub fn scatter_pad(spec: &ComplexSpectrum) -> ComplexTensor {
    let dim = spec.values.shape[1];
    let mut out = ComplexTensor::zeros(&[half_len(spec.original_length), dim]);
    for (row, &m) in spec.mode_indices.iter().enumerate() {
        out.data[m * dim..(m + 1) * dim].copy_from_slice(&spec.values.data[row * dim..(row + 1) * dim]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..half_len(n))
            .map(|l| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * (l * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn constant_and_impulse() {
        let c = rfft_column(&[2.5; 8]);
        assert!((c[0] - Complex64::new(20.0, 0.0)).norm() < 1e-12);
        assert!(c[1..].iter().all(|v| v.norm() < 1e-12));
        let mut imp = [0.0; 8];
        imp[0] = 1.0;
        assert!(rfft_column(&imp).iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn matches_naive_dft_including_odd_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [1, 2, 3, 5, 12, 16, 17, 64] {
            let x = Tensor::randn(&[len, 1], 1.0, &mut rng);
            let fast = rfft_column(x.data());
            for (a, b) in fast.iter().zip(naive_dft(x.data())) {
                assert!((a - b).norm() < 1e-10, "len {len}");
            }
        }
    }

    #[test]
    fn single_bin_is_cosine() {
        let len = 16;
        let mut spec = vec![Complex64::new(0.0, 0.0); half_len(len)];
        spec[2] = Complex64::new(len as f64 / 2.0, 0.0);
        let x = irfft_column(&spec, len);
        for (n, v) in x.iter().enumerate() {
            assert!((v - (2.0 * PI * 2.0 * n as f64 / 16.0).cos()).abs() < 1e-10);
        }
        let mut dc = vec![Complex64::new(0.0, 0.0); half_len(len)];
        dc[0] = Complex64::new(3.0 * len as f64, 0.0);
        assert!(irfft_column(&dc, len).iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn irfft_rejects_wrong_rows() {
        let spec = ComplexTensor::zeros(&[5, 2]);
        assert!(irfft(&spec, 8).is_ok());
        assert!(irfft(&spec, 12).is_err());
    }

    #[test]
    fn fixed_and_saturated_selection() {
        assert_eq!(select_modes(&ModePolicy::fixed(4), 16), vec![0, 1, 2, 3]);
        assert_eq!(select_modes(&ModePolicy::fixed(9), 16), (0..9).collect::<Vec<_>>());
        assert_eq!(select_modes(&ModePolicy::random(9, 5), 16), (0..9).collect::<Vec<_>>());
        assert_eq!(select_modes(&ModePolicy::random(100, 5), 16), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn random_selection_is_seeded_and_covers_all_bins() {
        let p = ModePolicy::random(4, 42);
        assert_eq!(select_modes(&p, 64), select_modes(&p, 64));
        let mut seen = [false; 33];
        for seed in 0..1000 {
            let modes = select_modes(&p.with_seed(seed), 64);
            assert_eq!(modes.len(), 4);
            assert_eq!(modes[0], 0);
            assert!(modes.windows(2).all(|w| w[0] < w[1]));
            for m in modes {
                seen[m] = true;
            }
        }
        assert!(seen[1..].iter().all(|&s| s));
    }

    #[test]
    fn random_without_dc_can_skip_zero() {
        let p = ModePolicy {
            include_dc: false,
            ..ModePolicy::random(3, 0)
        };
        let skipped = (0..200).any(|s| select_modes(&p.with_seed(s), 64)[0] != 0);
        assert!(skipped);
    }

    #[test]
    fn scatter_pad_places_rows() {
        let (a, b) = (Complex64::new(1.0, 2.0), Complex64::new(-3.0, 0.5));
        let values = ComplexTensor::new(&[2, 1], vec![a, b]).unwrap();
        let spec = ComplexSpectrum::new(values, vec![0, 3], 8).unwrap();
        let z = Complex64::new(0.0, 0.0);
        assert_eq!(scatter_pad(&spec).data(), &[a, z, z, b, z]);
        assert!(ComplexSpectrum::new(ComplexTensor::zeros(&[2, 1]), vec![3, 0], 8).is_err());
        assert!(ComplexSpectrum::new(ComplexTensor::zeros(&[2, 1]), vec![0, 5], 8).is_err());
    }
}
