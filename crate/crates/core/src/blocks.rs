//! Frequency-enhanced blocks, mixture-of-experts decomposition, feed-forward
//! and embedding layers.
//!
//! Each block registers its parameters in a [`ParamStore`] at construction and
//! records its forward pass on a [`Graph`]. Complex spectra travel through the
//! graph as `2×M×D` real tensors (real parts first).

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::contract::Contraction;
use crate::error::{shape_err, Error, Result};
use crate::spectral::{half_len, select_modes, ModePolicy};
use crate::tensor::Tensor;
use crate::wavelet::{legendre_filters, max_depth, FilterBank, Packing};

fn init_param<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Result<ParamId> {
    store.add(name, Tensor::randn(shape, std, rng))
}

/// Rows of `x` as a `rows×width` matrix view.
fn rows_of(g: &mut Graph, x: Var, width: usize) -> Result<Var> {
    let n = g.value(x).numel();
    g.reshape(x, &[n / width, width])
}

/// A sequence-to-sequence map `L×W → L×W`.
pub trait SeqMap {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var>;
}

/// A cross map from queries `Lq×W` and keys/values `Lkv×W` to `Lq×W`.
pub trait CrossMap {
    fn apply(&self, g: &mut Graph, store: &ParamStore, q: Var, kv: Var) -> Result<Var>;
}

/// Passes its input through unchanged.
pub struct Identity;

impl SeqMap for Identity {
    fn apply(&self, _: &mut Graph, _: &ParamStore, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Maps everything to zero.
pub struct Zero;

impl SeqMap for Zero {
    fn apply(&self, g: &mut Graph, _: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        Ok(g.constant(Tensor::zeros(&shape)))
    }
}

/// Bias-free linear map `x·W`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = init_param(store, format!("{name}.weight"), &[fan_in, fan_out], std, rng)?;
        Ok(Self { weight, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        g.matmul(x, w)
    }
}

impl SeqMap for Linear {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward(g, store, x)
    }
}

/// Fourier enhanced block: project, keep `M` modes, mix each mode with its
/// own complex `D×D` kernel, zero-pad and invert.
#[derive(Clone, Debug)]
pub struct FebF {
    pub w: ParamId,
    pub r_re: ParamId,
    pub r_im: ParamId,
    pub policy: ModePolicy,
    pub dim: usize,
}

impl FebF {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        policy: ModePolicy,
        rng: &mut R,
    ) -> Result<Self> {
        if policy.mode_count == 0 {
            return Err(Error::InvalidArgument("mode_count must be at least 1".into()));
        }
        let m = policy.mode_count;
        let w = init_param(store, format!("{name}.w"), &[dim, dim], 1.0 / (dim as f64).sqrt(), rng)?;
        // complex Gaussian with E|r|² = 1/D²
        let part = 1.0 / (dim as f64 * std::f64::consts::SQRT_2);
        let r_re = init_param(store, format!("{name}.R.re"), &[m, dim, dim], part, rng)?;
        let r_im = init_param(store, format!("{name}.R.im"), &[m, dim, dim], part, rng)?;
        Ok(Self { w, r_re, r_im, policy, dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let len = g.shape(x)[0];
        let w = g.param(store, self.w);
        let q = g.matmul(x, w)?;
        let modes = select_modes(&self.policy, len);
        let spec = g.rfft_modes(q, &modes)?;
        let y = self.mix(g, store, spec, modes.len())?;
        g.irfft_modes(y, &modes, len)
    }

    /// `Y_m = Q_m · R_m` for every kept mode, on `2×M'×D` spectra.
    fn mix(&self, g: &mut Graph, store: &ParamStore, spec: Var, used: usize) -> Result<Var> {
        let mix = Contraction::parse("md,mde->me")?;
        let qr = g.index_first(spec, 0)?;
        let qi = g.index_first(spec, 1)?;
        let rr = g.param(store, self.r_re);
        let ri = g.param(store, self.r_im);
        let (rr, ri) = if used < self.policy.mode_count {
            (g.slice_first(rr, 0, used)?, g.slice_first(ri, 0, used)?)
        } else {
            (rr, ri)
        };
        let a = g.contract(qr, rr, &mix)?;
        let b = g.contract(qi, ri, &mix)?;
        let c = g.contract(qr, ri, &mix)?;
        let d = g.contract(qi, rr, &mix)?;
        let yr = g.sub(a, b)?;
        let yi = g.add(c, d)?;
        g.stack(&[yr, yi])
    }
}

impl SeqMap for FebF {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward(g, store, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softmax,
    Tanh,
}

/// Fourier enhanced attention between decoder queries and encoder
/// keys/values, scored on the real part of `Q̃K̃ᴴ`.
#[derive(Clone, Debug)]
pub struct FeaF {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub policy: ModePolicy,
    pub activation: Activation,
    pub dim: usize,
}

impl FeaF {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        policy: ModePolicy,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if policy.mode_count == 0 {
            return Err(Error::InvalidArgument("mode_count must be at least 1".into()));
        }
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            w_q: init_param(store, format!("{name}.w_q"), &[dim, dim], std, rng)?,
            w_k: init_param(store, format!("{name}.w_k"), &[dim, dim], std, rng)?,
            w_v: init_param(store, format!("{name}.w_v"), &[dim, dim], std, rng)?,
            policy,
            activation,
            dim,
        })
    }

    /// Modes used for query and key/value lengths: both sides keep
    /// `min(M, Lq/2+1, Lkv/2+1)` bins.
    pub fn modes(&self, lq: usize, lkv: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let m = self.policy.mode_count.min(half_len(lq)).min(half_len(lkv));
        let p = self.policy.with_mode_count(m);
        let (mq, mkv) = (select_modes(&p, lq), select_modes(&p, lkv));
        if mq.len() != mkv.len() {
            return shape_err("fea_f", format!("{} query modes vs {} key modes", mq.len(), mkv.len()));
        }
        Ok((mq, mkv))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_de: Var, x_en: Var) -> Result<Var> {
        let (lq, lkv) = (g.shape(x_de)[0], g.shape(x_en)[0]);
        let (mq, mkv) = self.modes(lq, lkv)?;
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        let q = g.matmul(x_de, wq)?;
        let k = g.matmul(x_en, wk)?;
        let v = g.matmul(x_en, wv)?;
        let qs = g.rfft_modes(q, &mq)?;
        let ks = g.rfft_modes(k, &mkv)?;
        let vs = g.rfft_modes(v, &mkv)?;
        let (qr, qi) = (g.index_first(qs, 0)?, g.index_first(qs, 1)?);
        let (kr, ki) = (g.index_first(ks, 0)?, g.index_first(ks, 1)?);
        let (vr, vi) = (g.index_first(vs, 0)?, g.index_first(vs, 1)?);
        let s1 = g.matmul_bt(qr, kr)?;
        let s2 = g.matmul_bt(qi, ki)?;
        let s = g.add(s1, s2)?;
        // spectra grow like √L per unit-variance channel
        let scale = 1.0 / ((self.dim as f64).sqrt() * ((lq * lkv) as f64).sqrt());
        let s = g.scale(s, scale);
        let a = match self.activation {
            Activation::Softmax => g.softmax(s, 1)?,
            Activation::Tanh => g.tanh(s),
        };
        let yr = g.matmul(a, vr)?;
        let yi = g.matmul(a, vi)?;
        let y = g.stack(&[yr, yi])?;
        g.irfft_modes(y, &mq, lq)
    }
}

impl CrossMap for FeaF {
    fn apply(&self, g: &mut Graph, store: &ParamStore, q: Var, kv: Var) -> Result<Var> {
        self.forward(g, store, q, kv)
    }
}

/// Multiwavelet enhanced block. Detail and coarse coefficients of every
/// scale pass through shared FEB-f maps `A`, `B`, `C` of width `k·D`; the
/// coarsest coefficients go through the linear map `F̄`.
#[derive(Clone, Debug)]
pub struct FebW {
    pub a: FebF,
    pub b: FebF,
    pub c: FebF,
    pub f_bar: Linear,
    pub bank: FilterBank,
    pub depth: usize,
    pub dim: usize,
}

/// Inner maps of a [`FebW`] ladder.
pub struct LadderMaps<'a> {
    pub a: &'a dyn SeqMap,
    pub b: &'a dyn SeqMap,
    pub c: &'a dyn SeqMap,
    pub f_bar: &'a dyn SeqMap,
}

impl FebW {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        k: usize,
        depth: usize,
        policy: ModePolicy,
        rng: &mut R,
    ) -> Result<Self> {
        let bank = legendre_filters(k)?;
        let width = k * dim;
        Ok(Self {
            a: FebF::new(store, &format!("{name}.A"), width, policy, rng)?,
            b: FebF::new(store, &format!("{name}.B"), width, policy, rng)?,
            c: FebF::new(store, &format!("{name}.C"), width, policy, rng)?,
            f_bar: Linear::new(store, &format!("{name}.F_bar"), width, width, rng)?,
            bank,
            depth,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let maps = LadderMaps {
            a: &self.a,
            b: &self.b,
            c: &self.c,
            f_bar: &self.f_bar,
        };
        self.forward_with(g, store, x, &maps)
    }

    /// Runs the decomposition ladder with caller-supplied inner maps.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, x: Var, maps: &LadderMaps) -> Result<Var> {
        let k = self.bank.k();
        let len = g.shape(x)[0];
        check_depth(self.depth, len, k)?;
        let packing = Packing::new(len, k, self.depth);
        let mut cur = pack(g, x, &packing, self.dim)?;
        let mut us = Vec::with_capacity(self.depth);
        let mut ud = Vec::with_capacity(self.depth);
        for _ in 0..self.depth {
            let (s, d) = split(g, cur, &self.bank)?;
            let width = k * self.dim;
            let (s2, d2) = (rows_of(g, s, width)?, rows_of(g, d, width)?);
            let ad = maps.a.apply(g, store, d2)?;
            let bs = maps.b.apply(g, store, s2)?;
            let ud_n = g.add(ad, bs)?;
            let us_n = maps.c.apply(g, store, d2)?;
            let shape = g.shape(s).to_vec();
            ud.push(g.reshape(ud_n, &shape)?);
            us.push(g.reshape(us_n, &shape)?);
            cur = s;
        }
        let shape = g.shape(cur).to_vec();
        let flat = rows_of(g, cur, k * self.dim)?;
        let top = maps.f_bar.apply(g, store, flat)?;
        cur = g.reshape(top, &shape)?;
        for n in (0..self.depth).rev() {
            let coarse = g.add(cur, us[n])?;
            cur = g.wavelet_merge(coarse, ud[n], &self.bank)?;
        }
        unpack(g, cur, &packing, self.dim)
    }
}

impl SeqMap for FebW {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward(g, store, x)
    }
}

/// Multiwavelet enhanced attention: FEA-f maps `A`, `B`, `C` on each scale
/// and a fourth one on the coarsest query/key coefficients.
#[derive(Clone, Debug)]
pub struct FeaW {
    pub a: FeaF,
    pub b: FeaF,
    pub c: FeaF,
    pub coarsest: FeaF,
    pub bank: FilterBank,
    pub depth: usize,
    pub dim: usize,
}

impl FeaW {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        k: usize,
        depth: usize,
        policy: ModePolicy,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let bank = legendre_filters(k)?;
        let width = k * dim;
        Ok(Self {
            a: FeaF::new(store, &format!("{name}.A"), width, policy, activation, rng)?,
            b: FeaF::new(store, &format!("{name}.B"), width, policy, activation, rng)?,
            c: FeaF::new(store, &format!("{name}.C"), width, policy, activation, rng)?,
            coarsest: FeaF::new(store, &format!("{name}.D"), width, policy, activation, rng)?,
            bank,
            depth,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_de: Var, x_en: Var) -> Result<Var> {
        let k = self.bank.k();
        let width = k * self.dim;
        let (lq, lkv) = (g.shape(x_de)[0], g.shape(x_en)[0]);
        check_depth(self.depth, lq, k)?;
        check_depth(self.depth, lkv, k)?;
        let pq = Packing::new(lq, k, self.depth);
        let pkv = Packing::new(lkv, k, self.depth);
        let mut q = pack(g, x_de, &pq, self.dim)?;
        let mut kv = pack(g, x_en, &pkv, self.dim)?;
        let mut us = Vec::with_capacity(self.depth);
        let mut ud = Vec::with_capacity(self.depth);
        for _ in 0..self.depth {
            let (sq, dq) = split(g, q, &self.bank)?;
            let (skv, dkv) = split(g, kv, &self.bank)?;
            let shape = g.shape(sq).to_vec();
            let (sq2, dq2) = (rows_of(g, sq, width)?, rows_of(g, dq, width)?);
            let (skv2, dkv2) = (rows_of(g, skv, width)?, rows_of(g, dkv, width)?);
            let ad = self.a.forward(g, store, dq2, dkv2)?;
            let bs = self.b.forward(g, store, sq2, skv2)?;
            let ud_n = g.add(ad, bs)?;
            let us_n = self.c.forward(g, store, dq2, dkv2)?;
            ud.push(g.reshape(ud_n, &shape)?);
            us.push(g.reshape(us_n, &shape)?);
            q = sq;
            kv = skv;
        }
        let shape = g.shape(q).to_vec();
        let (q2, kv2) = (rows_of(g, q, width)?, rows_of(g, kv, width)?);
        let top = self.coarsest.forward(g, store, q2, kv2)?;
        let mut cur = g.reshape(top, &shape)?;
        for n in (0..self.depth).rev() {
            let coarse = g.add(cur, us[n])?;
            cur = g.wavelet_merge(coarse, ud[n], &self.bank)?;
        }
        unpack(g, cur, &pq, self.dim)
    }
}

impl CrossMap for FeaW {
    fn apply(&self, g: &mut Graph, store: &ParamStore, q: Var, kv: Var) -> Result<Var> {
        self.forward(g, store, q, kv)
    }
}

fn check_depth(depth: usize, len: usize, k: usize) -> Result<()> {
    if depth > max_depth(len, k) {
        return Err(Error::DepthTooLarge { depth, len });
    }
    Ok(())
}

/// Zero-pads `x[L×D]` and views it as `blocks×k×D`.
fn pack(g: &mut Graph, x: Var, packing: &Packing, dim: usize) -> Result<Var> {
    let x = if packing.pad > 0 {
        let z = g.constant(Tensor::zeros(&[packing.pad, dim]));
        g.concat_first(&[x, z])?
    } else {
        x
    };
    g.reshape(x, &[packing.blocks(), packing.k, dim])
}

fn unpack(g: &mut Graph, x: Var, packing: &Packing, dim: usize) -> Result<Var> {
    let flat = g.reshape(x, &[packing.len + packing.pad, dim])?;
    if packing.pad > 0 {
        g.slice_first(flat, 0, packing.len)
    } else {
        Ok(flat)
    }
}

fn split(g: &mut Graph, x: Var, bank: &FilterBank) -> Result<(Var, Var)> {
    let both = g.wavelet_split(x, bank)?;
    Ok((g.index_first(both, 0)?, g.index_first(both, 1)?))
}

/// Seasonal-trend decomposition by a data-dependent convex mixture of
/// moving averages.
#[derive(Clone, Debug)]
pub struct MoeDecomp {
    pub kernels: Vec<usize>,
    pub gate: ParamId,
}

impl MoeDecomp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kernels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if kernels.is_empty() || kernels.contains(&0) {
            return Err(Error::InvalidArgument(format!("kernel sizes {kernels:?} must be non-empty and positive")));
        }
        let gate = init_param(
            store,
            format!("{name}.gate"),
            &[dim, kernels.len()],
            1.0 / (dim as f64).sqrt(),
            rng,
        )?;
        Ok(Self { kernels: kernels.to_vec(), gate })
    }

    /// Per-time-step expert weights `L×E`.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gate = g.param(store, self.gate);
        let logits = g.matmul(x, gate)?;
        g.softmax(logits, 1)
    }

    /// Returns `(seasonal, trend)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let w = self.weights(g, store, x)?;
        let mut parts = Vec::with_capacity(self.kernels.len());
        for (e, &k) in self.kernels.iter().enumerate() {
            let pooled = g.avg_pool_1d(x, k)?;
            let we = g.column(w, e)?;
            parts.push(g.scale_rows(pooled, we)?);
        }
        let trend = g.sum_n(&parts)?;
        let seasonal = g.sub(x, trend)?;
        Ok((seasonal, trend))
    }
}

/// MOE decomposition with uniform expert weights on a plain tensor.
pub fn uniform_moe_decomp(x: &Tensor, kernels: &[usize]) -> Result<(Tensor, Tensor)> {
    if kernels.is_empty() || kernels.contains(&0) {
        return Err(Error::InvalidArgument(format!("kernel sizes {kernels:?} must be non-empty and positive")));
    }
    let [l, d] = x.dims2("uniform_moe_decomp")?;
    let mut trend = vec![0.0; l * d];
    for &k in kernels {
        let pooled = crate::autograd::moving_average(x.data(), l, d, k);
        for (t, p) in trend.iter_mut().zip(pooled) {
            *t += p;
        }
    }
    let inv = 1.0 / kernels.len() as f64;
    trend.iter_mut().for_each(|t| *t *= inv);
    let trend = Tensor::new(&[l, d], trend)?;
    let seasonal = x.zip_map(&trend, |a, b| a - b)?;
    Ok((seasonal, trend))
}

/// Position-wise `D → 4D → D` with GELU, no biases.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, 4 * dim, rng)?,
            down: Linear::new(store, &format!("{name}.down"), 4 * dim, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Linear value projection `d → D` plus a fixed sinusoidal position signal.
#[derive(Clone, Debug)]
pub struct Embed {
    pub value: Linear,
    pub dim: usize,
}

impl Embed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, raw_dim: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            value: Linear::new(store, &format!("{name}.value"), raw_dim, dim, rng)?,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let len = g.shape(x)[0];
        let v = self.value.forward(g, store, x)?;
        let pe = g.constant(positional_signal(len, self.dim));
        g.add(v, pe)
    }
}

/// `pe[t, 2i] = sin(t/10000^(2i/D))`, `pe[t, 2i+1] = cos(…)`.
pub fn positional_signal(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, dim]);
    for t in 0..len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
            pe.set(&[t, c], if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Single-head scaled dot-product attention in the time domain, used by the
/// block-variant ablation.
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            w_q: init_param(store, format!("{name}.w_q"), &[dim, dim], std, rng)?,
            w_k: init_param(store, format!("{name}.w_k"), &[dim, dim], std, rng)?,
            w_v: init_param(store, format!("{name}.w_v"), &[dim, dim], std, rng)?,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_q: Var, x_kv: Var) -> Result<Var> {
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        let q = g.matmul(x_q, wq)?;
        let k = g.matmul(x_kv, wk)?;
        let v = g.matmul(x_kv, wv)?;
        let s = g.matmul_bt(q, k)?;
        let s = g.scale(s, 1.0 / (self.dim as f64).sqrt());
        let a = g.softmax(s, 1)?;
        g.matmul(a, v)
    }
}

impl SeqMap for Attention {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward(g, store, x, x)
    }
}

impl CrossMap for Attention {
    fn apply(&self, g: &mut Graph, store: &ParamStore, q: Var, kv: Var) -> Result<Var> {
        self.forward(g, store, q, kv)
    }
}

/// FEA-f used as a self-attention block (queries, keys and values from the
/// same sequence).
impl SeqMap for FeaF {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward(g, store, x, x)
    }
}

impl SeqMap for FeaW {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward(g, store, x, x)
    }
}
