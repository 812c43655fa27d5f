//! Encoder-decoder assembly: decoder-input initialization, encoder and
//! decoder layers with trend accumulation, final projection, checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::blocks::{
    uniform_moe_decomp, Activation, Attention, CrossMap, Embed, FeaF, FeaW, FebF, FebW, FeedForward, Linear,
    MoeDecomp, SeqMap,
};
use crate::error::{Error, Result};
use crate::spectral::{ModeKind, ModePolicy};
use crate::tensor::Tensor;
use crate::wavelet::{max_depth, MAX_DEGREE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Fourier,
    Wavelet,
}

/// Which block fills the self-attention slot of each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelfKind {
    /// FEB (Fourier or wavelet, per variant).
    Feb,
    /// FEA with queries, keys and values from the same sequence.
    Fea,
    Attention,
}

/// Which block fills the cross-attention slot of decoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossKind {
    Fea,
    Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_len: usize,
    pub pred_len: usize,
    pub raw_dim: usize,
    pub model_dim: usize,
    pub modes: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub moe_kernels: Vec<usize>,
    pub variant: Variant,
    pub wavelet_k: usize,
    pub wavelet_depth: usize,
    pub policy: ModeKind,
    pub include_dc: bool,
    pub activation: Activation,
    pub self_block: SelfKind,
    pub cross_block: CrossKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 96,
            pred_len: 96,
            raw_dim: 1,
            model_dim: 32,
            modes: 64,
            encoder_layers: 2,
            decoder_layers: 1,
            moe_kernels: vec![7, 12, 14, 24, 48],
            variant: Variant::Fourier,
            wavelet_k: 3,
            wavelet_depth: 3,
            policy: ModeKind::RandomUniform,
            include_dc: true,
            activation: Activation::Softmax,
            self_block: SelfKind::Feb,
            cross_block: CrossKind::Fea,
            seed: 0,
        }
    }
}

const ROLE_ENC_SELF: u64 = 1;
const ROLE_DEC_SELF: u64 = 2;
const ROLE_DEC_CROSS: u64 = 3;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_len < 2 || !self.input_len.is_multiple_of(2) {
            return bad(format!("model.input_len must be even and at least 2, got {}", self.input_len));
        }
        if self.pred_len == 0 {
            return bad("model.pred_len must be at least 1".into());
        }
        if self.raw_dim == 0 || self.model_dim == 0 {
            return bad("model.raw_dim and model.model_dim must be positive".into());
        }
        if self.modes == 0 {
            return bad("model.modes must be at least 1".into());
        }
        if self.decoder_layers == 0 {
            return bad("model.decoder_layers must be at least 1".into());
        }
        if self.moe_kernels.is_empty() || self.moe_kernels.contains(&0) {
            return bad(format!("model.moe_kernels must be non-empty and positive, got {:?}", self.moe_kernels));
        }
        if !(1..=MAX_DEGREE).contains(&self.wavelet_k) {
            return bad(format!("model.wavelet_k must be in 1..={MAX_DEGREE}, got {}", self.wavelet_k));
        }
        Ok(())
    }

    /// Decoder working length `I/2 + O`.
    pub fn decoder_len(&self) -> usize {
        self.input_len / 2 + self.pred_len
    }

    /// Mode policy of one block; the seed mixes layer index and role.
    pub fn policy_for(&self, layer: usize, role: u64) -> ModePolicy {
        ModePolicy {
            kind: self.policy,
            mode_count: self.modes,
            seed: self.seed ^ (((layer as u64 + 1) << 4) | role),
            include_dc: self.include_dc,
        }
    }

    fn depth_for(&self, len: usize) -> usize {
        self.wavelet_depth.min(max_depth(len, self.wavelet_k))
    }
}

/// Seasonal and trend initializations of the decoder, `(I/2+O)×d` each.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInputs {
    pub seasonal: Tensor,
    pub trend: Tensor,
}

/// Decomposes the latter half of `x` with uniform expert weights, then pads
/// the seasonal part with zeros and the trend with the latter-half mean.
pub fn init_decoder_inputs(x: &Tensor, cfg: &ModelConfig) -> Result<DecoderInputs> {
    let [rows, d] = x.dims2("init_decoder_inputs")?;
    if !cfg.input_len.is_multiple_of(2) {
        return Err(Error::Config(format!("input length {} is odd", cfg.input_len)));
    }
    if rows != cfg.input_len || d != cfg.raw_dim {
        return Err(Error::Shape {
            op: "init_decoder_inputs",
            detail: format!("expected {}×{}, got {rows}×{d}", cfg.input_len, cfg.raw_dim),
        });
    }
    let half = rows / 2;
    let latter = x.slice_first(half, rows)?;
    let (seasonal, trend) = uniform_moe_decomp(&latter, &cfg.moe_kernels)?;
    let mut mean = vec![0.0; d];
    for t in 0..half {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += latter.get(&[t, c]);
        }
    }
    mean.iter_mut().for_each(|m| *m /= half as f64);
    let mean_rows = Tensor::new(&[cfg.pred_len, d], mean.repeat(cfg.pred_len))?;
    Ok(DecoderInputs {
        seasonal: Tensor::concat_first(&[&seasonal, &Tensor::zeros(&[cfg.pred_len, d])])?,
        trend: Tensor::concat_first(&[&trend, &mean_rows])?,
    })
}

#[derive(Clone, Debug)]
pub enum SelfBlock {
    FebF(FebF),
    FebW(FebW),
    FeaF(FeaF),
    FeaW(FeaW),
    Attention(Attention),
}

impl SelfBlock {
    fn build(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        name: &str,
        len: usize,
        policy: ModePolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (dim, k) = (cfg.model_dim, cfg.wavelet_k);
        Ok(match (cfg.self_block, cfg.variant) {
            (SelfKind::Feb, Variant::Fourier) => Self::FebF(FebF::new(store, name, dim, policy, rng)?),
            (SelfKind::Feb, Variant::Wavelet) => {
                Self::FebW(FebW::new(store, name, dim, k, cfg.depth_for(len), policy, rng)?)
            }
            (SelfKind::Fea, Variant::Fourier) => {
                Self::FeaF(FeaF::new(store, name, dim, policy, cfg.activation, rng)?)
            }
            (SelfKind::Fea, Variant::Wavelet) => Self::FeaW(FeaW::new(
                store,
                name,
                dim,
                k,
                cfg.depth_for(len),
                policy,
                cfg.activation,
                rng,
            )?),
            (SelfKind::Attention, _) => Self::Attention(Attention::new(store, name, dim, rng)?),
        })
    }
}

impl SeqMap for SelfBlock {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Self::FebF(b) => b.apply(g, store, x),
            Self::FebW(b) => b.apply(g, store, x),
            Self::FeaF(b) => SeqMap::apply(b, g, store, x),
            Self::FeaW(b) => SeqMap::apply(b, g, store, x),
            Self::Attention(b) => SeqMap::apply(b, g, store, x),
        }
    }
}

#[derive(Clone, Debug)]
pub enum CrossBlock {
    FeaF(FeaF),
    FeaW(FeaW),
    Attention(Attention),
}

impl CrossMap for CrossBlock {
    fn apply(&self, g: &mut Graph, store: &ParamStore, q: Var, kv: Var) -> Result<Var> {
        match self {
            Self::FeaF(b) => b.forward(g, store, q, kv),
            Self::FeaW(b) => b.forward(g, store, q, kv),
            Self::Attention(b) => b.forward(g, store, q, kv),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub block: SelfBlock,
    pub decomp1: MoeDecomp,
    pub ff: FeedForward,
    pub decomp2: MoeDecomp,
}

impl EncoderLayer {
    /// Output and the two discarded trends.
    pub fn forward_traced(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, [Var; 2])> {
        let b = self.block.apply(g, store, x)?;
        let x1 = g.add(b, x)?;
        let (s1, t1) = self.decomp1.forward(g, store, x1)?;
        let f = self.ff.forward(g, store, s1)?;
        let x2 = g.add(f, s1)?;
        let (s2, t2) = self.decomp2.forward(g, store, x2)?;
        Ok((s2, [t1, t2]))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, x)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub block: SelfBlock,
    pub decomp1: MoeDecomp,
    pub cross: CrossBlock,
    pub decomp2: MoeDecomp,
    pub ff: FeedForward,
    pub decomp3: MoeDecomp,
    /// Trend projectors `W_{l,1..3}`, `D → d`.
    pub trend_proj: [Linear; 3],
}

impl DecoderLayer {
    /// Returns `(seasonal output, accumulated trend)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, trend: Var, enc: Var) -> Result<(Var, Var)> {
        let b = self.block.apply(g, store, x)?;
        let x1 = g.add(b, x)?;
        let (s1, t1) = self.decomp1.forward(g, store, x1)?;
        let c = self.cross.apply(g, store, s1, enc)?;
        let x2 = g.add(c, s1)?;
        let (s2, t2) = self.decomp2.forward(g, store, x2)?;
        let f = self.ff.forward(g, store, s2)?;
        let x3 = g.add(f, s2)?;
        let (s3, t3) = self.decomp3.forward(g, store, x3)?;
        let mut parts = vec![trend];
        for (proj, t) in self.trend_proj.iter().zip([t1, t2, t3]) {
            parts.push(proj.forward(g, store, t)?);
        }
        Ok((s3, g.sum_n(&parts)?))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub enc_embed: Embed,
    pub dec_embed: Embed,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    /// Seasonal projector `W_S`, `D → d`.
    pub out_proj: Linear,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (d, dm) = (config.raw_dim, config.model_dim);
        let kernels = config.moe_kernels.clone();
        let (enc_len, dec_len) = (config.input_len, config.decoder_len());
        let enc_embed = Embed::new(&mut store, "enc.embed", d, dm, &mut rng)?;
        let dec_embed = Embed::new(&mut store, "dec.embed", d, dm, &mut rng)?;
        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            let p = format!("enc{l}");
            encoder.push(EncoderLayer {
                block: SelfBlock::build(
                    &config,
                    &mut store,
                    &format!("{p}.self"),
                    enc_len,
                    config.policy_for(l, ROLE_ENC_SELF),
                    &mut rng,
                )?,
                decomp1: MoeDecomp::new(&mut store, &format!("{p}.decomp1"), dm, &kernels, &mut rng)?,
                ff: FeedForward::new(&mut store, &format!("{p}.ff"), dm, &mut rng)?,
                decomp2: MoeDecomp::new(&mut store, &format!("{p}.decomp2"), dm, &kernels, &mut rng)?,
            });
        }
        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            let p = format!("dec{l}");
            let policy = config.policy_for(l, ROLE_DEC_CROSS);
            let cross = match (config.cross_block, config.variant) {
                (CrossKind::Fea, Variant::Fourier) => {
                    CrossBlock::FeaF(FeaF::new(&mut store, &format!("{p}.cross"), dm, policy, config.activation, &mut rng)?)
                }
                (CrossKind::Fea, Variant::Wavelet) => CrossBlock::FeaW(FeaW::new(
                    &mut store,
                    &format!("{p}.cross"),
                    dm,
                    config.wavelet_k,
                    config.depth_for(dec_len.min(enc_len)),
                    policy,
                    config.activation,
                    &mut rng,
                )?),
                (CrossKind::Attention, _) => {
                    CrossBlock::Attention(Attention::new(&mut store, &format!("{p}.cross"), dm, &mut rng)?)
                }
            };
            decoder.push(DecoderLayer {
                block: SelfBlock::build(
                    &config,
                    &mut store,
                    &format!("{p}.self"),
                    dec_len,
                    config.policy_for(l, ROLE_DEC_SELF),
                    &mut rng,
                )?,
                decomp1: MoeDecomp::new(&mut store, &format!("{p}.decomp1"), dm, &kernels, &mut rng)?,
                cross,
                decomp2: MoeDecomp::new(&mut store, &format!("{p}.decomp2"), dm, &kernels, &mut rng)?,
                ff: FeedForward::new(&mut store, &format!("{p}.ff"), dm, &mut rng)?,
                decomp3: MoeDecomp::new(&mut store, &format!("{p}.decomp3"), dm, &kernels, &mut rng)?,
                trend_proj: [
                    Linear::new(&mut store, &format!("{p}.trend1"), dm, d, &mut rng)?,
                    Linear::new(&mut store, &format!("{p}.trend2"), dm, d, &mut rng)?,
                    Linear::new(&mut store, &format!("{p}.trend3"), dm, d, &mut rng)?,
                ],
            });
        }
        let out_proj = Linear::new(&mut store, "out_proj", dm, d, &mut rng)?;
        Ok(Self {
            config,
            store,
            enc_embed,
            dec_embed,
            encoder,
            decoder,
            out_proj,
        })
    }

    /// Records the forward pass on `g` using this model's parameters.
    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        self.forward_with(g, &self.store, x)
    }

    /// Forward pass reading parameter values from `store`, which must have
    /// the layout of `self.store`.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, x: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        if x.shape() != [cfg.input_len, cfg.raw_dim] {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("expected {}×{} input, got {:?}", cfg.input_len, cfg.raw_dim, x.shape()),
            });
        }
        let init = init_decoder_inputs(x, cfg)?;
        let xv = g.constant(x.clone());
        let mut enc = self.enc_embed.forward(g, store, xv)?;
        for layer in &self.encoder {
            enc = layer.forward(g, store, enc)?;
        }
        let ds = g.constant(init.seasonal);
        let mut dec = self.dec_embed.forward(g, store, ds)?;
        let mut trend = g.constant(init.trend);
        for layer in &self.decoder {
            (dec, trend) = layer.forward(g, store, dec, trend, enc)?;
        }
        let seasonal = self.out_proj.forward(g, store, dec)?;
        let full = g.add(seasonal, trend)?;
        let start = cfg.input_len / 2;
        g.slice_first(full, start, start + cfg.pred_len)
    }

    /// Forecast as a plain tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Overwrites parameters from named tensors; every parameter must be
    /// present with its exact shape.
    pub fn load_params(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.param(id).name.clone();
            let Some((_, t)) = tensors.iter().find(|(n, _)| *n == name) else {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            };
            if t.shape() != self.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} in file, {:?} in model",
                    t.shape(),
                    self.store.value(id).shape()
                )));
            }
            *self.store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

const MAGIC: &[u8; 4] = b"FQFM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint: magic, version, header text, then
/// (name, shape, little-endian f64 data) triples.
pub fn save_checkpoint(path: &Path, header: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = r.u64()? as usize;
    let header = String::from_utf8(r.take(hlen)?.to_vec())
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let n = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = (0..count)
            .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect::<Result<Vec<_>>>()?;
        let t = if shape.is_empty() {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?
        };
        tensors.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((header, tensors))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated file".into()));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
