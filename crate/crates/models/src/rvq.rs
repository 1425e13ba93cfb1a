//! Residual vector-quantized autoencoder over head-centric features.
//!
//! Quantization runs outside the autograd graph. Encoder outputs are `f32`;
//! residuals and the running reconstruction are carried in `f64`, where the
//! subtraction and summation of a handful of `f32` values is exact, so
//! `Z - Zhat` equals the final residual bit for bit.

use candle_core::{DType, Device, Tensor};
use egomotion_core::tokens::TokenGrid;
use egomotion_core::HeadCentricSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::conv::{pad_to_multiple, CodecShape, Decoder, Encoder};
use crate::data::{feature_batch, FeatureStats};
use crate::error::{Error, Result};
use crate::nn::SeededStore;
use crate::optim::Optim;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RvqConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub temporal_downsample: usize,
    pub beta: f64,
    pub hidden: usize,
    pub res_blocks: usize,
    pub ema_decay: f64,
    /// Steps without assignments after which an entry is reseeded.
    pub dead_after: usize,
    /// Randomly truncate the active levels during training.
    pub quantizer_dropout: bool,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self {
            levels: 6,
            codebook_size: 512,
            latent_dim: 32,
            temporal_downsample: 2,
            beta: 0.02,
            hidden: 128,
            res_blocks: 2,
            ema_decay: 0.99,
            dead_after: 256,
            quantizer_dropout: false,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels < 1 {
            return bad("levels must be at least 1");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.latent_dim < 1 || self.temporal_downsample < 1 || self.hidden < 1 {
            return bad("latent_dim, temporal_downsample and hidden must be positive");
        }
        if self.beta < 0.0 || !(0.0..1.0).contains(&self.ema_decay) {
            return bad("beta must be non-negative and ema_decay in [0, 1)");
        }
        Ok(())
    }
}

/// `N1 x D` latent rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl LatentMap {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::Config(format!("{} values for a {rows} x {dim} latent map", values.len())));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.dim..(n + 1) * self.dim]
    }
}

/// `L` codebooks of `K x D` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub levels: usize,
    pub size: usize,
    pub dim: usize,
    pub entries: Vec<f32>,
}

impl Codebooks {
    pub fn new(levels: usize, size: usize, dim: usize, entries: Vec<f32>) -> Result<Self> {
        if entries.len() != levels * size * dim {
            return Err(Error::Config(format!("{} entries for {levels} x {size} x {dim}", entries.len())));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        Ok(Self { levels, size, dim, entries })
    }

    pub fn random(levels: usize, size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let entries = (0..levels * size * dim).map(|_| StandardNormal.sample(rng)).collect();
        Self { levels, size, dim, entries }
    }

    pub fn entry(&self, level: usize, k: usize) -> &[f32] {
        let o = (level * self.size + k) * self.dim;
        &self.entries[o..o + self.dim]
    }

    fn entry_mut(&mut self, level: usize, k: usize) -> &mut [f32] {
        let o = (level * self.size + k) * self.dim;
        &mut self.entries[o..o + self.dim]
    }

    /// Nearest entry of `level` to `r`; ties go to the lowest index.
    pub fn nearest(&self, level: usize, r: &[f64]) -> u32 {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size {
            let d: f64 = self.entry(level, k).iter().zip(r).map(|(&e, &x)| (x - e as f64) * (x - e as f64)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best as u32
    }

    /// Whether any level has two identical entries (argmin ties are then structural).
    pub fn has_duplicates(&self) -> bool {
        (0..self.levels).any(|l| {
            (0..self.size).any(|a| (a + 1..self.size).any(|b| self.entry(l, a) == self.entry(l, b)))
        })
    }
}

/// Output of residual quantization over `rows` latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub rows: usize,
    pub levels: usize,
    /// Level-major `L x rows`.
    pub tokens: Vec<u32>,
    pub zhat: LatentMap,
    /// `R^1 .. R^{L+1}`, each `rows x D`; `R^1` is the input.
    pub residuals: Vec<Vec<f64>>,
    /// Frobenius norms of `R^1 .. R^{L+1}`.
    pub residual_norms: Vec<f64>,
}

impl Quantized {
    pub fn grid(&self, codebook_size: usize) -> Result<TokenGrid> {
        Ok(TokenGrid::new(self.levels, self.rows, codebook_size, self.tokens.clone())?)
    }
}

pub fn quantize(z: &LatentMap, books: &Codebooks) -> Result<Quantized> {
    quantize_levels(z, books, books.levels)
}

/// Quantizes with the first `active` levels only.
pub fn quantize_levels(z: &LatentMap, books: &Codebooks, active: usize) -> Result<Quantized> {
    if z.dim != books.dim {
        return Err(Error::Config(format!("latent dim {} vs codebook dim {}", z.dim, books.dim)));
    }
    let active = active.min(books.levels);
    let mut r = z.values.clone();
    let mut zhat = vec![0.0f64; r.len()];
    let mut residuals = Vec::with_capacity(active + 1);
    let mut tokens = Vec::with_capacity(active * z.rows);
    for l in 0..active {
        residuals.push(r.clone());
        for n in 0..z.rows {
            let row = &mut r[n * z.dim..(n + 1) * z.dim];
            let k = books.nearest(l, row);
            tokens.push(k);
            let e = books.entry(l, k as usize);
            for d in 0..z.dim {
                row[d] -= e[d] as f64;
                zhat[n * z.dim + d] += e[d] as f64;
            }
        }
    }
    residuals.push(r);
    let residual_norms = residuals.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    Ok(Quantized {
        rows: z.rows,
        levels: active,
        tokens,
        zhat: LatentMap { rows: z.rows, dim: z.dim, values: zhat },
        residuals,
        residual_norms,
    })
}

/// `sum_l e^l(m^l_n)` for each timestep.
pub fn dequantize(grid: &TokenGrid, books: &Codebooks) -> Result<LatentMap> {
    grid.validate()?;
    if grid.levels > books.levels || grid.codebook_size != books.size {
        return Err(Error::Config(format!(
            "grid {} levels / {} codes vs codebooks {} / {}",
            grid.levels, grid.codebook_size, books.levels, books.size
        )));
    }
    let mut out = vec![0.0f64; grid.len * books.dim];
    for l in 0..grid.levels {
        for n in 0..grid.len {
            let e = books.entry(l, grid.get(l, n) as usize);
            for d in 0..books.dim {
                out[n * books.dim + d] += e[d] as f64;
            }
        }
    }
    LatentMap::new(grid.len, books.dim, out)
}

/// EMA bookkeeping for codebook learning.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub dead_after: usize,
    /// Consecutive updates without assignments, `L x K`.
    pub idle: Vec<usize>,
    /// Entries reseeded by the most recent update, `L x K`.
    pub reseeded: Vec<bool>,
}

impl EmaState {
    pub fn new(levels: usize, size: usize, decay: f64, dead_after: usize) -> Self {
        Self { decay, dead_after, idle: vec![0; levels * size], reseeded: vec![false; levels * size] }
    }

    /// Moves each used entry toward the mean of its assigned inputs,
    /// `e <- decay * e + (1 - decay) * mean`, and reseeds entries idle for
    /// `dead_after` updates from random inputs of the same level.
    pub fn update(&mut self, books: &mut Codebooks, q: &Quantized, rng: &mut impl Rng) {
        let (k_size, dim) = (books.size, books.dim);
        self.reseeded.iter_mut().for_each(|f| *f = false);
        for l in 0..q.levels {
            let inputs = &q.residuals[l];
            let mut sums = vec![0.0f64; k_size * dim];
            let mut counts = vec![0usize; k_size];
            for n in 0..q.rows {
                let k = q.tokens[l * q.rows + n] as usize;
                counts[k] += 1;
                for d in 0..dim {
                    sums[k * dim + d] += inputs[n * dim + d];
                }
            }
            for k in 0..k_size {
                let slot = l * k_size + k;
                if counts[k] > 0 {
                    let c = counts[k] as f64;
                    let e = books.entry_mut(l, k);
                    for d in 0..dim {
                        let mean = sums[k * dim + d] / c;
                        e[d] = (self.decay * e[d] as f64 + (1.0 - self.decay) * mean) as f32;
                    }
                    self.idle[slot] = 0;
                } else {
                    self.idle[slot] += 1;
                    if self.idle[slot] >= self.dead_after && q.rows > 0 {
                        let n = rng.random_range(0..q.rows);
                        let src: Vec<f32> = inputs[n * dim..(n + 1) * dim].iter().map(|&x| x as f32).collect();
                        books.entry_mut(l, k).copy_from_slice(&src);
                        self.idle[slot] = 0;
                        self.reseeded[slot] = true;
                    }
                }
            }
        }
    }
}

/// Mean absolute error plus `beta * sum_l mean((R^l - sg[Rhat^l])^2)`.
///
/// `quantized` entries are detached here, so the commitment gradient reaches
/// only the residual path.
pub fn rvq_loss(
    x: &Tensor,
    xhat: &Tensor,
    residuals: &[Tensor],
    quantized: &[Tensor],
    beta: f64,
) -> candle_core::Result<Tensor> {
    let recon = (x - xhat)?.abs()?.mean_all()?;
    if beta == 0.0 {
        return Ok(recon);
    }
    recon + commitment_loss(residuals, quantized, beta)?
}

pub fn commitment_loss(residuals: &[Tensor], quantized: &[Tensor], beta: f64) -> candle_core::Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (r, q) in residuals.iter().zip(quantized) {
        let term = (r - q.detach())?.sqr()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    match total {
        Some(t) => t * beta,
        None => candle_core::bail!("no quantization levels"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvqStepStats {
    pub loss: f64,
    pub recon: f64,
    pub commit: f64,
    pub grad_norm: f64,
    pub reseeded: usize,
}

pub struct RvqTokenizer {
    pub config: RvqConfig,
    pub num_joints: usize,
    pub stats: FeatureStats,
    pub books: Codebooks,
    pub ema: EmaState,
    pub store: SeededStore,
    enc: Encoder,
    dec: Decoder,
    books_ready: bool,
    rng: ChaCha8Rng,
    dev: Device,
}

impl RvqTokenizer {
    pub fn new(config: RvqConfig, num_joints: usize, stats: FeatureStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let dev = Device::Cpu;
        let width = 3 * num_joints + 8;
        if stats.width() != width {
            return Err(Error::Config(format!("stats width {} vs feature width {width}", stats.width())));
        }
        let shape = codec_shape(&config, width);
        let store = SeededStore::new(seed);
        let (enc, dec) = {
            let vb = store.builder(DType::F32, &dev);
            (Encoder::new(&shape, config.latent_dim, vb.pp("enc"))?, Decoder::new(&shape, vb.pp("dec"))?)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb00c);
        let books = Codebooks::random(config.levels, config.codebook_size, config.latent_dim, &mut rng);
        let ema = EmaState::new(config.levels, config.codebook_size, config.ema_decay, config.dead_after);
        Ok(Self { config, num_joints, stats, books, ema, store, enc, dec, books_ready: false, rng, dev })
    }

    pub fn width(&self) -> usize {
        3 * self.num_joints + 8
    }

    pub fn latent_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.config.temporal_downsample)
    }

    fn encode_tensor(&self, seqs: &[&HeadCentricSequence]) -> Result<Tensor> {
        let x = feature_batch(seqs, &self.stats, &self.dev)?;
        let (x, _) = pad_to_multiple(&x, self.config.temporal_downsample)?;
        Ok(self.enc.forward(&x)?)
    }

    pub fn encode(&self, seq: &HeadCentricSequence) -> Result<LatentMap> {
        Ok(self.encode_batch(&[seq])?.remove(0))
    }

    pub fn encode_batch(&self, seqs: &[&HeadCentricSequence]) -> Result<Vec<LatentMap>> {
        let z = self.encode_tensor(seqs)?;
        let (b, n1, d) = z.dims3()?;
        (0..b)
            .map(|i| {
                let v = z.get(i)?.flatten_all()?.to_vec1::<f32>()?;
                LatentMap::new(n1, d, v.into_iter().map(f64::from).collect())
            })
            .collect()
    }

    pub fn quantize(&self, z: &LatentMap) -> Result<Quantized> {
        quantize(z, &self.books)
    }

    pub fn dequantize(&self, grid: &TokenGrid) -> Result<LatentMap> {
        dequantize(grid, &self.books)
    }

    /// Decodes latent maps and crops to `frames`.
    pub fn decode_batch(&self, zs: &[LatentMap], frames: usize) -> Result<Vec<HeadCentricSequence>> {
        let n1 = zs[0].rows;
        let d = zs[0].dim;
        if d != self.config.latent_dim || zs.iter().any(|z| z.rows != n1 || z.dim != d) {
            return Err(Error::Config("latent maps must share shape and match latent_dim".into()));
        }
        let v: Vec<f32> = zs.iter().flat_map(|z| z.values.iter().map(|&x| x as f32)).collect();
        let z = Tensor::from_vec(v, (zs.len(), n1, d), &self.dev)?;
        let x = self.dec.forward(&z)?;
        let frames = frames.min(x.dim(1)?);
        Ok(crate::data::unbatch(&x.narrow(1, 0, frames)?, &self.stats, self.num_joints)?)
    }

    pub fn decode(&self, z: &LatentMap, frames: usize) -> Result<HeadCentricSequence> {
        Ok(self.decode_batch(std::slice::from_ref(z), frames)?.remove(0))
    }

    pub fn tokenize(&self, seq: &HeadCentricSequence) -> Result<TokenGrid> {
        Ok(self.tokenize_batch(&[seq])?.remove(0))
    }

    pub fn tokenize_batch(&self, seqs: &[&HeadCentricSequence]) -> Result<Vec<TokenGrid>> {
        self.encode_batch(seqs)?
            .iter()
            .map(|z| self.quantize(z)?.grid(self.config.codebook_size))
            .collect()
    }

    pub fn detokenize(&self, grid: &TokenGrid, frames: usize) -> Result<HeadCentricSequence> {
        self.decode(&self.dequantize(grid)?, frames)
    }

    pub fn reconstruct_batch(&self, seqs: &[&HeadCentricSequence]) -> Result<Vec<HeadCentricSequence>> {
        let frames = seqs[0].num_frames();
        let zhat: Vec<LatentMap> =
            self.encode_batch(seqs)?.iter().map(|z| Ok(self.quantize(z)?.zhat)).collect::<Result<_>>()?;
        self.decode_batch(&zhat, frames)
    }

    /// Seeds each level's entries from residual rows of the first batch.
    fn init_books(&mut self, z: &LatentMap) {
        for l in 0..self.config.levels {
            let q = quantize_levels(z, &self.books, l).expect("dims checked");
            let r = &q.residuals[l];
            for k in 0..self.config.codebook_size {
                let n = self.rng.random_range(0..z.rows);
                let src: Vec<f32> = r[n * z.dim..(n + 1) * z.dim].iter().map(|&x| x as f32).collect();
                self.books.entry_mut(l, k).copy_from_slice(&src);
            }
        }
        self.books_ready = true;
    }

    pub fn train_step(&mut self, batch: &[&HeadCentricSequence], opt: &mut Optim) -> Result<RvqStepStats> {
        let x = feature_batch(batch, &self.stats, &self.dev)?;
        let (x, pad) = pad_to_multiple(&x, self.config.temporal_downsample)?;
        let z = self.enc.forward(&x)?;
        let (b, n1, d) = z.dims3()?;
        let flat = LatentMap::new(b * n1, d, z.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from).collect())?;
        if !self.books_ready {
            self.init_books(&flat);
        }
        let active = if self.config.quantizer_dropout { self.rng.random_range(1..=self.config.levels) } else { self.config.levels };
        let q = quantize_levels(&flat, &self.books, active)?;

        let to_t = |v: &[f64]| -> candle_core::Result<Tensor> {
            Tensor::from_vec(v.iter().map(|&x| x as f32).collect::<Vec<_>>(), (b, n1, d), &self.dev)
        };
        let mut residual_t = Vec::with_capacity(q.levels);
        let mut quant_t = Vec::with_capacity(q.levels);
        for l in 0..q.levels {
            // R^l = z - (z - R^l) keeps the gradient path through z.
            let consumed: Vec<f64> = flat.values.iter().zip(&q.residuals[l]).map(|(z, r)| z - r).collect();
            residual_t.push((&z - to_t(&consumed)?)?);
            let rhat: Vec<f64> = q.residuals[l].iter().zip(&q.residuals[l + 1]).map(|(a, b)| a - b).collect();
            quant_t.push(to_t(&rhat)?);
        }
        let zq = to_t(&q.zhat.values)?;
        let st = (&z + (zq - &z)?.detach())?;
        let xhat = self.dec.forward(&st)?;
        let n = x.dim(1)? - pad;
        let (xc, xhc) = (x.narrow(1, 0, n)?, xhat.narrow(1, 0, n)?);
        let recon = (&xc - &xhc)?.abs()?.mean_all()?;
        let commit = commitment_loss(&residual_t, &quant_t, self.config.beta)?;
        let loss = (&recon + &commit)?;
        let grad_norm = opt.backward_step(&loss)?;

        let mut ema_rng = ChaCha8Rng::seed_from_u64(self.rng.random());
        self.ema.update(&mut self.books, &q, &mut ema_rng);
        Ok(RvqStepStats {
            loss: loss.to_scalar::<f32>()? as f64,
            recon: recon.to_scalar::<f32>()? as f64,
            commit: commit.to_scalar::<f32>()? as f64,
            grad_norm,
            reseeded: self.ema.reseeded.iter().filter(|&&f| f).count(),
        })
    }

    /// Mean absolute reconstruction error in normalised feature units.
    pub fn recon_error(&self, seqs: &[&HeadCentricSequence]) -> Result<f64> {
        let rec = self.reconstruct_batch(seqs)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (a, b) in seqs.iter().zip(&rec) {
            let na = self.stats.normalize(&a.data);
            let nb = self.stats.normalize(&b.data);
            sum += na.iter().zip(&nb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
            n += na.len();
        }
        Ok(sum / n as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(KIND, &RvqMeta { config: self.config, num_joints: self.num_joints })?;
        for (name, var) in self.store.named() {
            c.insert(format!("model.{name}"), var.as_tensor());
        }
        let (l, k, d) = (self.books.levels, self.books.size, self.books.dim);
        c.insert("codebooks", &Tensor::from_vec(self.books.entries.clone(), (l, k, d), &self.dev)?);
        let idle: Vec<u32> = self.ema.idle.iter().map(|&x| x as u32).collect();
        c.insert("ema_idle", &Tensor::from_vec(idle, (l, k), &self.dev)?);
        insert_stats(&mut c, &self.stats, &self.dev)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND)?;
        let meta: RvqMeta = c.config()?;
        let stats = read_stats(c)?;
        let mut t = Self::new(meta.config, meta.num_joints, stats, 0)?;
        t.store.load_from(&c.scoped("model"))?;
        let books = c.get("codebooks")?.flatten_all()?.to_vec1::<f32>()?;
        t.books = Codebooks::new(t.config.levels, t.config.codebook_size, t.config.latent_dim, books)?;
        t.ema.idle = c.get("ema_idle")?.flatten_all()?.to_vec1::<u32>()?.into_iter().map(|x| x as usize).collect();
        t.books_ready = true;
        Ok(t)
    }
}

pub const KIND: &str = "rvq";

#[derive(Serialize, Deserialize)]
struct RvqMeta {
    config: RvqConfig,
    num_joints: usize,
}

fn codec_shape(c: &RvqConfig, width: usize) -> CodecShape {
    CodecShape {
        input_dim: width,
        hidden: c.hidden,
        latent_dim: c.latent_dim,
        downsample: c.temporal_downsample,
        res_blocks: c.res_blocks,
    }
}

pub(crate) fn insert_stats(c: &mut Checkpoint, s: &FeatureStats, dev: &Device) -> Result<()> {
    c.insert("stats.mean", &Tensor::from_vec(s.mean.clone(), s.width(), dev)?);
    c.insert("stats.std", &Tensor::from_vec(s.std.clone(), s.width(), dev)?);
    Ok(())
}

pub(crate) fn read_stats(c: &Checkpoint) -> Result<FeatureStats> {
    Ok(FeatureStats { mean: c.get("stats.mean")?.to_vec1::<f32>()?, std: c.get("stats.std")?.to_vec1::<f32>()? })
}
