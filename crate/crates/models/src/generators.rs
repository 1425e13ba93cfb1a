//! Stage-II generators. All four paradigms share one transformer that
//! self-attends over the motion sequence and cross-attends to reasoner states.
//!
//! * `ar`: delayed token streams, causal, next-step prediction.
//! * `masked`: token grid with whole timesteps masked, bidirectional.
//! * `fm_raw` / `fm_latent`: velocity regression on normalised feature or
//!   latent sequences, integrated with an Euler sampler.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, IndexOp, Tensor};
use candle_nn::{Linear, VarBuilder};
use egomotion_core::tokens::{delay, delayed_len, is_valid, undelay, DelayedGrid, TokenGrid, Vocab};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::FeatureStats;
use crate::error::{Error, Result};
use crate::nn::{apply_linear, linear, sinusoidal, table, SeededStore, Stack};
use crate::optim::Optim;
use crate::reasoner::{cell_nll, delayed_nll, shifted_inputs, HiddenBatch, LevelEmbedding};
use crate::rvq::{insert_stats, read_stats};
use crate::sampling::{pick, Sampling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Ar,
    Masked,
    FmRaw,
    FmLatent,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::Ar, Paradigm::Masked, Paradigm::FmRaw, Paradigm::FmLatent];

    pub fn is_token(self) -> bool {
        matches!(self, Paradigm::Ar | Paradigm::Masked)
    }

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Ar => "ar",
            Paradigm::Masked => "masked",
            Paradigm::FmRaw => "fm_raw",
            Paradigm::FmLatent => "fm_latent",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown paradigm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub paradigm: Paradigm,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Width of the reasoner states attended to.
    pub cond_dim: usize,
    /// Token timesteps `N1` for token paradigms, rows of the target sequence otherwise.
    pub seq_len: usize,
    pub levels: usize,
    pub codebook_size: usize,
    /// Channels per row for flow paradigms.
    pub value_dim: usize,
    pub decode_iters: usize,
    pub flow_steps: usize,
    pub guidance: f64,
    pub cond_dropout: f64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut dims = vec![self.layers, self.model_dim, self.heads, self.cond_dim, self.seq_len, self.flow_steps];
        if self.paradigm.is_token() {
            dims.extend([self.levels, self.codebook_size, self.decode_iters]);
        } else {
            dims.push(self.value_dim);
        }
        if dims.contains(&0) || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!("invalid generator config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) || !self.guidance.is_finite() {
            return Err(Error::Config(format!("invalid guidance settings {self:?}")));
        }
        Ok(())
    }

    fn positions(&self) -> usize {
        match self.paradigm {
            Paradigm::Ar => delayed_len(self.seq_len, self.levels),
            _ => self.seq_len,
        }
    }
}

/// Timesteps whose every level is hidden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub indices: Vec<usize>,
}

impl MaskSet {
    pub fn contains(&self, n: usize) -> bool {
        self.indices.binary_search(&n).is_ok()
    }
}

/// Masks `ceil(ratio * n1)` distinct timesteps, at least one.
pub fn sample_structured_mask(n1: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskSet> {
    if n1 == 0 || !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} over {n1} steps")));
    }
    let count = ((ratio * n1 as f64).ceil() as usize).clamp(1, n1);
    let mut indices = sample_indices(rng, n1, count).into_vec();
    indices.sort_unstable();
    Ok(MaskSet { indices })
}

/// Training mask ratio drawn through the cosine schedule.
pub fn sample_mask_ratio(rng: &mut impl Rng) -> f64 {
    (FRAC_PI_2 * rng.random::<f64>()).cos().max(f64::MIN_POSITIVE)
}

/// Timesteps still masked after iteration `i` of `iters`.
pub fn remaining_masked(n1: usize, i: usize, iters: usize) -> usize {
    if i + 1 >= iters {
        return 0;
    }
    (n1 as f64 * (FRAC_PI_2 * (i + 1) as f64 / iters as f64).cos()).floor() as usize
}

/// `tau * z + (1 - tau) * eps`, with one `tau` per batch row.
pub fn fm_interpolate(z: &Tensor, eps: &Tensor, tau: &[f64]) -> Result<Tensor> {
    if tau.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config(format!("tau outside [0, 1]: {tau:?}")));
    }
    let shape = per_row_shape(z, tau.len())?;
    let t = Tensor::new(tau, z.device())?.to_dtype(z.dtype())?.reshape(shape)?;
    let one_minus = t.affine(-1.0, 1.0)?;
    Ok((z.broadcast_mul(&t)? + eps.broadcast_mul(&one_minus)?)?)
}

fn per_row_shape(z: &Tensor, rows: usize) -> Result<Vec<usize>> {
    if z.dim(0)? != rows {
        return Err(Error::Config(format!("{rows} tau values for {} rows", z.dim(0)?)));
    }
    let mut shape = vec![1; z.rank()];
    shape[0] = rows;
    Ok(shape)
}

/// Squared error summed over each sample and averaged over the batch.
pub fn fm_objective(pred: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    let b = pred.dim(0)?;
    (pred - target)?.sqr()?.sum_all()? / b as f64
}

/// Euler integration from `tau = 0` to `1`: `z <- z - dt * f(z, tau)`.
pub fn euler_integrate(
    eps: Tensor,
    steps: usize,
    mut field: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Config("flow sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = eps;
    for s in 0..steps {
        let tau = s as f64 * dt;
        // sampling never backpropagates; detaching keeps the graph from growing across steps
        z = (&z - (field(&z, tau)?.detach() * dt)?)?;
        let probe = z.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !probe.is_finite() {
            return Err(Error::NonFinite(format!("flow state at step {s} (tau = {tau:.3})")));
        }
    }
    Ok(z)
}

pub fn gaussian(shape: &[usize], rng: &mut impl Rng, dev: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, dev)?)
}

/// Regression targets handed to a generator.
pub enum Target<'a> {
    Tokens(&'a [&'a TokenGrid]),
    /// Normalised `(B, seq_len, value_dim)` values.
    Values(&'a Tensor),
}

/// Committed-timestep counts after each masked decoding iteration.
pub type DecodeTrace = Vec<usize>;

pub struct Generator {
    pub config: GeneratorConfig,
    pub store: SeededStore,
    /// Normalisation of flow targets; identity for token paradigms.
    pub stats: FeatureStats,
    pos: Tensor,
    null: Tensor,
    tokens: Option<LevelEmbedding>,
    inp: Option<Linear>,
    time: Option<(Linear, Linear)>,
    stack: Stack,
    out: Linear,
    dev: Device,
}

pub const KIND: &str = "generator";

impl Generator {
    pub fn new(config: GeneratorConfig, stats: Option<FeatureStats>, seed: u64) -> Result<Self> {
        config.validate()?;
        let stats = stats.unwrap_or_else(|| FeatureStats::identity(config.value_dim));
        if !config.paradigm.is_token() && stats.width() != config.value_dim {
            return Err(Error::Config(format!("stats width {} != value_dim {}", stats.width(), config.value_dim)));
        }
        let dev = Device::Cpu;
        let store = SeededStore::new(seed);
        let d = config.model_dim;
        let k = config.codebook_size;
        let l = config.levels;
        let parts = {
            let vb: VarBuilder = store.builder(DType::F32, &dev);
            let pos = table(config.positions(), d, "pos", &vb)?;
            let null = table(1, config.cond_dim, "null_cond", &vb)?;
            let (tokens, inp, time, out_dim) = match config.paradigm {
                Paradigm::Ar => (Some(LevelEmbedding::new(l, k + 3, d, &vb)?), None, None, l * (k + 3)),
                Paradigm::Masked => (Some(LevelEmbedding::new(l, k + 1, d, &vb)?), None, None, l * k),
                Paradigm::FmRaw | Paradigm::FmLatent => (
                    None,
                    Some(linear(config.value_dim, d, vb.pp("inp"))?),
                    Some((linear(d, d, vb.pp("time0"))?, linear(d, d, vb.pp("time1"))?)),
                    config.value_dim,
                ),
            };
            let stack = Stack::new(config.layers, d, config.heads, Some(config.cond_dim), vb.pp("stack"))?;
            let out = linear(d, out_dim, vb.pp("out"))?;
            (pos, null, tokens, inp, time, stack, out)
        };
        let (pos, null, tokens, inp, time, stack, out) = parts;
        Ok(Self { config, store, stats, pos, null, tokens, inp, time, stack, out, dev })
    }

    pub fn device(&self) -> &Device {
        &self.dev
    }

    pub fn paradigm(&self) -> Paradigm {
        self.config.paradigm
    }

    /// Reasoner states with `dropped` rows replaced by the learned null condition.
    fn memory(&self, h: &HiddenBatch, dropped: &[bool]) -> Result<(Tensor, Tensor)> {
        let (b, p, dh) = h.states.dims3()?;
        if dh != self.config.cond_dim {
            return Err(Error::Config(format!("condition width {dh} != {}", self.config.cond_dim)));
        }
        if !dropped.iter().any(|&x| x) {
            return Ok((h.states.clone(), crate::nn::key_padding_bias(&h.valid, &self.dev)?));
        }
        let keep: Vec<f32> = dropped.iter().map(|&x| if x { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, (b, 1, 1), &self.dev)?;
        let first: Vec<f32> = (0..p).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let first = Tensor::from_vec(first, (1, p, 1), &self.dev)?;
        let null = self.null.reshape((1, 1, dh))?.broadcast_mul(&first)?;
        let mem = (h.states.broadcast_mul(&keep)? + null.broadcast_mul(&keep.affine(-1.0, 1.0)?)?)?;
        let valid: Vec<Vec<bool>> =
            h.valid.iter().zip(dropped).map(|(v, &d)| if d { (0..p).map(|i| i == 0).collect() } else { v.clone() }).collect();
        Ok((mem, crate::nn::key_padding_bias(&valid, &self.dev)?))
    }

    fn self_bias(&self, s: usize) -> Result<Option<Tensor>> {
        if self.config.paradigm != Paradigm::Ar {
            return Ok(None);
        }
        Ok(Some(crate::nn::bias_from_fn(s, &self.dev, |q, k| k <= q)?))
    }

    fn trunk(&self, x: Tensor, h: &HiddenBatch, dropped: &[bool]) -> Result<Tensor> {
        let s = x.dim(1)?;
        let (mem, mem_bias) = self.memory(h, dropped)?;
        let x = x.broadcast_add(&self.pos.narrow(0, 0, s)?.unsqueeze(0)?)?;
        let bias = self.self_bias(s)?;
        Ok(self.stack.forward(&x, bias.as_ref(), Some((&mem, Some(&mem_bias))))?)
    }

    fn token_logits(&self, ids: &[Vec<Vec<u32>>], h: &HiddenBatch, dropped: &[bool]) -> Result<Tensor> {
        let emb = self.tokens.as_ref().ok_or_else(|| self.wrong_paradigm("token logits"))?;
        let x = emb.embed(ids, &self.dev)?;
        let (b, s, _) = x.dims3()?;
        let out = apply_linear(&self.out, &self.trunk(x, h, dropped)?)?;
        Ok(out.reshape((b, s, self.config.levels, ()))?)
    }

    fn guided_token_logits(&self, ids: &[Vec<Vec<u32>>], h: &HiddenBatch) -> Result<Tensor> {
        let b = ids.len();
        let cond = self.token_logits(ids, h, &vec![false; b])?;
        self.guide(cond, || self.token_logits(ids, h, &vec![true; b]))
    }

    fn guide(&self, cond: Tensor, uncond: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        let s = self.config.guidance;
        if s == 1.0 {
            return Ok(cond);
        }
        let u = uncond()?;
        Ok((&u + ((cond - &u)? * s)?)?)
    }

    fn wrong_paradigm(&self, what: &str) -> Error {
        Error::Config(format!("{what} is not available for the {} paradigm", self.config.paradigm))
    }

    fn check_grids(&self, grids: &[&TokenGrid]) -> Result<()> {
        let c = &self.config;
        for g in grids {
            if g.levels != c.levels || g.len != c.seq_len || g.codebook_size != c.codebook_size {
                return Err(Error::Config(format!(
                    "token grid {}x{} (K={}) does not match generator {}x{} (K={})",
                    g.levels, g.len, g.codebook_size, c.levels, c.seq_len, c.codebook_size
                )));
            }
        }
        Ok(())
    }

    fn dropout(&self, b: usize, rng: &mut impl Rng) -> Vec<bool> {
        (0..b).map(|_| rng.random::<f64>() < self.config.cond_dropout).collect()
    }

    /// Teacher-forced logits `(B, N1 + L - 1, L, K + 3)`.
    pub fn ar_logits(&self, delayed: &[&DelayedGrid], h: &HiddenBatch) -> Result<Tensor> {
        if self.config.paradigm != Paradigm::Ar {
            return Err(self.wrong_paradigm("ar_logits"));
        }
        let steps = delayed[0].steps();
        let ids = shifted_inputs(delayed, steps, Vocab::new(self.config.codebook_size).bos());
        self.token_logits(&ids, h, &vec![false; delayed.len()])
    }

    fn ar_loss(&self, grids: &[&TokenGrid], h: &HiddenBatch, dropped: &[bool]) -> Result<Tensor> {
        let delayed: Vec<DelayedGrid> = grids.iter().map(|g| delay(g)).collect();
        let refs: Vec<&DelayedGrid> = delayed.iter().collect();
        let ids = shifted_inputs(&refs, refs[0].steps(), Vocab::new(self.config.codebook_size).bos());
        let logits = self.token_logits(&ids, h, dropped)?;
        Ok(delayed_nll(&logits, &refs)?)
    }

    /// Grid ids with every level of masked timesteps set to the mask id `K`.
    pub fn masked_inputs(&self, grids: &[&TokenGrid], masks: &[MaskSet]) -> Vec<Vec<Vec<u32>>> {
        let k = self.config.codebook_size as u32;
        grids
            .iter()
            .zip(masks)
            .map(|(g, m)| {
                (0..g.len).map(|n| (0..g.levels).map(|l| if m.contains(n) { k } else { g.get(l, n) }).collect()).collect()
            })
            .collect()
    }

    /// Logits `(B, N1, L, K)` given grids with masked timesteps hidden.
    pub fn masked_logits(&self, grids: &[&TokenGrid], masks: &[MaskSet], h: &HiddenBatch) -> Result<Tensor> {
        if self.config.paradigm != Paradigm::Masked {
            return Err(self.wrong_paradigm("masked_logits"));
        }
        self.token_logits(&self.masked_inputs(grids, masks), h, &vec![false; grids.len()])
    }

    /// Mean NLL over the `L * |M|` masked cells of each sample.
    pub fn masked_loss(&self, grids: &[&TokenGrid], masks: &[MaskSet], h: &HiddenBatch) -> Result<Tensor> {
        self.masked_loss_with(grids, masks, h, &vec![false; grids.len()])
    }

    fn masked_loss_with(&self, grids: &[&TokenGrid], masks: &[MaskSet], h: &HiddenBatch, dropped: &[bool]) -> Result<Tensor> {
        let logits = self.token_logits(&self.masked_inputs(grids, masks), h, dropped)?;
        Ok(masked_nll(&logits, grids, masks)?)
    }

    fn flow_field(&self, z: &Tensor, tau: &[f64], h: &HiddenBatch, dropped: &[bool]) -> Result<Tensor> {
        let (inp, (t0, t1)) = match (&self.inp, &self.time) {
            (Some(i), Some(t)) => (i, t),
            _ => return Err(self.wrong_paradigm("flow field")),
        };
        let tf: Vec<f32> = tau.iter().map(|&t| t as f32).collect();
        let temb = sinusoidal(&tf, self.config.model_dim, &self.dev)?;
        let temb = apply_linear(t1, &apply_linear(t0, &temb)?.gelu()?)?.unsqueeze(1)?;
        let x = apply_linear(inp, z)?.broadcast_add(&temb)?;
        Ok(apply_linear(&self.out, &self.trunk(x, h, dropped)?)?)
    }

    /// Predicted velocity target `eps - z` at `(z_tau, tau)`.
    pub fn velocity(&self, z_tau: &Tensor, tau: &[f64], h: &HiddenBatch) -> Result<Tensor> {
        let b = z_tau.dim(0)?;
        let cond = self.flow_field(z_tau, tau, h, &vec![false; b])?;
        self.guide(cond, || self.flow_field(z_tau, tau, h, &vec![true; b]))
    }

    fn fm_loss(&self, z: &Tensor, h: &HiddenBatch, dropped: &[bool], rng: &mut impl Rng) -> Result<Tensor> {
        let c = &self.config;
        let b = z.dim(0)?;
        if z.dims() != [b, c.seq_len, c.value_dim] {
            return Err(Error::Config(format!("flow target {:?} != (B, {}, {})", z.dims(), c.seq_len, c.value_dim)));
        }
        let tau: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let eps = gaussian(z.dims(), rng, &self.dev)?;
        let z_tau = fm_interpolate(z, &eps, &tau)?;
        let pred = self.flow_field(&z_tau, &tau, h, dropped)?;
        Ok(fm_objective(&pred, &(eps - z)?)?)
    }

    /// Training loss for one batch, with condition dropout applied.
    pub fn loss(&self, target: Target<'_>, h: &HiddenBatch, rng: &mut impl Rng) -> Result<Tensor> {
        let b = h.valid.len();
        let dropped = self.dropout(b, rng);
        match (self.config.paradigm, target) {
            (Paradigm::Ar, Target::Tokens(g)) => {
                self.check_grids(g)?;
                self.ar_loss(g, h, &dropped)
            }
            (Paradigm::Masked, Target::Tokens(g)) => {
                self.check_grids(g)?;
                let masks = g
                    .iter()
                    .map(|_| {
                        let r = sample_mask_ratio(rng);
                        sample_structured_mask(self.config.seq_len, r, rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.masked_loss_with(g, &masks, h, &dropped)
            }
            (Paradigm::FmRaw | Paradigm::FmLatent, Target::Values(z)) => self.fm_loss(z, h, &dropped, rng),
            (p, _) => Err(Error::Config(format!("target kind does not match the {p} paradigm"))),
        }
    }

    pub fn train_step(&mut self, target: Target<'_>, h: &HiddenBatch, opt: &mut Optim, rng: &mut impl Rng) -> Result<f64> {
        let loss = self.loss(target, h, rng)?;
        opt.backward_step(&loss)?;
        Ok(loss.to_scalar::<f32>()? as f64)
    }

    pub fn ar_generate(&self, h: &HiddenBatch, sampling: Sampling, rng: &mut impl Rng) -> Result<Vec<TokenGrid>> {
        if self.config.paradigm != Paradigm::Ar {
            return Err(self.wrong_paradigm("ar_generate"));
        }
        let (levels, k, len) = (self.config.levels, self.config.codebook_size, self.config.seq_len);
        let vocab = Vocab::new(k);
        let steps = delayed_len(len, levels);
        let n = h.valid.len();
        let mut cells = vec![vec![vocab.pad(); levels * steps]; n];
        for p in 0..steps {
            let ids: Vec<Vec<Vec<u32>>> = cells
                .iter()
                .map(|c| {
                    (0..=p)
                        .map(|q| (0..levels).map(|l| if q == 0 { vocab.bos() } else { c[l * steps + q - 1] }).collect())
                        .collect()
                })
                .collect();
            let logits = self.guided_token_logits(&ids, h)?.i((.., p))?.to_vec3::<f32>()?;
            for (b, cell) in cells.iter_mut().enumerate() {
                for l in 0..levels {
                    if is_valid(l, p, len) {
                        cell[l * steps + p] = pick(&logits[b][l], k, sampling, rng).0;
                    }
                }
            }
        }
        cells
            .into_iter()
            .map(|tokens| Ok(undelay(&DelayedGrid { levels, len, codebook_size: k, tokens })?))
            .collect()
    }

    /// Iterative parallel decoding from a fully masked grid.
    pub fn masked_generate(
        &self,
        h: &HiddenBatch,
        iters: usize,
        sampling: Sampling,
        rng: &mut impl Rng,
    ) -> Result<(Vec<TokenGrid>, Vec<DecodeTrace>)> {
        if self.config.paradigm != Paradigm::Masked {
            return Err(self.wrong_paradigm("masked_generate"));
        }
        if iters == 0 {
            return Err(Error::Config("masked decoding needs at least one iteration".into()));
        }
        let (levels, k, n1) = (self.config.levels, self.config.codebook_size, self.config.seq_len);
        let b = h.valid.len();
        let mask_id = k as u32;
        let mut ids = vec![vec![vec![mask_id; levels]; n1]; b];
        let mut traces = vec![Vec::with_capacity(iters); b];
        for i in 0..iters {
            let logits = self.guided_token_logits(&ids, h)?.to_vec3_batch()?;
            let keep_masked = remaining_masked(n1, i, iters);
            for (s, grid) in ids.iter_mut().enumerate() {
                let mut candidates: Vec<(f64, usize, Vec<u32>)> = Vec::new();
                for (n, step) in grid.iter().enumerate() {
                    if step[0] != mask_id {
                        continue;
                    }
                    let mut conf = f64::INFINITY;
                    let mut toks = Vec::with_capacity(levels);
                    for l in 0..levels {
                        let (t, p) = pick(&logits[s][n][l], k, sampling, rng);
                        conf = conf.min(p);
                        toks.push(t);
                    }
                    candidates.push((conf, n, toks));
                }
                let commit = candidates.len().saturating_sub(keep_masked);
                candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                for (_, n, toks) in candidates.into_iter().take(commit) {
                    grid[n] = toks;
                }
                traces[s].push(grid.iter().filter(|st| st[0] != mask_id).count());
            }
        }
        let grids = ids
            .into_iter()
            .map(|g| {
                let tokens = (0..levels).flat_map(|l| g.iter().map(move |st| st[l])).collect();
                Ok(TokenGrid::new(levels, n1, k, tokens)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((grids, traces))
    }

    /// Normalised samples `(B, seq_len, value_dim)` integrated from Gaussian noise.
    pub fn fm_sample(&self, h: &HiddenBatch, steps: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if self.config.paradigm.is_token() {
            return Err(self.wrong_paradigm("fm_sample"));
        }
        let b = h.valid.len();
        let eps = gaussian(&[b, self.config.seq_len, self.config.value_dim], rng, &self.dev)?;
        euler_integrate(eps, steps, |z, tau| self.velocity(z, &vec![tau; b], h))
    }

    /// Undoes target normalisation, returning one row-major buffer per sample.
    pub fn denormalize(&self, x: &Tensor) -> Result<Vec<Vec<f32>>> {
        let b = x.dim(0)?;
        (0..b).map(|i| Ok(self.stats.denormalize(&x.i(i)?.flatten_all()?.to_vec1::<f32>()?))).collect()
    }

    pub fn normalize(&self, rows: &[Vec<f32>]) -> Result<Tensor> {
        let c = &self.config;
        let v: Vec<f32> = rows.iter().flat_map(|r| self.stats.normalize(r)).collect();
        Ok(Tensor::from_vec(v, (rows.len(), c.seq_len, c.value_dim), &self.dev)?)
    }

    /// Copies a token embedding table of matching shape, e.g. from the stage-I reasoner.
    pub fn tie_token_table(&self, source: &Tensor) -> Result<()> {
        let name = "level_tokens";
        let var = self
            .store
            .named()
            .into_iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| self.wrong_paradigm("token tying"))?
            .1;
        if var.dims() != source.dims() {
            return Err(Error::Config(format!("token table {:?} vs {:?}", var.dims(), source.dims())));
        }
        var.set(source)?;
        Ok(())
    }

    pub fn weight_hash(&self) -> Result<String> {
        Ok(self.store.weight_hash()?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(KIND, &self.config)?;
        for (name, var) in self.store.named() {
            c.insert(format!("model.{name}"), var.as_tensor());
        }
        insert_stats(&mut c, &self.stats, &self.dev)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND)?;
        let g = Self::new(c.config()?, Some(read_stats(c)?), 0)?;
        g.store.load_from(&c.scoped("model"))?;
        Ok(g)
    }
}

/// Mean NLL over the masked cells of `(B, N1, L, K)` logits.
pub fn masked_nll(logits: &Tensor, grids: &[&TokenGrid], masks: &[MaskSet]) -> candle_core::Result<Tensor> {
    let (_, n1, l, k) = logits.dims4()?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, (g, m)) in grids.iter().zip(masks).enumerate() {
        for &n in &m.indices {
            for lev in 0..l {
                rows.push(((b * n1 + n) * l + lev) as u32);
                targets.push(g.get(lev, n));
            }
        }
    }
    cell_nll(&logits.reshape(((), k))?, rows, targets)
}

trait Batch3 {
    fn to_vec3_batch(&self) -> Result<Vec<Vec<Vec<Vec<f32>>>>>;
}

impl Batch3 for Tensor {
    fn to_vec3_batch(&self) -> Result<Vec<Vec<Vec<Vec<f32>>>>> {
        (0..self.dim(0)?).map(|i| Ok(self.i(i)?.to_vec3::<f32>()?)).collect()
    }
}
