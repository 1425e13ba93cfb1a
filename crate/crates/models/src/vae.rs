//! Continuous motion VAE providing the latent space for latent flow matching.

use candle_core::{DType, Device, Tensor};
use egomotion_core::HeadCentricSequence;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::conv::{pad_to_multiple, CodecShape, Decoder, Encoder};
use crate::data::{feature_batch, unbatch, FeatureStats};
use crate::error::{Error, Result};
use crate::nn::SeededStore;
use crate::optim::Optim;
use crate::rvq::{insert_stats, read_stats, LatentMap};

pub type LatentSeq = LatentMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub temporal_downsample: usize,
    pub kl_weight: f64,
    pub hidden: usize,
    pub res_blocks: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_dim: 16, temporal_downsample: 2, kl_weight: 1e-4, hidden: 128, res_blocks: 2 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.temporal_downsample < 1 || self.hidden < 1 || self.kl_weight < 0.0 {
            return Err(Error::Config(format!("invalid VAE config {self:?}")));
        }
        Ok(())
    }
}

/// `-1/2 (1 + logvar - mu^2 - exp(logvar))`, averaged over elements.
pub fn kl_term(mu: &Tensor, logvar: &Tensor) -> candle_core::Result<Tensor> {
    let inner = ((logvar + 1.0)? - mu.sqr()?)? - logvar.exp()?;
    inner?.mean_all()? * -0.5
}

/// Mean absolute reconstruction error plus `kl_weight * KL(q || N(0, I))`.
pub fn vae_loss(
    x: &Tensor,
    xhat: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    kl_weight: f64,
) -> candle_core::Result<Tensor> {
    (x - xhat)?.abs()?.mean_all()? + (kl_term(mu, logvar)? * kl_weight)?
}

/// Reparameterised sample `mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: &LatentSeq, logvar: &LatentSeq, eps: &[f64]) -> Result<LatentSeq> {
    if mu.values.len() != logvar.values.len() || eps.len() != mu.values.len() {
        return Err(Error::Config("mu, logvar and noise must share a shape".into()));
    }
    let v = mu.values.iter().zip(&logvar.values).zip(eps).map(|((m, lv), e)| m + (lv / 2.0).exp() * e).collect();
    LatentMap::new(mu.rows, mu.dim, v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeStepStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

pub struct MotionVae {
    pub config: VaeConfig,
    pub num_joints: usize,
    pub stats: FeatureStats,
    pub store: SeededStore,
    enc: Encoder,
    dec: Decoder,
    dev: Device,
}

pub const KIND: &str = "vae";

#[derive(Serialize, Deserialize)]
struct VaeMeta {
    config: VaeConfig,
    num_joints: usize,
}

impl MotionVae {
    pub fn new(config: VaeConfig, num_joints: usize, stats: FeatureStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let width = 3 * num_joints + 8;
        if stats.width() != width {
            return Err(Error::Config(format!("stats width {} vs feature width {width}", stats.width())));
        }
        let dev = Device::Cpu;
        let shape = CodecShape {
            input_dim: width,
            hidden: config.hidden,
            latent_dim: config.latent_dim,
            downsample: config.temporal_downsample,
            res_blocks: config.res_blocks,
        };
        let store = SeededStore::new(seed);
        let (enc, dec) = {
            let vb = store.builder(DType::F32, &dev);
            (Encoder::new(&shape, 2 * config.latent_dim, vb.pp("enc"))?, Decoder::new(&shape, vb.pp("dec"))?)
        };
        Ok(Self { config, num_joints, stats, store, enc, dec, dev })
    }

    fn posterior_tensors(&self, seqs: &[&HeadCentricSequence]) -> Result<(Tensor, Tensor, Tensor, usize)> {
        let x = feature_batch(seqs, &self.stats, &self.dev)?;
        let (x, pad) = pad_to_multiple(&x, self.config.temporal_downsample)?;
        let h = self.enc.forward(&x)?;
        let d = self.config.latent_dim;
        let mu = h.narrow(2, 0, d)?;
        let logvar = h.narrow(2, d, d)?.clamp(-10f32, 10f32)?;
        Ok((x, mu, logvar, pad))
    }

    pub fn encode_posterior(&self, seq: &HeadCentricSequence) -> Result<(LatentSeq, LatentSeq)> {
        Ok(self.encode_posterior_batch(&[seq])?.remove(0))
    }

    pub fn encode_posterior_batch(&self, seqs: &[&HeadCentricSequence]) -> Result<Vec<(LatentSeq, LatentSeq)>> {
        let (_, mu, logvar, _) = self.posterior_tensors(seqs)?;
        let (b, n1, d) = mu.dims3()?;
        let to_map = |t: &Tensor| -> Result<LatentSeq> {
            LatentMap::new(n1, d, t.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from).collect())
        };
        (0..b).map(|i| Ok((to_map(&mu.get(i)?)?, to_map(&logvar.get(i)?)?))).collect()
    }

    pub fn decode_batch(&self, zs: &[LatentSeq], frames: usize) -> Result<Vec<HeadCentricSequence>> {
        let (n1, d) = (zs[0].rows, zs[0].dim);
        if d != self.config.latent_dim || zs.iter().any(|z| z.rows != n1 || z.dim != d) {
            return Err(Error::Config("latents must share shape and match latent_dim".into()));
        }
        let v: Vec<f32> = zs.iter().flat_map(|z| z.values.iter().map(|&x| x as f32)).collect();
        let x = self.dec.forward(&Tensor::from_vec(v, (zs.len(), n1, d), &self.dev)?)?;
        let frames = frames.min(x.dim(1)?);
        Ok(unbatch(&x.narrow(1, 0, frames)?, &self.stats, self.num_joints)?)
    }

    pub fn decode(&self, z: &LatentSeq, frames: usize) -> Result<HeadCentricSequence> {
        Ok(self.decode_batch(std::slice::from_ref(z), frames)?.remove(0))
    }

    pub fn train_step(
        &mut self,
        batch: &[&HeadCentricSequence],
        opt: &mut Optim,
        rng: &mut impl Rng,
    ) -> Result<VaeStepStats> {
        let (x, mu, logvar, pad) = self.posterior_tensors(batch)?;
        let eps: Vec<f32> = (0..mu.elem_count()).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Tensor::from_vec(eps, mu.dims(), &self.dev)?;
        let z = (&mu + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
        let xhat = self.dec.forward(&z)?;
        let n = x.dim(1)? - pad;
        let (xc, xh) = (x.narrow(1, 0, n)?, xhat.narrow(1, 0, n)?);
        let recon = (&xc - &xh)?.abs()?.mean_all()?;
        let kl = kl_term(&mu, &logvar)?;
        let loss = (&recon + (&kl * self.config.kl_weight)?)?;
        opt.backward_step(&loss)?;
        Ok(VaeStepStats {
            loss: loss.to_scalar::<f32>()? as f64,
            recon: recon.to_scalar::<f32>()? as f64,
            kl: kl.to_scalar::<f32>()? as f64,
        })
    }

    /// Mean absolute error of `decode(mu)` in normalised feature units.
    pub fn recon_error(&self, seqs: &[&HeadCentricSequence]) -> Result<f64> {
        let frames = seqs[0].num_frames();
        let mus: Vec<LatentSeq> = self.encode_posterior_batch(seqs)?.into_iter().map(|p| p.0).collect();
        let rec = self.decode_batch(&mus, frames)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (a, b) in seqs.iter().zip(&rec) {
            let (na, nb) = (self.stats.normalize(&a.data), self.stats.normalize(&b.data));
            sum += na.iter().zip(&nb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
            n += na.len();
        }
        Ok(sum / n as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(KIND, &VaeMeta { config: self.config, num_joints: self.num_joints })?;
        for (name, var) in self.store.named() {
            c.insert(format!("model.{name}"), var.as_tensor());
        }
        insert_stats(&mut c, &self.stats, &self.dev)?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND)?;
        let meta: VaeMeta = c.config()?;
        let v = Self::new(meta.config, meta.num_joints, read_stats(c)?, 0)?;
        v.store.load_from(&c.scoped("model"))?;
        Ok(v)
    }
}
