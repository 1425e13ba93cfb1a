//! Contrastive retrieval network that supplies the embedding spaces for FID,
//! R-precision and MM-distance.
//!
//! The motion branch patchifies frames and runs a six-layer encoder; the
//! condition branch fuses the image feature and instruction tokens through four
//! layers. Both mean-pool over valid slots and project to unit-norm vectors.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Init, Linear};
use egomotion_core::{ConditionBundle, HeadCentricSequence};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{feature_batch, FeatureStats};
use crate::error::{Error, Result};
use crate::nn::{apply_linear, key_padding_bias, linear, table, SeededStore, Stack};
use crate::optim::Optim;
use crate::rvq::{insert_stats, read_stats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    pub motion_layers: usize,
    pub fusion_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Frames per motion patch.
    pub patch: usize,
    pub feature_width: usize,
    pub max_frames: usize,
    pub image_dim: usize,
    pub text_vocab: usize,
    pub max_text_len: usize,
    pub init_temperature: f64,
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.motion_layers,
            self.fusion_layers,
            self.model_dim,
            self.heads,
            self.embed_dim,
            self.patch,
            self.feature_width,
            self.max_frames,
            self.image_dim,
            self.text_vocab,
            self.max_text_len,
        ];
        if dims.contains(&0) || self.model_dim % self.heads != 0 || !(self.init_temperature > 0.0) {
            return Err(Error::Config(format!("invalid evaluator config {self:?}")));
        }
        Ok(())
    }

    fn max_patches(&self) -> usize {
        self.max_frames.div_ceil(self.patch)
    }
}

pub struct Evaluator {
    pub config: EvaluatorConfig,
    pub store: SeededStore,
    pub stats: FeatureStats,
    patch_in: Linear,
    motion_pos: Tensor,
    motion: Stack,
    motion_out: Linear,
    img: Linear,
    text: Tensor,
    cond_pos: Tensor,
    fusion: Stack,
    cond_out: Linear,
    log_temp: Tensor,
    dev: Device,
}

pub const KIND: &str = "evaluator";

/// Mean over slots where `valid` holds; `x` is `(B, S, D)`.
fn masked_mean(x: &Tensor, valid: &[Vec<bool>], dev: &Device) -> Result<Tensor> {
    let (b, s, _) = x.dims3()?;
    let w: Vec<f32> = valid.iter().flat_map(|v| v.iter().map(|&ok| if ok { 1.0 } else { 0.0 })).collect();
    let w = Tensor::from_vec(w, (b, s, 1), dev)?;
    let count = w.sum(1)?;
    Ok(x.broadcast_mul(&w)?.sum(1)?.broadcast_div(&count)?)
}

fn unit(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
    Ok(x.broadcast_div(&norm)?)
}

fn rows_f64(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(x.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Symmetric cross-entropy over the similarity matrix of matched pairs.
pub fn info_nce(motion: &Tensor, cond: &Tensor, log_temp: &Tensor) -> candle_core::Result<Tensor> {
    let b = motion.dim(0)?;
    let logits = motion.matmul(&cond.t()?)?.broadcast_div(&log_temp.exp()?)?;
    let diag = Tensor::arange(0u32, b as u32, motion.device())?;
    let a = candle_nn::loss::cross_entropy(&logits, &diag)?;
    let c = candle_nn::loss::cross_entropy(&logits.t()?.contiguous()?, &diag)?;
    (a + c)? / 2.0
}

impl Evaluator {
    pub fn new(config: EvaluatorConfig, stats: FeatureStats, seed: u64) -> Result<Self> {
        config.validate()?;
        if stats.width() != config.feature_width {
            return Err(Error::Config(format!("stats width {} != {}", stats.width(), config.feature_width)));
        }
        let dev = Device::Cpu;
        let store = SeededStore::new(seed);
        let d = config.model_dim;
        let parts = {
            let vb = store.builder(DType::F32, &dev);
            (
                linear(config.patch * config.feature_width, d, vb.pp("patch_in"))?,
                table(config.max_patches(), d, "motion_pos", &vb)?,
                Stack::new(config.motion_layers, d, config.heads, None, vb.pp("motion"))?,
                linear(d, config.embed_dim, vb.pp("motion_out"))?,
                linear(config.image_dim, d, vb.pp("img"))?,
                table(config.text_vocab, d, "text", &vb)?,
                table(config.max_text_len + 1, d, "cond_pos", &vb)?,
                Stack::new(config.fusion_layers, d, config.heads, None, vb.pp("fusion"))?,
                linear(d, config.embed_dim, vb.pp("cond_out"))?,
                vb.get_with_hints(1, "log_temp", Init::Const(config.init_temperature.ln()))?,
            )
        };
        let (patch_in, motion_pos, motion, motion_out, img, text, cond_pos, fusion, cond_out, log_temp) = parts;
        Ok(Self {
            config,
            store,
            stats,
            patch_in,
            motion_pos,
            motion,
            motion_out,
            img,
            text,
            cond_pos,
            fusion,
            cond_out,
            log_temp,
            dev,
        })
    }

    pub fn temperature(&self) -> Result<f64> {
        Ok(self.log_temp.exp()?.to_vec1::<f32>()?[0] as f64)
    }

    /// Unit-norm motion embeddings `(B, embed_dim)`; sequences must share a length.
    pub fn motion_tensor(&self, seqs: &[&HeadCentricSequence]) -> Result<Tensor> {
        let c = &self.config;
        let n = seqs[0].num_frames();
        if n > c.max_frames {
            return Err(Error::Config(format!("{n} frames exceed evaluator limit {}", c.max_frames)));
        }
        let x = feature_batch(seqs, &self.stats, &self.dev)?;
        let (x, _) = crate::conv::pad_to_multiple(&x, c.patch)?;
        let (b, np, w) = x.dims3()?;
        let patches = np / c.patch;
        let x = x.reshape((b, patches, c.patch * w))?;
        let h = apply_linear(&self.patch_in, &x)?.broadcast_add(&self.motion_pos.narrow(0, 0, patches)?.unsqueeze(0)?)?;
        let h = self.motion.forward(&h, None, None)?;
        unit(&apply_linear(&self.motion_out, &h.mean(1)?)?)
    }

    pub fn condition_tensor(&self, bundles: &[&ConditionBundle]) -> Result<Tensor> {
        let c = &self.config;
        let s = c.max_text_len + 1;
        let b = bundles.len();
        let mut ids = Vec::with_capacity(b * s);
        let mut valid = Vec::with_capacity(b);
        for bd in bundles {
            if bd.image_feature.len() != c.image_dim || bd.instruction.len() > c.max_text_len {
                return Err(Error::Config("condition does not fit the evaluator".into()));
            }
            if bd.instruction.iter().any(|&w| w as usize >= c.text_vocab) {
                return Err(Error::Config("instruction token outside evaluator vocabulary".into()));
            }
            ids.push(0u32);
            ids.extend(bd.instruction.iter().map(|&w| w as u32));
            ids.extend(std::iter::repeat_n(0u32, s - 1 - bd.instruction.len()));
            valid.push((0..s).map(|i| i <= bd.instruction.len()).collect::<Vec<bool>>());
        }
        let d = c.model_dim;
        let text = self.text.index_select(&Tensor::from_vec(ids, b * s, &self.dev)?, 0)?.reshape((b, s, d))?;
        let img: Vec<f32> = bundles.iter().flat_map(|bd| bd.image_feature.iter().copied()).collect();
        let img = apply_linear(&self.img, &Tensor::from_vec(img, (b, 1, c.image_dim), &self.dev)?)?;
        let x = Tensor::cat(&[img, text.narrow(1, 1, s - 1)?], 1)?.broadcast_add(&self.cond_pos.unsqueeze(0)?)?;
        let bias = key_padding_bias(&valid, &self.dev)?;
        let h = self.fusion.forward(&x, Some(&bias), None)?;
        unit(&apply_linear(&self.cond_out, &masked_mean(&h, &valid, &self.dev)?)?)
    }

    pub fn embed_motions(&self, seqs: &[&HeadCentricSequence], batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch.max(1)) {
            out.extend(rows_f64(&self.motion_tensor(chunk)?)?);
        }
        Ok(out)
    }

    pub fn embed_conditions(&self, bundles: &[&ConditionBundle], batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(bundles.len());
        for chunk in bundles.chunks(batch.max(1)) {
            out.extend(rows_f64(&self.condition_tensor(chunk)?)?);
        }
        Ok(out)
    }

    pub fn loss(&self, seqs: &[&HeadCentricSequence], bundles: &[&ConditionBundle]) -> Result<Tensor> {
        if seqs.len() != bundles.len() || seqs.len() < 2 {
            return Err(Error::Config("contrastive loss needs at least two matched pairs".into()));
        }
        Ok(info_nce(&self.motion_tensor(seqs)?, &self.condition_tensor(bundles)?, &self.log_temp)?)
    }

    pub fn train_step(&mut self, seqs: &[&HeadCentricSequence], bundles: &[&ConditionBundle], opt: &mut Optim) -> Result<f64> {
        let loss = self.loss(seqs, bundles)?;
        opt.backward_step(&loss)?;
        Ok(loss.to_scalar::<f32>()? as f64)
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
        let e = Self::new(c.config()?, read_stats(c)?, 0)?;
        e.store.load_from(&c.scoped("model"))?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests;
