//! Stage-I reasoner: a causal transformer over a condition prefix followed by
//! delayed multi-level motion tokens, with one prediction head per level.
//!
//! Sequence layout, with `P = max_text_len + 2` prefix slots:
//!
//! ```text
//! [image, t_1 .. t_T, pose, <unused> x (P - T - 2)] [BOS, step_0, .., step_{S-2}]
//! ```
//!
//! Prefix slots see every real prefix slot. Motion slot `p` sees the prefix and
//! motion slots `<= p`, and its output predicts delayed step `p`.

use candle_core::{DType, Device, IndexOp, Tensor, D};
use candle_nn::{Linear, VarBuilder};
use egomotion_core::tokens::{delay, delayed_len, is_valid, undelay, DelayedGrid, TokenGrid, Vocab};
use egomotion_core::ConditionBundle;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{apply_linear, linear, table, SeededStore, Stack, NEG_INF};
use crate::optim::Optim;
use crate::sampling::{pick, Sampling};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub text_vocab: usize,
    pub max_text_len: usize,
    pub image_dim: usize,
    pub pose_dim: usize,
    /// Longest delayed sequence, `N1 + L - 1`.
    pub max_steps: usize,
}

impl ReasonerConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.codebook_size)
    }

    pub fn prefix_slots(&self) -> usize {
        self.max_text_len + 2
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.model_dim,
            self.heads,
            self.levels,
            self.codebook_size,
            self.text_vocab,
            self.image_dim,
            self.pose_dim,
            self.max_steps,
        ];
        if dims.contains(&0) || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!("invalid reasoner config {self:?}")));
        }
        Ok(())
    }
}

/// Final-layer states over the condition prefix, `rows x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl HiddenStates {
    pub fn distance(&self, other: &HiddenStates) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// Batched prefix states: `(B, P, dim)` plus per-slot validity.
#[derive(Debug, Clone)]
pub struct HiddenBatch {
    pub states: Tensor,
    pub valid: Vec<Vec<bool>>,
}

impl HiddenBatch {
    pub fn detach(&self) -> Self {
        Self { states: self.states.detach(), valid: self.valid.clone() }
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self { states: self.states.zeros_like()?, valid: self.valid.clone() })
    }

    pub fn from_states(hs: &[HiddenStates], slots: usize, dev: &Device) -> Result<Self> {
        let dim = hs[0].dim;
        let mut v = Vec::with_capacity(hs.len() * slots * dim);
        let mut valid = Vec::with_capacity(hs.len());
        for h in hs {
            if h.rows > slots || h.dim != dim {
                return Err(Error::Config(format!("hidden states {}x{} exceed {slots} slots", h.rows, h.dim)));
            }
            v.extend_from_slice(&h.values);
            v.extend(std::iter::repeat_n(0.0, (slots - h.rows) * dim));
            valid.push((0..slots).map(|i| i < h.rows).collect());
        }
        Ok(Self { states: Tensor::from_vec(v, (hs.len(), slots, dim), dev)?, valid })
    }

    pub fn to_states(&self) -> Result<Vec<HiddenStates>> {
        let (b, _, dim) = self.states.dims3()?;
        (0..b)
            .map(|i| {
                let rows = self.valid[i].iter().filter(|&&v| v).count();
                let values = self.states.i(i)?.narrow(0, 0, rows)?.flatten_all()?.to_vec1::<f32>()?;
                Ok(HiddenStates { rows, dim, values })
            })
            .collect()
    }
}

/// Per-level token tables summed into one slot per delayed step.
#[derive(Debug, Clone)]
pub(crate) struct LevelEmbedding {
    table: Tensor,
    levels: usize,
    vocab: usize,
}

impl LevelEmbedding {
    pub(crate) fn new(levels: usize, vocab: usize, dim: usize, vb: &VarBuilder) -> candle_core::Result<Self> {
        Ok(Self { table: table(levels * vocab, dim, "level_tokens", vb)?, levels, vocab })
    }

    /// `ids[b][p][l]` → `(B, S, dim)`.
    pub(crate) fn embed(&self, ids: &[Vec<Vec<u32>>], dev: &Device) -> candle_core::Result<Tensor> {
        let b = ids.len();
        let s = ids[0].len();
        let flat: Vec<u32> = ids
            .iter()
            .flat_map(|seq| seq.iter().flat_map(|step| step.iter().enumerate().map(|(l, &t)| (l * self.vocab) as u32 + t)))
            .collect();
        let idx = Tensor::from_vec(flat, b * s * self.levels, dev)?;
        let d = self.table.dim(1)?;
        self.table.index_select(&idx, 0)?.reshape((b, s, self.levels, d))?.sum(2)
    }
}

/// Inputs for delayed steps: BOS then the previous step's tokens, `S` slots.
pub(crate) fn shifted_inputs(grids: &[&DelayedGrid], steps: usize, bos: u32) -> Vec<Vec<Vec<u32>>> {
    grids
        .iter()
        .map(|g| {
            (0..steps)
                .map(|p| (0..g.levels).map(|l| if p == 0 { bos } else { g.get(l, p - 1) }).collect())
                .collect()
        })
        .collect()
}

/// Mean negative log-likelihood over the supervised cells of delayed grids.
///
/// `logits` is `(B, S, L, V)`. Cells outside the valid staircase never enter
/// the computation.
pub fn delayed_nll(logits: &Tensor, grids: &[&DelayedGrid]) -> candle_core::Result<Tensor> {
    let (b, s, l, v) = logits.dims4()?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, g) in grids.iter().enumerate().take(b) {
        for p in 0..s.min(g.steps()) {
            for lev in 0..l {
                if is_valid(lev, p, g.len) {
                    rows.push(((i * s + p) * l + lev) as u32);
                    targets.push(g.get(lev, p));
                }
            }
        }
    }
    cell_nll(&logits.reshape((b * s * l, v))?, rows, targets)
}

/// Mean NLL of `targets` at the listed rows of a `(cells, V)` logit matrix.
pub(crate) fn cell_nll(flat: &Tensor, rows: Vec<u32>, targets: Vec<u32>) -> candle_core::Result<Tensor> {
    if rows.is_empty() {
        candle_core::bail!("no supervised cells");
    }
    let dev = flat.device();
    let n = rows.len();
    let sel = flat.index_select(&Tensor::from_vec(rows, n, dev)?, 0)?;
    let logp = candle_nn::ops::log_softmax(&sel, D::Minus1)?;
    let tgt = Tensor::from_vec(targets, (n, 1), dev)?;
    logp.gather(&tgt, 1)?.mean_all()?.neg()
}

pub struct Reasoner {
    pub config: ReasonerConfig,
    pub store: SeededStore,
    img: Linear,
    pose: Linear,
    text: Tensor,
    segment: Tensor,
    pos: Tensor,
    tokens: LevelEmbedding,
    stack: Stack,
    heads: Linear,
    dev: Device,
}

pub const KIND: &str = "reasoner";

const SEG_IMAGE: usize = 0;
const SEG_TEXT: usize = 1;
const SEG_POSE: usize = 2;
const SEG_MOTION: usize = 3;

impl Reasoner {
    pub fn new(config: ReasonerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dev = Device::Cpu;
        let store = SeededStore::new(seed);
        let d = config.model_dim;
        let vocab = config.vocab().size();
        let parts = {
            let vb = store.builder(DType::F32, &dev);
            (
                linear(config.image_dim, d, vb.pp("img"))?,
                linear(config.pose_dim, d, vb.pp("pose"))?,
                table(config.text_vocab, d, "text", &vb)?,
                table(4, d, "segment", &vb)?,
                table(config.prefix_slots() + config.max_steps, d, "pos", &vb)?,
                LevelEmbedding::new(config.levels, vocab, d, &vb)?,
                Stack::new(config.layers, d, config.heads, None, vb.pp("stack"))?,
                linear(d, config.levels * vocab, vb.pp("heads"))?,
            )
        };
        let (img, pose, text, segment, pos, tokens, stack, heads) = parts;
        Ok(Self { config, store, img, pose, text, segment, pos, tokens, stack, heads, dev })
    }

    pub fn device(&self) -> &Device {
        &self.dev
    }

    /// Prefix embeddings `(B, P, dim)` and slot validity.
    pub fn embed_condition(&self, bundles: &[&ConditionBundle]) -> Result<(Tensor, Vec<Vec<bool>>)> {
        let c = &self.config;
        let p = c.prefix_slots();
        for b in bundles {
            b.validate(c.image_dim, c.max_text_len, c.pose_dim)?;
            if let Some(&w) = b.instruction.iter().find(|&&w| w as usize >= c.text_vocab) {
                return Err(Error::Config(format!("instruction token {w} outside vocabulary of {}", c.text_vocab)));
            }
        }
        let n = bundles.len();
        let img: Vec<f32> = bundles.iter().flat_map(|b| b.image_feature.iter().copied()).collect();
        let img = apply_linear(&self.img, &Tensor::from_vec(img, (n, 1, c.image_dim), &self.dev)?)?;
        let pose: Vec<f32> = bundles.iter().flat_map(|b| b.init_pose.iter().copied()).collect();
        let pose = apply_linear(&self.pose, &Tensor::from_vec(pose, (n, 1, c.pose_dim), &self.dev)?)?;

        // Slot i of sample b: image, text, pose or unused.
        let mut text_ids = Vec::with_capacity(n * p);
        let mut seg_ids = Vec::with_capacity(n * p);
        let mut valid = Vec::with_capacity(n);
        let mut kinds = Vec::with_capacity(n * p);
        for b in bundles {
            let t = b.instruction.len();
            let mut v = Vec::with_capacity(p);
            for i in 0..p {
                let (kind, tid, ok) = if i == 0 {
                    (SEG_IMAGE, 0, true)
                } else if i <= t {
                    (SEG_TEXT, b.instruction[i - 1] as u32, true)
                } else if i == t + 1 {
                    (SEG_POSE, 0, true)
                } else {
                    (SEG_TEXT, 0, false)
                };
                kinds.push(kind);
                text_ids.push(tid);
                seg_ids.push(kind as u32);
                v.push(ok);
            }
            valid.push(v);
        }
        let d = c.model_dim;
        let text = self.text.index_select(&Tensor::from_vec(text_ids, n * p, &self.dev)?, 0)?.reshape((n, p, d))?;
        let sel = |k: usize| -> candle_core::Result<Tensor> {
            let m: Vec<f32> = kinds.iter().map(|&x| if x == k { 1.0 } else { 0.0 }).collect();
            Tensor::from_vec(m, (n, p, 1), &self.dev)
        };
        let base = (text.broadcast_mul(&sel(SEG_TEXT)?)?
            + img.broadcast_mul(&sel(SEG_IMAGE)?)?
            + pose.broadcast_mul(&sel(SEG_POSE)?)?)?;
        let seg = self.segment.index_select(&Tensor::from_vec(seg_ids, n * p, &self.dev)?, 0)?.reshape((n, p, d))?;
        let pos = self.pos.narrow(0, 0, p)?.unsqueeze(0)?;
        Ok(((base + seg)?.broadcast_add(&pos)?, valid))
    }

    fn attention_bias(&self, valid: &[Vec<bool>], motion: usize) -> Result<Tensor> {
        let p = self.config.prefix_slots();
        let s = p + motion;
        let mut v = Vec::with_capacity(valid.len() * s * s);
        for val in valid {
            for q in 0..s {
                for k in 0..s {
                    let ok = if k < p { val[k] } else { q >= k };
                    v.push(if ok { 0.0 } else { NEG_INF });
                }
            }
        }
        Ok(Tensor::from_vec(v, (valid.len(), 1, s, s), &self.dev)?)
    }

    fn motion_inputs(&self, ids: &[Vec<Vec<u32>>]) -> Result<Tensor> {
        let p = self.config.prefix_slots();
        let s = ids[0].len();
        let emb = self.tokens.embed(ids, &self.dev)?;
        let seg = self.segment.i(SEG_MOTION)?.reshape((1, 1, self.config.model_dim))?;
        let pos = self.pos.narrow(0, p, s)?.unsqueeze(0)?;
        Ok(emb.broadcast_add(&seg)?.broadcast_add(&pos)?)
    }

    fn run(&self, bundles: &[&ConditionBundle], ids: &[Vec<Vec<u32>>]) -> Result<Tensor> {
        let (prefix, valid) = self.embed_condition(bundles)?;
        let s = ids[0].len();
        if s > self.config.max_steps {
            return Err(Error::Config(format!("{s} delayed steps exceed max_steps {}", self.config.max_steps)));
        }
        let x = Tensor::cat(&[prefix, self.motion_inputs(ids)?], 1)?;
        let bias = self.attention_bias(&valid, s)?;
        let h = self.stack.forward(&x, Some(&bias), None)?;
        let p = self.config.prefix_slots();
        let v = self.config.vocab().size();
        let logits = apply_linear(&self.heads, &h.narrow(1, p, s)?)?;
        Ok(logits.reshape((bundles.len(), s, self.config.levels, v))?)
    }

    /// Teacher-forced logits `(B, S, L, K + 3)` for delayed grids of one length.
    pub fn forward(&self, bundles: &[&ConditionBundle], delayed: &[&DelayedGrid]) -> Result<Tensor> {
        let steps = delayed[0].steps();
        if delayed.iter().any(|d| d.steps() != steps || d.levels != self.config.levels) {
            return Err(Error::Config("delayed grids must share shape and level count".into()));
        }
        self.run(bundles, &shifted_inputs(delayed, steps, self.config.vocab().bos()))
    }

    pub fn loss(&self, bundles: &[&ConditionBundle], grids: &[&TokenGrid]) -> Result<Tensor> {
        let delayed: Vec<DelayedGrid> = grids.iter().map(|g| delay(g)).collect();
        let refs: Vec<&DelayedGrid> = delayed.iter().collect();
        let logits = self.forward(bundles, &refs)?;
        Ok(delayed_nll(&logits, &refs)?)
    }

    pub fn train_step(&mut self, bundles: &[&ConditionBundle], grids: &[&TokenGrid], opt: &mut Optim) -> Result<f64> {
        let loss = self.loss(bundles, grids)?;
        opt.backward_step(&loss)?;
        Ok(loss.to_scalar::<f32>()? as f64)
    }

    /// Prefix states after the final norm; motion slots are not part of the input.
    pub fn hidden_batch(&self, bundles: &[&ConditionBundle]) -> Result<HiddenBatch> {
        let (prefix, valid) = self.embed_condition(bundles)?;
        let bias = self.attention_bias(&valid, 0)?;
        Ok(HiddenBatch { states: self.stack.forward(&prefix, Some(&bias), None)?, valid })
    }

    pub fn extract_hidden(&self, bundle: &ConditionBundle) -> Result<HiddenStates> {
        Ok(self.hidden_batch(&[bundle])?.to_states()?.remove(0))
    }

    /// Autoregressive decoding over the delayed layout, then undelay.
    pub fn generate_tokens(
        &self,
        bundles: &[&ConditionBundle],
        len: usize,
        sampling: Sampling,
        rng: &mut impl Rng,
    ) -> Result<Vec<TokenGrid>> {
        let levels = self.config.levels;
        let k = self.config.codebook_size;
        let vocab = self.config.vocab();
        let steps = delayed_len(len, levels);
        let n = bundles.len();
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
            let logits = self.run(bundles, &ids)?.i((.., p))?.to_dtype(DType::F32)?.to_vec3::<f32>()?;
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

    pub fn weight_hash(&self) -> Result<String> {
        Ok(self.store.weight_hash()?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(KIND, &self.config)?;
        for (name, var) in self.store.named() {
            c.insert(format!("model.{name}"), var.as_tensor());
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND)?;
        let r = Self::new(c.config()?, 0)?;
        r.store.load_from(&c.scoped("model"))?;
        Ok(r)
    }
}

#[cfg(test)]
mod tests;
