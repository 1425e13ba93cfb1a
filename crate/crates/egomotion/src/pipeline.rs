//! Stage training, sampling and evaluation over one experiment root.

use std::fs;
use std::path::PathBuf;
use std::rc::Rc;

use candle_core::{Device, Tensor};
use egomotion_core::io::{save_motion, save_tokens};
use egomotion_core::kinematics::from_headcentric;
use egomotion_core::metrics::{
    frechet_distance, mm_dist, plausibility, r_precision, ContactThresholds, GaussianStats, MetricReport,
};
use egomotion_core::synthdata::{
    build_dataset, load_dataset, save_dataset, Dataset, Sample, IMAGE_FEATURE_DIM, MAX_TEXT_LEN, SEQUENCE_FRAMES,
    VOCABULARY,
};
use egomotion_core::{ConditionBundle, GlobalMotion, HeadCentricSequence, TokenGrid};
use egomotion_models::data::FeatureStats;
use egomotion_models::evaluator::{Evaluator, EvaluatorConfig};
use egomotion_models::generators::{Generator, GeneratorConfig, Paradigm, Target};
use egomotion_models::optim::Optim;
use egomotion_models::reasoner::{HiddenBatch, HiddenStates, Reasoner, ReasonerConfig};
use egomotion_models::rvq::{LatentMap, RvqConfig, RvqTokenizer};
use egomotion_models::vae::{MotionVae, VaeConfig};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::config::{RunConfig, Training, VlmMode};
use crate::error::{HarnessError, Result};
use crate::experiment::Experiment;

const GEN_BATCH: usize = 32;
const LOSS_WINDOW: usize = 20;

pub const STAGE_RVQ: &str = "rvq";
pub const STAGE_VAE: &str = "vae";
pub const STAGE_1: &str = "stage1";
pub const STAGE_EVALUATOR: &str = "evaluator";

/// A trained model with its loss curve; `losses` is empty when loaded from disk.
pub struct Trained<T> {
    pub model: T,
    pub losses: Vec<f64>,
    pub final_loss: Option<f64>,
}

impl<T> Trained<T> {
    fn fresh(model: T, losses: Vec<f64>) -> Self {
        let final_loss = tail_mean(&losses);
        Self { model, losses, final_loss }
    }
}

fn tail_mean(xs: &[f64]) -> Option<f64> {
    let tail = &xs[xs.len().saturating_sub(LOSS_WINDOW)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

pub struct Stage2 {
    pub generator: Generator,
    pub reasoner: Reasoner,
    pub losses: Vec<f64>,
    pub reasoner_hash_before: String,
    pub reasoner_hash_after: String,
}

/// Turns generator output back into head-centric features.
pub enum MotionDecoder {
    Tokens(RvqTokenizer),
    Latent(MotionVae),
    Raw { num_joints: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub report: MetricReport,
    /// Same metrics for held-out ground truth.
    pub reference: MetricReport,
    pub stage1_loss: Option<f64>,
    pub reasoner_hash_before: String,
    pub reasoner_hash_after: String,
    pub report_path: PathBuf,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub exp: Experiment,
    dataset: Option<Rc<Dataset>>,
    dev: Device,
}

fn stage_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt
}

fn batch_indices(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    sample_indices(rng, n, batch.min(n)).into_vec()
}

fn should_log(t: &Training, step: usize) -> bool {
    step + 1 == t.steps || (t.log_every > 0 && step % t.log_every == 0)
}

pub fn stage2_key(paradigm: Paradigm, mode: VlmMode) -> String {
    format!("stage2-{}-{}", paradigm.name(), mode.name())
}

fn reasoner_key(paradigm: Paradigm, mode: VlmMode) -> String {
    format!("{}-reasoner", stage2_key(paradigm, mode))
}

impl Pipeline {
    pub fn new(cfg: RunConfig, root: PathBuf) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, exp: Experiment::open(root)?, dataset: None, dev: Device::Cpu })
    }

    fn seed(&self, salt: u64) -> u64 {
        stage_seed(self.cfg.seed, salt)
    }

    fn data_matches(&self, ds: &Dataset) -> bool {
        let d = &self.cfg.data;
        ds.manifest.seed == d.seed && ds.manifest.body == d.body && ds.samples.len() == d.samples
    }

    pub fn gen_data(&mut self) -> Result<Rc<Dataset>> {
        let d = &self.cfg.data;
        let ds = build_dataset(d.samples, d.seed, d.body)?;
        save_dataset(&self.exp.data_dir(), &ds)?;
        log::info!("wrote {} samples to {}", ds.samples.len(), self.exp.data_dir().display());
        let ds = Rc::new(ds);
        self.dataset = Some(ds.clone());
        Ok(ds)
    }

    /// Dataset on disk; errors if absent or built from different settings.
    pub fn dataset(&mut self) -> Result<Rc<Dataset>> {
        if let Some(ds) = &self.dataset {
            return Ok(ds.clone());
        }
        if !self.exp.has_dataset() {
            return Err(HarnessError::MissingStage { stage: "dataset".into(), command: "gen-data" });
        }
        let ds = load_dataset(&self.exp.data_dir())?;
        if !self.data_matches(&ds) {
            return Err(HarnessError::Config(format!(
                "dataset at {} was built with different [data] settings; rerun gen-data",
                self.exp.data_dir().display()
            )));
        }
        let ds = Rc::new(ds);
        self.dataset = Some(ds.clone());
        Ok(ds)
    }

    fn ensure_dataset(&mut self) -> Result<Rc<Dataset>> {
        match self.dataset() {
            Ok(ds) => Ok(ds),
            Err(HarnessError::MissingStage { .. } | HarnessError::Config(_)) => self.gen_data(),
            Err(e) => Err(e),
        }
    }

    fn fingerprint(&self, stage: &str) -> serde_json::Value {
        let c = &self.cfg;
        let mut fp = match stage {
            STAGE_RVQ => json!({"data": c.data, "seed": c.seed, "rvq": c.rvq}),
            STAGE_VAE => json!({"data": c.data, "seed": c.seed, "vae": c.vae}),
            STAGE_1 => json!({"data": c.data, "seed": c.seed, "rvq": c.rvq, "stage1": c.stage1}),
            STAGE_EVALUATOR => json!({"data": c.data, "seed": c.seed, "evaluator": c.evaluator}),
            _ => json!({"data": c.data, "seed": c.seed, "rvq": c.rvq, "vae": c.vae, "stage1": c.stage1, "stage2": c.stage2}),
        };
        strip_logging(&mut fp);
        fp
    }

    fn train_features(ds: &Dataset) -> Vec<&HeadCentricSequence> {
        ds.train().map(|s| &s.features).collect()
    }

    pub fn rvq_config(&self) -> RvqConfig {
        let r = &self.cfg.rvq;
        RvqConfig {
            levels: r.levels,
            codebook_size: r.codebook_size,
            latent_dim: r.latent_dim,
            temporal_downsample: r.downsample,
            beta: r.beta,
            hidden: r.hidden,
            res_blocks: r.res_blocks,
            ema_decay: r.ema_decay,
            dead_after: r.dead_after,
            quantizer_dropout: r.quantizer_dropout,
        }
    }

    pub fn train_rvq(&mut self) -> Result<Trained<RvqTokenizer>> {
        let ds = self.dataset()?;
        let seqs = Self::train_features(&ds);
        let stats = FeatureStats::fit(seqs.iter().copied());
        let mut tok = RvqTokenizer::new(self.rvq_config(), ds.skeleton.num_joints, stats, self.seed(1))?;
        let t = self.cfg.rvq.train.clone();
        let mut opt = Optim::new(tok.store.vars(), t.optim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(101));
        let mut log = self.exp.log(STAGE_RVQ)?;
        let mut losses = Vec::with_capacity(t.steps);
        for step in 0..t.steps {
            let batch: Vec<&HeadCentricSequence> =
                batch_indices(seqs.len(), t.batch_size, &mut rng).into_iter().map(|i| seqs[i]).collect();
            let s = tok.train_step(&batch, &mut opt)?;
            losses.push(s.loss);
            if should_log(&t, step) {
                log.record(step, &[("loss", s.loss), ("recon", s.recon), ("commit", s.commit), ("reseeded", s.reseeded as f64)])?;
            }
        }
        log.finish()?;
        let out = Trained::fresh(tok, losses);
        self.exp.record(
            STAGE_RVQ,
            &out.model.to_checkpoint()?,
            out.model.store.weight_hash()?,
            self.fingerprint(STAGE_RVQ),
            out.final_loss,
        )?;
        Ok(out)
    }

    pub fn load_rvq(&self) -> Result<RvqTokenizer> {
        Ok(RvqTokenizer::from_checkpoint(&self.exp.checkpoint(STAGE_RVQ, "train-rvq")?)?)
    }

    fn ensure_rvq(&mut self) -> Result<RvqTokenizer> {
        match self.exp.reusable(STAGE_RVQ, &self.fingerprint(STAGE_RVQ))? {
            Some(c) => Ok(RvqTokenizer::from_checkpoint(&c)?),
            None => Ok(self.train_rvq()?.model),
        }
    }

    /// Writes `data/tokens/<id>.egot` for every sample.
    pub fn tokenize(&mut self) -> Result<PathBuf> {
        let ds = self.dataset()?;
        let tok = self.load_rvq()?;
        let dir = self.exp.data_dir().join("tokens");
        fs::create_dir_all(&dir)?;
        let seqs: Vec<&HeadCentricSequence> = ds.samples.iter().map(|s| &s.features).collect();
        for (chunk, ids) in seqs.chunks(GEN_BATCH).zip(ds.samples.chunks(GEN_BATCH)) {
            for (g, s) in tok.tokenize_batch(chunk)?.iter().zip(ids) {
                save_tokens(&dir.join(format!("{:06}.egot", s.id)), g)?;
            }
        }
        Ok(dir)
    }

    pub fn vae_config(&self) -> VaeConfig {
        let v = &self.cfg.vae;
        VaeConfig {
            latent_dim: v.latent_dim,
            temporal_downsample: v.downsample,
            kl_weight: v.kl_weight,
            hidden: v.hidden,
            res_blocks: v.res_blocks,
        }
    }

    pub fn train_vae(&mut self) -> Result<Trained<MotionVae>> {
        let ds = self.dataset()?;
        let seqs = Self::train_features(&ds);
        let stats = FeatureStats::fit(seqs.iter().copied());
        let mut vae = MotionVae::new(self.vae_config(), ds.skeleton.num_joints, stats, self.seed(2))?;
        let t = self.cfg.vae.train.clone();
        let mut opt = Optim::new(vae.store.vars(), t.optim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(102));
        let mut log = self.exp.log(STAGE_VAE)?;
        let mut losses = Vec::with_capacity(t.steps);
        for step in 0..t.steps {
            let batch: Vec<&HeadCentricSequence> =
                batch_indices(seqs.len(), t.batch_size, &mut rng).into_iter().map(|i| seqs[i]).collect();
            let s = vae.train_step(&batch, &mut opt, &mut rng)?;
            losses.push(s.loss);
            if should_log(&t, step) {
                log.record(step, &[("loss", s.loss), ("recon", s.recon), ("kl", s.kl)])?;
            }
        }
        log.finish()?;
        let out = Trained::fresh(vae, losses);
        self.exp.record(
            STAGE_VAE,
            &out.model.to_checkpoint()?,
            out.model.store.weight_hash()?,
            self.fingerprint(STAGE_VAE),
            out.final_loss,
        )?;
        Ok(out)
    }

    pub fn load_vae(&self) -> Result<MotionVae> {
        Ok(MotionVae::from_checkpoint(&self.exp.checkpoint(STAGE_VAE, "train-vae")?)?)
    }

    fn ensure_vae(&mut self) -> Result<MotionVae> {
        match self.exp.reusable(STAGE_VAE, &self.fingerprint(STAGE_VAE))? {
            Some(c) => Ok(MotionVae::from_checkpoint(&c)?),
            None => Ok(self.train_vae()?.model),
        }
    }

    /// Mean absolute reconstruction error on the test split, in normalised units.
    pub fn vae_roundtrip(&mut self) -> Result<f64> {
        let ds = self.dataset()?;
        let vae = self.load_vae()?;
        let seqs: Vec<&HeadCentricSequence> = ds.test().map(|s| &s.features).collect();
        Ok(vae.recon_error(&seqs)?)
    }

    fn reasoner_config(&self, num_joints: usize) -> ReasonerConfig {
        let s = &self.cfg.stage1;
        let n1 = SEQUENCE_FRAMES.div_ceil(self.cfg.rvq.downsample);
        ReasonerConfig {
            layers: s.layers,
            model_dim: s.model_dim,
            heads: s.heads,
            levels: self.cfg.rvq.levels,
            codebook_size: self.cfg.rvq.codebook_size,
            text_vocab: VOCABULARY.len(),
            max_text_len: MAX_TEXT_LEN,
            image_dim: IMAGE_FEATURE_DIM,
            pose_dim: egomotion_core::kinematics::feature_width(num_joints),
            max_steps: n1 + self.cfg.rvq.levels - 1,
        }
    }

    fn token_targets(tok: &RvqTokenizer, seqs: &[&HeadCentricSequence]) -> Result<Vec<TokenGrid>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(GEN_BATCH) {
            out.extend(tok.tokenize_batch(chunk)?);
        }
        Ok(out)
    }

    pub fn train_stage1(&mut self) -> Result<Trained<Reasoner>> {
        let ds = self.dataset()?;
        let tok = self.load_rvq()?;
        let train: Vec<&Sample> = ds.train().collect();
        let seqs: Vec<&HeadCentricSequence> = train.iter().map(|s| &s.features).collect();
        let grids = Self::token_targets(&tok, &seqs)?;
        let mut reasoner = Reasoner::new(self.reasoner_config(ds.skeleton.num_joints), self.seed(3))?;
        let t = self.cfg.stage1.train.clone();
        let mut opt = Optim::new(reasoner.store.vars(), t.optim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(103));
        let mut log = self.exp.log(STAGE_1)?;
        let mut losses = Vec::with_capacity(t.steps);
        for step in 0..t.steps {
            let idx = batch_indices(train.len(), t.batch_size, &mut rng);
            let bundles: Vec<&ConditionBundle> = idx.iter().map(|&i| &train[i].condition).collect();
            let g: Vec<&TokenGrid> = idx.iter().map(|&i| &grids[i]).collect();
            let loss = reasoner.train_step(&bundles, &g, &mut opt)?;
            losses.push(loss);
            if should_log(&t, step) {
                log.record(step, &[("loss", loss)])?;
            }
        }
        log.finish()?;
        let out = Trained::fresh(reasoner, losses);
        self.exp.record(
            STAGE_1,
            &out.model.to_checkpoint()?,
            out.model.weight_hash()?,
            self.fingerprint(STAGE_1),
            out.final_loss,
        )?;
        Ok(out)
    }

    pub fn load_stage1(&self) -> Result<Reasoner> {
        Ok(Reasoner::from_checkpoint(&self.exp.checkpoint(STAGE_1, "train-stage1")?)?)
    }

    fn ensure_stage1(&mut self) -> Result<Trained<Reasoner>> {
        let fp = self.fingerprint(STAGE_1);
        match self.exp.reusable(STAGE_1, &fp)? {
            Some(c) => {
                let final_loss = self.exp.entry(STAGE_1)?.and_then(|e| e.final_loss);
                Ok(Trained { model: Reasoner::from_checkpoint(&c)?, losses: Vec::new(), final_loss })
            }
            None => self.train_stage1(),
        }
    }

    /// Stage-I token sampling for the test split, decoded through the tokenizer.
    pub fn stage1_sample(&mut self) -> Result<Vec<HeadCentricSequence>> {
        let ds = self.dataset()?;
        let tok = self.load_rvq()?;
        let reasoner = self.load_stage1()?;
        let bundles: Vec<&ConditionBundle> = ds.test().map(|s| &s.condition).collect();
        let n1 = tok.latent_len(SEQUENCE_FRAMES);
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(self.cfg.eval.seed, 201));
        let mut out = Vec::with_capacity(bundles.len());
        for chunk in bundles.chunks(GEN_BATCH) {
            for g in reasoner.generate_tokens(chunk, n1, self.cfg.stage1.sampling, &mut rng)? {
                out.push(tok.detokenize(&g, SEQUENCE_FRAMES)?);
            }
        }
        Ok(out)
    }

    pub fn evaluator_config(&self, width: usize) -> EvaluatorConfig {
        let e = &self.cfg.evaluator;
        EvaluatorConfig {
            motion_layers: e.motion_layers,
            fusion_layers: e.fusion_layers,
            model_dim: e.model_dim,
            heads: e.heads,
            embed_dim: e.embed_dim,
            patch: e.patch,
            feature_width: width,
            max_frames: SEQUENCE_FRAMES,
            image_dim: IMAGE_FEATURE_DIM,
            text_vocab: VOCABULARY.len(),
            max_text_len: MAX_TEXT_LEN,
            init_temperature: e.init_temperature,
        }
    }

    pub fn train_evaluator(&mut self) -> Result<Trained<Evaluator>> {
        let ds = self.dataset()?;
        let train: Vec<&Sample> = ds.train().collect();
        let stats = FeatureStats::fit(train.iter().map(|s| &s.features));
        let width = stats.width();
        let mut ev = Evaluator::new(self.evaluator_config(width), stats, self.seed(4))?;
        let t = self.cfg.evaluator.train.clone();
        let mut opt = Optim::new(ev.store.vars(), t.optim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(104));
        let mut log = self.exp.log(STAGE_EVALUATOR)?;
        let mut losses = Vec::with_capacity(t.steps);
        for step in 0..t.steps {
            let idx = batch_indices(train.len(), t.batch_size, &mut rng);
            let seqs: Vec<&HeadCentricSequence> = idx.iter().map(|&i| &train[i].features).collect();
            let bundles: Vec<&ConditionBundle> = idx.iter().map(|&i| &train[i].condition).collect();
            let loss = ev.train_step(&seqs, &bundles, &mut opt)?;
            losses.push(loss);
            if should_log(&t, step) {
                log.record(step, &[("loss", loss), ("temperature", ev.temperature()?)])?;
            }
        }
        log.finish()?;
        let out = Trained::fresh(ev, losses);
        self.exp.record(
            STAGE_EVALUATOR,
            &out.model.to_checkpoint()?,
            out.model.weight_hash()?,
            self.fingerprint(STAGE_EVALUATOR),
            out.final_loss,
        )?;
        Ok(out)
    }

    pub fn load_evaluator(&self) -> Result<Evaluator> {
        Ok(Evaluator::from_checkpoint(&self.exp.checkpoint(STAGE_EVALUATOR, "train-evaluator")?)?)
    }

    fn ensure_evaluator(&mut self) -> Result<Evaluator> {
        match self.exp.reusable(STAGE_EVALUATOR, &self.fingerprint(STAGE_EVALUATOR))? {
            Some(c) => Ok(Evaluator::from_checkpoint(&c)?),
            None => Ok(self.train_evaluator()?.model),
        }
    }

    fn generator_config(&self, cond_dim: usize, seq_len: usize, value_dim: usize) -> GeneratorConfig {
        let s = &self.cfg.stage2;
        GeneratorConfig {
            paradigm: s.paradigm,
            layers: s.layers,
            model_dim: s.model_dim,
            heads: s.heads,
            cond_dim,
            seq_len,
            levels: self.cfg.rvq.levels,
            codebook_size: self.cfg.rvq.codebook_size,
            value_dim,
            decode_iters: s.decode_iters,
            flow_steps: s.flow_steps,
            guidance: s.guidance,
            cond_dropout: s.cond_dropout,
        }
    }

    /// The reasoner stage II starts from under the configured mode.
    fn initial_reasoner(&mut self, num_joints: usize) -> Result<Reasoner> {
        match self.cfg.stage2.vlm_mode {
            VlmMode::TwoStage => self.load_stage1(),
            VlmMode::Frozen | VlmMode::Joint => Ok(Reasoner::new(self.reasoner_config(num_joints), self.seed(3))?),
        }
    }

    /// Stage II under the configured paradigm and mode, with the reasoner weight contract checked.
    pub fn train_stage2(&mut self) -> Result<Stage2> {
        let ds = self.dataset()?;
        let s2 = self.cfg.stage2.clone();
        let nj = ds.skeleton.num_joints;
        let train: Vec<&Sample> = ds.train().collect();
        let seqs: Vec<&HeadCentricSequence> = train.iter().map(|s| &s.features).collect();
        let reasoner = self.initial_reasoner(nj)?;
        let hash_before = reasoner.weight_hash()?;
        let cond_dim = reasoner.config.model_dim;

        let joint = s2.vlm_mode == VlmMode::Joint;
        let tok = if s2.paradigm.is_token() || joint { Some(self.load_rvq()?) } else { None };
        let grids = match &tok {
            Some(t) => Self::token_targets(t, &seqs)?,
            None => Vec::new(),
        };

        let mut posteriors: Vec<(Vec<f32>, Vec<f32>)> = Vec::new();
        let generator = match s2.paradigm {
            Paradigm::Ar | Paradigm::Masked => {
                let n1 = tok.as_ref().expect("token paradigms load the tokenizer").latent_len(SEQUENCE_FRAMES);
                Generator::new(self.generator_config(cond_dim, n1, 0), None, self.seed(5))?
            }
            Paradigm::FmRaw => {
                let stats = FeatureStats::fit(seqs.iter().copied());
                let width = stats.width();
                Generator::new(self.generator_config(cond_dim, SEQUENCE_FRAMES, width), Some(stats), self.seed(5))?
            }
            Paradigm::FmLatent => {
                let vae = self.load_vae()?;
                for chunk in seqs.chunks(GEN_BATCH) {
                    for (mu, lv) in vae.encode_posterior_batch(chunk)? {
                        let f = |m: &LatentMap| m.values.iter().map(|&x| x as f32).collect::<Vec<f32>>();
                        posteriors.push((f(&mu), f(&lv)));
                    }
                }
                let d = vae.config.latent_dim;
                let n1 = posteriors[0].0.len() / d;
                let stats = FeatureStats::fit_rows(d, posteriors.iter().flat_map(|(mu, _)| mu.chunks(d)));
                Generator::new(self.generator_config(cond_dim, n1, d), Some(stats), self.seed(5))?
            }
        };
        if s2.tie_embeddings {
            let table = reasoner
                .store
                .named()
                .into_iter()
                .find(|(n, _)| n == "level_tokens")
                .ok_or_else(|| HarnessError::Config("reasoner has no token table to tie".into()))?
                .1;
            generator.tie_token_table(table.as_tensor())?;
        }

        let frozen_h: Vec<HiddenStates> = if joint {
            Vec::new()
        } else {
            let bundles: Vec<&ConditionBundle> = train.iter().map(|s| &s.condition).collect();
            let mut hs = Vec::with_capacity(bundles.len());
            for chunk in bundles.chunks(GEN_BATCH) {
                hs.extend(reasoner.hidden_batch(chunk)?.detach().to_states()?);
            }
            hs
        };
        let slots = reasoner.config.prefix_slots();

        let t = s2.train.clone();
        let mut vars = generator.store.vars();
        if joint {
            vars.extend(reasoner.store.vars());
        }
        let mut opt = Optim::new(vars, t.optim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(105));
        let key = stage2_key(s2.paradigm, s2.vlm_mode);
        let mut log = self.exp.log(&key)?;
        let mut losses = Vec::with_capacity(t.steps);
        for step in 0..t.steps {
            let idx = batch_indices(train.len(), t.batch_size, &mut rng);
            let bundles: Vec<&ConditionBundle> = idx.iter().map(|&i| &train[i].condition).collect();
            let h = if joint {
                reasoner.hidden_batch(&bundles)?
            } else {
                let sel: Vec<HiddenStates> = idx.iter().map(|&i| frozen_h[i].clone()).collect();
                HiddenBatch::from_states(&sel, slots, &self.dev)?
            };
            let g: Vec<&TokenGrid> = idx.iter().filter_map(|&i| grids.get(i)).collect();
            let values: Option<Tensor> = match s2.paradigm {
                Paradigm::FmRaw => {
                    let rows: Vec<Vec<f32>> = idx.iter().map(|&i| seqs[i].data.clone()).collect();
                    Some(generator.normalize(&rows)?)
                }
                Paradigm::FmLatent => {
                    let rows: Vec<Vec<f32>> = idx
                        .iter()
                        .map(|&i| {
                            let (mu, lv) = &posteriors[i];
                            if !self.cfg.stage2.latent_samples {
                                return mu.clone();
                            }
                            mu.iter()
                                .zip(lv)
                                .map(|(m, l)| m + (l / 2.0).exp() * rng.sample::<f32, _>(StandardNormal))
                                .collect()
                        })
                        .collect();
                    Some(generator.normalize(&rows)?)
                }
                _ => None,
            };
            let target = match &values {
                Some(v) => Target::Values(v),
                None => Target::Tokens(&g),
            };
            let s2_loss = generator.loss(target, &h, &mut rng)?;
            let (loss, s1_value) = if joint {
                let s1 = reasoner.loss(&bundles, &g)?;
                let v = s1.to_scalar::<f32>()? as f64;
                ((s1 + (s2_loss * s2.joint_weight)?)?, Some(v))
            } else {
                (s2_loss, None)
            };
            opt.backward_step(&loss)?;
            let value = loss.to_scalar::<f32>()? as f64;
            losses.push(value);
            if should_log(&t, step) {
                match s1_value {
                    Some(v) => log.record(step, &[("loss", value), ("stage1", v)])?,
                    None => log.record(step, &[("loss", value)])?,
                }
            }
        }
        log.finish()?;

        let hash_after = reasoner.weight_hash()?;
        match s2.vlm_mode {
            VlmMode::TwoStage | VlmMode::Frozen if hash_after != hash_before => {
                return Err(HarnessError::FrozenContract { before: hash_before, after: hash_after });
            }
            VlmMode::Joint if t.steps > 0 && hash_after == hash_before => {
                return Err(HarnessError::JointUnchanged(hash_after));
            }
            _ => {}
        }
        let fp = self.fingerprint(&key);
        let final_loss = tail_mean(&losses);
        self.exp.record(&key, &generator.to_checkpoint()?, generator.weight_hash()?, fp.clone(), final_loss)?;
        self.exp.record(&reasoner_key(s2.paradigm, s2.vlm_mode), &reasoner.to_checkpoint()?, hash_after.clone(), fp, None)?;
        Ok(Stage2 { generator, reasoner, losses, reasoner_hash_before: hash_before, reasoner_hash_after: hash_after })
    }

    /// Generator and reasoner recorded by the last stage-II run of the configured variant.
    pub fn load_stage2(&self) -> Result<(Generator, Reasoner)> {
        let s2 = &self.cfg.stage2;
        let key = stage2_key(s2.paradigm, s2.vlm_mode);
        let g = Generator::from_checkpoint(&self.exp.checkpoint(&key, "train-stage2")?)?;
        let r = Reasoner::from_checkpoint(&self.exp.checkpoint(&reasoner_key(s2.paradigm, s2.vlm_mode), "train-stage2")?)?;
        Ok((g, r))
    }

    pub fn decoder_for(&mut self, paradigm: Paradigm) -> Result<MotionDecoder> {
        Ok(match paradigm {
            Paradigm::Ar | Paradigm::Masked => MotionDecoder::Tokens(self.load_rvq()?),
            Paradigm::FmLatent => MotionDecoder::Latent(self.load_vae()?),
            Paradigm::FmRaw => MotionDecoder::Raw { num_joints: self.dataset()?.skeleton.num_joints },
        })
    }

    /// Head-centric motions for `bundles`, one per condition.
    pub fn generate(
        &self,
        generator: &Generator,
        reasoner: &Reasoner,
        decoder: &MotionDecoder,
        bundles: &[&ConditionBundle],
    ) -> Result<Vec<HeadCentricSequence>> {
        let s2 = &self.cfg.stage2;
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(self.cfg.eval.seed, 202));
        let mut out = Vec::with_capacity(bundles.len());
        for chunk in bundles.chunks(GEN_BATCH) {
            let h = reasoner.hidden_batch(chunk)?.detach();
            let grids = match generator.paradigm() {
                Paradigm::Ar => Some(generator.ar_generate(&h, s2.sampling, &mut rng)?),
                Paradigm::Masked => Some(generator.masked_generate(&h, s2.decode_iters, s2.sampling, &mut rng)?.0),
                _ => None,
            };
            match (decoder, grids) {
                (MotionDecoder::Tokens(tok), Some(grids)) => {
                    for g in &grids {
                        out.push(tok.detokenize(g, SEQUENCE_FRAMES)?);
                    }
                }
                (MotionDecoder::Latent(vae), None) => {
                    let rows = generator.denormalize(&generator.fm_sample(&h, s2.flow_steps, &mut rng)?)?;
                    let (n1, d) = (generator.config.seq_len, generator.config.value_dim);
                    let zs = rows
                        .into_iter()
                        .map(|r| LatentMap::new(n1, d, r.into_iter().map(f64::from).collect()))
                        .collect::<egomotion_models::Result<Vec<_>>>()?;
                    out.extend(vae.decode_batch(&zs, SEQUENCE_FRAMES)?);
                }
                (MotionDecoder::Raw { num_joints }, None) => {
                    for r in generator.denormalize(&generator.fm_sample(&h, s2.flow_steps, &mut rng)?)? {
                        out.push(HeadCentricSequence::new(*num_joints, r)?);
                    }
                }
                _ => return Err(HarnessError::Config("decoder does not match the generator paradigm".into())),
            }
        }
        Ok(out)
    }

    /// World-space motions anchored at each reference sample's first head pose.
    pub fn to_global(&self, seqs: &[HeadCentricSequence], refs: &[&Sample], ds: &Dataset) -> Result<Vec<GlobalMotion>> {
        let skel = &ds.skeleton;
        seqs.iter()
            .zip(refs)
            .map(|(seq, s)| {
                let head = s.motion.joint(0, skel.head_joint);
                Ok(from_headcentric(seq, [head.x, head.y, head.z], s.motion.heading[0], skel)?)
            })
            .collect()
    }

    /// Metrics of `generated` motions against the test split they were conditioned on.
    pub fn evaluate(&self, ev: &Evaluator, generated: &[HeadCentricSequence], ds: &Dataset) -> Result<MetricReport> {
        let test: Vec<&Sample> = ds.test().collect();
        if generated.len() != test.len() {
            return Err(HarnessError::Config(format!("{} motions for {} test conditions", generated.len(), test.len())));
        }
        let e = &self.cfg.eval;
        let gen_refs: Vec<&HeadCentricSequence> = generated.iter().collect();
        let real_refs: Vec<&HeadCentricSequence> = test.iter().map(|s| &s.features).collect();
        let bundles: Vec<&ConditionBundle> = test.iter().map(|s| &s.condition).collect();
        let gen_emb = ev.embed_motions(&gen_refs, GEN_BATCH)?;
        let real_emb = ev.embed_motions(&real_refs, GEN_BATCH)?;
        let cond_emb = ev.embed_conditions(&bundles, GEN_BATCH)?;
        let fid = frechet_distance(&GaussianStats::from_samples(&gen_emb)?, &GaussianStats::from_samples(&real_emb)?)?;
        let batch = e.retrieval_batch.min(test.len());
        let r_top1 = r_precision(&gen_emb, &cond_emb, batch, e.top_k, e.seed)?;
        let mm = mm_dist(&gen_emb, &cond_emb)?;
        let motions = self.to_global(generated, &test, ds)?;
        let th = ContactThresholds { height: e.contact_height, vertical_speed: e.contact_speed };
        let p = plausibility(&motions, &ds.skeleton, th)?;
        let report = MetricReport { fid, r_top1, mm_dist: mm, fs: p.fs, fc: p.fc, acce: p.acce, jerk: p.jerk };
        report.validate()?;
        Ok(report)
    }

    /// Metrics of the held-out ground truth itself.
    pub fn evaluate_reference(&mut self, ev: &Evaluator) -> Result<MetricReport> {
        let ds = self.dataset()?;
        let real: Vec<HeadCentricSequence> = ds.test().map(|s| s.features.clone()).collect();
        self.evaluate(ev, &real, &ds)
    }

    pub fn save_samples(&self, label: &str, motions: &[GlobalMotion], refs: &[&Sample]) -> Result<PathBuf> {
        let dir = self.exp.samples_dir(label);
        fs::create_dir_all(&dir)?;
        for (m, s) in motions.iter().zip(refs) {
            save_motion(&dir.join(format!("{:06}.egom", s.id)), m)?;
        }
        Ok(dir)
    }

    /// Samples the stored stage-II model on the test split and writes the motions.
    pub fn sample(&mut self) -> Result<(Vec<HeadCentricSequence>, PathBuf)> {
        let ds = self.dataset()?;
        let (g, r) = self.load_stage2()?;
        let decoder = self.decoder_for(g.paradigm())?;
        let test: Vec<&Sample> = ds.test().collect();
        let bundles: Vec<&ConditionBundle> = test.iter().map(|s| &s.condition).collect();
        let seqs = self.generate(&g, &r, &decoder, &bundles)?;
        let dir = self.save_samples(&self.cfg.label(), &self.to_global(&seqs, &test, &ds)?, &test)?;
        Ok((seqs, dir))
    }

    /// Evaluates the stored stage-II model and writes its report.
    pub fn eval(&mut self) -> Result<(MetricReport, PathBuf)> {
        let ev = self.load_evaluator()?;
        let ds = self.dataset()?;
        let (seqs, _) = self.sample()?;
        let report = self.evaluate(&ev, &seqs, &ds)?;
        let path = self.exp.write_report(&self.cfg.label(), &report)?;
        Ok((report, path))
    }

    /// Every prerequisite the configured variant needs, then stage II, sampling and evaluation.
    pub fn run(&mut self) -> Result<RunSummary> {
        let ds = self.ensure_dataset()?;
        let s2 = self.cfg.stage2.clone();
        let needs_rvq = s2.paradigm.is_token() || s2.vlm_mode != VlmMode::Frozen;
        if needs_rvq {
            self.ensure_rvq()?;
        }
        if s2.paradigm == Paradigm::FmLatent {
            self.ensure_vae()?;
        }
        let stage1_loss = if s2.vlm_mode == VlmMode::TwoStage { self.ensure_stage1()?.final_loss } else { None };
        let ev = self.ensure_evaluator()?;
        let out = self.train_stage2()?;
        let decoder = self.decoder_for(s2.paradigm)?;
        let test: Vec<&Sample> = ds.test().collect();
        let bundles: Vec<&ConditionBundle> = test.iter().map(|s| &s.condition).collect();
        let seqs = self.generate(&out.generator, &out.reasoner, &decoder, &bundles)?;
        let label = self.cfg.label();
        self.save_samples(&label, &self.to_global(&seqs, &test, &ds)?, &test)?;
        let report = self.evaluate(&ev, &seqs, &ds)?;
        let report_path = self.exp.write_report(&label, &report)?;
        let reference = self.evaluate_reference(&ev)?;
        self.exp.write_report("ground_truth", &reference)?;
        Ok(RunSummary {
            label,
            report,
            reference,
            stage1_loss,
            reasoner_hash_before: out.reasoner_hash_before,
            reasoner_hash_after: out.reasoner_hash_after,
            report_path,
        })
    }
}

/// Logging cadence does not change the weights, so it stays out of fingerprints.
fn strip_logging(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("log_every");
            map.values_mut().for_each(strip_logging);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_logging),
        _ => {}
    }
}

#[cfg(test)]
mod tests;
