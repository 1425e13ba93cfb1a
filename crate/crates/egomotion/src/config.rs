//! Run configuration: a TOML document with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use egomotion_core::synthdata::BodyKind;
use egomotion_models::generators::Paradigm;
use egomotion_models::optim::{OptimConfig, Schedule};
use egomotion_models::sampling::Sampling;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const ROOT_ENV: &str = "EGOMOTION_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmMode {
    /// Stage I first, then stage II against the frozen reasoner.
    TwoStage,
    /// Stage II against an untrained, frozen reasoner.
    Frozen,
    /// Both objectives optimised together through a shared reasoner.
    Joint,
}

impl VlmMode {
    pub fn name(self) -> &'static str {
        match self {
            VlmMode::TwoStage => "two_stage",
            VlmMode::Frozen => "frozen",
            VlmMode::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Training {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    /// Global gradient-norm clip; `0` disables.
    pub clip: f64,
    pub log_every: usize,
}

impl Default for Training {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 32, lr: 1e-3, weight_decay: 0.01, cosine: false, clip: 1.0, log_every: 50 }
    }
}

impl Training {
    fn with(steps: usize, lr: f64, cosine: bool) -> Self {
        Self { steps, lr, cosine, ..Self::default() }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            schedule: if self.cosine { Schedule::Cosine { total: self.steps } } else { Schedule::Constant },
            clip: (self.clip > 0.0).then_some(self.clip),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub samples: usize,
    pub seed: u64,
    pub body: BodyKind,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { samples: 1000, seed: 0, body: BodyKind::Xsens23 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqSection {
    pub levels: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub downsample: usize,
    pub beta: f64,
    pub hidden: usize,
    pub res_blocks: usize,
    pub ema_decay: f64,
    pub dead_after: usize,
    pub quantizer_dropout: bool,
    pub train: Training,
}

impl Default for RvqSection {
    fn default() -> Self {
        Self {
            levels: 6,
            codebook_size: 512,
            latent_dim: 32,
            downsample: 2,
            beta: 0.02,
            hidden: 128,
            res_blocks: 2,
            ema_decay: 0.99,
            dead_after: 256,
            quantizer_dropout: false,
            train: Training::with(2000, 2e-4, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub latent_dim: usize,
    pub downsample: usize,
    pub kl_weight: f64,
    pub hidden: usize,
    pub res_blocks: usize,
    pub train: Training,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self { latent_dim: 16, downsample: 2, kl_weight: 1e-4, hidden: 128, res_blocks: 2, train: Training::with(2000, 2e-4, true) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub sampling: Sampling,
    pub train: Training,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self { layers: 4, model_dim: 256, heads: 4, sampling: Sampling::GREEDY, train: Training::with(1000, 1e-4, false) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub paradigm: Paradigm,
    pub vlm_mode: VlmMode,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub decode_iters: usize,
    pub flow_steps: usize,
    pub guidance: f64,
    pub cond_dropout: f64,
    /// Weight of the stage-II objective relative to stage I in joint mode.
    pub joint_weight: f64,
    /// Initialise `ar` token embeddings from the stage-I reasoner.
    pub tie_embeddings: bool,
    /// Train latent flow matching on posterior samples; `false` uses the posterior mean.
    pub latent_samples: bool,
    pub sampling: Sampling,
    pub train: Training,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::FmLatent,
            vlm_mode: VlmMode::TwoStage,
            layers: 4,
            model_dim: 256,
            heads: 4,
            decode_iters: 10,
            flow_steps: 50,
            guidance: 1.0,
            cond_dropout: 0.1,
            joint_weight: 1.0,
            tie_embeddings: false,
            latent_samples: true,
            sampling: Sampling::GREEDY,
            train: Training::with(3000, 1e-4, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSection {
    pub motion_layers: usize,
    pub fusion_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub patch: usize,
    pub init_temperature: f64,
    pub train: Training,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        Self {
            motion_layers: 6,
            fusion_layers: 4,
            model_dim: 128,
            heads: 4,
            embed_dim: 64,
            patch: 5,
            init_temperature: 0.1,
            train: Training { batch_size: 64, ..Training::with(1500, 3e-4, false) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub retrieval_batch: usize,
    pub top_k: usize,
    /// Foot height below which a frame may count as contact, metres.
    pub contact_height: f64,
    /// Vertical foot speed below which a frame may count as contact, metres per frame.
    pub contact_speed: f64,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { retrieval_batch: 64, top_k: 1, contact_height: 0.05, contact_speed: 0.005, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Label for reports and samples; defaults to `<paradigm>-<vlm_mode>`.
    pub name: Option<String>,
    pub seed: u64,
    /// Experiment root; `EGOMOTION_ROOT` or `--root` take precedence.
    pub root: Option<PathBuf>,
    pub data: DataSection,
    pub rvq: RvqSection,
    pub vae: VaeSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub evaluator: EvaluatorSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: None,
            seed: 0,
            root: None,
            data: DataSection::default(),
            rvq: RvqSection::default(),
            vae: VaeSection::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            evaluator: EvaluatorSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.data.samples < 10 {
            return bad(format!("data.samples must be at least 10, got {}", self.data.samples));
        }
        for (name, t) in [
            ("rvq", &self.rvq.train),
            ("vae", &self.vae.train),
            ("stage1", &self.stage1.train),
            ("stage2", &self.stage2.train),
            ("evaluator", &self.evaluator.train),
        ] {
            if t.batch_size == 0 || !(t.lr > 0.0) {
                return bad(format!("{name}.train needs a positive batch size and learning rate"));
            }
        }
        if self.evaluator.train.batch_size < 2 {
            return bad("evaluator.train.batch_size must be at least 2 for contrastive pairs".into());
        }
        if self.stage2.tie_embeddings
            && (self.stage2.paradigm != Paradigm::Ar || self.stage2.model_dim != self.stage1.model_dim)
        {
            return bad("stage2.tie_embeddings needs the ar paradigm and matching model_dim".into());
        }
        if self.stage2.vlm_mode == VlmMode::Joint && !(self.stage2.joint_weight > 0.0) {
            return bad("stage2.joint_weight must be positive".into());
        }
        if self.eval.retrieval_batch == 0 || self.eval.top_k == 0 {
            return bad("eval.retrieval_batch and eval.top_k must be positive".into());
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.stage2.paradigm.name(), self.stage2.vlm_mode.name()))
    }

    /// Root from `--root`, then the environment, then the file, then `./runs/default`.
    pub fn resolve_root(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(ROOT_ENV).map(PathBuf::from))
            .or_else(|| self.root.clone())
            .unwrap_or_else(|| PathBuf::from("runs/default"))
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {spec:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in path {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {spec:?}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
