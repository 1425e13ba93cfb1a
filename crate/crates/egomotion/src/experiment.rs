//! On-disk layout of one experiment root.
//!
//! ```text
//! <root>/data/                  dataset manifest, motions, conditions
//! <root>/checkpoints/           <kind>-<hash>.safetensors
//! <root>/index.json             stage -> checkpoint, weight hash, config fingerprint
//! <root>/logs/<stage>.jsonl     training curves
//! <root>/samples/<label>/       generated motions
//! <root>/reports/<label>.json   metric reports
//! <root>/plots/
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Device;
use egomotion_core::metrics::MetricReport;
use egomotion_models::checkpoint::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Relative to the experiment root.
    pub path: PathBuf,
    pub weight_hash: String,
    /// Serialized slice of the config the checkpoint was trained under.
    pub fingerprint: serde_json::Value,
    /// Smoothed training loss at the last step.
    #[serde(default)]
    pub final_loss: Option<f64>,
}

pub type Index = BTreeMap<String, IndexEntry>;

#[derive(Debug, Clone)]
pub struct Experiment {
    pub root: PathBuf,
}

impl Experiment {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples_dir(&self, label: &str) -> PathBuf {
        self.root.join("samples").join(label)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn has_dataset(&self) -> bool {
        self.data_dir().join("manifest.json").exists()
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    pub fn index(&self) -> Result<Index> {
        match fs::read(self.index_path()) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Index::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn entry(&self, stage: &str) -> Result<Option<IndexEntry>> {
        Ok(self.index()?.remove(stage))
    }

    /// Writes the checkpoint under its content hash and points `stage` at it.
    pub fn record(
        &self,
        stage: &str,
        ckpt: &Checkpoint,
        weight_hash: String,
        fingerprint: serde_json::Value,
        final_loss: Option<f64>,
    ) -> Result<PathBuf> {
        let path = ckpt.save_hashed(&self.checkpoints_dir())?;
        let rel = path.strip_prefix(&self.root).unwrap_or(&path).to_path_buf();
        let mut index = self.index()?;
        index.insert(stage.to_string(), IndexEntry { path: rel, weight_hash, fingerprint, final_loss });
        let tmp = self.index_path().with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&index)?)?;
        fs::rename(tmp, self.index_path())?;
        Ok(path)
    }

    /// Loads the checkpoint recorded for `stage`, naming `command` if it is absent.
    pub fn checkpoint(&self, stage: &str, command: &'static str) -> Result<Checkpoint> {
        let entry = self
            .entry(stage)?
            .ok_or_else(|| HarnessError::MissingStage { stage: stage.to_string(), command })?;
        Ok(Checkpoint::load(&self.root.join(entry.path), &Device::Cpu)?)
    }

    /// The checkpoint for `stage` only if it was trained under `fingerprint`.
    pub fn reusable(&self, stage: &str, fingerprint: &serde_json::Value) -> Result<Option<Checkpoint>> {
        match self.entry(stage)? {
            Some(e) if &e.fingerprint == fingerprint => {
                Ok(Some(Checkpoint::load(&self.root.join(e.path), &Device::Cpu)?))
            }
            _ => Ok(None),
        }
    }

    pub fn write_report(&self, label: &str, report: &MetricReport) -> Result<PathBuf> {
        let dir = self.reports_dir();
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{label}.json"));
        fs::write(&path, serde_json::to_vec_pretty(report)?)?;
        Ok(path)
    }

    pub fn read_report(path: &Path) -> Result<MetricReport> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn log(&self, stage: &str) -> Result<LossLog> {
        let dir = self.root.join("logs");
        fs::create_dir_all(&dir)?;
        let file = fs::File::create(dir.join(format!("{stage}.jsonl")))?;
        Ok(LossLog { stage: stage.to_string(), out: BufWriter::new(file) })
    }
}

/// One JSON object per logged step.
pub struct LossLog {
    stage: String,
    out: BufWriter<fs::File>,
}

impl LossLog {
    pub fn record(&mut self, step: usize, values: &[(&str, f64)]) -> Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("step".into(), step.into());
        for (k, v) in values {
            obj.insert((*k).into(), serde_json::Value::from(*v));
        }
        writeln!(self.out, "{}", serde_json::Value::Object(obj))?;
        let shown: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        log::info!("{} step {step}: {}", self.stage, shown.join(" "));
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
