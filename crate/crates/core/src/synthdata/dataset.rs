use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{realize, render_condition, sample_script, scene_for_script, Body, BodyKind, MotionScript, Scene};
use crate::condition::ConditionBundle;
use crate::error::{Error, Result};
use crate::io;
use crate::kinematics::{to_headcentric, GlobalMotion, HeadCentricSequence, SkeletonConfig};

pub const MANIFEST_VERSION: u32 = 1;
const SPLIT_SALT: u64 = 0x5eed_5b17;

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub body: BodyKind,
    pub sample_seeds: Vec<u64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub script: MotionScript,
    pub scene: Scene,
    pub motion: GlobalMotion,
    pub features: HeadCentricSequence,
    pub condition: ConditionBundle,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub skeleton: SkeletonConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.manifest.train.iter().map(|&i| &self.samples[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.manifest.test.iter().map(|&i| &self.samples[i])
    }
}

fn generate_sample(id: usize, seed: u64, body: &Body) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let script = sample_script(&mut rng);
    let scene = scene_for_script(&script);
    let motion = realize(&script, body);
    let skel = body.skeleton(motion.fps);
    let features = to_headcentric(&motion, &skel)?;
    let condition = render_condition(&script, &scene, features.frame(0), &mut rng);
    Ok(Sample { id, script, scene, motion, features, condition })
}

/// Seeded dataset with an 80/20 train/test split.
pub fn build_dataset(n: usize, seed: u64, body: BodyKind) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Config(format!("dataset needs at least 10 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_train = n * 4 / 5;
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    regenerate(&Manifest { version: MANIFEST_VERSION, seed, body, sample_seeds, train, test })
}

pub fn regenerate(manifest: &Manifest) -> Result<Dataset> {
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    let body = Body::new(manifest.body);
    let samples = manifest
        .sample_seeds
        .iter()
        .enumerate()
        .map(|(id, &s)| generate_sample(id, s, &body))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest: manifest.clone(), skeleton: body.skeleton(super::FPS), samples })
}

fn sample_stem(id: usize) -> String {
    format!("{id:06}")
}

/// Writes `manifest.json`, `scripts.json`, `motions/*.egom` and `conditions/*.egoc`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("motions"))?;
    fs::create_dir_all(dir.join("conditions"))?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&ds.manifest)?)?;
    let scripts: Vec<&MotionScript> = ds.samples.iter().map(|s| &s.script).collect();
    fs::write(dir.join("scripts.json"), serde_json::to_vec(&scripts)?)?;
    for s in &ds.samples {
        let stem = sample_stem(s.id);
        io::save_motion(&dir.join("motions").join(format!("{stem}.egom")), &s.motion)?;
        io::save_condition(&dir.join("conditions").join(format!("{stem}.egoc")), &s.condition)?;
    }
    Ok(())
}

/// Loads a dataset directory by regenerating from its manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    regenerate(&manifest)
}
