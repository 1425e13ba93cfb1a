//! Short training runs: both codecs must reconstruct held-out motion better
//! than a per-channel median predictor. A codec that ignores its latent
//! converges to that predictor.

use egomotion_core::synthdata::{build_dataset, BodyKind};
use egomotion_core::HeadCentricSequence;
use egomotion_models::data::FeatureStats;
use egomotion_models::optim::{Optim, OptimConfig};
use egomotion_models::rvq::{RvqConfig, RvqTokenizer};
use egomotion_models::vae::{MotionVae, VaeConfig};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEPS: usize = 300;

fn split() -> (Vec<HeadCentricSequence>, Vec<HeadCentricSequence>, FeatureStats) {
    let ds = build_dataset(240, 5, BodyKind::Stick7).unwrap();
    let mut seqs: Vec<HeadCentricSequence> = ds.samples.into_iter().map(|s| s.features).collect();
    let test = seqs.split_off(200);
    let stats = FeatureStats::fit(seqs.iter());
    (seqs, test, stats)
}

fn median_baseline(train: &[HeadCentricSequence], test: &[HeadCentricSequence], stats: &FeatureStats) -> f64 {
    let w = stats.width();
    let mut cols = vec![Vec::new(); w];
    for s in train {
        for (i, v) in stats.normalize(&s.data).into_iter().enumerate() {
            cols[i % w].push(v);
        }
    }
    let med: Vec<f32> = cols
        .into_iter()
        .map(|mut c| {
            c.sort_by(f32::total_cmp);
            c[c.len() / 2]
        })
        .collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in test {
        for (i, v) in stats.normalize(&s.data).into_iter().enumerate() {
            sum += (v - med[i % w]).abs() as f64;
            n += 1;
        }
    }
    sum / n as f64
}

fn optim() -> OptimConfig {
    OptimConfig { lr: 3e-3, ..Default::default() }
}

#[test]
fn vae_beats_median_predictor() {
    let (train, test, stats) = split();
    let baseline = median_baseline(&train, &test, &stats);
    let cfg = VaeConfig { latent_dim: 16, temporal_downsample: 4, hidden: 32, res_blocks: 1, ..Default::default() };
    let mut vae = MotionVae::new(cfg, 7, stats, 1).unwrap();
    let mut opt = Optim::new(vae.store.vars(), optim()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..STEPS {
        let batch: Vec<&HeadCentricSequence> = train.choose_multiple(&mut rng, 16).collect();
        vae.train_step(&batch, &mut opt, &mut rng).unwrap();
    }
    let err = vae.recon_error(&test.iter().collect::<Vec<_>>()).unwrap();
    assert!(err < 0.8 * baseline, "vae {err:.4} vs median {baseline:.4}");
}

#[test]
fn tokenizer_beats_median_predictor() {
    let (train, test, stats) = split();
    let baseline = median_baseline(&train, &test, &stats);
    let cfg = RvqConfig {
        levels: 3,
        codebook_size: 32,
        latent_dim: 8,
        temporal_downsample: 4,
        hidden: 32,
        res_blocks: 1,
        dead_after: 32,
        ..Default::default()
    };
    let mut tok = RvqTokenizer::new(cfg, 7, stats, 1).unwrap();
    let mut opt = Optim::new(tok.store.vars(), optim()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..STEPS {
        let batch: Vec<&HeadCentricSequence> = train.choose_multiple(&mut rng, 16).collect();
        tok.train_step(&batch, &mut opt).unwrap();
    }
    let err = tok.recon_error(&test.iter().collect::<Vec<_>>()).unwrap();
    assert!(err < 0.9 * baseline, "tokenizer {err:.4} vs median {baseline:.4}");
}
