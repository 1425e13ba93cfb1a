use super::*;
use crate::optim::OptimConfig;
use egomotion_core::metrics::r_precision;
use egomotion_core::synthdata::{build_dataset, BodyKind, IMAGE_FEATURE_DIM, MAX_TEXT_LEN, VOCABULARY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn config(width: usize) -> EvaluatorConfig {
    EvaluatorConfig {
        motion_layers: 6,
        fusion_layers: 4,
        model_dim: 32,
        heads: 4,
        embed_dim: 16,
        patch: 10,
        feature_width: width,
        max_frames: 150,
        image_dim: IMAGE_FEATURE_DIM,
        text_vocab: VOCABULARY.len(),
        max_text_len: MAX_TEXT_LEN,
        init_temperature: 0.1,
    }
}

fn random_pairs(n: usize, width: usize, rng: &mut ChaCha8Rng) -> (Vec<HeadCentricSequence>, Vec<ConditionBundle>) {
    let seqs = (0..n)
        .map(|_| {
            let data = (0..40 * width).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            HeadCentricSequence::new((width - 8) / 3, data).unwrap()
        })
        .collect();
    let conds = (0..n)
        .map(|_| ConditionBundle {
            image_feature: (0..IMAGE_FEATURE_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            instruction: (0..rng.random_range(1..MAX_TEXT_LEN)).map(|_| rng.random_range(0..VOCABULARY.len() as u16)).collect(),
            init_pose: vec![0.0; width],
        })
        .collect();
    (seqs, conds)
}

#[test]
fn embeddings_are_unit_norm_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (seqs, conds) = random_pairs(5, 29, &mut rng);
    let e = Evaluator::new(config(29), FeatureStats::identity(29), 1).unwrap();
    let sr: Vec<&HeadCentricSequence> = seqs.iter().collect();
    let cr: Vec<&ConditionBundle> = conds.iter().collect();
    let m = e.embed_motions(&sr, 2).unwrap();
    let c = e.embed_conditions(&cr, 3).unwrap();
    for v in m.iter().chain(&c) {
        assert_eq!(v.len(), 16);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
    assert_eq!(m, e.embed_motions(&sr, 2).unwrap());
    for (a, b) in m.iter().zip(&e.embed_motions(&sr, 5).unwrap()) {
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-5));
    }
    assert_eq!(c, e.embed_conditions(&cr, 3).unwrap());
}

#[test]
fn info_nce_matches_closed_form() {
    let dev = Device::Cpu;
    let m = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0], [0.6, 0.8]], &dev).unwrap();
    let c = Tensor::new(&[[0.0f64, 1.0], [1.0, 0.0], [0.8, 0.6]], &dev).unwrap();
    let t = 0.5f64;
    let got = info_nce(&m, &c, &Tensor::new(&[t.ln()], &dev).unwrap()).unwrap().to_scalar::<f64>().unwrap();
    let mv = m.to_vec2::<f64>().unwrap();
    let cv = c.to_vec2::<f64>().unwrap();
    let sim = |i: usize, j: usize| (mv[i][0] * cv[j][0] + mv[i][1] * cv[j][1]) / t;
    let ce = |row: &dyn Fn(usize) -> f64, own: f64| -> f64 {
        let lse = (0..3).map(|j| row(j).exp()).sum::<f64>().ln();
        lse - own
    };
    let mut want = 0.0;
    for i in 0..3 {
        want += ce(&|j| sim(i, j), sim(i, i));
        want += ce(&|j| sim(j, i), sim(i, i));
    }
    want /= 6.0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn untrained_retrieval_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (seqs, conds) = random_pairs(640, 29, &mut rng);
    let e = Evaluator::new(config(29), FeatureStats::identity(29), 3).unwrap();
    let m = e.embed_motions(&seqs.iter().collect::<Vec<_>>(), 64).unwrap();
    let c = e.embed_conditions(&conds.iter().collect::<Vec<_>>(), 64).unwrap();
    let r = r_precision(&m, &c, 64, 1, 0).unwrap();
    let p: f64 = 1.0 / 64.0;
    let sigma = (p * (1.0 - p) / 640.0).sqrt();
    assert!((r - p).abs() <= 3.0 * sigma, "R@1 {r}");
}

#[test]
fn contrastive_training_reduces_loss() {
    let ds = build_dataset(40, 4, BodyKind::Stick7).unwrap();
    let seqs: Vec<&HeadCentricSequence> = ds.samples.iter().take(32).map(|s| &s.features).collect();
    let conds: Vec<&ConditionBundle> = ds.samples.iter().take(32).map(|s| &s.condition).collect();
    let stats = FeatureStats::fit(seqs.iter().copied());
    let mut e = Evaluator::new(config(29), stats, 5).unwrap();
    let mut opt = Optim::new(e.store.vars(), OptimConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() }).unwrap();
    let first = e.train_step(&seqs, &conds, &mut opt).unwrap();
    let mut last = first;
    for _ in 0..40 {
        last = e.train_step(&seqs, &conds, &mut opt).unwrap();
    }
    assert!(last < 0.8 * first, "{first} -> {last}");
    assert!(e.temperature().unwrap() > 0.0);
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (seqs, conds) = random_pairs(3, 29, &mut rng);
    let stats = FeatureStats { mean: vec![0.1; 29], std: vec![2.0; 29] };
    let e = Evaluator::new(config(29), stats, 7).unwrap();
    let bytes = e.to_checkpoint().unwrap().to_bytes().unwrap();
    let back = Evaluator::from_checkpoint(&Checkpoint::from_bytes(&bytes, &Device::Cpu).unwrap()).unwrap();
    assert_eq!(back.weight_hash().unwrap(), e.weight_hash().unwrap());
    assert_eq!(back.stats, e.stats);
    let sr: Vec<&HeadCentricSequence> = seqs.iter().collect();
    let cr: Vec<&ConditionBundle> = conds.iter().collect();
    assert_eq!(back.embed_motions(&sr, 3).unwrap(), e.embed_motions(&sr, 3).unwrap());
    assert_eq!(back.embed_conditions(&cr, 3).unwrap(), e.embed_conditions(&cr, 3).unwrap());
}
