use super::*;
use crate::optim::OptimConfig;
use proptest::prelude::{prop_assert_eq, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(levels: usize, k: usize, len: usize) -> ReasonerConfig {
    ReasonerConfig {
        layers: 2,
        model_dim: 32,
        heads: 4,
        levels,
        codebook_size: k,
        text_vocab: 12,
        max_text_len: 6,
        image_dim: 4,
        pose_dim: 3,
        max_steps: delayed_len(len, levels),
    }
}

fn bundle(rng: &mut ChaCha8Rng, text_len: usize) -> ConditionBundle {
    ConditionBundle {
        image_feature: (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        instruction: (0..text_len).map(|_| rng.random_range(0..12u16)).collect(),
        init_pose: (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    }
}

fn grid(rng: &mut ChaCha8Rng, levels: usize, len: usize, k: usize) -> TokenGrid {
    TokenGrid::new(levels, len, k, (0..levels * len).map(|_| rng.random_range(0..k as u32)).collect()).unwrap()
}

/// Mean NLL computed cell by cell with an explicit log-sum-exp.
fn oracle_nll(logits: &[Vec<Vec<Vec<f32>>>], grids: &[&DelayedGrid]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (b, g) in grids.iter().enumerate() {
        for p in 0..g.steps() {
            for l in 0..g.levels {
                if l <= p && p < l + g.len {
                    let row = &logits[b][p][l];
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
                    let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
                    total += lse - row[g.get(l, p) as usize] as f64;
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

#[test]
fn prefix_rows_track_instruction_length() {
    let r = Reasoner::new(config(2, 8, 4), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [1, 3, 6] {
        let h = r.extract_hidden(&bundle(&mut rng, t)).unwrap();
        assert_eq!((h.rows, h.dim), (t + 2, 32));
        assert!(h.values.iter().all(|v| v.is_finite()));
    }
    assert!(r.extract_hidden(&bundle(&mut rng, 7)).is_err());
}

#[test]
fn hidden_states_ignore_unused_slots() {
    let r = Reasoner::new(config(2, 8, 4), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let short = bundle(&mut rng, 2);
    let long = bundle(&mut rng, 6);
    let alone = r.extract_hidden(&short).unwrap();
    let batched = r.hidden_batch(&[&short, &long]).unwrap().to_states().unwrap();
    assert_eq!(batched[0].rows, 4);
    for (a, b) in alone.values.iter().zip(&batched[0].values) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn logits_shape_and_bitwise_causality() {
    let (levels, k, len) = (3, 8, 5);
    let r = Reasoner::new(config(levels, k, len), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = bundle(&mut rng, 3);
    let g = grid(&mut rng, levels, len, k);
    let d = delay(&g);
    let base = r.forward(&[&c], &[&d]).unwrap();
    let steps = delayed_len(len, levels);
    assert_eq!(base.dims(), &[1, steps, levels, k + 3]);
    let base = base.to_vec3_at0();
    for q in 0..steps {
        let mut e = d.clone();
        for l in 0..levels {
            if is_valid(l, q, len) {
                let i = l * steps + q;
                e.tokens[i] = (e.tokens[i] + 1) % k as u32;
            }
        }
        let out = r.forward(&[&c], &[&e]).unwrap().to_vec3_at0();
        for p in 0..=q {
            assert_eq!(out[p], base[p], "step {p} saw a change at step {q}");
        }
        if q + 1 < steps {
            assert_ne!(out[q + 1], base[q + 1]);
        }
    }
}

trait At0 {
    fn to_vec3_at0(&self) -> Vec<Vec<Vec<f32>>>;
}

impl At0 for Tensor {
    fn to_vec3_at0(&self) -> Vec<Vec<Vec<f32>>> {
        self.i(0).unwrap().to_vec3().unwrap()
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = delay(&grid(&mut rng, 3, 4, 10));
    let logits = Tensor::zeros((1, d.steps(), 3, 13), DType::F32, &Device::Cpu).unwrap();
    let nll = delayed_nll(&logits, &[&d]).unwrap().to_scalar::<f32>().unwrap() as f64;
    assert!((nll - 13f64.ln()).abs() < 1e-5);
}

#[test]
fn nll_matches_cellwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grids: Vec<DelayedGrid> = (0..2).map(|_| delay(&grid(&mut rng, 3, 4, 6))).collect();
    let refs: Vec<&DelayedGrid> = grids.iter().collect();
    let steps = grids[0].steps();
    let vals: Vec<f32> = (0..2 * steps * 3 * 9).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    let logits = Tensor::from_vec(vals, (2, steps, 3, 9), &Device::Cpu).unwrap();
    let got = delayed_nll(&logits, &refs).unwrap().to_scalar::<f32>().unwrap() as f64;
    let nested: Vec<Vec<Vec<Vec<f32>>>> = (0..2).map(|b| logits.i(b).unwrap().to_vec3().unwrap()).collect();
    let want = oracle_nll(&nested, &refs);
    assert!((got - want).abs() < 1e-5 * want.abs().max(1.0), "{got} vs {want}");
}

proptest! {
    #[test]
    fn pad_cells_never_reach_the_loss(seed in 0u64..1000, noise in -50.0f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = rng.random_range(1..4usize);
        let len = rng.random_range(1..6usize);
        let d = delay(&grid(&mut rng, levels, len, 5));
        let steps = d.steps();
        let vals: Vec<f32> = (0..steps * levels * 8).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let mut pert = vals.clone();
        let mut e = d.clone();
        for p in 0..steps {
            for l in 0..levels {
                if !is_valid(l, p, len) {
                    for v in 0..8 {
                        pert[(p * levels + l) * 8 + v] += noise * (v as f32 + 1.0);
                    }
                    e.tokens[l * steps + p] = rng.random_range(0..8);
                }
            }
        }
        let dev = Device::Cpu;
        let a = delayed_nll(&Tensor::from_vec(vals, (1, steps, levels, 8), &dev).unwrap(), &[&d]).unwrap();
        let b = delayed_nll(&Tensor::from_vec(pert, (1, steps, levels, 8), &dev).unwrap(), &[&e]).unwrap();
        prop_assert_eq!(a.to_scalar::<f32>().unwrap().to_bits(), b.to_scalar::<f32>().unwrap().to_bits());
    }
}

#[test]
fn memorizes_a_small_set() {
    let (levels, k, len) = (2, 16, 6);
    let mut r = Reasoner::new(config(levels, k, len), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let conds: Vec<ConditionBundle> = (0..8).map(|_| bundle(&mut rng, 4)).collect();
    let grids: Vec<TokenGrid> = (0..8).map(|_| grid(&mut rng, levels, len, k)).collect();
    let cr: Vec<&ConditionBundle> = conds.iter().collect();
    let gr: Vec<&TokenGrid> = grids.iter().collect();
    let mut opt = Optim::new(r.store.vars(), OptimConfig { lr: 3e-3, weight_decay: 0.0, ..Default::default() }).unwrap();
    let first = r.train_step(&cr, &gr, &mut opt).unwrap();
    let mut last = first;
    for _ in 0..300 {
        last = r.train_step(&cr, &gr, &mut opt).unwrap();
    }
    assert!(last < 0.1 * first, "{first} -> {last}");
    let out = r.generate_tokens(&cr, len, Sampling::GREEDY, &mut rng).unwrap();
    let hits: usize = out.iter().zip(&grids).map(|(a, b)| a.tokens.iter().zip(&b.tokens).filter(|(x, y)| x == y).count()).sum();
    let acc = hits as f64 / (8 * levels * len) as f64;
    assert!(acc >= 0.9, "token accuracy {acc}");
    for g in &out {
        assert!(g.tokens.iter().all(|&t| t < k as u32));
    }
}

#[test]
fn checkpoint_round_trip() {
    let r = Reasoner::new(config(2, 8, 4), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let c = bundle(&mut rng, 5);
    let bytes = r.to_checkpoint().unwrap().to_bytes().unwrap();
    let back = Reasoner::from_checkpoint(&Checkpoint::from_bytes(&bytes, &Device::Cpu).unwrap()).unwrap();
    assert_eq!(back.config, r.config);
    assert_eq!(back.weight_hash().unwrap(), r.weight_hash().unwrap());
    assert_eq!(back.extract_hidden(&c).unwrap(), r.extract_hidden(&c).unwrap());
    assert_ne!(Reasoner::new(r.config, 22).unwrap().weight_hash().unwrap(), r.weight_hash().unwrap());
}

#[test]
fn condition_embedding_sensitivity() {
    let r = Reasoner::new(config(2, 8, 4), 30).unwrap();
    let zero = ConditionBundle { image_feature: vec![0.0; 4], instruction: vec![3, 5, 7], init_pose: vec![0.0; 3] };
    let (emb, _) = r.embed_condition(&[&zero]).unwrap();
    assert!(emb.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    let mut permuted = zero.clone();
    permuted.instruction.reverse();
    let (other, _) = r.embed_condition(&[&permuted]).unwrap();
    assert_ne!(emb.flatten_all().unwrap().to_vec1::<f32>().unwrap(), other.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    let a = r.extract_hidden(&zero).unwrap();
    assert_eq!(a, r.extract_hidden(&zero.clone()).unwrap());
    let mut changed = zero.clone();
    changed.instruction[1] = 6;
    assert!(a.distance(&r.extract_hidden(&changed).unwrap()) > 0.0);
}

#[test]
fn loss_decreases_on_a_toy_set() {
    let (levels, k, len) = (2, 16, 6);
    let mut r = Reasoner::new(config(levels, k, len), 40).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let conds: Vec<ConditionBundle> = (0..32).map(|i| bundle(&mut rng, 1 + i % 6)).collect();
    let grids: Vec<TokenGrid> = (0..32).map(|_| grid(&mut rng, levels, len, k)).collect();
    let cr: Vec<&ConditionBundle> = conds.iter().collect();
    let gr: Vec<&TokenGrid> = grids.iter().collect();
    let mut opt = Optim::new(r.store.vars(), OptimConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() }).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| r.train_step(&cr, &gr, &mut opt).unwrap()).collect();
    let window = |a: usize| losses[a..a + 20].iter().sum::<f64>() / 20.0;
    for w in (0..180).step_by(20).collect::<Vec<_>>().windows(2) {
        assert!(window(w[1]) < window(w[0]), "{losses:?}");
    }
    assert!(losses[199] < losses[0]);
}
