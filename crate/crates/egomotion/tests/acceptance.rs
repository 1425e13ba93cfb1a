//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{Device, Tensor};
use egomotion::config::RunConfig;
use egomotion::Pipeline;
use egomotion_core::kinematics::{from_headcentric, to_headcentric};
use egomotion_core::metrics::{accel_jerk, foot_contact, foot_sliding, frechet_distance, ContactThresholds, GaussianStats};
use egomotion_core::synthdata::{build_dataset, BodyKind};
use egomotion_core::tokens::{delay, delayed_len, undelay};
use egomotion_core::{GlobalMotion, SkeletonConfig, TokenGrid};
use egomotion_models::generators::{
    euler_integrate, fm_objective, sample_mask_ratio, sample_structured_mask, Generator, GeneratorConfig, MaskSet, Paradigm,
    Target,
};
use egomotion_models::gradcheck::fd_check;
use egomotion_models::optim::{Optim, OptimConfig};
use egomotion_models::reasoner::{HiddenBatch, HiddenStates};
use egomotion_models::rvq::{commitment_loss, quantize, Codebooks, LatentMap};
use egomotion_models::sampling::Sampling;
use egomotion_models::vae::kl_term;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rvq_oracle() -> Outcome {
    let (levels, k, dim, rows) = (3, 8, 4, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let books = Codebooks::random(levels, k, dim, &mut rng);
    let z = LatentMap::new(rows, dim, (0..rows * dim).map(|_| rng.random_range(-2.0f32..2.0) as f64).collect()).unwrap();
    let q = quantize(&z, &books).unwrap();
    let mut res = z.values.clone();
    let mut mismatches = 0;
    for l in 0..levels {
        for n in 0..rows {
            let r = &res[n * dim..(n + 1) * dim];
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let d: f64 = books.entry(l, c).iter().zip(r).map(|(e, x)| (x - *e as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if q.tokens[l * rows + n] as usize != best.1 {
                mismatches += 1;
            }
            for d in 0..dim {
                res[n * dim + d] -= books.entry(l, best.1)[d] as f64;
            }
        }
    }
    let identity_breaks = z
        .values
        .iter()
        .zip(&q.zhat.values)
        .zip(&q.residuals[levels])
        .filter(|((zv, zh), r)| *zv - *zh != **r)
        .count();
    outcome(
        mismatches == 0 && identity_breaks == 0,
        format!("{mismatches} token mismatches, {identity_breaks} residual-identity breaks over {rows} vectors"),
    )
}

fn delay_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    let mut cases = 0;
    for levels in 1..=6 {
        for len in 1..=32 {
            let k = 16;
            let g = TokenGrid::new(levels, len, k, (0..levels * len).map(|_| rng.random_range(0..k as u32)).collect()).unwrap();
            let d = delay(&g);
            let ok = d.steps() == len + levels - 1 && delayed_len(len, levels) == len + levels - 1 && undelay(&d).ok() == Some(g);
            failures += usize::from(!ok);
            cases += 1;
        }
    }
    outcome(failures == 0, format!("{failures} of {cases} (L, N1) cases failed"))
}

fn headcentric_round_trip() -> Outcome {
    let ds = build_dataset(100, 3, BodyKind::Xsens23).unwrap();
    let skel = &ds.skeleton;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_joint, mut worst_invariance) = (0f64, 0f64);
    for s in &ds.samples {
        let m = &s.motion;
        assert_eq!((m.num_joints, m.num_frames()), (23, 150));
        let h0 = m.joint(0, skel.head_joint);
        let back = from_headcentric(&s.features, [h0.x, h0.y, h0.z], m.heading[0], skel).unwrap();
        for t in 0..m.num_frames() {
            for j in 0..m.num_joints {
                worst_joint = worst_joint.max((m.joint(t, j) - back.joint(t, j)).norm());
            }
        }
        let moved = m.rigid_transform(rng.random_range(-3.14..3.14), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let f = to_headcentric(&moved, skel).unwrap();
        for (a, b) in s.features.data.iter().zip(&f.data) {
            worst_invariance = worst_invariance.max((a - b).abs() as f64);
        }
    }
    outcome(
        worst_joint < 1e-4 && worst_invariance < 1e-6,
        format!("max joint error {worst_joint:.2e} m, max feature change under rigid motion {worst_invariance:.2e}"),
    )
}

fn flow_sampler() -> Outcome {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z: Vec<f64> = (0..256).map(|_| rng.random_range(-3.0..3.0)).collect();
    let e: Vec<f64> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
    let z = Tensor::from_vec(z, (4, 64), &dev).unwrap();
    let e = Tensor::from_vec(e, (4, 64), &dev).unwrap();
    let oracle = (&e - &z).unwrap();
    let out = euler_integrate(e.clone(), 1, |_, _| Ok(oracle.clone())).unwrap();
    let err = (out - &z).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    let loss = fm_objective(&oracle, &(&e - &z).unwrap()).unwrap().to_scalar::<f64>().unwrap();
    outcome(err < 1e-6 && loss < 1e-12, format!("one-step error {err:.2e}, loss at oracle {loss:.2e}"))
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut commit, mut kl, mut fm) = (0f64, 0f64, 0f64);
    for _ in 0..10 {
        let n = 12;
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let consumed: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let codes: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let f = |zt: &Tensor| {
            let res = consumed
                .iter()
                .map(|c| zt - Tensor::new(c.as_slice(), zt.device())?)
                .collect::<candle_core::Result<Vec<_>>>()?;
            let q = codes.iter().map(|c| Tensor::new(c.as_slice(), zt.device())).collect::<candle_core::Result<Vec<_>>>()?;
            commitment_loss(&res, &q, 0.02)
        };
        commit = commit.max(fd_check(&z, &f).unwrap());

        let params: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let g = |p: &Tensor| kl_term(&p.narrow(0, 0, n)?, &p.narrow(0, n, n)?);
        kl = kl.max(fd_check(&params, &g).unwrap());

        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = |p: &Tensor| fm_objective(&p.reshape((3, 4))?, &Tensor::from_vec(target.clone(), (3, 4), p.device())?);
        fm = fm.max(fd_check(&z, &h).unwrap());
    }
    outcome(
        commit < 1e-4 && kl < 1e-4 && fm < 1e-4,
        format!("worst relative error: commitment {commit:.1e}, KL {kl:.1e}, flow matching {fm:.1e}"),
    )
}

fn feet_motion(n: usize, foot: impl Fn(usize) -> [f64; 3]) -> (GlobalMotion, SkeletonConfig) {
    let skel = SkeletonConfig::new(2, 0, vec![1], 30.0).unwrap();
    let mut pos = Vec::with_capacity(n * 6);
    for t in 0..n {
        let f = foot(t);
        pos.extend([f[0], 1.6, f[2]]);
        pos.extend(f);
    }
    (GlobalMotion::new(2, 30.0, pos, vec![0.0; n]).unwrap(), skel)
}

fn metric_closed_forms() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let d = 6;
    let mu = nalgebra::DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0, -0.25]);
    let a = GaussianStats::new(nalgebra::DVector::zeros(d), nalgebra::DMatrix::identity(d, d), 10).unwrap();
    let b = GaussianStats::new(mu.clone(), nalgebra::DMatrix::identity(d, d), 10).unwrap();
    let fid_err = (frechet_distance(&a, &b).unwrap() - mu.norm_squared()).abs();
    pass &= fid_err < 1e-6;
    notes.push(format!("FID error {fid_err:.1e}"));

    let (amp, omega, n) = (0.2, 0.15, 150);
    let pos: Vec<f64> = (0..n).flat_map(|t| [amp * (omega * t as f64).sin(), 0.0, 0.0]).collect();
    let (acc, jerk) = accel_jerk(&GlobalMotion::new(1, 30.0, pos, vec![0.0; n]).unwrap()).unwrap();
    let want_a = (1..n - 1).map(|t| amp * omega.powi(2) * (omega * t as f64).sin().abs()).sum::<f64>() / (n - 2) as f64;
    let want_j =
        (1..n - 2).map(|t| amp * omega.powi(3) * (omega * (t as f64 + 0.5)).cos().abs()).sum::<f64>() / (n - 3) as f64;
    let (ra, rj) = ((acc / want_a - 1.0).abs(), (jerk / want_j - 1.0).abs());
    pass &= ra < 0.05 && rj < 0.05;
    notes.push(format!("sinusoid accel/jerk rel. error {ra:.3}/{rj:.3}"));

    let (pinned, skel) = feet_motion(30, |_| [0.3, 0.0, -0.2]);
    let th = ContactThresholds::default();
    let fs = foot_sliding(&pinned, &skel, th).unwrap().value;
    let fc = foot_contact(&pinned, &skel).unwrap();
    let (glide, _) = feet_motion(30, |t| [0.01 * t as f64, 0.0, 0.02 * t as f64]);
    let (ca, cj) = accel_jerk(&glide).unwrap();
    let (pa, pj) = accel_jerk(&pinned).unwrap();
    let zeros = [fs, fc, ca, cj, pa, pj];
    let worst = zeros.iter().fold(0f64, |m, v| m.max(v.abs()));
    pass &= worst < 1e-12;
    notes.push(format!("pinned/constant-velocity FS, FC, Acce, Jerk max {worst:.1e}"));
    outcome(pass, notes.join("; "))
}

fn structured_masking() -> Outcome {
    let (n1, levels, k) = (40, 6, 16);
    let cfg = GeneratorConfig {
        paradigm: Paradigm::Masked,
        layers: 1,
        model_dim: 8,
        heads: 2,
        cond_dim: 4,
        seq_len: n1,
        levels,
        codebook_size: k,
        value_dim: 0,
        decode_iters: 1,
        flow_steps: 1,
        guidance: 1.0,
        cond_dropout: 0.0,
    };
    let g = Generator::new(cfg, None, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = TokenGrid::new(levels, n1, k, (0..levels * n1).map(|i| (i % k) as u32).collect()).unwrap();
    let masks: Vec<MaskSet> = (0..10_000)
        .map(|_| sample_structured_mask(n1, sample_mask_ratio(&mut rng), &mut rng).unwrap())
        .collect();
    let grids = vec![&grid; masks.len()];
    let mut partial = 0;
    let mut empty = 0;
    for (ids, mask) in g.masked_inputs(&grids, &masks).iter().zip(&masks) {
        empty += usize::from(mask.indices.is_empty());
        for (n, step) in ids.iter().enumerate() {
            let hidden = step.iter().filter(|&&t| t == k as u32).count();
            if hidden != 0 && hidden != levels || (hidden == levels) != mask.contains(n) {
                partial += 1;
            }
        }
    }
    outcome(partial == 0 && empty == 0, format!("{partial} partially masked timesteps, {empty} empty masks over 10000 masks"))
}

fn desk_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(Some(&path), &[]).unwrap()
}

fn desk_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config();
    assert_eq!(cfg.data.samples, 1000);
    let vocab = (cfg.rvq.codebook_size + 3) as f64;
    let mut p = Pipeline::new(cfg.clone(), dir.path().to_path_buf()).unwrap();
    let latent = p.run().unwrap();

    p.cfg.name = Some("fm_latent-untrained".into());
    p.cfg.stage2.train.steps = 0;
    let untrained = p.run().unwrap();

    p.cfg = cfg;
    p.cfg.stage2.paradigm = Paradigm::FmRaw;
    let raw = p.run().unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let s1 = latent.stage1_loss.unwrap_or(f64::INFINITY);
    let (l, u, r) = (&latent.report, &untrained.report, &raw.report);
    let a = s1 < vocab.ln() / 2.0;
    let b = latent.reference.r_top1 > 3.0 / 64.0;
    let c = l.fid < u.fid && l.jerk < u.jerk && l.jerk <= r.jerk;
    let detail = format!(
        "(a) stage-I loss {s1:.3} vs {:.3} {}; (b) held-out R@1 {:.3} vs {:.3} {}; \
         (c) FID {:.3} vs untrained {:.3}, Jerk {:.2e} vs untrained {:.2e} and raw {:.2e} {}; {minutes:.1} min",
        vocab.ln() / 2.0,
        verdict(a),
        latent.reference.r_top1,
        3.0 / 64.0,
        verdict(b),
        l.fid,
        u.fid,
        l.jerk,
        u.jerk,
        r.jerk,
        verdict(c),
    );
    outcome(a && b && c && minutes < 30.0, detail)
}

fn frozen_contract() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_config();
    cfg.data.samples = 100;
    cfg.rvq.train.steps = 20;
    cfg.vae.train.steps = 20;
    cfg.stage1.train.steps = 20;
    cfg.evaluator.train.steps = 5;
    cfg.stage2.train.steps = 50;
    cfg.eval.retrieval_batch = 16;
    let mut notes = Vec::new();
    let mut pass = true;
    for paradigm in Paradigm::ALL {
        cfg.stage2.paradigm = paradigm;
        let mut p = Pipeline::new(cfg.clone(), dir.path().to_path_buf()).unwrap();
        let s = p.run().unwrap();
        let stored = p.exp.entry("stage1").unwrap().unwrap().weight_hash;
        let same = s.reasoner_hash_before == s.reasoner_hash_after && s.reasoner_hash_after == stored;
        pass &= same;
        notes.push(format!("{paradigm} {}", if same { "unchanged" } else { "CHANGED" }));
    }
    outcome(pass, format!("reasoner weight hash across stage II: {}", notes.join(", ")))
}

fn memorization() -> Outcome {
    let (levels, k, n1, cond) = (3, 64, 16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grids: Vec<TokenGrid> = (0..8)
        .map(|_| TokenGrid::new(levels, n1, k, (0..levels * n1).map(|_| rng.random_range(0..k as u32)).collect()).unwrap())
        .collect();
    let states: Vec<HiddenStates> = (0..8)
        .map(|i| {
            let rows = 6 + i % 4;
            HiddenStates { rows, dim: cond, values: (0..rows * cond).map(|_| rng.sample::<f32, _>(StandardNormal)).collect() }
        })
        .collect();
    let h = HiddenBatch::from_states(&states, 10, &Device::Cpu).unwrap();
    let refs: Vec<&TokenGrid> = grids.iter().collect();
    let accuracy = |out: &[TokenGrid]| -> f64 {
        let hits: usize =
            out.iter().zip(&grids).map(|(a, b)| a.tokens.iter().zip(&b.tokens).filter(|(x, y)| x == y).count()).sum();
        hits as f64 / (8 * levels * n1) as f64
    };
    let mut notes = Vec::new();
    let mut pass = true;
    for paradigm in [Paradigm::Ar, Paradigm::Masked] {
        let cfg = GeneratorConfig {
            paradigm,
            layers: 2,
            model_dim: 64,
            heads: 4,
            cond_dim: cond,
            seq_len: n1,
            levels,
            codebook_size: k,
            value_dim: 0,
            decode_iters: 10,
            flow_steps: 1,
            guidance: 1.0,
            cond_dropout: 0.0,
        };
        let mut g = Generator::new(cfg, None, 11).unwrap();
        let mut opt = Optim::new(g.store.vars(), OptimConfig { lr: 2e-3, weight_decay: 0.0, ..Default::default() }).unwrap();
        let mut reached = None;
        let mut acc = 0.0;
        for step in 1..=2000 {
            g.train_step(Target::Tokens(&refs), &h, &mut opt, &mut rng).unwrap();
            if step % 100 == 0 {
                let out = match paradigm {
                    Paradigm::Ar => g.ar_generate(&h, Sampling::GREEDY, &mut rng).unwrap(),
                    _ => g.masked_generate(&h, 10, Sampling::GREEDY, &mut rng).unwrap().0,
                };
                acc = accuracy(&out);
                if acc >= 0.9 {
                    reached = Some(step);
                    break;
                }
            }
        }
        pass &= reached.is_some();
        notes.push(match reached {
            Some(s) => format!("{paradigm} {:.1}% at step {s}", 100.0 * acc),
            None => format!("{paradigm} only {:.1}% after 2000 steps", 100.0 * acc),
        });
    }
    outcome(pass, notes.join(", "))
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "RVQ matches exhaustive nearest neighbour", rvq_oracle),
        (2, "delay/undelay round trip", delay_round_trip),
        (3, "head-centric round trip and rigid invariance", headcentric_round_trip),
        (4, "flow-matching Euler sampler under the oracle field", flow_sampler),
        (5, "finite-difference gradient checks", gradient_checks),
        (6, "metric closed forms", metric_closed_forms),
        (7, "structured masking hides whole timesteps", structured_masking),
        (8, "desk-scale end to end", desk_end_to_end),
        (9, "two-stage runs keep the reasoner frozen", frozen_contract),
        (10, "AR and masked overfit memorization", memorization),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!(
            "criterion {n:>2} {}: {name} | {} | {:.1}s",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
