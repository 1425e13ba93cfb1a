use super::*;
use egomotion_core::synthdata::BodyKind;

fn tiny(paradigm: Paradigm, mode: VlmMode) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.samples = 40;
    c.data.body = BodyKind::Stick7;
    let small = |steps: usize| Training { steps, batch_size: 4, lr: 1e-3, log_every: 0, ..Training::default() };
    c.rvq.levels = 2;
    c.rvq.codebook_size = 16;
    c.rvq.latent_dim = 8;
    c.rvq.hidden = 16;
    c.rvq.res_blocks = 1;
    c.rvq.downsample = 5;
    c.rvq.train = small(3);
    c.vae.latent_dim = 4;
    c.vae.hidden = 16;
    c.vae.res_blocks = 1;
    c.vae.downsample = 5;
    c.vae.train = small(3);
    c.stage1.layers = 1;
    c.stage1.model_dim = 16;
    c.stage1.heads = 2;
    c.stage1.train = small(3);
    c.stage2.paradigm = paradigm;
    c.stage2.vlm_mode = mode;
    c.stage2.layers = 1;
    c.stage2.model_dim = 16;
    c.stage2.heads = 2;
    c.stage2.decode_iters = 2;
    c.stage2.flow_steps = 2;
    c.stage2.train = small(3);
    c.evaluator.motion_layers = 1;
    c.evaluator.fusion_layers = 1;
    c.evaluator.model_dim = 16;
    c.evaluator.heads = 2;
    c.evaluator.embed_dim = 4;
    c.evaluator.patch = 10;
    c.evaluator.train = small(2);
    c.eval.retrieval_batch = 4;
    c
}

fn pipeline(cfg: RunConfig) -> (tempfile::TempDir, Pipeline) {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(cfg, dir.path().to_path_buf()).unwrap();
    (dir, p)
}

#[test]
fn missing_prerequisites_name_the_command() {
    let (_d, mut p) = pipeline(tiny(Paradigm::FmLatent, VlmMode::TwoStage));
    let missing = |r: Result<()>| match r {
        Err(HarnessError::MissingStage { command, .. }) => command,
        other => panic!("expected a missing stage, got {:?}", other.err()),
    };
    assert_eq!(missing(p.train_rvq().map(|_| ())), "gen-data");
    p.gen_data().unwrap();
    assert_eq!(missing(p.train_stage1().map(|_| ())), "train-rvq");
    assert_eq!(missing(p.train_stage2().map(|_| ())), "train-stage1");
    assert_eq!(missing(p.eval().map(|_| ())), "train-evaluator");
    p.train_rvq().unwrap();
    p.train_stage1().unwrap();
    assert_eq!(missing(p.train_stage2().map(|_| ())), "train-vae");
}

#[test]
fn two_stage_and_frozen_keep_the_reasoner_fixed() {
    for mode in [VlmMode::TwoStage, VlmMode::Frozen] {
        let (_d, mut p) = pipeline(tiny(Paradigm::FmRaw, mode));
        let s = p.run().unwrap();
        assert_eq!(s.reasoner_hash_before, s.reasoner_hash_after, "{mode:?}");
        assert_eq!(s.stage1_loss.is_some(), mode == VlmMode::TwoStage);
    }
}

#[test]
fn joint_training_moves_the_reasoner() {
    let (_d, mut p) = pipeline(tiny(Paradigm::Masked, VlmMode::Joint));
    let s = p.run().unwrap();
    assert_ne!(s.reasoner_hash_before, s.reasoner_hash_after);
}

#[test]
fn every_paradigm_produces_a_valid_report() {
    for paradigm in Paradigm::ALL {
        let (_d, mut p) = pipeline(tiny(paradigm, VlmMode::TwoStage));
        let s = p.run().unwrap();
        s.report.validate().unwrap();
        assert!(s.report_path.exists());
        let n_test = p.dataset().unwrap().manifest.test.len();
        let written = fs::read_dir(p.exp.samples_dir(&s.label)).unwrap().count();
        assert_eq!(written, n_test, "{paradigm}");
        let (again, _) = p.eval().unwrap();
        assert_eq!(again, s.report, "{paradigm}: stored models reproduce the run");
    }
}

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let cfg = tiny(Paradigm::Ar, VlmMode::TwoStage);
    let (_a, mut p) = pipeline(cfg.clone());
    let (_b, mut q) = pipeline(cfg);
    let (x, y) = (p.run().unwrap(), q.run().unwrap());
    assert_eq!(x.report, y.report);
    assert_eq!(x.reasoner_hash_after, y.reasoner_hash_after);
}

#[test]
fn run_reuses_matching_checkpoints() {
    let (_d, mut p) = pipeline(tiny(Paradigm::FmLatent, VlmMode::TwoStage));
    p.run().unwrap();
    let before = p.exp.index().unwrap();
    p.cfg.vae.train.log_every = 7;
    p.run().unwrap();
    let after = p.exp.index().unwrap();
    for stage in [STAGE_VAE, STAGE_RVQ, STAGE_1, STAGE_EVALUATOR] {
        assert_eq!(before[stage], after[stage], "{stage}");
    }
    p.cfg.vae.kl_weight = 1e-3;
    p.run().unwrap();
    assert_ne!(p.exp.index().unwrap()[STAGE_VAE].fingerprint, before[STAGE_VAE].fingerprint);
}

#[test]
fn tied_embeddings_copy_the_stage1_table() {
    let mut cfg = tiny(Paradigm::Ar, VlmMode::TwoStage);
    cfg.stage2.tie_embeddings = true;
    cfg.stage2.train.steps = 0;
    let (_d, mut p) = pipeline(cfg);
    p.gen_data().unwrap();
    p.train_rvq().unwrap();
    let r = p.train_stage1().unwrap().model;
    let out = p.train_stage2().unwrap();
    let table = |named: Vec<(String, candle_core::Var)>| {
        named.into_iter().find(|(n, _)| n == "level_tokens").unwrap().1.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
    };
    assert_eq!(table(out.generator.store.named()), table(r.store.named()));
}
