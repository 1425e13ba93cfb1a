use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use egomotion::config::RunConfig;
use egomotion::plot::{metric_bars, save_png, trajectory_plot};
use egomotion::{Experiment, Pipeline};
use egomotion_core::io::load_motion;
use egomotion_core::synthdata::{Body, Sample, FPS};
use egomotion_core::GlobalMotion;
use serde_json::json;

#[derive(Parser)]
#[command(name = "egomotion", version, about = "Egocentric motion generation experiments")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment root directory.
    #[arg(long, global = true, env = egomotion::config::ROOT_ENV)]
    root: Option<PathBuf>,
    /// Config override, e.g. `--set stage2.paradigm=masked`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic paired dataset.
    GenData,
    /// Train the residual-quantized motion tokenizer.
    TrainRvq,
    /// Write token grids for every sample with the trained tokenizer.
    Tokenize,
    /// Train the continuous motion VAE.
    TrainVae,
    /// Report VAE reconstruction error on the test split.
    VaeRoundtrip,
    /// Train the stage-I reasoner on conditions and motion tokens.
    #[command(alias = "stage1-train")]
    TrainStage1,
    /// Decode stage-I token predictions for the test split.
    Stage1Sample,
    /// Train the stage-II generator on reasoner hidden states.
    #[command(alias = "stage2-train")]
    TrainStage2 {
        #[arg(long)]
        paradigm: Option<String>,
        #[arg(long)]
        vlm_mode: Option<String>,
    },
    /// Train the contrastive retrieval evaluator.
    TrainEvaluator,
    /// Sample the stored stage-II model on the test split and write a metric report.
    Eval,
    /// Sample the stored stage-II model on the test split.
    #[command(alias = "stage2-sample")]
    Sample,
    /// Trajectory and metric figures.
    Plot {
        /// Motion files (`.egom`) for the overhead trajectory plot.
        #[arg(long)]
        motion: Vec<PathBuf>,
        /// Metric report JSON files for the bar chart.
        #[arg(long)]
        report: Vec<PathBuf>,
        /// Output directory; defaults to `<root>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train whatever the configured variant needs, then sample and evaluate.
    Run,
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut overrides = cli.overrides.clone();
    if let Command::TrainStage2 { paradigm, vlm_mode } = &cli.command {
        overrides.extend(paradigm.iter().map(|p| format!("stage2.paradigm=\"{p}\"")));
        overrides.extend(vlm_mode.iter().map(|m| format!("stage2.vlm_mode=\"{m}\"")));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let root = cfg.resolve_root(cli.root.as_deref());
    let mut p = Pipeline::new(cfg, root)?;

    match cli.command {
        Command::GenData => {
            let ds = p.gen_data()?;
            print(json!({"samples": ds.samples.len(), "train": ds.manifest.train.len(), "test": ds.manifest.test.len()}));
        }
        Command::TrainRvq => print(json!({"final_loss": p.train_rvq()?.final_loss})),
        Command::Tokenize => print(json!({"tokens": p.tokenize()?})),
        Command::TrainVae => print(json!({"final_loss": p.train_vae()?.final_loss})),
        Command::VaeRoundtrip => print(json!({"test_recon_error": p.vae_roundtrip()?})),
        Command::TrainStage1 => print(json!({"final_loss": p.train_stage1()?.final_loss})),
        Command::Stage1Sample => {
            let ds = p.dataset()?;
            let seqs = p.stage1_sample()?;
            let test: Vec<&Sample> = ds.test().collect();
            let dir = p.save_samples("stage1", &p.to_global(&seqs, &test, &ds)?, &test)?;
            print(json!({"samples": dir}));
        }
        Command::TrainStage2 { .. } => {
            let out = p.train_stage2()?;
            print(json!({
                "final_loss": out.losses.last(),
                "reasoner_hash_before": out.reasoner_hash_before,
                "reasoner_hash_after": out.reasoner_hash_after,
            }));
        }
        Command::TrainEvaluator => {
            let out = p.train_evaluator()?;
            let reference = p.evaluate_reference(&out.model)?;
            print(json!({"final_loss": out.final_loss, "held_out_r_top1": reference.r_top1}));
        }
        Command::Eval => {
            let (report, path) = p.eval()?;
            print(json!({"report": report, "path": path}));
        }
        Command::Sample => {
            let (_, dir) = p.sample()?;
            print(json!({"samples": dir}));
        }
        Command::Plot { motion, report, out } => {
            if motion.is_empty() && report.is_empty() {
                bail!("plot needs at least one --motion or --report");
            }
            let out = out.unwrap_or_else(|| p.exp.plots_dir());
            let mut written = Vec::new();
            if !motion.is_empty() {
                let motions = motion
                    .iter()
                    .map(|m| load_motion(m).with_context(|| format!("loading {}", m.display())))
                    .collect::<anyhow::Result<Vec<GlobalMotion>>>()?;
                let skel = Body::new(p.cfg.data.body).skeleton(FPS);
                let refs: Vec<&GlobalMotion> = motions.iter().collect();
                let path = out.join("trajectory.png");
                save_png(&trajectory_plot(&refs, &skel, 512)?, &path)?;
                written.push(path);
            }
            if !report.is_empty() {
                let reports = report
                    .iter()
                    .map(|r| {
                        let name = r.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        Ok((name, Experiment::read_report(r)?))
                    })
                    .collect::<egomotion::Result<Vec<_>>>()?;
                let path = out.join("metrics.png");
                save_png(&metric_bars(&reports, 160)?, &path)?;
                written.push(path);
            }
            print(json!({"plots": written}));
        }
        Command::Run => {
            let s = p.run()?;
            print(json!({
                "label": s.label,
                "report": s.report,
                "ground_truth": s.reference,
                "stage1_loss": s.stage1_loss,
                "reasoner_hash_before": s.reasoner_hash_before,
                "reasoner_hash_after": s.reasoner_hash_after,
                "report_path": s.report_path,
            }));
        }
    }
    Ok(())
}
