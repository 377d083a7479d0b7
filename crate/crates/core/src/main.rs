use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use padmix::config::{ExperimentConfig, DEFAULT_CONFIG};
use padmix::data::PriorSet;
use padmix::eval::{cosine_report, proximity_analysis, write_cosine_csv, write_proximity_csv, write_samples_csv, write_table_csv};
use padmix::experiment::{
    alpha_sweep, load_gt, run_pipelines, save_gt, write_ablation_csv, write_alpha_csv, write_run, Experiment, RunLayout,
};
use padmix::mixup::{input_mix, InputTriple};
use padmix::nn::gradcheck::GradCheckConfig;
use padmix::nn::ParamStore;
use padmix::synthdata::{build_dataset, write_pgm};
use padmix::trainer::{load_checkpoint, Pipeline};
use padmix::verify::{gradient_suite, require_all_passed};
use padmix::voxel::{write_f32_grid, VoxelGrid};
use padmix::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "padmix", version, about = "Few-shot single-view voxel reconstruction experiments")]
struct Cli {
    /// Experiment config file; the shipped defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `loss.w_adp=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Build per-class priors from the split's training objects.
    BuildPriors,
    /// Pretrain the ground-truth volume encoder.
    PretrainGt,
    /// Run the configured ablation pipelines.
    Train,
    /// Evaluate saved pipeline checkpoints on the novel query set.
    Eval,
    /// Same-object and different-object latent cosine similarities.
    AnalyzeLatent,
    /// Join novel-class proximity with IoU.
    Proximity {
        #[arg(long, default_value = "PADMix")]
        pipeline: String,
    },
    /// Sweep input mixup over `eval.alphas`, then latent mixup on the best one.
    AlphaSweep,
    /// Dump one input-mixed training example.
    MixPreview {
        #[arg(long, default_value_t = 0)]
        first: usize,
        #[arg(long, default_value_t = 1)]
        second: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
    },
    /// Finite-difference check of every layer, loss and training step.
    GradCheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // toml parse errors span several lines; keep the diagnostic to one.
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p, &cli.overrides),
        None => ExperimentConfig::parse(DEFAULT_CONFIG, &cli.overrides),
    }
}

fn parse_pipeline(name: &str) -> Result<Pipeline> {
    Pipeline::ALL
        .into_iter()
        .find(|p| p.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown pipeline '{name}'")))
}

/// Corpus from disk plus the priors written by `build-priors`.
fn load_experiment(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Experiment> {
    let mut exp = Experiment::load(cfg, &layout.data())?;
    exp.priors = PriorSet::load(&layout.priors(), &exp.split.all_classes())?;
    Ok(exp)
}

/// Pretrained E_GT from disk, or a fresh pretraining run saved for reuse.
fn gt_encoder(exp: &Experiment, layout: &RunLayout) -> Result<ParamStore<f32>> {
    match load_gt(&layout.gt_checkpoint()) {
        Ok(s) => Ok(s),
        Err(Error::MissingArtifact(_)) => pretrain(exp, layout),
        Err(e) => Err(e),
    }
}

fn pretrain(exp: &Experiment, layout: &RunLayout) -> Result<ParamStore<f32>> {
    let pre = exp.pretrain()?;
    let enc = pre.encoder_store();
    save_gt(&layout.gt_checkpoint(), &enc, pre.train_iou)?;
    let path = layout.pretrain_log();
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in pre.curve.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("pretrain: {} epochs, train IoU {:.4}", pre.curve.len(), pre.train_iou);
    Ok(enc)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::GradCheck = cli.command {
        return grad_check(&cfg);
    }
    let layout = RunLayout::from_env(&cfg.run_name);
    cfg.save_resolved(&layout.dir)?;
    match &cli.command {
        Command::GenData => {
            let m = build_dataset(&cfg.data, &layout.data())?;
            println!("wrote {} samples to {}", m.records.len(), layout.data().display());
        }
        Command::BuildPriors => {
            let exp = Experiment::load(&cfg, &layout.data())?;
            exp.priors.save(&layout.priors())?;
            println!("wrote {} priors to {}", exp.priors.classes().count(), layout.priors().display());
        }
        Command::PretrainGt => {
            let exp = Experiment::load(&cfg, &layout.data())?;
            pretrain(&exp, &layout)?;
        }
        Command::Train => {
            let exp = load_experiment(&cfg, &layout)?;
            let gt = gt_encoder(&exp, &layout)?;
            let run = run_pipelines(&exp, &gt, &cfg.train.pipelines)?;
            write_run(&layout, &exp, &run)?;
            for m in &run.stage_metrics {
                println!("{} after stage {}: IoU {:.4}", m.pipeline, m.stage, m.average_iou);
            }
            println!("ablation table: {}", layout.ablation().display());
        }
        Command::Eval => {
            let exp = load_experiment(&cfg, &layout)?;
            let mode = cfg.eval_prior_mode();
            let dir = layout.eval_dir();
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut tables = Vec::new();
            for p in &cfg.train.pipelines {
                let ck = load_checkpoint(&layout.checkpoint(p.name()))?;
                let (table, samples) = exp.evaluate(&ck.net, &ck.state.store, mode)?;
                write_table_csv(&dir.join(format!("{}_{}_table.csv", p.name(), mode.name())), &table)?;
                write_samples_csv(&dir.join(format!("{}_{}_samples.csv", p.name(), mode.name())), &samples)?;
                println!("{} ({} prior): IoU {:.4}", p.name(), mode.name(), table.average);
                tables.push((p.name().to_string(), table));
            }
            let refs: Vec<_> = tables.iter().map(|(n, t)| (n.clone(), t)).collect();
            write_ablation_csv(&dir.join(format!("ablation_{}.csv", mode.name())), &refs)?;
        }
        Command::AnalyzeLatent => {
            let exp = load_experiment(&cfg, &layout)?;
            for p in &cfg.train.pipelines {
                let ck = load_checkpoint(&layout.checkpoint(p.name()))?;
                let r = cosine_report(
                    &ck.net,
                    &ck.state.store,
                    &exp.corpus,
                    &exp.query_samples(),
                    &exp.priors,
                    cfg.eval_prior_mode(),
                )?;
                write_cosine_csv(&layout.eval_dir().join(format!("{}_cosine.csv", p.name())), &r)?;
                println!("{}: SameObj {:.4} DiffObj {:.4}", p.name(), r.same_obj_mean(), r.diff_obj_mean());
            }
        }
        Command::Proximity { pipeline } => {
            let p = parse_pipeline(pipeline)?;
            let exp = load_experiment(&cfg, &layout)?;
            let ck = load_checkpoint(&layout.checkpoint(p.name()))?;
            let (table, _) = exp.evaluate(&ck.net, &ck.state.store, cfg.eval_prior_mode())?;
            let rows = proximity_analysis(&exp.corpus, &exp.split, &table)?;
            let path = layout.eval_dir().join(format!("{}_proximity.csv", p.name()));
            fs::create_dir_all(layout.eval_dir()).map_err(|e| Error::io(layout.eval_dir(), e))?;
            write_proximity_csv(&path, &rows)?;
            for r in &rows {
                println!("{}: proximity {:.4} IoU {:.4}", r.class, r.proximity, r.iou);
            }
        }
        Command::AlphaSweep => {
            let exp = load_experiment(&cfg, &layout)?;
            let gt = gt_encoder(&exp, &layout)?;
            let rows = alpha_sweep(&exp, &gt, &cfg.eval.alphas)?;
            write_alpha_csv(&layout.dir.join("alpha_sweep.csv"), &rows)?;
            for r in &rows {
                println!(
                    "alpha {}: InputMix {:.4} PADMix {:.4} (on input alpha {})",
                    r.alpha, r.input_mix, r.padmix, r.padmix_input_alpha
                );
            }
        }
        Command::MixPreview { first, second, lambda } => {
            let exp = load_experiment(&cfg, &layout)?;
            mix_preview(&exp, &layout.dir.join("mix_preview"), *first, *second, *lambda)?;
        }
        Command::GradCheck => unreachable!("handled above"),
    }
    Ok(())
}

fn mix_preview(exp: &Experiment, out: &Path, first: usize, second: usize, lambda: f64) -> Result<()> {
    let train = exp.train_samples();
    let triple = |i: usize| -> Result<InputTriple> {
        let s = *train
            .get(i)
            .ok_or_else(|| Error::Config(format!("training sample {i} out of range (have {})", train.len())))?;
        let sample = &exp.corpus.samples[s];
        let obj = &exp.corpus.objects[sample.object];
        let prior = exp
            .priors
            .prior_for(&obj.class_id, exp.cfg.eval_prior_mode())?
            .map_or_else(|| vec![0.0; obj.volume.len()], |p| p.values().to_vec());
        Ok(InputTriple {
            image: sample.image.data.clone(),
            prior,
            volume: obj.volume.values().to_vec(),
        })
    };
    let m = input_mix(&triple(first)?, &triple(second)?, lambda)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n = exp.corpus.image_size;
    let dim = exp.corpus.dim;
    let files: [(&str, Vec<u8>); 4] = [
        ("image_sil.pgm", write_pgm(n, n, &m.image[..n * n])),
        ("image_dep.pgm", write_pgm(n, n, &m.image[n * n..])),
        ("prior.f32grid", write_f32_grid(&VoxelGrid::from_values(dim, m.prior)?)),
        ("volume.f32grid", write_f32_grid(&VoxelGrid::from_values(dim, m.volume)?)),
    ];
    for (name, bytes) in files {
        let p = out.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    println!("wrote mixed sample (lambda {lambda}) to {}", out.display());
    Ok(())
}

fn grad_check(cfg: &ExperimentConfig) -> Result<()> {
    let gc = GradCheckConfig::default();
    let reports = gradient_suite(&gc, cfg.seed)?;
    let mut worst = 0.0f64;
    for r in &reports {
        println!(
            "{:<40} {:.3e} {}",
            r.name,
            r.report.max_rel_error,
            if r.report.passed { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.report.max_rel_error);
    }
    let verdict = require_all_passed(&reports);
    println!(
        "max relative error {worst:.3e} (tolerance {:.0e}): {}",
        gc.tolerance,
        if verdict.is_ok() { "PASS" } else { "FAIL" }
    );
    verdict
}
