//! End-to-end orchestration: corpus and split preparation, E_GT
//! pretraining, the branched stage schedule behind the four ablation
//! pipelines, per-stage evaluation and the alpha sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{query_samples, train_samples, PriorMode, PriorSet};
use crate::error::{Error, Result};
use crate::eval::{eval_iou, write_samples_csv, write_table_csv, IouTable, SampleIou};
use crate::model::{Geometry, GtAutoencoder, PadMixNet};
use crate::nn::checkpoint::{self, Snapshot};
use crate::nn::ParamStore;
use crate::seed;
use crate::synthdata::{generate_corpus, load_corpus, make_split, Corpus, FewShotSplit};
use crate::trainer::{
    pretrain_gt, save_checkpoint, write_log, LogRow, Pipeline, Stage, TrainState, Trainer,
};
use crate::voxel::{iou, VoxelGrid};

/// Prefix shared by the E_GT parameters of the network and the autoencoder.
pub const GT_PREFIX: &str = "e_gt";

/// Paths of every artifact inside one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    /// `$PADMIX_RUN_ROOT/<run_name>`, with `runs` as the default root.
    pub fn from_env(run_name: &str) -> Self {
        let root = std::env::var_os("PADMIX_RUN_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        RunLayout {
            dir: root.join(run_name),
        }
    }

    pub fn data(&self) -> PathBuf {
        self.dir.join("data")
    }
    pub fn priors(&self) -> PathBuf {
        self.dir.join("priors")
    }
    pub fn gt_checkpoint(&self) -> PathBuf {
        self.dir.join("gt").join("e_gt.ckpt")
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.dir.join("gt").join("pretrain.csv")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.ckpt"))
    }
    pub fn log(&self, name: &str) -> PathBuf {
        self.dir.join("logs").join(format!("{name}.csv"))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.dir.join("eval")
    }
    pub fn ablation(&self) -> PathBuf {
        self.dir.join("ablation.csv")
    }
    pub fn stage_metrics(&self) -> PathBuf {
        self.dir.join("stage_metrics.csv")
    }
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) => ensure_dir(p),
        None => Ok(()),
    }
}

/// Corpus, split and priors of one configuration.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub corpus: Corpus,
    pub split: FewShotSplit,
    pub priors: PriorSet,
}

impl Experiment {
    /// Generates the corpus in memory.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        Self::with_corpus(cfg, generate_corpus(&cfg.data)?)
    }

    /// Reads the corpus written by `gen-data`.
    pub fn load(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Self> {
        Self::with_corpus(cfg, load_corpus(data_dir)?)
    }

    pub fn with_corpus(cfg: &ExperimentConfig, corpus: Corpus) -> Result<Self> {
        if corpus.dim != cfg.data.dim || corpus.image_size != cfg.data.image_size {
            return Err(Error::Config(format!(
                "corpus is {}^3 / {}px but the config asks for {}^3 / {}px",
                corpus.dim, corpus.image_size, cfg.data.dim, cfg.data.image_size
            )));
        }
        let split = make_split(
            &corpus.manifest,
            &cfg.split.base,
            &cfg.split.novel,
            cfg.split.shots,
            cfg.split.seed,
        )?;
        let priors = PriorSet::build(&corpus, &split, cfg.prior.t)?;
        Ok(Experiment {
            cfg: cfg.clone(),
            corpus,
            split,
            priors,
        })
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            dim: self.corpus.dim,
            image_size: self.corpus.image_size,
        }
    }

    pub fn train_samples(&self) -> Vec<usize> {
        train_samples(&self.corpus, &self.split)
    }

    pub fn query_samples(&self) -> Vec<usize> {
        query_samples(&self.corpus, &self.split)
    }

    /// Volumes of every training object, in corpus order.
    pub fn train_volumes(&self) -> Vec<&VoxelGrid> {
        self.corpus
            .objects
            .iter()
            .filter(|o| self.split.is_train_object(&o.class_id, &o.object_id))
            .map(|o| &o.volume)
            .collect()
    }

    /// Freshly initialized network; the draw depends on the seed only.
    pub fn build_net(&self) -> Result<(PadMixNet, ParamStore<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.cfg.seed, &[seed::hash_str("init")]));
        PadMixNet::build(&self.cfg.model, self.cfg.variant(), self.geometry(), &mut rng)
    }

    /// Pretrains E_GT with a throwaway decoder on the training volumes.
    pub fn pretrain(&self) -> Result<Pretrained> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.cfg.seed, &[seed::hash_str("gt_init")]));
        let (ae, mut store) = GtAutoencoder::build(&self.cfg.model, self.corpus.dim, &mut rng)?;
        let vols = self.train_volumes();
        let t = &self.cfg.train;
        let curve = pretrain_gt(
            &ae,
            &mut store,
            &vols,
            t.pretrain_epochs,
            t.pretrain_batch,
            t.pretrain_lr,
            &t.optimizer,
            seed::derive(self.cfg.seed, &[seed::hash_str("pretrain")]),
        )?;
        let mut ious = Vec::with_capacity(vols.len());
        for v in &vols {
            ious.push(iou(&ae.reconstruct(&store, v)?, v, self.cfg.eval.threshold)?);
        }
        Ok(Pretrained {
            train_iou: crate::eval::mean(&ious),
            curve,
            ae,
            store,
        })
    }

    pub fn trainer<'a>(&'a self, net: &'a PadMixNet) -> Result<Trainer<'a>> {
        Trainer::new(
            net,
            &self.corpus,
            &self.priors,
            self.cfg.prior.mode,
            self.train_samples(),
            self.cfg.loss,
            self.cfg.mixup.clone(),
            self.cfg.train.clone(),
            self.cfg.seed,
        )
    }

    /// Novel-class query IoU of one parameter set.
    pub fn evaluate(&self, net: &PadMixNet, store: &ParamStore<f32>, mode: PriorMode) -> Result<(IouTable, Vec<SampleIou>)> {
        eval_iou(
            net,
            store,
            &self.corpus,
            &self.query_samples(),
            &self.priors,
            mode,
            self.cfg.eval.threshold,
        )
    }
}

/// Result of E_GT pretraining.
pub struct Pretrained {
    pub ae: GtAutoencoder,
    pub store: ParamStore<f32>,
    /// Mean loss per epoch.
    pub curve: Vec<f64>,
    /// Mean reconstruction IoU on the pretraining volumes.
    pub train_iou: f64,
}

impl Pretrained {
    /// E_GT parameters only; the decoder is discarded.
    pub fn encoder_store(&self) -> ParamStore<f32> {
        let mut s = self.store.clone();
        s.retain(|p| p.name.starts_with(GT_PREFIX));
        s.set_step(0);
        s
    }
}

pub fn save_gt(path: &Path, encoder: &ParamStore<f32>, train_iou: f64) -> Result<()> {
    ensure_parent(path)?;
    let mut meta = BTreeMap::new();
    meta.insert("kind".to_string(), "e_gt".to_string());
    meta.insert("train_iou".to_string(), train_iou.to_string());
    let bytes = checkpoint::encode(&Snapshot {
        meta,
        store: encoder.clone(),
        with_moments: false,
    });
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_gt(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let snap = checkpoint::decode(&bytes)?;
    if snap.meta.get("kind").map(String::as_str) != Some("e_gt") {
        return Err(Error::Checkpoint(format!("{} is not an E_GT checkpoint", path.display())));
    }
    Ok(snap.store)
}

/// Copies pretrained E_GT weights into a network store.
pub fn init_gt(store: &mut ParamStore<f32>, encoder: &ParamStore<f32>) -> Result<()> {
    let want = store.iter().filter(|p| p.name.starts_with(GT_PREFIX)).count();
    let got = store.copy_values_from(encoder, GT_PREFIX);
    if got != want {
        return Err(Error::Checkpoint(format!(
            "pretrained E_GT matches {got} of {want} tensors; model config differs"
        )));
    }
    Ok(())
}

/// One evaluated point of the schedule.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageMetric {
    pub pipeline: String,
    pub stage: u8,
    pub average_iou: f64,
}

/// Final state and metrics of one ablation pipeline.
pub struct PipelineOutcome {
    pub pipeline: Pipeline,
    pub state: TrainState,
    /// Loss log of every stage, stage 1 included.
    pub log: Vec<LogRow>,
    pub table: IouTable,
    pub samples: Vec<SampleIou>,
}

pub struct RunOutcome {
    pub net: PadMixNet,
    /// State after stage 1, shared by every pipeline.
    pub base_state: TrainState,
    pub outcomes: Vec<PipelineOutcome>,
    pub stage_metrics: Vec<StageMetric>,
}

impl RunOutcome {
    pub fn outcome(&self, p: Pipeline) -> Option<&PipelineOutcome> {
        self.outcomes.iter().find(|o| o.pipeline == p)
    }
}

/// Network and state after stage 1, which every pipeline starts from.
pub struct BaseRun {
    pub net: PadMixNet,
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

pub fn train_base(exp: &Experiment, gt: &ParamStore<f32>) -> Result<BaseRun> {
    let (net, mut store) = exp.build_net()?;
    init_gt(&mut store, gt)?;
    let mut state = TrainState::fresh(store);
    let log = exp
        .trainer(&net)?
        .train_stage(&mut state, Stage::Base, exp.cfg.train.epochs(Stage::Base))?;
    Ok(BaseRun { net, state, log })
}

/// Stage chains needed by the requested pipelines. Shared prefixes run once:
/// stage 1 for all, stage 2 for InputMix and PADMix.
pub fn run_pipelines(exp: &Experiment, gt: &ParamStore<f32>, pipelines: &[Pipeline]) -> Result<RunOutcome> {
    let base = train_base(exp, gt)?;
    run_branches(exp, base, pipelines)
}

/// Continues a stage-1 run along the requested pipelines.
pub fn run_branches(exp: &Experiment, base: BaseRun, pipelines: &[Pipeline]) -> Result<RunOutcome> {
    let BaseRun {
        net,
        state: base,
        log: base_log,
    } = base;
    let trainer = exp.trainer(&net)?;
    let mode = exp.cfg.eval_prior_mode();
    let mut metrics = Vec::new();

    let (base_table, base_samples) = exp.evaluate(&net, &base.store, mode)?;
    metrics.push(StageMetric {
        pipeline: Pipeline::WithoutMix.name().into(),
        stage: 1,
        average_iou: base_table.average,
    });

    let mut outcomes = Vec::new();
    if pipelines.contains(&Pipeline::WithoutMix) {
        outcomes.push(PipelineOutcome {
            pipeline: Pipeline::WithoutMix,
            state: base.clone(),
            log: base_log.clone(),
            table: base_table,
            samples: base_samples,
        });
    }

    let want = |p: Pipeline| pipelines.contains(&p);
    let mut input_mix: Option<(TrainState, Vec<LogRow>)> = None;
    if want(Pipeline::InputMix) || want(Pipeline::PADMix) {
        let mut s = base.clone();
        let mut log = base_log.clone();
        log.extend(trainer.train_stage(&mut s, Stage::InputMix, exp.cfg.train.epochs(Stage::InputMix))?);
        let (table, samples) = exp.evaluate(&net, &s.store, mode)?;
        metrics.push(StageMetric {
            pipeline: Pipeline::InputMix.name().into(),
            stage: 2,
            average_iou: table.average,
        });
        if want(Pipeline::InputMix) {
            outcomes.push(PipelineOutcome {
                pipeline: Pipeline::InputMix,
                state: s.clone(),
                log: log.clone(),
                table,
                samples,
            });
        }
        input_mix = Some((s, log));
    }

    for (p, from) in [
        (Pipeline::LatMix, Some((base.clone(), base_log.clone()))),
        (Pipeline::PADMix, input_mix),
    ] {
        if !want(p) {
            continue;
        }
        let (mut s, mut log) = from.expect("prefix was trained");
        log.extend(trainer.train_stage(&mut s, Stage::LatentMix, exp.cfg.train.epochs(Stage::LatentMix))?);
        let (table, samples) = exp.evaluate(&net, &s.store, mode)?;
        metrics.push(StageMetric {
            pipeline: p.name().into(),
            stage: 3,
            average_iou: table.average,
        });
        outcomes.push(PipelineOutcome {
            pipeline: p,
            state: s,
            log,
            table,
            samples,
        });
    }
    outcomes.sort_by_key(|o| o.pipeline);

    Ok(RunOutcome {
        net,
        base_state: base,
        outcomes,
        stage_metrics: metrics,
    })
}

/// Writes checkpoints, loss logs, evaluation tables, the per-stage metrics
/// and the ablation table of a finished run.
pub fn write_run(layout: &RunLayout, exp: &Experiment, run: &RunOutcome) -> Result<()> {
    let hash = exp.cfg.hash();
    let mode = exp.cfg.eval_prior_mode();
    ensure_dir(&layout.eval_dir())?;
    for o in &run.outcomes {
        let name = o.pipeline.name();
        save_checkpoint(&layout.checkpoint(name), &run.net, &o.state, exp.cfg.seed, &hash)?;
        let log = layout.log(name);
        ensure_parent(&log)?;
        write_log(&log, &o.log)?;
        write_table_csv(&layout.eval_dir().join(format!("{name}_{}_table.csv", mode.name())), &o.table)?;
        write_samples_csv(&layout.eval_dir().join(format!("{name}_{}_samples.csv", mode.name())), &o.samples)?;
    }
    let mut w = csv::Writer::from_path(layout.stage_metrics())?;
    for m in &run.stage_metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(layout.stage_metrics(), e))?;
    let tables: Vec<(String, &IouTable)> = run
        .outcomes
        .iter()
        .map(|o| (o.pipeline.name().to_string(), &o.table))
        .collect();
    write_ablation_csv(&layout.ablation(), &tables)
}

/// One row per pipeline: per-class IoU columns, then the class average.
pub fn write_ablation_csv(path: &Path, rows: &[(String, &IouTable)]) -> Result<()> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Empty("no pipelines to tabulate".into()))?
        .1;
    let classes: Vec<&String> = first.per_class.keys().collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["pipeline".to_string(), "prior_mode".to_string(), "threshold".to_string()];
    header.extend(classes.iter().map(|c| c.to_string()));
    header.push("average".into());
    w.write_record(&header)?;
    for (name, t) in rows {
        let mut rec = vec![name.clone(), t.prior_mode.name().to_string(), t.threshold.to_string()];
        for c in &classes {
            let v = t
                .per_class
                .get(*c)
                .ok_or_else(|| Error::Invalid(format!("pipeline {name} lacks class {c}")))?;
            rec.push(v.mean.to_string());
        }
        rec.push(t.average.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One alpha of the sweep: average novel IoU after stage 2 with this input
/// alpha (InputMix), and after stage 3 with this latent alpha on top of the
/// best stage-2 run (PADMix).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub input_mix: f64,
    pub padmix: f64,
    /// Input alpha of the stage-2 run the latent column starts from.
    pub padmix_input_alpha: f64,
}

fn with_mixup(exp: &Experiment, input_alpha: f64, latent_alpha: f64) -> Result<Experiment> {
    let mut cfg = exp.cfg.clone();
    cfg.mixup.input_alpha = input_alpha;
    cfg.mixup.latent_alpha = latent_alpha;
    cfg.validate()?;
    Ok(Experiment {
        cfg,
        corpus: exp.corpus.clone(),
        split: exp.split.clone(),
        priors: exp.priors.clone(),
    })
}

/// Sequential sweep: input mixup is swept first, then latent mixup is swept
/// on top of the stage-2 run with the best input alpha (the first one on
/// ties). Stage 1 does not depend on alpha and is trained once.
pub fn alpha_sweep(exp: &Experiment, gt: &ParamStore<f32>, alphas: &[f64]) -> Result<Vec<AlphaRow>> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha list is empty".into()));
    }
    let base = train_base(exp, gt)?;
    let mode = exp.cfg.eval_prior_mode();
    let mut stage2 = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let sub = with_mixup(exp, alpha, exp.cfg.mixup.latent_alpha)?;
        let mut s = base.state.clone();
        sub.trainer(&base.net)?
            .train_stage(&mut s, Stage::InputMix, sub.cfg.train.epochs(Stage::InputMix))?;
        let iou = sub.evaluate(&base.net, &s.store, mode)?.0.average;
        stage2.push((alpha, iou, s));
    }
    let mut best = 0;
    for (i, r) in stage2.iter().enumerate() {
        if r.1 > stage2[best].1 {
            best = i;
        }
    }
    let best_alpha = stage2[best].0;
    let mut rows = Vec::with_capacity(alphas.len());
    for (k, &alpha) in alphas.iter().enumerate() {
        let sub = with_mixup(exp, best_alpha, alpha)?;
        let mut s = stage2[best].2.clone();
        sub.trainer(&base.net)?
            .train_stage(&mut s, Stage::LatentMix, sub.cfg.train.epochs(Stage::LatentMix))?;
        rows.push(AlphaRow {
            alpha,
            input_mix: stage2[k].1,
            padmix: sub.evaluate(&base.net, &s.store, mode)?.0.average,
            padmix_input_alpha: best_alpha,
        });
    }
    Ok(rows)
}

pub fn write_alpha_csv(path: &Path, rows: &[AlphaRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
