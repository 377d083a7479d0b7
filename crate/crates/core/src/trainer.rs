//! Staged training: ground-truth encoder pretraining, the plain stage, the
//! input-mixup stage and the latent-mixup stage, with resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PriorMode, PriorSet};
use crate::error::{Error, Result};
use crate::losses::{adp_grad, adp_no_triplet_grad, bce_grad, recon_grad, LossConfig};
use crate::mixup::{lerp, pair_batch, MixPair};
use crate::model::{GtAutoencoder, PadMixNet};
use crate::nn::checkpoint::{self, Snapshot};
use crate::nn::{optimizer_step, GroupRates, OptimizerConfig, ParamStore, Real, Tensor, Trace};
use crate::seed;
use crate::synthdata::Corpus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    InputMix,
    LatentMix,
}

impl Stage {
    pub fn index(self) -> u8 {
        match self {
            Stage::Base => 1,
            Stage::InputMix => 2,
            Stage::LatentMix => 3,
        }
    }

    /// Whether a network whose last completed stage is `from` (0 for a fresh
    /// network) may enter this stage. Re-entering the same stage resumes it.
    pub fn may_follow(self, from: u8) -> bool {
        match self {
            Stage::Base => from <= 1,
            Stage::InputMix => from == 1 || from == 2,
            Stage::LatentMix => (1..=3).contains(&from),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}", self.index())
    }
}

/// The four ablation pipelines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    WithoutMix,
    InputMix,
    LatMix,
    PADMix,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [
        Pipeline::WithoutMix,
        Pipeline::InputMix,
        Pipeline::LatMix,
        Pipeline::PADMix,
    ];

    pub fn stages(self) -> &'static [Stage] {
        match self {
            Pipeline::WithoutMix => &[Stage::Base],
            Pipeline::InputMix => &[Stage::Base, Stage::InputMix],
            Pipeline::LatMix => &[Stage::Base, Stage::LatentMix],
            Pipeline::PADMix => &[Stage::Base, Stage::InputMix, Stage::LatentMix],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::WithoutMix => "WithoutMix",
            Pipeline::InputMix => "InputMix",
            Pipeline::LatMix => "LatMix",
            Pipeline::PADMix => "PADMix",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupConfig {
    pub input_alpha: f64,
    pub latent_alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            input_alpha: 0.2,
            latent_alpha: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub batch_size: usize,
    /// Learning rate of E_I, E_P, M and D.
    pub lr: f64,
    /// Learning rate of E_GT.
    pub gt_lr: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub optimizer: OptimizerConfig,
    pub pipelines: Vec<Pipeline>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 40,
            stage2_epochs: 30,
            stage3_epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            gt_lr: 1e-4,
            pretrain_epochs: 400,
            pretrain_batch: 4,
            pretrain_lr: 1e-4,
            optimizer: OptimizerConfig::default(),
            pipelines: Pipeline::ALL.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Base => self.stage1_epochs,
            Stage::InputMix => self.stage2_epochs,
            Stage::LatentMix => self.stage3_epochs,
        }
    }

    pub fn rates(&self) -> GroupRates {
        GroupRates {
            network: self.lr,
            ground_truth: self.gt_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pretrain_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for (k, v) in [("lr", self.lr), ("gt_lr", self.gt_lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{k} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Where a sample's ADP negative embedding comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Negative {
    /// Ground-truth embedding of a training object (index into the volume table).
    Object(usize),
    /// Ground-truth embedding of another mixed sample of the same batch.
    Mixed(usize),
    /// No different object exists; the triplet term is dropped.
    None,
}

/// Random choices of one batch, drawn before any gradient is computed so the
/// batch loss is a pure function of parameters and inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchPlan {
    Base { negatives: Vec<Negative> },
    InputMix { pairs: Vec<MixPair>, negatives: Vec<Negative> },
    LatentMix { pairs: Vec<MixPair> },
}

/// One batch of images with their priors and target-volume indices.
#[derive(Clone, Debug)]
pub struct BatchInput<T> {
    pub images: Vec<Tensor<T>>,
    pub priors: Vec<Option<Tensor<T>>>,
    pub objects: Vec<usize>,
}

/// Batch means of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub recon: f64,
    pub adp: f64,
    pub s_zp: f64,
    /// Absent when no sample in the batch had a negative.
    pub s_zn: Option<f64>,
}

struct Accum {
    n: usize,
    total: f64,
    recon: f64,
    adp: f64,
    s_zp: f64,
    s_zn: f64,
    n_neg: usize,
}

impl Accum {
    fn new(n: usize) -> Self {
        Accum {
            n,
            total: 0.0,
            recon: 0.0,
            adp: 0.0,
            s_zp: 0.0,
            s_zn: 0.0,
            n_neg: 0,
        }
    }

    fn add(&mut self, cfg: &LossConfig, recon: f64, adp: f64, s_zp: f64, s_zn: Option<f64>) {
        self.total += cfg.w_bce * recon + cfg.w_adp * adp;
        self.recon += recon;
        self.adp += adp;
        self.s_zp += s_zp;
        if let Some(s) = s_zn {
            self.s_zn += s;
            self.n_neg += 1;
        }
    }

    fn finish(self) -> StepStats {
        let n = self.n as f64;
        StepStats {
            total: self.total / n,
            recon: self.recon / n,
            adp: self.adp / n,
            s_zp: self.s_zp / n,
            s_zn: (self.n_neg > 0).then(|| self.s_zn / self.n_neg as f64),
        }
    }
}

fn scaled<T: Real>(g: &[T], s: f64) -> Vec<T> {
    let s = T::from_f64(s);
    g.iter().map(|&v| v * s).collect()
}

fn add_into<T: Real>(acc: &mut [T], g: &[T], s: f64) {
    let s = T::from_f64(s);
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v * s;
    }
}

/// Ground-truth embeddings needed by one batch, with their accumulated gradients.
struct GtCache<T> {
    traces: BTreeMap<usize, (Trace<T>, Vec<T>)>,
}

impl<T: Real> GtCache<T> {
    fn new() -> Self {
        GtCache {
            traces: BTreeMap::new(),
        }
    }

    fn ensure(&mut self, net: &PadMixNet, store: &ParamStore<T>, key: usize, volume: &Tensor<T>) -> Result<()> {
        if !self.traces.contains_key(&key) {
            let t = net.encode_gt_trace(store, volume)?;
            let g = vec![T::zero(); t.output().len()];
            self.traces.insert(key, (t, g));
        }
        Ok(())
    }

    fn embedding(&self, key: usize) -> &[T] {
        self.traces[&key].0.output().data()
    }

    fn grad(&mut self, key: usize) -> &mut [T] {
        &mut self.traces.get_mut(&key).expect("embedding computed").1
    }

    fn backward(self, net: &PadMixNet, store: &mut ParamStore<T>) -> Result<()> {
        for (_, (trace, g)) in self.traces {
            if g.iter().any(|&v| v != T::zero()) {
                net.backward_gt(store, &trace, Tensor::from_vec(&[g.len()], g)?)?;
            }
        }
        Ok(())
    }
}

/// Computes the batch loss and accumulates its gradient (mean over the
/// batch) into `store`. `volumes` is the table of target volumes indexed by
/// `input.objects` and [`Negative::Object`].
pub fn batch_gradient<T: Real>(
    net: &PadMixNet,
    store: &mut ParamStore<T>,
    volumes: &[Tensor<T>],
    input: &BatchInput<T>,
    plan: &BatchPlan,
    cfg: &LossConfig,
) -> Result<StepStats> {
    let b = input.images.len();
    if b == 0 || input.priors.len() != b || input.objects.len() != b {
        return Err(Error::Invalid("batch inputs of inconsistent length".into()));
    }
    let inv = 1.0 / b as f64;
    let (wr, wa) = (cfg.w_bce * inv, cfg.w_adp * inv);
    let mut acc = Accum::new(b);
    match plan {
        BatchPlan::Base { negatives } => {
            let mut gt = GtCache::new();
            for (i, &obj) in input.objects.iter().enumerate() {
                gt.ensure(net, store, obj, &volumes[obj])?;
                if let Negative::Object(n) = negatives[i] {
                    gt.ensure(net, store, n, &volumes[n])?;
                }
            }
            for i in 0..b {
                let obj = input.objects[i];
                let enc = net.encode(store, &input.images[i], input.priors[i].as_ref())?;
                let dec = net.decode(store, enc.e_z())?;
                let (recon, g_pred) = recon_grad(dec.output().data(), volumes[obj].data(), cfg)?;
                let mut g_ez = net.backward_decoder(
                    store,
                    &dec,
                    Tensor::from_vec(dec.output().shape(), scaled(&g_pred, wr))?,
                )?;
                let z = enc.e_z().data();
                let (adp, s_zp, s_zn) = match negatives[i] {
                    Negative::Object(n) => {
                        let t = adp_grad(z, gt.embedding(obj), gt.embedding(n), cfg.mu)?;
                        add_into(g_ez.data_mut(), &t.grad_z, wa);
                        add_into(gt.grad(obj), &t.grad_pos, wa);
                        add_into(gt.grad(n), &t.grad_neg, wa);
                        (t.loss, t.s_zp, Some(t.s_zn.to_f64()))
                    }
                    Negative::None => {
                        let (l, s, gz, gp) = adp_no_triplet_grad(z, gt.embedding(obj))?;
                        add_into(g_ez.data_mut(), &gz, wa);
                        add_into(gt.grad(obj), &gp, wa);
                        (l, s, None)
                    }
                    Negative::Mixed(_) => {
                        return Err(Error::Invalid("mixed negative in a plain batch".into()))
                    }
                };
                net.backward_encoder(store, &enc, g_ez)?;
                acc.add(cfg, recon.to_f64(), adp.to_f64(), s_zp.to_f64(), s_zn);
            }
            gt.backward(net, store)?;
        }
        BatchPlan::InputMix { pairs, negatives } => {
            if pairs.len() != b || negatives.len() != b {
                return Err(Error::Invalid("mix plan does not match batch".into()));
            }
            // Mixed samples are keyed 0..b in the cache; objects after them.
            let mut gt = GtCache::new();
            let mut mixed = Vec::with_capacity(b);
            for (k, p) in pairs.iter().enumerate() {
                let (oa, ob) = (input.objects[p.first], input.objects[p.second]);
                let vol = Tensor::from_vec(
                    volumes[oa].shape(),
                    lerp(volumes[oa].data(), volumes[ob].data(), p.lambda)?,
                )?;
                let image = Tensor::from_vec(
                    input.images[p.first].shape(),
                    lerp(input.images[p.first].data(), input.images[p.second].data(), p.lambda)?,
                )?;
                let prior = match (&input.priors[p.first], &input.priors[p.second]) {
                    (Some(a), Some(c)) => Some(Tensor::from_vec(a.shape(), lerp(a.data(), c.data(), p.lambda)?)?),
                    (None, None) => None,
                    _ => return Err(Error::Invalid("batch mixes prior and no-prior samples".into())),
                };
                gt.ensure(net, store, k, &vol)?;
                mixed.push((image, prior, vol));
            }
            for n in negatives {
                if let Negative::Object(o) = *n {
                    gt.ensure(net, store, b + o, &volumes[o])?;
                }
            }
            for (k, (image, prior, vol)) in mixed.iter().enumerate() {
                let enc = net.encode(store, image, prior.as_ref())?;
                let dec = net.decode(store, enc.e_z())?;
                let (recon, g_pred) = recon_grad(dec.output().data(), vol.data(), cfg)?;
                let mut g_ez = net.backward_decoder(
                    store,
                    &dec,
                    Tensor::from_vec(dec.output().shape(), scaled(&g_pred, wr))?,
                )?;
                let z = enc.e_z().data();
                let neg_key = match negatives[k] {
                    Negative::Mixed(m) if m < b => Some(m),
                    Negative::Mixed(_) => return Err(Error::Invalid("mixed negative out of range".into())),
                    Negative::Object(o) => Some(b + o),
                    Negative::None => None,
                };
                let (adp, s_zp, s_zn) = match neg_key {
                    Some(nk) => {
                        let t = adp_grad(z, gt.embedding(k), gt.embedding(nk), cfg.mu)?;
                        add_into(g_ez.data_mut(), &t.grad_z, wa);
                        add_into(gt.grad(k), &t.grad_pos, wa);
                        add_into(gt.grad(nk), &t.grad_neg, wa);
                        (t.loss, t.s_zp, Some(t.s_zn.to_f64()))
                    }
                    None => {
                        let (l, s, gz, gp) = adp_no_triplet_grad(z, gt.embedding(k))?;
                        add_into(g_ez.data_mut(), &gz, wa);
                        add_into(gt.grad(k), &gp, wa);
                        (l, s, None)
                    }
                };
                net.backward_encoder(store, &enc, g_ez)?;
                acc.add(cfg, recon.to_f64(), adp.to_f64(), s_zp.to_f64(), s_zn);
            }
            gt.backward(net, store)?;
        }
        BatchPlan::LatentMix { pairs } => {
            if pairs.len() != b {
                return Err(Error::Invalid("mix plan does not match batch".into()));
            }
            let mut gt = GtCache::new();
            let mut encs = Vec::with_capacity(b);
            for i in 0..b {
                let obj = input.objects[i];
                gt.ensure(net, store, obj, &volumes[obj])?;
                encs.push(net.encode(store, &input.images[i], input.priors[i].as_ref())?);
            }
            let mut g_ez: Vec<Vec<T>> = encs.iter().map(|e| vec![T::zero(); e.e_z().len()]).collect();
            for p in pairs {
                let (i, j, lam) = (p.first, p.second, p.lambda);
                let (oi, oj) = (input.objects[i], input.objects[j]);
                let z_mix = lerp(encs[i].e_z().data(), encs[j].e_z().data(), lam)?;
                let l_mix = lerp(gt.embedding(oi), gt.embedding(oj), lam)?;
                let v_mix = lerp(volumes[oi].data(), volumes[oj].data(), lam)?;
                let dec = net.decode(store, &Tensor::from_vec(&[z_mix.len()], z_mix)?)?;
                let (recon, g_pred) = recon_grad(dec.output().data(), &v_mix, cfg)?;
                let mut g_z = net.backward_decoder(
                    store,
                    &dec,
                    Tensor::from_vec(dec.output().shape(), scaled(&g_pred, wr))?,
                )?;
                let (adp, s_zp, gz, gl) = adp_no_triplet_grad(dec.input().data(), &l_mix)?;
                add_into(g_z.data_mut(), &gz, wa);
                add_into(&mut g_ez[i], g_z.data(), 1.0 - lam);
                add_into(&mut g_ez[j], g_z.data(), lam);
                add_into(gt.grad(oi), &gl, wa * (1.0 - lam));
                add_into(gt.grad(oj), &gl, wa * lam);
                acc.add(cfg, recon.to_f64(), adp.to_f64(), s_zp.to_f64(), None);
            }
            for (enc, g) in encs.iter().zip(g_ez) {
                net.backward_encoder(store, enc, Tensor::from_vec(&[g.len()], g)?)?;
            }
            gt.backward(net, store)?;
        }
    }
    let stats = acc.finish();
    if !stats.total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {}", stats.total)));
    }
    Ok(stats)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub adp: f64,
    pub s_zp: f64,
    pub s_zn: Option<f64>,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parameters plus the position in the stage schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParamStore<f32>,
    /// Last stage entered (0 before stage 1).
    pub stage: u8,
    /// Epochs completed within `stage`.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(store: ParamStore<f32>) -> Self {
        TrainState {
            store,
            stage: 0,
            epoch: 0,
        }
    }
}

/// Everything a stage run reads: the network, the data and the settings.
pub struct Trainer<'a> {
    pub net: &'a PadMixNet,
    pub corpus: &'a Corpus,
    pub priors: &'a PriorSet,
    pub prior_mode: PriorMode,
    pub samples: Vec<usize>,
    pub loss: LossConfig,
    pub mixup: MixupConfig,
    pub train: TrainConfig,
    pub seed: u64,
    volumes: Vec<Tensor<f32>>,
    /// Corpus object indices that appear in `samples`.
    train_objects: Vec<usize>,
}

impl<'a> Trainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: &'a PadMixNet,
        corpus: &'a Corpus,
        priors: &'a PriorSet,
        prior_mode: PriorMode,
        samples: Vec<usize>,
        loss: LossConfig,
        mixup: MixupConfig,
        train: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("no training samples".into()));
        }
        loss.validate()?;
        train.validate()?;
        if (prior_mode == PriorMode::None) != (net.variant() == crate::model::Variant::NoPrior) {
            return Err(Error::Config(format!(
                "prior mode '{}' does not fit the {} network",
                prior_mode.name(),
                net.variant().name()
            )));
        }
        let volumes = corpus
            .objects
            .iter()
            .map(|o| net.grid_tensor(&o.volume))
            .collect::<Result<Vec<_>>>()?;
        let mut train_objects: Vec<usize> = samples.iter().map(|&s| corpus.samples[s].object).collect();
        train_objects.sort_unstable();
        train_objects.dedup();
        Ok(Trainer {
            net,
            corpus,
            priors,
            prior_mode,
            samples,
            loss,
            mixup,
            train,
            seed,
            volumes,
            train_objects,
        })
    }

    fn batch_input(&self, idx: &[usize]) -> Result<BatchInput<f32>> {
        let mut input = BatchInput {
            images: Vec::with_capacity(idx.len()),
            priors: Vec::with_capacity(idx.len()),
            objects: Vec::with_capacity(idx.len()),
        };
        for &s in idx {
            let sample = &self.corpus.samples[s];
            let obj = &self.corpus.objects[sample.object];
            input
                .images
                .push(Tensor::from_vec(&self.net.image_shape(), sample.image.data.clone())?);
            input.priors.push(
                self.priors
                    .prior_for(&obj.class_id, self.prior_mode)?
                    .map(|p| self.net.grid_tensor(p))
                    .transpose()?,
            );
            input.objects.push(sample.object);
        }
        Ok(input)
    }

    fn fallback_negative<R: Rng + ?Sized>(&self, obj: usize, rng: &mut R) -> Negative {
        let others: Vec<usize> = self.train_objects.iter().copied().filter(|&o| o != obj).collect();
        others.choose(rng).map_or(Negative::None, |&o| Negative::Object(o))
    }

    pub fn plan<R: Rng + ?Sized>(&self, stage: Stage, objects: &[usize], rng: &mut R) -> Result<BatchPlan> {
        let b = objects.len();
        Ok(match stage {
            Stage::Base => {
                let negatives = (0..b)
                    .map(|i| {
                        let cands: Vec<usize> = objects.iter().copied().filter(|&o| o != objects[i]).collect();
                        match cands.choose(rng) {
                            Some(&o) => Negative::Object(o),
                            None => self.fallback_negative(objects[i], rng),
                        }
                    })
                    .collect();
                BatchPlan::Base { negatives }
            }
            Stage::InputMix => {
                let pairs = pair_batch(b, self.mixup.input_alpha, rng)?;
                let negatives = (0..b)
                    .map(|i| {
                        if b > 1 {
                            let k = rng.random_range(0..b - 1);
                            Negative::Mixed(if k >= i { k + 1 } else { k })
                        } else {
                            self.fallback_negative(objects[i], rng)
                        }
                    })
                    .collect();
                BatchPlan::InputMix { pairs, negatives }
            }
            Stage::LatentMix => BatchPlan::LatentMix {
                pairs: pair_batch(b, self.mixup.latent_alpha, rng)?,
            },
        })
    }

    /// Per-epoch generator: a pure function of seed, stage and epoch, which
    /// is what makes checkpoint resume reproduce an uninterrupted run.
    pub fn epoch_rng(&self, stage: Stage, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed::derive(self.seed, &[stage.index() as u64, epoch as u64]))
    }

    fn run_epoch(&self, store: &mut ParamStore<f32>, stage: Stage, epoch: usize, log: &mut Vec<LogRow>) -> Result<()> {
        let mut rng = self.epoch_rng(stage, epoch);
        let mut order = self.samples.clone();
        order.shuffle(&mut rng);
        let bs = self.train.batch_size.min(order.len());
        for chunk in order.chunks(bs) {
            let input = self.batch_input(chunk)?;
            let plan = self.plan(stage, &input.objects, &mut rng)?;
            store.zero_grad();
            let stats = batch_gradient(self.net, store, &self.volumes, &input, &plan, &self.loss)?;
            optimizer_step(store, self.train.rates(), &self.train.optimizer)?;
            log.push(LogRow {
                stage: stage.index(),
                epoch,
                step: store.step(),
                total: stats.total,
                recon: stats.recon,
                adp: stats.adp,
                s_zp: stats.s_zp,
                s_zn: stats.s_zn,
            });
        }
        Ok(())
    }

    /// Runs `epochs` further epochs of `stage`, resuming if the state is
    /// already inside that stage.
    pub fn train_stage(&self, state: &mut TrainState, stage: Stage, epochs: usize) -> Result<Vec<LogRow>> {
        if !stage.may_follow(state.stage) {
            return Err(Error::StageOrder(format!(
                "{stage} cannot follow stage {}",
                state.stage
            )));
        }
        if state.stage != stage.index() {
            state.stage = stage.index();
            state.epoch = 0;
        }
        let mut log = Vec::new();
        for e in state.epoch..state.epoch + epochs {
            self.run_epoch(&mut state.store, stage, e, &mut log)?;
            state.epoch = e + 1;
        }
        Ok(log)
    }
}

/// Trains E_GT with a throwaway decoder on volume reconstruction. Returns
/// the mean loss of every epoch.
pub fn pretrain_gt(
    ae: &GtAutoencoder,
    store: &mut ParamStore<f32>,
    volumes: &[&crate::voxel::VoxelGrid],
    epochs: usize,
    batch: usize,
    lr: f64,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if volumes.is_empty() {
        return Err(Error::Empty("pretraining needs at least one volume".into()));
    }
    if batch == 0 {
        return Err(Error::Config("pretrain batch must be positive".into()));
    }
    let d = ae.dim();
    let tensors = volumes
        .iter()
        .map(|v| {
            if v.dim() != d {
                return Err(Error::DimMismatch(format!("volume dim {} vs {d}", v.dim())));
            }
            Tensor::from_vec(&[1, d, d, d], v.values().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let rates = GroupRates::uniform(lr);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0, epoch as u64]));
        let mut order: Vec<usize> = (0..tensors.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(batch) {
            store.zero_grad();
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let enc = ae.encoder.forward_trace(store, tensors[i].clone())?;
                let dec = ae.decoder.forward_trace(store, enc.output().clone())?;
                let (loss, g) = bce_grad(dec.output().data(), tensors[i].data(), 1e-7)?;
                sum += loss as f64;
                let g = Tensor::from_vec(dec.output().shape(), scaled(&g, inv))?;
                let gz = ae.decoder.backward(store, &dec, g)?;
                ae.encoder.backward(store, &enc, gz)?;
            }
            optimizer_step(store, rates, opt)?;
        }
        let mean = sum / tensors.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at epoch {epoch}")));
        }
        curve.push(mean);
    }
    Ok(curve)
}

pub const META_STAGE: &str = "stage";
pub const META_EPOCH: &str = "epoch";
pub const META_SEED: &str = "seed";
pub const META_CONFIG_HASH: &str = "config_hash";

pub fn save_checkpoint(path: &Path, net: &PadMixNet, state: &TrainState, seed: u64, config_hash: &str) -> Result<()> {
    let mut meta = net.snapshot_meta();
    meta.insert(META_STAGE.into(), state.stage.to_string());
    meta.insert(META_EPOCH.into(), state.epoch.to_string());
    meta.insert(META_SEED.into(), seed.to_string());
    meta.insert(META_CONFIG_HASH.into(), config_hash.into());
    let bytes = checkpoint::encode(&Snapshot {
        meta,
        store: state.store.clone(),
        with_moments: true,
    });
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub struct LoadedCheckpoint {
    pub net: PadMixNet,
    pub state: TrainState,
    pub meta: BTreeMap<String, String>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let snap = checkpoint::decode(&bytes)?;
    let (net, store) = PadMixNet::from_snapshot(&snap)?;
    let num = |k: &str| -> Result<usize> {
        snap.meta
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or bad '{k}'")))
    };
    let state = TrainState {
        store,
        stage: num(META_STAGE)? as u8,
        epoch: num(META_EPOCH)?,
    };
    Ok(LoadedCheckpoint {
        net,
        state,
        meta: snap.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_order_rules() {
        assert!(Stage::Base.may_follow(0));
        assert!(Stage::InputMix.may_follow(1));
        assert!(!Stage::InputMix.may_follow(0));
        assert!(Stage::LatentMix.may_follow(1));
        assert!(Stage::LatentMix.may_follow(2));
        assert!(!Stage::LatentMix.may_follow(0));
        assert!(!Stage::Base.may_follow(2));
        assert!(Stage::LatentMix.may_follow(3));
    }

    #[test]
    fn pipelines_map_to_stage_sequences() {
        assert_eq!(Pipeline::WithoutMix.stages(), &[Stage::Base]);
        assert_eq!(Pipeline::LatMix.stages(), &[Stage::Base, Stage::LatentMix]);
        assert_eq!(Pipeline::PADMix.stages().len(), 3);
    }

    #[test]
    fn paper_defaults() {
        let t = TrainConfig::default();
        assert_eq!((t.lr, t.gt_lr, t.batch_size), (1e-3, 1e-4, 32));
        let m = MixupConfig::default();
        assert_eq!((m.input_alpha, m.latent_alpha), (0.2, 0.2));
    }
}
