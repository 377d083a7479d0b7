mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use padmix::experiment::{
    alpha_sweep, init_gt, run_branches, run_pipelines, train_base, write_run, Experiment, RunLayout,
};
use padmix::trainer::{load_checkpoint, save_checkpoint, Pipeline, Stage, TrainState};
use padmix::Error;

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn identical_config_gives_identical_artifacts() {
    let cfg = common::tiny(&[]);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout { dir: dir.path().to_path_buf() };
        let exp = Experiment::prepare(&cfg).unwrap();
        let gt = exp.pretrain().unwrap().encoder_store();
        let run = run_pipelines(&exp, &gt, &Pipeline::ALL).unwrap();
        write_run(&layout, &exp, &run).unwrap();
        outputs.push(files(dir.path()));
    }
    assert!(outputs[0].keys().any(|k| k.ends_with("PADMix.ckpt")));
    assert!(outputs[0].contains_key("ablation.csv"));
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn different_seed_changes_parameters() {
    let a = Experiment::prepare(&common::tiny(&[])).unwrap().build_net().unwrap().1;
    let b = Experiment::prepare(&common::tiny(&["seed=2"])).unwrap().build_net().unwrap().1;
    assert_ne!(a, b);
}

#[test]
fn checkpoint_resume_matches_uninterrupted_training() {
    let cfg = common::tiny(&[]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let gt = exp.pretrain().unwrap().encoder_store();
    let (net, mut store) = exp.build_net().unwrap();
    init_gt(&mut store, &gt).unwrap();
    let trainer = exp.trainer(&net).unwrap();

    let mut straight = TrainState::fresh(store.clone());
    let mut log_a = trainer.train_stage(&mut straight, Stage::Base, 3).unwrap();
    log_a.extend(trainer.train_stage(&mut straight, Stage::InputMix, 2).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = TrainState::fresh(store);
    let mut log_b = trainer.train_stage(&mut first, Stage::Base, 3).unwrap();
    log_b.extend(trainer.train_stage(&mut first, Stage::InputMix, 1).unwrap());
    save_checkpoint(&path, &net, &first, cfg.seed, &cfg.hash()).unwrap();
    drop(first);

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.meta["config_hash"], cfg.hash());
    let mut resumed = loaded.state;
    assert_eq!((resumed.stage, resumed.epoch), (2, 1));
    let trainer2 = exp.trainer(&loaded.net).unwrap();
    log_b.extend(trainer2.train_stage(&mut resumed, Stage::InputMix, 1).unwrap());

    assert_eq!(resumed, straight);
    assert_eq!(log_a, log_b);
}

#[test]
fn zero_epochs_leave_parameters_bit_identical() {
    let exp = Experiment::prepare(&common::tiny(&[])).unwrap();
    let (net, store) = exp.build_net().unwrap();
    let trainer = exp.trainer(&net).unwrap();
    let mut st = TrainState::fresh(store.clone());
    let log = trainer.train_stage(&mut st, Stage::Base, 0).unwrap();
    assert!(log.is_empty());
    assert_eq!(st.store, store);
}

#[test]
fn stage_order_is_enforced() {
    let exp = Experiment::prepare(&common::tiny(&[])).unwrap();
    let (net, store) = exp.build_net().unwrap();
    let trainer = exp.trainer(&net).unwrap();
    let mut fresh = TrainState::fresh(store);
    for s in [Stage::InputMix, Stage::LatentMix] {
        assert!(matches!(
            trainer.train_stage(&mut fresh.clone(), s, 1),
            Err(Error::StageOrder(_))
        ));
    }
    trainer.train_stage(&mut fresh, Stage::Base, 1).unwrap();
    // Stage 1 straight to stage 3 is the LatMix ablation.
    let mut lat = fresh.clone();
    trainer.train_stage(&mut lat, Stage::LatentMix, 1).unwrap();
    assert!(matches!(
        trainer.train_stage(&mut lat, Stage::InputMix, 1),
        Err(Error::StageOrder(_))
    ));
    assert!(matches!(trainer.train_stage(&mut lat, Stage::Base, 1), Err(Error::StageOrder(_))));
}

#[test]
fn every_parameter_receives_gradient() {
    use padmix::trainer::{batch_gradient, BatchInput, BatchPlan, Negative};
    let exp = Experiment::prepare(&common::tiny(&[])).unwrap();
    let (net, mut store) = exp.build_net().unwrap();
    let samples = exp.train_samples();
    let pick = [samples[0], samples[samples.len() - 1]];
    let mut input = BatchInput { images: vec![], priors: vec![], objects: vec![] };
    for &s in &pick {
        let sample = &exp.corpus.samples[s];
        let obj = &exp.corpus.objects[sample.object];
        input
            .images
            .push(padmix::nn::Tensor::from_vec(&net.image_shape(), sample.image.data.clone()).unwrap());
        input.priors.push(Some(net.grid_tensor(exp.priors.get(&obj.class_id).unwrap()).unwrap()));
        input.objects.push(sample.object);
    }
    let volumes: Vec<_> = exp.corpus.objects.iter().map(|o| net.grid_tensor(&o.volume).unwrap()).collect();
    let plan = BatchPlan::Base {
        negatives: vec![Negative::Object(input.objects[1]), Negative::Object(input.objects[0])],
    };
    store.zero_grad();
    batch_gradient(&net, &mut store, &volumes, &input, &plan, &exp.cfg.loss).unwrap();
    for p in store.iter() {
        assert!(p.grad.data().iter().any(|&g| g != 0.0), "{} has an all-zero gradient", p.name);
    }
}

#[test]
fn alpha_sweep_cells_match_independent_runs() {
    let cfg = common::tiny(&[]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let gt = exp.pretrain().unwrap().encoder_store();
    let rows = alpha_sweep(&exp, &gt, &[0.4, 1.0]).unwrap();
    assert_eq!(rows.len(), 2);
    let best = if rows[1].input_mix > rows[0].input_mix { 1.0 } else { 0.4 };
    assert!(rows.iter().all(|r| r.padmix_input_alpha == best));
    let single = alpha_sweep(&exp, &gt, &[1.0]).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].input_mix, rows[1].input_mix);

    // Independent launches with the alphas of the second row.
    let input = Experiment::prepare(&common::tiny(&["mixup.input_alpha=1.0"])).unwrap();
    let run = run_pipelines(&input, &gt, &[Pipeline::InputMix]).unwrap();
    assert_eq!(run.outcome(Pipeline::InputMix).unwrap().table.average, rows[1].input_mix);
    let latent = Experiment::prepare(&common::tiny(&[
        &format!("mixup.input_alpha={best}"),
        "mixup.latent_alpha=1.0",
    ]))
    .unwrap();
    let run = run_pipelines(&latent, &gt, &[Pipeline::PADMix]).unwrap();
    assert_eq!(run.outcome(Pipeline::PADMix).unwrap().table.average, rows[1].padmix);
}

#[test]
fn shared_stage_one_feeds_every_branch() {
    let exp = Experiment::prepare(&common::tiny(&[])).unwrap();
    let gt = exp.pretrain().unwrap().encoder_store();
    let base = train_base(&exp, &gt).unwrap();
    let base_store = base.state.store.clone();
    let run = run_branches(&exp, base, &Pipeline::ALL).unwrap();
    assert_eq!(run.outcome(Pipeline::WithoutMix).unwrap().state.store, base_store);
    assert_eq!(run.outcome(Pipeline::LatMix).unwrap().state.stage, 3);
    assert_eq!(run.stage_metrics.len(), 4);
}

#[test]
fn pretraining_zero_epochs_returns_initialization() {
    let cfg = common::tiny(&["train.pretrain_epochs=0"]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let pre = exp.pretrain().unwrap();
    assert!(pre.curve.is_empty());
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(padmix::seed::derive(
        cfg.seed,
        &[padmix::seed::hash_str("gt_init")],
    ));
    let (_, init) = padmix::model::GtAutoencoder::build(&cfg.model, cfg.data.dim, &mut rng).unwrap();
    assert_eq!(pre.store, init);
}

#[test]
fn pretraining_loss_trends_down() {
    use padmix::model::GtAutoencoder;
    use padmix::trainer::pretrain_gt;
    let cfg = common::tiny(&["data.objects_per_class=5"]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let vols: Vec<_> = exp.corpus.objects.iter().take(10).map(|o| &o.volume).collect();
    assert_eq!(vols.len(), 10);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
    let (ae, mut store) = GtAutoencoder::build(&cfg.model, cfg.data.dim, &mut rng).unwrap();
    let t = &cfg.train;
    let curve = pretrain_gt(&ae, &mut store, &vols, 20, t.pretrain_batch, t.pretrain_lr, &t.optimizer, 7).unwrap();
    assert_eq!(curve.len(), 20);
    // Three-epoch moving average never rises.
    let smooth: Vec<f64> = curve.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{curve:?}");
    }
}
