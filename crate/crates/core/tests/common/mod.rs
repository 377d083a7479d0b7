#![allow(dead_code)]

use padmix::config::ExperimentConfig;

/// Three classes, three objects, two poses and a narrow network: every
/// pipeline stage runs in well under a second.
pub const TINY: &str = r#"
seed = 1
run_name = "tiny"

[data]
classes = ["box", "table", "lamp"]
objects_per_class = 3
poses = 2

[split]
base = ["box", "table"]
novel = ["lamp"]
shots = 1

[model]
latent = 16
image_channels = [4, 4, 8, 8]
volume_channels = [4, 8, 8]
merger_hidden = 16
decoder_channels = [8, 8, 4]

[train]
stage1_epochs = 2
stage2_epochs = 1
stage3_epochs = 1
batch_size = 4
pretrain_epochs = 2
"#;

pub fn tiny(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::parse(TINY, &o).unwrap()
}

pub struct Overfit {
    /// First step count at which train IoU reached the target.
    pub reached_at: Option<usize>,
    pub best_iou: f64,
    pub seconds: f64,
}

/// Stage-1 training on one chair seen from one pose, checking train IoU
/// every ten steps. The prior is the class prior of three chairs, so it is
/// informative without being the answer.
pub fn overfit(variant: padmix::model::Variant, max_steps: usize, target: f64) -> Overfit {
    use padmix::data::{PriorMode, PriorSet};
    use padmix::model::{Geometry, ModelConfig, PadMixNet, Variant};
    use padmix::synthdata::{generate_corpus, DatasetConfig};
    use padmix::trainer::{MixupConfig, Stage, TrainConfig, TrainState, Trainer};
    use padmix::voxel::{build_prior, iou};
    use rand::SeedableRng;

    let start = std::time::Instant::now();
    let data = DatasetConfig {
        classes: vec!["chair".into()],
        objects_per_class: 3,
        poses: 1,
        ..DatasetConfig::default()
    };
    let corpus = generate_corpus(&data).unwrap();
    let vols: Vec<_> = corpus.objects.iter().map(|o| &o.volume).collect();
    let prior = build_prior(&vols, 0.5).unwrap();
    let priors = PriorSet::from_map([("chair".to_string(), prior.clone())].into()).unwrap();
    let geometry = Geometry { dim: data.dim, image_size: data.image_size };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let (net, store) = PadMixNet::build(&ModelConfig::default(), variant, geometry, &mut rng).unwrap();
    let mode = if variant == Variant::Prior { PriorMode::Correct } else { PriorMode::None };
    let train = TrainConfig { batch_size: 1, ..TrainConfig::default() };
    let trainer = Trainer::new(
        &net,
        &corpus,
        &priors,
        mode,
        vec![0],
        Default::default(),
        MixupConfig::default(),
        train,
        3,
    )
    .unwrap();
    let sample = &corpus.samples[0];
    let target_vol = &corpus.objects[sample.object].volume;
    let p = (variant == Variant::Prior).then_some(&prior);
    let mut state = TrainState::fresh(store);
    let mut out = Overfit { reached_at: None, best_iou: 0.0, seconds: 0.0 };
    // One sample at batch size one: each epoch is a single optimizer step.
    for step in (10..=max_steps).step_by(10) {
        trainer.train_stage(&mut state, Stage::Base, 10).unwrap();
        let pred = net.forward(&state.store, &sample.image.data, p).unwrap().prediction;
        let v = iou(&pred, target_vol, 0.3).unwrap();
        out.best_iou = out.best_iou.max(v);
        if v >= target {
            out.reached_at = Some(step);
            break;
        }
    }
    out.seconds = start.elapsed().as_secs_f64();
    out
}
