mod common;

use std::collections::BTreeMap;

use padmix::data::PriorMode;
use padmix::eval::{
    cosine_from_latents, proximity_analysis, write_proximity_csv, write_samples_csv, ClassIou, Embedded, IouTable,
};
use padmix::experiment::{init_gt, train_base, Experiment};
use padmix::synthdata::make_split;
use padmix::voxel::{proximity, LabeledVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained() -> (Experiment, padmix::model::PadMixNet, padmix::nn::ParamStore<f32>) {
    let exp = Experiment::prepare(&common::tiny(&[])).unwrap();
    let gt = exp.pretrain().unwrap().encoder_store();
    let base = train_base(&exp, &gt).unwrap();
    (exp, base.net, base.state.store)
}

#[test]
fn table_is_rederivable_from_dumped_samples() {
    let (exp, net, store) = trained();
    let (table, samples) = exp.evaluate(&net, &store, PriorMode::Correct).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.csv");
    write_samples_csv(&path, &samples).unwrap();

    let mut rdr = csv::Reader::from_path(&path).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["class_id", "object_id", "pose_id", "iou"]);
    let mut by_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rdr.records() {
        let r = r.unwrap();
        by_class.entry(r[0].to_string()).or_default().push(r[3].parse().unwrap());
    }
    let class_means: Vec<f64> = by_class.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let avg = class_means.iter().sum::<f64>() / class_means.len() as f64;
    assert!((avg - table.average).abs() < 1e-12, "{avg} vs {}", table.average);
    for (c, v) in &by_class {
        assert_eq!(table.per_class[c].count, v.len());
    }
}

#[test]
fn evaluation_is_repeatable_and_leaves_parameters_alone() {
    let (exp, net, store) = trained();
    let before = store.clone();
    let a = exp.evaluate(&net, &store, PriorMode::Correct).unwrap();
    let b = exp.evaluate(&net, &store, PriorMode::Correct).unwrap();
    assert_eq!(a, b);
    assert_eq!(store, before);
}

#[test]
fn corrupted_prior_changes_predictions() {
    let (exp, net, store) = trained();
    let (table, bad) = exp.evaluate(&net, &store, PriorMode::Corrupted).unwrap();
    assert_eq!(table.prior_mode, PriorMode::Corrupted);
    assert!(!bad.is_empty());
    let s = &exp.corpus.samples[exp.query_samples()[0]];
    let class = &exp.corpus.objects[s.object].class_id;
    let good = exp.priors.prior_for(class, PriorMode::Correct).unwrap().unwrap();
    let wrong = exp.priors.prior_for(class, PriorMode::Corrupted).unwrap().unwrap();
    assert_ne!(good, wrong);
    let a = net.forward(&store, &s.image.data, Some(good)).unwrap().prediction;
    let b = net.forward(&store, &s.image.data, Some(wrong)).unwrap().prediction;
    assert_ne!(a, b);
}

#[test]
fn cosine_report_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut views = Vec::new();
    for c in ["a", "b"] {
        for o in 0..3 {
            for _ in 0..4 {
                views.push(Embedded {
                    class_id: c.into(),
                    object_id: format!("{c}{o}"),
                    latent: (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                });
            }
        }
    }
    let report = cosine_from_latents(&views).unwrap();
    let cos = |x: &[f32], y: &[f32]| {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum();
        let n = |v: &[f32]| v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        dot / (n(x) * n(y))
    };
    for cc in &report.per_class {
        let (mut same, mut diff) = (vec![], vec![]);
        for x in &views {
            for y in &views {
                if std::ptr::eq(x, y) || x.class_id != cc.class_id || y.class_id != cc.class_id {
                    continue;
                }
                let v = cos(&x.latent, &y.latent);
                if x.object_id == y.object_id { same.push(v) } else { diff.push(v) }
            }
        }
        // Ordered pairs count each unordered pair twice.
        assert_eq!(cc.same_pairs * 2, same.len());
        assert_eq!(cc.same_pairs, 3 * 4 * 3 / 2);
        assert_eq!(cc.diff_pairs * 2, diff.len());
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((cc.same_obj - m(&same)).abs() < 1e-6);
        assert!((cc.diff_obj - m(&diff)).abs() < 1e-6);
    }
}

#[test]
fn cloned_novel_class_has_proximity_one() {
    let cfg = common::tiny(&[]);
    let mut exp = Experiment::prepare(&cfg).unwrap();
    let boxes: Vec<_> = exp.corpus.objects.iter().filter(|o| o.class_id == "box").map(|o| o.volume.clone()).collect();
    for (o, v) in exp.corpus.objects.iter_mut().filter(|o| o.class_id == "lamp").zip(boxes) {
        o.volume = v;
    }
    let split = make_split(&exp.corpus.manifest, &cfg.split.base, &cfg.split.novel, 1, 0).unwrap();
    let table = table_with(&["lamp"], 0.25);
    let rows = proximity_analysis(&exp.corpus, &split, &table).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].class.as_str(), rows[0].proximity, rows[0].iou), ("lamp", 1.0, 0.25));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    write_proximity_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "class,proximity,iou");
}

fn table_with(classes: &[&str], v: f64) -> IouTable {
    IouTable {
        threshold: 0.3,
        prior_mode: PriorMode::Correct,
        per_class: classes.iter().map(|c| (c.to_string(), ClassIou { mean: v, count: 1 })).collect(),
        average: v,
    }
}

#[test]
fn proximity_rows_agree_with_standalone_proximity() {
    let exp = Experiment::prepare(&common::tiny(&["data.classes=[\"box\",\"table\",\"lamp\",\"l_beam\"]", "split.novel=[\"lamp\",\"l_beam\"]"])).unwrap();
    let rows = proximity_analysis(&exp.corpus, &exp.split, &table_with(&["lamp", "l_beam"], 0.5)).unwrap();
    let lv = |classes: &[&str]| -> Vec<LabeledVolume<'_>> {
        exp.corpus
            .objects
            .iter()
            .filter(|o| classes.contains(&o.class_id.as_str()))
            .map(|o| LabeledVolume { class_id: &o.class_id, object_id: &o.object_id, grid: &o.volume })
            .collect()
    };
    // With every base object in training, the base set is the whole base classes.
    let r = proximity(&lv(&["lamp", "l_beam"]), &lv(&["box", "table"])).unwrap();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(row.proximity, r.per_novel_class[&row.class]);
    }
    assert!(proximity_analysis(&exp.corpus, &exp.split, &table_with(&["lamp"], 0.5)).is_err());
}

#[test]
fn checkpoint_state_from_init_gt_requires_full_encoder() {
    let exp = Experiment::prepare(&common::tiny(&[])).unwrap();
    let mut gt = exp.pretrain().unwrap().encoder_store();
    let (_, mut store) = exp.build_net().unwrap();
    init_gt(&mut store, &gt).unwrap();
    let first = gt.iter().next().unwrap().name.clone();
    gt.retain(|p| p.name != first);
    assert!(init_gt(&mut store, &gt).is_err());
}
