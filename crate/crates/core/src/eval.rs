//! Measurement surfaces: class-wise IoU tables with per-sample dumps,
//! same-object / different-object latent cosine reports, and the
//! proximity-versus-IoU join.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PriorMode, PriorSet};
use crate::error::{Error, Result};
use crate::losses::cosine;
use crate::model::PadMixNet;
use crate::nn::ParamStore;
use crate::synthdata::{Corpus, FewShotSplit};
use crate::voxel::{iou, proximity, LabeledVolume, VoxelGrid};

/// Pairwise summation: order-fixed and with error growing only
/// logarithmically in the number of terms.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        pairwise_sum(v) / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleIou {
    pub class_id: String,
    pub object_id: String,
    pub pose_id: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub mean: f64,
    pub count: usize,
}

/// Class-wise mean IoU; `average` is the mean of the class means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouTable {
    pub threshold: f64,
    pub prior_mode: PriorMode,
    pub per_class: BTreeMap<String, ClassIou>,
    pub average: f64,
}

impl IouTable {
    pub fn aggregate(samples: &[SampleIou], threshold: f64, prior_mode: PriorMode) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("no samples to aggregate".into()));
        }
        let mut by_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in samples {
            by_class.entry(s.class_id.clone()).or_default().push(s.iou);
        }
        let per_class: BTreeMap<String, ClassIou> = by_class
            .into_iter()
            .map(|(c, v)| {
                (
                    c,
                    ClassIou {
                        mean: mean(&v),
                        count: v.len(),
                    },
                )
            })
            .collect();
        let means: Vec<f64> = per_class.values().map(|c| c.mean).collect();
        Ok(IouTable {
            threshold,
            prior_mode,
            average: mean(&means),
            per_class,
        })
    }
}

/// Scores predicted volumes against ground truth. Each item is
/// `(class, object, pose, prediction, ground truth)`.
pub fn score_predictions<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a str, usize, VoxelGrid, &'a VoxelGrid)>,
    threshold: f64,
) -> Result<Vec<SampleIou>> {
    items
        .into_iter()
        .map(|(class, object, pose, pred, gt)| {
            Ok(SampleIou {
                class_id: class.to_string(),
                object_id: object.to_string(),
                pose_id: pose,
                iou: iou(&pred, gt, threshold)?,
            })
        })
        .collect()
}

/// Runs the network on every listed corpus sample with the requested prior
/// mode and scores the binarized predictions.
pub fn eval_iou(
    net: &PadMixNet,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    samples: &[usize],
    priors: &PriorSet,
    mode: PriorMode,
    threshold: f64,
) -> Result<(IouTable, Vec<SampleIou>)> {
    let mut items = Vec::with_capacity(samples.len());
    for &s in samples {
        let sample = &corpus.samples[s];
        let obj = &corpus.objects[sample.object];
        let prior = priors.prior_for(&obj.class_id, mode)?;
        let pred = net.forward(store, &sample.image.data, prior)?.prediction;
        items.push((
            obj.class_id.as_str(),
            obj.object_id.as_str(),
            sample.pose_id,
            pred,
            &obj.volume,
        ));
    }
    let scored = score_predictions(items, threshold)?;
    Ok((IouTable::aggregate(&scored, threshold, mode)?, scored))
}

pub fn write_samples_csv(path: &Path, rows: &[SampleIou]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `class,count,mean_iou` rows followed by an `average` row. The
/// threshold and prior mode are embedded as leading comment-free columns.
pub fn write_table_csv(path: &Path, table: &IouTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "count", "mean_iou", "threshold", "prior_mode"])?;
    for (c, v) in &table.per_class {
        w.write_record([
            c.as_str(),
            &v.count.to_string(),
            &v.mean.to_string(),
            &table.threshold.to_string(),
            table.prior_mode.name(),
        ])?;
    }
    w.write_record([
        "average",
        &table.per_class.values().map(|c| c.count).sum::<usize>().to_string(),
        &table.average.to_string(),
        &table.threshold.to_string(),
        table.prior_mode.name(),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCosine {
    pub class_id: String,
    pub same_obj: f64,
    pub diff_obj: f64,
    pub same_pairs: usize,
    pub diff_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub per_class: Vec<ClassCosine>,
}

impl CosineReport {
    /// Mean over classes of the SameObj similarity.
    pub fn same_obj_mean(&self) -> f64 {
        mean(&self.per_class.iter().map(|c| c.same_obj).collect::<Vec<_>>())
    }

    pub fn diff_obj_mean(&self) -> f64 {
        mean(&self.per_class.iter().map(|c| c.diff_obj).collect::<Vec<_>>())
    }
}

/// One embedded view.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub class_id: String,
    pub object_id: String,
    pub latent: Vec<f32>,
}

/// Exhaustive pair statistics over embedded views: every pair of views of
/// one object (SameObj) and every pair of views of two different objects of
/// one class (DiffObj).
pub fn cosine_from_latents(views: &[Embedded]) -> Result<CosineReport> {
    let mut by_class: BTreeMap<&str, Vec<&Embedded>> = BTreeMap::new();
    for v in views {
        by_class.entry(&v.class_id).or_default().push(v);
    }
    let mut per_class = Vec::new();
    for (class, vs) in by_class {
        let (mut same, mut diff) = (Vec::new(), Vec::new());
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                let c = cosine(&vs[i].latent, &vs[j].latent)? as f64;
                if vs[i].object_id == vs[j].object_id {
                    same.push(c);
                } else {
                    diff.push(c);
                }
            }
        }
        if same.is_empty() || diff.is_empty() {
            return Err(Error::Invalid(format!(
                "class {class} needs two views per object and two objects"
            )));
        }
        per_class.push(ClassCosine {
            class_id: class.to_string(),
            same_obj: mean(&same),
            diff_obj: mean(&diff),
            same_pairs: same.len(),
            diff_pairs: diff.len(),
        });
    }
    if per_class.is_empty() {
        return Err(Error::Empty("no views to compare".into()));
    }
    Ok(CosineReport { per_class })
}

/// Merged embeddings `e_Z` of the listed samples, compared pairwise.
pub fn cosine_report(
    net: &PadMixNet,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    samples: &[usize],
    priors: &PriorSet,
    mode: PriorMode,
) -> Result<CosineReport> {
    let mut views = Vec::with_capacity(samples.len());
    for &s in samples {
        let sample = &corpus.samples[s];
        let obj = &corpus.objects[sample.object];
        let prior = priors.prior_for(&obj.class_id, mode)?;
        let t = net.forward(store, &sample.image.data, prior)?;
        views.push(Embedded {
            class_id: obj.class_id.clone(),
            object_id: obj.object_id.clone(),
            latent: t.e_z.values,
        });
    }
    cosine_from_latents(&views)
}

pub fn write_cosine_csv(path: &Path, report: &CosineReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.per_class {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProximityRow {
    pub class: String,
    pub proximity: f64,
    pub iou: f64,
}

/// Joins each novel class's proximity to the base classes with its IoU.
/// Proximity compares every corpus object of the novel class against the
/// base-class training objects.
pub fn proximity_analysis(corpus: &Corpus, split: &FewShotSplit, table: &IouTable) -> Result<Vec<ProximityRow>> {
    let labeled = |classes: &[String], train_only: bool| -> Vec<LabeledVolume<'_>> {
        corpus
            .objects
            .iter()
            .filter(|o| {
                classes.contains(&o.class_id) && (!train_only || split.is_train_object(&o.class_id, &o.object_id))
            })
            .map(|o| LabeledVolume {
                class_id: &o.class_id,
                object_id: &o.object_id,
                grid: &o.volume,
            })
            .collect()
    };
    let novel = labeled(&split.novel_classes, false);
    let base = labeled(&split.base_classes, true);
    let report = proximity(&novel, &base)?;
    split
        .novel_classes
        .iter()
        .map(|c| {
            let iou = table
                .per_class
                .get(c)
                .ok_or_else(|| Error::Invalid(format!("IoU table has no class {c}")))?
                .mean;
            let proximity = *report
                .per_novel_class
                .get(c)
                .ok_or_else(|| Error::Invalid(format!("no proximity for class {c}")))?;
            Ok(ProximityRow {
                class: c.clone(),
                proximity,
                iou,
            })
        })
        .collect()
}

pub fn write_proximity_csv(path: &Path, rows: &[ProximityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(occ: &[usize]) -> VoxelGrid {
        let mut b = vec![false; 64];
        for &i in occ {
            b[i] = true;
        }
        VoxelGrid::from_occupancy(4, &b).unwrap()
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = [grid(&[0, 1, 2]), grid(&[5, 6]), grid(&[9])];
        let classes = ["a", "a", "b"];
        let perfect = score_predictions(
            (0..3).map(|i| (classes[i], "o", i, gts[i].clone(), &gts[i])),
            0.3,
        )
        .unwrap();
        let t = IouTable::aggregate(&perfect, 0.3, PriorMode::Correct).unwrap();
        assert!(t.per_class.values().all(|c| c.mean == 1.0));
        assert_eq!(t.average, 1.0);

        let empty = score_predictions(
            (0..3).map(|i| (classes[i], "o", i, VoxelGrid::empty(4), &gts[i])),
            0.3,
        )
        .unwrap();
        let t = IouTable::aggregate(&empty, 0.3, PriorMode::Correct).unwrap();
        assert_eq!(t.average, 0.0);
    }

    #[test]
    fn average_is_over_classes_not_samples() {
        let rows = vec![
            SampleIou { class_id: "a".into(), object_id: "x".into(), pose_id: 0, iou: 1.0 },
            SampleIou { class_id: "a".into(), object_id: "x".into(), pose_id: 1, iou: 1.0 },
            SampleIou { class_id: "a".into(), object_id: "y".into(), pose_id: 0, iou: 1.0 },
            SampleIou { class_id: "b".into(), object_id: "z".into(), pose_id: 0, iou: 0.0 },
        ];
        let t = IouTable::aggregate(&rows, 0.3, PriorMode::None).unwrap();
        assert_eq!(t.average, 0.5);
        assert_eq!(t.per_class["a"].count, 3);
    }

    #[test]
    fn cosine_pair_counts_and_duplicate_views() {
        let mut views = Vec::new();
        for o in 0..3 {
            for v in 0..4 {
                views.push(Embedded {
                    class_id: "c".into(),
                    object_id: format!("o{o}"),
                    latent: vec![1.0 + o as f32, v as f32 * 0.1 + 0.5, -0.3],
                });
            }
        }
        let r = cosine_from_latents(&views).unwrap();
        // m objects with n views: m*n(n-1)/2 same-object pairs.
        assert_eq!(r.per_class[0].same_pairs, 3 * 4 * 3 / 2);
        assert_eq!(r.per_class[0].diff_pairs, 3 * 16);

        let dup = vec![
            Embedded { class_id: "c".into(), object_id: "a".into(), latent: vec![0.2, 0.7] },
            Embedded { class_id: "c".into(), object_id: "a".into(), latent: vec![0.2, 0.7] },
            Embedded { class_id: "c".into(), object_id: "b".into(), latent: vec![-1.0, 0.1] },
        ];
        let r = cosine_from_latents(&dup).unwrap();
        assert!((r.per_class[0].same_obj - 1.0).abs() < 1e-6);

        assert!(cosine_from_latents(&dup[..2]).is_err());
    }

    #[test]
    fn pairwise_sum_matches_plain_sum_on_exact_values() {
        let v: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }
}
