//! Training and query views over a corpus: which samples belong to which
//! side of a few-shot split, and the per-class shape priors fed alongside
//! each image.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{Corpus, FewShotSplit};
use crate::voxel::{build_prior, parse_binvox, write_binvox, VoxelGrid};

/// Which prior accompanies an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// The prior of the image's own class.
    Correct,
    /// The prior of the next class in sorted order, wrapping around.
    Corrupted,
    /// No prior; requires the no-prior network variant.
    None,
}

impl PriorMode {
    pub fn name(self) -> &'static str {
        match self {
            PriorMode::Correct => "correct",
            PriorMode::Corrupted => "corrupted",
            PriorMode::None => "none",
        }
    }
}

/// Per-class priors keyed by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSet {
    priors: BTreeMap<String, VoxelGrid>,
}

impl PriorSet {
    /// One prior per split class from that class's training objects, i.e.
    /// all objects for base classes and the K shots for novel classes.
    pub fn build(corpus: &Corpus, split: &FewShotSplit, t: f64) -> Result<Self> {
        let mut priors = BTreeMap::new();
        for (class, objects) in &split.train_objects {
            let vols = objects
                .iter()
                .map(|id| {
                    corpus
                        .object_index(id)
                        .map(|i| &corpus.objects[i].volume)
                        .ok_or_else(|| Error::Invalid(format!("split object {id} not in corpus")))
                })
                .collect::<Result<Vec<_>>>()?;
            priors.insert(class.clone(), build_prior(&vols, t)?);
        }
        Ok(PriorSet { priors })
    }

    pub fn from_map(priors: BTreeMap<String, VoxelGrid>) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::Empty("no priors".into()));
        }
        Ok(PriorSet { priors })
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.priors.keys().map(String::as_str)
    }

    pub fn get(&self, class: &str) -> Option<&VoxelGrid> {
        self.priors.get(class)
    }

    /// Class whose prior is substituted under [`PriorMode::Corrupted`].
    pub fn corrupted_class(&self, class: &str) -> Option<&str> {
        let keys: Vec<&String> = self.priors.keys().collect();
        let i = keys.iter().position(|k| *k == class)?;
        Some(keys[(i + 1) % keys.len()])
    }

    pub fn prior_for(&self, class: &str, mode: PriorMode) -> Result<Option<&VoxelGrid>> {
        let key = match mode {
            PriorMode::None => return Ok(None),
            PriorMode::Correct => class,
            PriorMode::Corrupted => self
                .corrupted_class(class)
                .ok_or_else(|| Error::Invalid(format!("no prior for class {class}")))?,
        };
        self.priors
            .get(key)
            .map(Some)
            .ok_or_else(|| Error::Invalid(format!("no prior for class {key}")))
    }

    pub fn file_name(class: &str) -> String {
        format!("prior_{class}.binvox")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (class, grid) in &self.priors {
            let path = dir.join(Self::file_name(class));
            fs::write(&path, write_binvox(grid)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, classes: &[String]) -> Result<Self> {
        let mut priors = BTreeMap::new();
        for class in classes {
            let path = dir.join(Self::file_name(class));
            let bytes = fs::read(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
            priors.insert(class.clone(), parse_binvox(&bytes)?);
        }
        Self::from_map(priors)
    }
}

/// Corpus sample indices whose object is a training object of the split.
pub fn train_samples(corpus: &Corpus, split: &FewShotSplit) -> Vec<usize> {
    select(corpus, |c, o| split.is_train_object(c, o))
}

/// Corpus sample indices of held-out novel objects.
pub fn query_samples(corpus: &Corpus, split: &FewShotSplit) -> Vec<usize> {
    select(corpus, |c, o| split.is_query_object(c, o))
}

fn select(corpus: &Corpus, keep: impl Fn(&str, &str) -> bool) -> Vec<usize> {
    corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let o = &corpus.objects[s.object];
            keep(&o.class_id, &o.object_id)
        })
        .map(|(i, _)| i)
        .collect()
}
