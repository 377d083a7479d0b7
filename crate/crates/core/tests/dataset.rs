use std::collections::BTreeMap;
use std::fs;

use padmix::synthdata::{build_dataset, generate_corpus, load_corpus, make_split, DatasetConfig};
use padmix::voxel::{parse_binvox, write_binvox};

fn small() -> DatasetConfig {
    DatasetConfig {
        classes: vec!["box".into(), "lamp".into()],
        objects_per_class: 3,
        poses: 8,
        ..DatasetConfig::default()
    }
}

#[test]
fn build_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&small(), a.path()).unwrap();
    build_dataset(&small(), b.path()).unwrap();
    let mut names = Vec::new();
    for e in walk(a.path()) {
        let rel = e.strip_prefix(a.path()).unwrap();
        assert_eq!(fs::read(&e).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
        names.push(rel.to_path_buf());
    }
    assert_eq!(names.len(), walk(b.path()).len());
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn manifest_counts_match_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small(), dir.path()).unwrap();
    assert_eq!(m.records.len(), 2 * 3 * 8);

    // Recount from the volume and image files rather than the manifest.
    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    for f in walk(&dir.path().join("volumes")) {
        let stem = f.file_stem().unwrap().to_string_lossy().into_owned();
        let class = stem.rsplit_once('_').unwrap().0.to_string();
        *per_class.entry(class).or_default() += 1;
    }
    assert_eq!(per_class, BTreeMap::from([("box".into(), 3), ("lamp".into(), 3)]));
    let pgms = walk(dir.path()).iter().filter(|p| p.extension().is_some_and(|e| e == "pgm")).count();
    assert_eq!(pgms, 2 * m.records.len());

    let loaded = load_corpus(dir.path()).unwrap();
    assert_eq!(loaded, generate_corpus(&small()).unwrap());
}

#[test]
fn too_many_shots_for_the_class_is_an_error() {
    let corpus = generate_corpus(&DatasetConfig {
        objects_per_class: 8,
        poses: 1,
        ..small()
    })
    .unwrap();
    let counted = corpus.manifest.objects_by_class()["lamp"].len();
    assert_eq!(counted, 8);
    let base = ["box".to_string()];
    let novel = ["lamp".to_string()];
    assert!(make_split(&corpus.manifest, &base, &novel, 10, 0).is_err());
    assert!(make_split(&corpus.manifest, &base, &novel, counted, 0).is_ok());
}

#[test]
fn binvox_round_trip_on_generated_volumes() {
    let corpus = generate_corpus(&DatasetConfig {
        poses: 1,
        ..DatasetConfig::default()
    })
    .unwrap();
    for o in &corpus.objects {
        let bytes = write_binvox(&o.volume).unwrap();
        let back = parse_binvox(&bytes).unwrap();
        assert_eq!(back, o.volume);
        assert_eq!(write_binvox(&back).unwrap(), bytes, "{}", o.object_id);
    }
}
