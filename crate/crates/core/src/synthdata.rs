//! Procedural shape corpus: parametric archetypes voxelized on a grid,
//! rendered orthographically into silhouette and depth images, written to
//! disk with a JSON-Lines manifest, plus the base/novel few-shot split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::voxel::{parse_binvox, write_binvox, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Box,
    Table,
    Chair,
    Lamp,
    LBeam,
    CylinderStack,
}

impl Archetype {
    pub const ALL: [Archetype; 6] = [
        Archetype::Box,
        Archetype::Table,
        Archetype::Chair,
        Archetype::Lamp,
        Archetype::LBeam,
        Archetype::CylinderStack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Box => "box",
            Archetype::Table => "table",
            Archetype::Chair => "chair",
            Archetype::Lamp => "lamp",
            Archetype::LBeam => "l_beam",
            Archetype::CylinderStack => "cylinder_stack",
        }
    }

    /// Documented `[min, max]` range of every shape parameter, in order.
    pub fn param_ranges(self) -> &'static [(&'static str, f64, f64)] {
        match self {
            Archetype::Box => &[("width", 0.3, 1.0), ("height", 0.3, 1.0), ("depth", 0.3, 1.0)],
            Archetype::Table => &[
                ("width", 0.6, 1.0),
                ("depth", 0.6, 1.0),
                ("height", 0.5, 1.0),
                ("top_thickness", 0.1, 0.3),
                ("leg_width", 0.1, 0.25),
            ],
            Archetype::Chair => &[
                ("width", 0.5, 0.8),
                ("depth", 0.5, 0.8),
                ("seat_height", 0.3, 0.5),
                ("seat_thickness", 0.08, 0.2),
                ("back_height", 0.3, 0.5),
                ("leg_width", 0.1, 0.25),
            ],
            Archetype::Lamp => &[
                ("base_radius", 0.3, 0.5),
                ("base_height", 0.05, 0.12),
                ("pole_radius", 0.06, 0.12),
                ("height", 0.7, 1.0),
                ("shade_radius", 0.25, 0.45),
                ("shade_height", 0.2, 0.35),
            ],
            Archetype::LBeam => &[
                ("length", 0.6, 1.0),
                ("flange_width", 0.4, 0.9),
                ("web_height", 0.4, 0.9),
                ("thickness", 0.12, 0.3),
            ],
            Archetype::CylinderStack => &[
                ("radius_low", 0.5, 1.0),
                ("radius_mid", 0.3, 0.8),
                ("radius_top", 0.15, 0.6),
                ("height_low", 0.15, 0.35),
                ("height_mid", 0.15, 0.35),
                ("height_top", 0.1, 0.3),
            ],
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown archetype '{s}'")))
    }
}

/// One procedural shape instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class_id: String,
    pub archetype: Archetype,
    pub params: Vec<f64>,
}

impl ShapeSpec {
    /// Uniform draw of every parameter within its documented range.
    pub fn random<R: Rng + ?Sized>(class_id: &str, archetype: Archetype, rng: &mut R) -> Self {
        let params = archetype
            .param_ranges()
            .iter()
            .map(|&(_, lo, hi)| rng.random_range(lo..=hi))
            .collect();
        ShapeSpec {
            class_id: class_id.to_string(),
            archetype,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = self.archetype.param_ranges();
        if ranges.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "{} expects {} parameters, got {}",
                self.archetype,
                ranges.len(),
                self.params.len()
            )));
        }
        for (&(name, lo, hi), &v) in ranges.iter().zip(&self.params) {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Invalid(format!(
                    "{}.{name} = {v} outside [{lo}, {hi}]",
                    self.archetype
                )));
            }
        }
        Ok(())
    }
}

/// Voxel-space helper: a one-voxel margin is kept on every side, leaving
/// `n = dim - 2` usable cells starting at index 1.
struct Canvas {
    grid: VoxelGrid,
    n: usize,
}

impl Canvas {
    fn new(dim: usize) -> Self {
        Canvas {
            grid: VoxelGrid::empty(dim),
            n: dim - 2,
        }
    }

    /// Length in voxels of a fraction of the usable extent, at least one.
    fn len(&self, frac: f64) -> usize {
        ((frac * self.n as f64).round() as usize).clamp(1, self.n)
    }

    /// Centered half-open interval of `len` cells.
    fn centered(&self, len: usize) -> (usize, usize) {
        let start = 1 + (self.n - len) / 2;
        (start, start + len)
    }

    fn fill(&mut self, xs: (usize, usize), ys: (usize, usize), zs: (usize, usize)) {
        let top = self.n + 1;
        for x in xs.0..xs.1.min(top) {
            for y in ys.0..ys.1.min(top) {
                for z in zs.0..zs.1.min(top) {
                    self.grid.set_occupied(x, y, z);
                }
            }
        }
    }

    /// Vertical cylinder about the grid's central axis; `radius` is a
    /// fraction of half the usable extent.
    fn cylinder(&mut self, radius: f64, ys: (usize, usize)) {
        let dim = self.grid.dim();
        let c = dim as f64 / 2.0;
        let r = radius * self.n as f64 / 2.0;
        let top = self.n + 1;
        for x in 1..top {
            for z in 1..top {
                let (dx, dz) = (x as f64 + 0.5 - c, z as f64 + 0.5 - c);
                if dx * dx + dz * dz <= r * r {
                    for y in ys.0..ys.1.min(top) {
                        self.grid.set_occupied(x, y, z);
                    }
                }
            }
        }
    }
}

/// Deterministic binary voxelization of a shape at resolution `dim`.
pub fn voxelize(spec: &ShapeSpec, dim: usize) -> Result<VoxelGrid> {
    spec.validate()?;
    if dim < 8 {
        return Err(Error::Invalid(format!("voxel dim {dim} below minimum of 8")));
    }
    let p = &spec.params;
    let mut cv = Canvas::new(dim);
    match spec.archetype {
        Archetype::Box => {
            let xs = cv.centered(cv.len(p[0]));
            let zs = cv.centered(cv.len(p[2]));
            let h = cv.len(p[1]);
            cv.fill(xs, (1, 1 + h), zs);
        }
        Archetype::Table => {
            let (xs, zs) = (cv.centered(cv.len(p[0])), cv.centered(cv.len(p[1])));
            let h = cv.len(p[2]).max(2);
            let top = ((p[3] * h as f64).round() as usize).clamp(1, h - 1);
            let leg = ((p[4] * (xs.1 - xs.0) as f64).round() as usize).max(1);
            cv.fill(xs, (1 + h - top, 1 + h), zs);
            for lx in [(xs.0, xs.0 + leg), (xs.1 - leg, xs.1)] {
                for lz in [(zs.0, zs.0 + leg), (zs.1 - leg, zs.1)] {
                    cv.fill(lx, (1, 1 + h - top), lz);
                }
            }
        }
        Archetype::Chair => {
            let (xs, zs) = (cv.centered(cv.len(p[0])), cv.centered(cv.len(p[1])));
            let seat_h = cv.len(p[2]).max(2);
            let seat_t = ((p[3] * cv.n as f64).round() as usize).clamp(1, seat_h - 1);
            let back_h = cv.len(p[4]);
            let leg = ((p[5] * (xs.1 - xs.0) as f64).round() as usize).max(1);
            cv.fill(xs, (1 + seat_h - seat_t, 1 + seat_h), zs);
            for lx in [(xs.0, xs.0 + leg), (xs.1 - leg, xs.1)] {
                for lz in [(zs.0, zs.0 + leg), (zs.1 - leg, zs.1)] {
                    cv.fill(lx, (1, 1 + seat_h - seat_t), lz);
                }
            }
            // Backrest along the low-z edge.
            cv.fill(xs, (1 + seat_h, 1 + seat_h + back_h), (zs.0, zs.0 + leg));
        }
        Archetype::Lamp => {
            let h = cv.len(p[3]);
            let base_h = cv.len(p[1]).min(h);
            let shade_h = cv.len(p[5]).min(h - base_h);
            cv.cylinder(p[0], (1, 1 + base_h));
            cv.cylinder(p[2], (1 + base_h, 1 + h - shade_h));
            cv.cylinder(p[4], (1 + h - shade_h, 1 + h));
            // Pole radius can fall below one voxel; keep the axis column.
            let c = dim / 2;
            cv.fill((c - 1, c + 1), (1 + base_h, 1 + h - shade_h), (c - 1, c + 1));
        }
        Archetype::LBeam => {
            let xs = cv.centered(cv.len(p[0]));
            let zs = cv.centered(cv.len(p[1]));
            let web = cv.len(p[2]);
            let t = cv.len(p[3]);
            cv.fill(xs, (1, 1 + t), zs);
            cv.fill(xs, (1, 1 + web), (zs.0, zs.0 + t));
        }
        Archetype::CylinderStack => {
            let h1 = cv.len(p[3]);
            let h2 = cv.len(p[4]);
            let h3 = cv.len(p[5]);
            cv.cylinder(p[0], (1, 1 + h1));
            cv.cylinder(p[1], (1 + h1, 1 + h1 + h2));
            cv.cylinder(p[2], (1 + h1 + h2, 1 + h1 + h2 + h3));
        }
    }
    Ok(cv.grid)
}

/// Two-channel image `[silhouette, depth]`, row-major `[2, size, size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn silhouette(&self) -> &[f32] {
        &self.data[..self.size * self.size]
    }

    pub fn depth(&self) -> &[f32] {
        &self.data[self.size * self.size..]
    }

    /// Rounds every value onto the 8-bit grid used on disk.
    pub fn quantized(&self) -> Image {
        Image {
            size: self.size,
            data: self
                .data
                .iter()
                .map(|&v| to_u8(v) as f32 / 255.0)
                .collect(),
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Half-width, in voxels, of the square the camera sees; wide enough that no
/// rotation of the grid leaves the frame.
pub fn view_half_extent(dim: usize) -> f64 {
    dim as f64 * 3f64.sqrt() / 2.0
}

/// Rotation taking object coordinates to view coordinates: azimuth about the
/// vertical y axis, then elevation about x. The camera looks down -z.
pub fn view_rotation(azimuth_deg: f64, elevation_deg: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = azimuth_deg.to_radians().sin_cos();
    let (se, ce) = elevation_deg.to_radians().sin_cos();
    let ra = [[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]];
    let re = [[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]];
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| re[i][k] * ra[k][j]).sum();
        }
    }
    m
}

/// Orthographic silhouette + depth rendering with nearest-neighbour sampling.
/// Depth is `(z + E) / 2E` of the first occupied sample along each ray, so
/// nearer surfaces are brighter and background is 0.
pub fn render(volume: &VoxelGrid, azimuth: f64, elevation: f64, size: usize) -> Result<Image> {
    if !(0.0..360.0).contains(&azimuth) {
        return Err(Error::Invalid(format!("azimuth {azimuth} outside [0,360)")));
    }
    if !(-45.0..=45.0).contains(&elevation) {
        return Err(Error::Invalid(format!("elevation {elevation} outside [-45,45]")));
    }
    if size == 0 {
        return Err(Error::Invalid("image size must be positive".into()));
    }
    let dim = volume.dim();
    let e = view_half_extent(dim);
    let c = dim as f64 / 2.0;
    let r = view_rotation(azimuth, elevation);
    let step = 0.25;
    let samples = (2.0 * e / step).ceil() as usize;
    let mut data = vec![0.0f32; 2 * size * size];
    for row in 0..size {
        let v = e - (row as f64 + 0.5) / size as f64 * 2.0 * e;
        for col in 0..size {
            let u = (col as f64 + 0.5) / size as f64 * 2.0 * e - e;
            for s in 0..=samples {
                let w = e - s as f64 * step;
                // Object point = R^T * (u, v, w).
                let q = [u, v, w];
                let p: [f64; 3] = std::array::from_fn(|j| (0..3).map(|i| r[i][j] * q[i]).sum::<f64>() + c);
                if p.iter().any(|&t| t < 0.0 || t >= dim as f64) {
                    continue;
                }
                let (x, y, z) = (p[0] as usize, p[1] as usize, p[2] as usize);
                if volume.get(x, y, z) >= 0.5 {
                    data[row * size + col] = 1.0;
                    data[size * size + row * size + col] = ((w + e) / (2.0 * e)) as f32;
                    break;
                }
            }
        }
    }
    Ok(Image { size, data })
}

pub fn write_pgm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_u8(v)));
    out
}

/// Reads a binary 8-bit PGM into `(width, height, values in [0,1])`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| Error::Invalid(format!("malformed PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(bad("pixel count"));
    }
    Ok((w, h, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: Vec<String>,
    pub objects_per_class: usize,
    pub poses: usize,
    pub elevation: f64,
    pub dim: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: Archetype::ALL.iter().map(|a| a.name().to_string()).collect(),
            objects_per_class: 8,
            poses: 8,
            elevation: 15.0,
            dim: 16,
            image_size: 32,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn azimuth(&self, pose: usize) -> f64 {
        pose as f64 * 360.0 / self.poses as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.objects_per_class == 0 || self.poses == 0 {
            return Err(Error::Config("data needs classes, objects and poses".into()));
        }
        let unique: BTreeSet<_> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return Err(Error::Config("data.classes contains duplicates".into()));
        }
        for c in &self.classes {
            c.parse::<Archetype>()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if ![16, 32].contains(&self.dim) {
            return Err(Error::Config(format!("data.dim must be 16 or 32, got {}", self.dim)));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "data.image_size must be a multiple of 16, got {}",
                self.image_size
            )));
        }
        if !(-45.0..=45.0).contains(&self.elevation) {
            return Err(Error::Config("data.elevation outside [-45,45]".into()));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub object_id: String,
    pub class_id: String,
    pub pose_id: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub image_sil: String,
    pub image_dep: String,
    pub volume_ref: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(DatasetManifest { records })
    }

    pub fn classes(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.class_id.as_str()).collect()
    }

    /// Distinct object ids per class, sorted.
    pub fn objects_by_class(&self) -> BTreeMap<String, Vec<String>> {
        let mut m: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &self.records {
            m.entry(r.class_id.clone())
                .or_default()
                .insert(r.object_id.clone());
        }
        m.into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusObject {
    pub object_id: String,
    pub class_id: String,
    pub volume: VoxelGrid,
}

/// One rendered view; `object` indexes [`Corpus::objects`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub object: usize,
    pub pose_id: usize,
    pub image: Image,
}

/// A dataset held in memory, with images already on the 8-bit grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dim: usize,
    pub image_size: usize,
    pub objects: Vec<CorpusObject>,
    pub samples: Vec<CorpusSample>,
    pub manifest: DatasetManifest,
}

impl Corpus {
    pub fn object_index(&self, object_id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.object_id == object_id)
    }
}

fn object_id(class: &str, i: usize) -> String {
    format!("{class}_{i:03}")
}

fn shape_for(cfg: &DatasetConfig, class: &str, oid: &str) -> Result<ShapeSpec> {
    let archetype: Archetype = class.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[seed::hash_str(oid)]));
    Ok(ShapeSpec::random(class, archetype, &mut rng))
}

/// Generates the corpus in memory. Every object's shape depends only on
/// `(seed, object id)`, so the result does not depend on generation order.
pub fn generate_corpus(cfg: &DatasetConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut corpus = Corpus {
        dim: cfg.dim,
        image_size: cfg.image_size,
        objects: Vec::new(),
        samples: Vec::new(),
        manifest: DatasetManifest::default(),
    };
    for class in &cfg.classes {
        for i in 0..cfg.objects_per_class {
            let oid = object_id(class, i);
            let volume = voxelize(&shape_for(cfg, class, &oid)?, cfg.dim)?;
            let obj = corpus.objects.len();
            for pose in 0..cfg.poses {
                let az = cfg.azimuth(pose);
                let image = render(&volume, az, cfg.elevation, cfg.image_size)?.quantized();
                corpus.samples.push(CorpusSample {
                    object: obj,
                    pose_id: pose,
                    image,
                });
                corpus.manifest.records.push(ManifestRecord {
                    object_id: oid.clone(),
                    class_id: class.clone(),
                    pose_id: pose,
                    azimuth: az,
                    elevation: cfg.elevation,
                    image_sil: format!("images/{oid}_p{pose:02}_sil.pgm"),
                    image_dep: format!("images/{oid}_p{pose:02}_dep.pgm"),
                    volume_ref: format!("volumes/{oid}.binvox"),
                });
            }
            corpus.objects.push(CorpusObject {
                object_id: oid,
                class_id: class.clone(),
                volume,
            });
        }
    }
    Ok(corpus)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

/// Writes volumes, images and the manifest under `out_dir`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let corpus = generate_corpus(cfg)?;
    write_corpus(&corpus, out_dir)?;
    Ok(corpus.manifest)
}

pub fn write_corpus(corpus: &Corpus, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for obj in &corpus.objects {
        write_file(
            &out_dir.join(format!("volumes/{}.binvox", obj.object_id)),
            &write_binvox(&obj.volume)?,
        )?;
    }
    for (s, rec) in corpus.samples.iter().zip(&corpus.manifest.records) {
        let n = corpus.image_size;
        write_file(&out_dir.join(&rec.image_sil), &write_pgm(n, n, s.image.silhouette()))?;
        write_file(&out_dir.join(&rec.image_dep), &write_pgm(n, n, s.image.depth()))?;
    }
    write_file(&out_dir.join(MANIFEST_FILE), corpus.manifest.to_jsonl()?.as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = read_file(&dir.join(MANIFEST_FILE))?;
    DatasetManifest::from_jsonl(&String::from_utf8_lossy(&bytes))
}

/// Reads a dataset written by [`build_dataset`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = load_manifest(dir)?;
    let first = manifest
        .records
        .first()
        .ok_or_else(|| Error::Empty("manifest has no records".into()))?;
    let mut objects: Vec<CorpusObject> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(manifest.records.len());
    let mut image_size = 0;
    for rec in &manifest.records {
        let obj = match index.get(&rec.object_id) {
            Some(&i) => {
                if objects[i].class_id != rec.class_id {
                    return Err(Error::Invalid(format!(
                        "object {} listed under two classes",
                        rec.object_id
                    )));
                }
                i
            }
            None => {
                let volume = parse_binvox(&read_file(&dir.join(&rec.volume_ref))?)?;
                objects.push(CorpusObject {
                    object_id: rec.object_id.clone(),
                    class_id: rec.class_id.clone(),
                    volume,
                });
                index.insert(rec.object_id.clone(), objects.len() - 1);
                objects.len() - 1
            }
        };
        let (w, h, sil) = parse_pgm(&read_file(&dir.join(&rec.image_sil))?)?;
        let (w2, h2, dep) = parse_pgm(&read_file(&dir.join(&rec.image_dep))?)?;
        if w != h || (w2, h2) != (w, h) || (image_size != 0 && w != image_size) {
            return Err(Error::DimMismatch(format!("image size of {}", rec.image_sil)));
        }
        image_size = w;
        let mut data = sil;
        data.extend(dep);
        samples.push(CorpusSample {
            object: obj,
            pose_id: rec.pose_id,
            image: Image { size: w, data },
        });
    }
    let dim = objects[index[&first.object_id]].volume.dim();
    if objects.iter().any(|o| o.volume.dim() != dim) {
        return Err(Error::DimMismatch("volumes of differing dims".into()));
    }
    Ok(Corpus {
        dim,
        image_size,
        objects,
        samples,
        manifest,
    })
}

/// Base/novel class partition with `shots` training objects per novel class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSplit {
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub shots: usize,
    /// Training object ids per class (all objects for base classes).
    pub train_objects: BTreeMap<String, Vec<String>>,
    /// Held-out novel object ids per novel class.
    pub query_objects: BTreeMap<String, Vec<String>>,
}

impl FewShotSplit {
    pub fn is_train_object(&self, class: &str, object: &str) -> bool {
        self.train_objects
            .get(class)
            .is_some_and(|v| v.iter().any(|o| o == object))
    }

    pub fn is_query_object(&self, class: &str, object: &str) -> bool {
        self.query_objects
            .get(class)
            .is_some_and(|v| v.iter().any(|o| o == object))
    }

    pub fn all_classes(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .base_classes
            .iter()
            .chain(&self.novel_classes)
            .cloned()
            .collect();
        v.sort();
        v
    }
}

pub fn make_split(
    manifest: &DatasetManifest,
    base_classes: &[String],
    novel_classes: &[String],
    shots: usize,
    seed: u64,
) -> Result<FewShotSplit> {
    if shots == 0 {
        return Err(Error::Invalid("shots must be at least 1".into()));
    }
    if novel_classes.is_empty() || base_classes.is_empty() {
        return Err(Error::Invalid("split needs base and novel classes".into()));
    }
    let base: BTreeSet<_> = base_classes.iter().collect();
    if let Some(c) = novel_classes.iter().find(|c| base.contains(c)) {
        return Err(Error::Invalid(format!("class {c} is both base and novel")));
    }
    let by_class = manifest.objects_by_class();
    let mut split = FewShotSplit {
        base_classes: base_classes.to_vec(),
        novel_classes: novel_classes.to_vec(),
        shots,
        train_objects: BTreeMap::new(),
        query_objects: BTreeMap::new(),
    };
    for c in base_classes {
        let objs = by_class
            .get(c)
            .ok_or_else(|| Error::Invalid(format!("base class {c} not in manifest")))?;
        split.train_objects.insert(c.clone(), objs.clone());
    }
    for c in novel_classes {
        let objs = by_class
            .get(c)
            .ok_or_else(|| Error::Invalid(format!("novel class {c} not in manifest")))?;
        if shots > objs.len() {
            return Err(Error::Invalid(format!(
                "{shots} shots requested but class {c} has {} objects",
                objs.len()
            )));
        }
        let mut shuffled = objs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::hash_str(c)]));
        shuffled.shuffle(&mut rng);
        let query = shuffled.split_off(shots);
        shuffled.sort();
        let mut query = query;
        query.sort();
        split.train_objects.insert(c.clone(), shuffled);
        split.query_objects.insert(c.clone(), query);
    }
    Ok(split)
}
