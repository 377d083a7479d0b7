//! Voxel occupancy grids, binvox interchange, class priors and shape metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Default threshold for turning predicted occupancies into a binary grid.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;
/// Default binarization threshold for class priors.
pub const DEFAULT_PRIOR_THRESHOLD: f64 = 0.5;

/// Cubic occupancy field with values in `[0, 1]`.
///
/// Storage order is x-outer, then z, then y fastest, the same order binvox
/// uses on disk: `index = x * dim * dim + z * dim + y`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dim: usize,
    values: Vec<f32>,
    binary: bool,
}

impl VoxelGrid {
    pub fn empty(dim: usize) -> Self {
        VoxelGrid {
            dim,
            values: vec![0.0; dim * dim * dim],
            binary: true,
        }
    }

    pub fn from_values(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("voxel grid dim must be positive".into()));
        }
        if values.len() != dim * dim * dim {
            return Err(Error::DimMismatch(format!(
                "dim {dim} needs {} values, got {}",
                dim * dim * dim,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("voxel value {v} outside [0,1]")));
        }
        let binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(VoxelGrid {
            dim,
            values,
            binary,
        })
    }

    pub fn from_occupancy(dim: usize, occupied: &[bool]) -> Result<Self> {
        Self::from_values(
            dim,
            occupied.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
        )
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dim + z) * self.dim + y
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    /// Marks one voxel occupied. Only meaningful while building binary grids.
    pub fn set_occupied(&mut self, x: usize, y: usize, z: usize) {
        let i = self.index(x, y, z);
        self.values[i] = 1.0;
    }

    pub fn occupied_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied_count() as f64 / self.values.len() as f64
    }

    /// Binary grid with voxels at or above `threshold` occupied. Binary grids
    /// are returned unchanged for any threshold in `(0, 1]`.
    pub fn binarize(&self, threshold: f64) -> VoxelGrid {
        if self.binary {
            return self.clone();
        }
        VoxelGrid {
            dim: self.dim,
            values: self
                .values
                .iter()
                .map(|&v| if v as f64 >= threshold { 1.0 } else { 0.0 })
                .collect(),
            binary: true,
        }
    }

    fn require_binary(&self, what: &str) -> Result<()> {
        if self.binary {
            Ok(())
        } else {
            Err(Error::Invalid(format!("{what} requires a binary grid")))
        }
    }
}

fn check_dims(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::DimMismatch(format!(
            "voxel grids of dim {} and {}",
            a.dim, b.dim
        )));
    }
    Ok(())
}

/// Intersection over union of the occupied sets after thresholding
/// non-binary inputs at `threshold`.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid, threshold: f64) -> Result<f64> {
    check_dims(a, b)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!("threshold {threshold} outside (0,1)")));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    let t = threshold as f32;
    for (&va, &vb) in a.values.iter().zip(&b.values) {
        let (oa, ob) = (va >= t, vb >= t);
        inter += usize::from(oa && ob);
        union += usize::from(oa || ob);
    }
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

/// Class prior: a voxel is occupied iff the mean occupancy across `volumes`
/// strictly exceeds `t`.
pub fn build_prior(volumes: &[&VoxelGrid], t: f64) -> Result<VoxelGrid> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Empty("prior needs at least one volume".into()))?;
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Invalid(format!("prior threshold {t} outside [0,1)")));
    }
    let mut counts = vec![0u32; first.len()];
    for v in volumes {
        check_dims(first, v)?;
        v.require_binary("prior construction")?;
        for (c, &x) in counts.iter_mut().zip(&v.values) {
            *c += u32::from(x == 1.0);
        }
    }
    let n = volumes.len() as f64;
    let values = counts
        .iter()
        .map(|&c| if c as f64 / n > t { 1.0 } else { 0.0 })
        .collect();
    Ok(VoxelGrid {
        dim: first.dim,
        values,
        binary: true,
    })
}

/// A volume with its class and object identity.
#[derive(Clone, Copy, Debug)]
pub struct LabeledVolume<'a> {
    pub class_id: &'a str,
    pub object_id: &'a str,
    pub grid: &'a VoxelGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeProximity {
    pub novel_object: String,
    pub novel_class: String,
    pub best_base_object: String,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ProximityReport {
    pub per_novel_class: BTreeMap<String, f64>,
    pub per_shape: Vec<ShapeProximity>,
}

/// For every novel volume, the best IoU against any base volume; per class,
/// the mean of those maxima.
pub fn proximity(novel: &[LabeledVolume<'_>], base: &[LabeledVolume<'_>]) -> Result<ProximityReport> {
    if base.is_empty() {
        return Err(Error::Empty("proximity needs base volumes".into()));
    }
    if novel.is_empty() {
        return Err(Error::Empty("proximity needs novel volumes".into()));
    }
    let mut report = ProximityReport::default();
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for n in novel {
        let mut best: Option<(f64, &str)> = None;
        for b in base {
            let v = iou(n.grid, b.grid, 0.5)?;
            if best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, b.object_id));
            }
        }
        let (v, id) = best.expect("base is non-empty");
        report.per_shape.push(ShapeProximity {
            novel_object: n.object_id.to_string(),
            novel_class: n.class_id.to_string(),
            best_base_object: id.to_string(),
            iou: v,
        });
        let e = sums.entry(n.class_id).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    report.per_novel_class = sums
        .into_iter()
        .map(|(c, (s, k))| (c.to_string(), s / k as f64))
        .collect();
    Ok(report)
}

/// Serializes a binary grid as binvox with minimal-length runs.
pub fn write_binvox(grid: &VoxelGrid) -> Result<Vec<u8>> {
    grid.require_binary("binvox export")?;
    let d = grid.dim;
    let mut out = format!("#binvox 1\ndim {d} {d} {d}\ntranslate 0 0 0\nscale 1\ndata\n").into_bytes();
    let mut iter = grid.values.iter().map(|&v| u8::from(v == 1.0)).peekable();
    while let Some(v) = iter.next() {
        let mut count = 1u8;
        while count < u8::MAX && iter.peek() == Some(&v) {
            iter.next();
            count += 1;
        }
        out.push(v);
        out.push(count);
    }
    Ok(out)
}

pub fn parse_binvox(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Binvox("unterminated header".into()))?;
        *pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map(|s| s.trim().to_string())
            .map_err(|_| Error::Binvox("non-ascii header".into()))
    };
    if next_line(&mut pos)? != "#binvox 1" {
        return Err(Error::Binvox("bad magic, expected '#binvox 1'".into()));
    }
    let mut dim = None;
    loop {
        let line = next_line(&mut pos)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("data") => break,
            Some("dim") => {
                let dims = words
                    .map(|w| w.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Binvox(format!("bad dim line '{line}'")))?;
                if dims.len() != 3 || dims[0] != dims[1] || dims[1] != dims[2] || dims[0] == 0 {
                    return Err(Error::Binvox(format!("unsupported dims '{line}'")));
                }
                dim = Some(dims[0]);
            }
            Some("translate") | Some("scale") => {}
            _ => return Err(Error::Binvox(format!("unexpected header line '{line}'"))),
        }
    }
    let dim = dim.ok_or_else(|| Error::Binvox("missing dim line".into()))?;
    let total = dim * dim * dim;
    let data = &bytes[pos..];
    if data.len() % 2 != 0 {
        return Err(Error::Binvox("truncated run-length data".into()));
    }
    let mut values = Vec::with_capacity(total);
    for pair in data.chunks_exact(2) {
        let (v, n) = (pair[0], pair[1] as usize);
        if n == 0 {
            return Err(Error::Binvox("zero run count".into()));
        }
        let value = match v {
            0 => 0.0,
            1 => 1.0,
            _ => return Err(Error::Binvox(format!("bad voxel value {v}"))),
        };
        if values.len() + n > total {
            return Err(Error::Binvox(format!("runs exceed {total} voxels")));
        }
        values.resize(values.len() + n, value);
    }
    if values.len() != total {
        return Err(Error::Binvox(format!(
            "runs cover {} of {total} voxels",
            values.len()
        )));
    }
    Ok(VoxelGrid {
        dim,
        values,
        binary: true,
    })
}

/// Raw real-valued grid dump: the ASCII line `padmix-f32grid <dim>\n`
/// followed by `dim^3` little-endian f32 values in storage order.
pub fn write_f32_grid(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = format!("padmix-f32grid {}\n", grid.dim).into_bytes();
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_f32_grid(bytes: &[u8]) -> Result<VoxelGrid> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Invalid("missing f32 grid header".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).unwrap_or("");
    let dim = header
        .strip_prefix("padmix-f32grid ")
        .and_then(|d| d.parse::<usize>().ok())
        .ok_or_else(|| Error::Invalid(format!("bad f32 grid header '{header}'")))?;
    let body = &bytes[nl + 1..];
    if body.len() != dim * dim * dim * 4 {
        return Err(Error::DimMismatch("f32 grid payload size".into()));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VoxelGrid::from_values(dim, values)
}
