//! Volumes, masks, channel stacks and patch tiling.
//!
//! All volumes are stored row-major with x varying fastest:
//! `index = x + nx * (y + ny * z)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic token opening every volume file.
pub const VOLUME_MAGIC: &str = "MVOL1";

/// A real scalar field on a regular 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f32>,
}

/// Single-channel myelin map (target or prediction).
pub type DvrMap = Volume3D;

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], values: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Dims(format!(
                "dimensions must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Dims(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(Error::ValueCount {
                expected,
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            dims,
            spacing,
            values,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn zeros_like(other: &Volume3D) -> Self {
        Self {
            dims: other.dims,
            spacing: other.spacing,
            values: vec![0.0; other.values.len()],
        }
    }

    /// Builds a volume sharing `like`'s geometry, converting from f64.
    pub fn from_f64(like: &Volume3D, values: &[f64]) -> Result<Self> {
        Self::new(
            like.dims,
            like.spacing,
            values.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    /// Voxel counts as a binary mask (any nonzero value is set).
    pub fn is_set(&self, index: usize) -> bool {
        self.values[index] != 0.0
    }

    pub fn count_set(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    /// Builds a 0/1 mask volume from a predicate over voxel indices.
    pub fn mask_from(like: &Volume3D, mut pred: impl FnMut(usize) -> bool) -> Self {
        let values = (0..like.len())
            .map(|i| if pred(i) { 1.0 } else { 0.0 })
            .collect();
        Self {
            dims: like.dims,
            spacing: like.spacing,
            values,
        }
    }
}

/// Reads a volume in the `MVOL1` format.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("no header line"))?;
    let header =
        std::str::from_utf8(&bytes[..newline]).map_err(|_| malformed("header is not ASCII"))?;
    let tokens: Vec<&str> = header.split(' ').collect();
    if tokens.len() != 8 {
        return Err(malformed("expected 8 header fields"));
    }
    if tokens[0] != VOLUME_MAGIC {
        return Err(malformed("bad magic"));
    }
    if tokens[7] != "float32" {
        return Err(malformed("unsupported value type"));
    }
    let mut dims = [0usize; 3];
    for (d, t) in dims.iter_mut().zip(&tokens[1..4]) {
        *d = t.parse().map_err(|_| malformed("bad dimension"))?;
    }
    let mut spacing = [0f64; 3];
    for (s, t) in spacing.iter_mut().zip(&tokens[4..7]) {
        *s = t.parse().map_err(|_| malformed("bad spacing"))?;
    }
    if dims.contains(&0) {
        return Err(malformed("zero dimension"));
    }
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(malformed("non-positive spacing"));
    }

    let data = &bytes[newline + 1..];
    let expected = dims[0] * dims[1] * dims[2];
    if data.len() % 4 != 0 || data.len() / 4 != expected {
        return Err(Error::ValueCount {
            expected,
            found: data.len() / 4,
        });
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume3D::new(dims, spacing, values)
}

/// Writes a volume in the `MVOL1` format.
pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(index) = v.values.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let [nx, ny, nz] = v.dims;
    let [sx, sy, sz] = v.spacing;
    let mut buf = Vec::with_capacity(64 + 4 * v.values.len());
    writeln!(buf, "{VOLUME_MAGIC} {nx} {ny} {nz} {sx} {sy} {sz} float32").unwrap();
    for x in &v.values {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// The four conditioning channels, in order MTR, FA, RD, AD.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalStack {
    channels: [Volume3D; 4],
}

pub const CHANNEL_NAMES: [&str; 4] = ["mtr", "fa", "rd", "ad"];

impl MultimodalStack {
    pub fn new(channels: Vec<Volume3D>) -> Result<Self> {
        let channels: [Volume3D; 4] =
            channels
                .try_into()
                .map_err(|v: Vec<Volume3D>| Error::Channels {
                    expected: 4,
                    found: v.len(),
                })?;
        let dims = channels[0].dims();
        if channels.iter().any(|c| c.dims() != dims) {
            return Err(Error::Dims("channels do not share dimensions".into()));
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Volume3D; 4] {
        &self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims()
    }

    pub fn reference(&self) -> &Volume3D {
        &self.channels[0]
    }

    /// Channel-major f64 copy (`c * M + voxel`).
    pub fn to_f64(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|c| c.to_f64()).collect()
    }
}

/// Disjoint lesion / NAWM / other partition of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMasks {
    pub lesion: Volume3D,
    pub nawm: Volume3D,
    pub other: Volume3D,
}

/// One of the three regions of [`RoiMasks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Lesion,
    Nawm,
    Other,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Lesion, Region::Nawm, Region::Other];

    pub fn name(self) -> &'static str {
        match self {
            Region::Lesion => "lesion",
            Region::Nawm => "nawm",
            Region::Other => "other",
        }
    }
}

impl RoiMasks {
    pub fn dims(&self) -> [usize; 3] {
        self.lesion.dims()
    }

    pub fn mask(&self, region: Region) -> &Volume3D {
        match region {
            Region::Lesion => &self.lesion,
            Region::Nawm => &self.nawm,
            Region::Other => &self.other,
        }
    }

    pub fn count(&self, region: Region) -> usize {
        self.mask(region).count_set()
    }

    /// Region label per voxel.
    pub fn labels(&self) -> Vec<Region> {
        (0..self.lesion.len())
            .map(|i| {
                if self.lesion.is_set(i) {
                    Region::Lesion
                } else if self.nawm.is_set(i) {
                    Region::Nawm
                } else {
                    Region::Other
                }
            })
            .collect()
    }

    /// True when the three masks are pairwise disjoint and cover the grid.
    pub fn is_partition(&self) -> bool {
        if !(self.lesion.same_grid(&self.nawm) && self.lesion.same_grid(&self.other)) {
            return false;
        }
        (0..self.lesion.len()).all(|i| {
            let n = [&self.lesion, &self.nawm, &self.other]
                .iter()
                .filter(|m| m.is_set(i))
                .count();
            n == 1
        })
    }
}

/// Completes lesion and NAWM masks with the complementary "other" region.
pub fn partition_masks(lesion: &Volume3D, nawm: &Volume3D) -> Result<RoiMasks> {
    if !lesion.same_grid(nawm) {
        return Err(Error::Dims(format!(
            "lesion {:?} vs nawm {:?}",
            lesion.dims(),
            nawm.dims()
        )));
    }
    if let Some(index) = (0..lesion.len()).find(|&i| lesion.is_set(i) && nawm.is_set(i)) {
        let [x, y, z] = lesion.coords(index);
        return Err(Error::MaskOverlap { index, x, y, z });
    }
    let binarize = |m: &Volume3D| Volume3D::mask_from(m, |i| m.is_set(i));
    let other = Volume3D::mask_from(lesion, |i| !lesion.is_set(i) && !nawm.is_set(i));
    Ok(RoiMasks {
        lesion: binarize(lesion),
        nawm: binarize(nawm),
        other,
    })
}

/// Patch layout over a volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_dims: [usize; 3],
    pub stride: [usize; 3],
    /// Corner (x, y, z) of every patch, x-major order like voxels.
    pub origins: Vec<[usize; 3]>,
    /// Voxels per axis beyond the last complete patch, which no patch covers.
    pub dropped_trailing: [usize; 3],
}

impl PatchGrid {
    pub fn new(dims: [usize; 3], patch_dims: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        if patch_dims.contains(&0) || stride.contains(&0) {
            return Err(Error::Config("patch dims and stride must be >= 1".into()));
        }
        if (0..3).any(|a| patch_dims[a] > dims[a]) {
            return Err(Error::PatchTooLarge {
                patch: patch_dims,
                dims,
            });
        }
        let starts =
            |a: usize| -> Vec<usize> { (0..=dims[a] - patch_dims[a]).step_by(stride[a]).collect() };
        let (xs, ys, zs) = (starts(0), starts(1), starts(2));
        let mut dropped_trailing = [0; 3];
        for (a, s) in [&xs, &ys, &zs].into_iter().enumerate() {
            dropped_trailing[a] = dims[a] - (s.last().unwrap() + patch_dims[a]);
        }
        let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    origins.push([x, y, z]);
                }
            }
        }
        Ok(Self {
            patch_dims,
            stride,
            origins,
            dropped_trailing,
        })
    }

    pub fn count(&self) -> usize {
        self.origins.len()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_dims.iter().product()
    }

    /// Visits every voxel of patch `p` as (offset within patch, volume index).
    pub fn for_each_voxel(&self, p: usize, dims: [usize; 3], mut f: impl FnMut(usize, usize)) {
        let [ox, oy, oz] = self.origins[p];
        let [l, w, h] = self.patch_dims;
        let mut k = 0;
        for z in 0..h {
            for y in 0..w {
                let row = ox + dims[0] * (oy + y + dims[1] * (oz + z));
                for x in 0..l {
                    f(k, row + x);
                    k += 1;
                }
            }
        }
    }
}

/// Cuts `v` into patches; incomplete trailing patches are dropped.
pub fn extract_patches(
    v: &Volume3D,
    patch_dims: [usize; 3],
    stride: [usize; 3],
) -> Result<(PatchGrid, Vec<Vec<f32>>)> {
    let grid = PatchGrid::new(v.dims(), patch_dims, stride)?;
    let blocks = (0..grid.count())
        .map(|p| {
            let mut block = vec![0.0; grid.patch_len()];
            grid.for_each_voxel(p, v.dims(), |k, i| block[k] = v.values[i]);
            block
        })
        .collect();
    Ok((grid, blocks))
}
