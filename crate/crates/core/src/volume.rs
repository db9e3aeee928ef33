//! Volumetric images, coordinate maps, trilinear sampling and masked point
//! sampling.
//!
//! Three coordinate systems are in play. Voxel indices run `0..n` per axis,
//! world coordinates add spacing and origin in millimetres, and the networks
//! work on the normalized cube where voxel `i` of an `n`-voxel axis sits at
//! `-1 + 2·i/(n-1)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Real, Tensor};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("header {path}: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("raw data size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("axis {axis} has {n} voxels; at least 2 are required")]
    DegenerateAxis { axis: usize, n: usize },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("grids differ: {0}")]
    GridMismatch(String),
    #[error("mask has no active voxels")]
    EmptyMask,
    #[error("landmarks: {0}")]
    Landmark(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Scalar 3-D image stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        if let Some(axis) = dims.iter().position(|&n| n < 2) {
            return Err(VolumeError::DegenerateAxis { axis, n: dims[axis] });
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::Invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(VolumeError::Invalid(format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, [0.0; 3], vec![0.0; dims[0] * dims[1] * dims[2]])
    }

    /// Build by evaluating `f` at every voxel index.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], mut f: impl FnMut([usize; 3]) -> f32) -> Result<Self, VolumeError> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f([x, y, z]));
                }
            }
        }
        Self::new(dims, spacing, [0.0; 3], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn get(&self, v: [usize; 3]) -> f32 {
        self.data[self.index(v)]
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn check_same_grid(&self, other: &Volume) -> Result<(), VolumeError> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(VolumeError::GridMismatch(format!(
                "dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Intensities rescaled to `[0, 1]`; a constant image maps to zeros.
    pub fn min_max_normalized(&self) -> Volume {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume { data, ..self.clone() }
    }

    /// Voxel index → normalized coordinate.
    pub fn to_normalized(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| -1.0 + 2.0 * v[a] / (self.dims[a] - 1) as f64)
    }

    /// Normalized coordinate → voxel index.
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] + 1.0) * 0.5 * (self.dims[a] - 1) as f64)
    }

    /// Voxel index → world position in millimetres.
    pub fn to_world(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + v[a] * self.spacing[a])
    }

    /// Trilinear value and gradient with respect to normalized coordinates.
    ///
    /// Queries outside the cube are clamped onto it and the clamped gradient
    /// components are zero. A query on a cell boundary uses the lower cell.
    pub fn sample<T: Real>(&self, p: [T; 3]) -> (T, [T; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        let mut scale = [T::zero(); 3];
        for a in 0..3 {
            let n = self.dims[a];
            let half = T::lit((n - 1) as f64) * T::lit(0.5);
            let v = (p[a] + T::one()) * half;
            let max = T::lit((n - 1) as f64);
            let (v, inside) = if v < T::zero() {
                (T::zero(), false)
            } else if v > max {
                (max, false)
            } else {
                (v, true)
            };
            let cell = (v.ceil().to_isize().unwrap_or(0) - 1).clamp(0, n as isize - 2) as usize;
            base[a] = cell;
            frac[a] = v - T::lit(cell as f64);
            scale[a] = if inside { half } else { T::zero() };
        }
        let [x0, y0, z0] = base;
        let [fx, fy, fz] = frac;
        let c = |dx: usize, dy: usize, dz: usize| T::lit(self.get([x0 + dx, y0 + dy, z0 + dz]) as f64);
        let (c000, c100, c010, c110) = (c(0, 0, 0), c(1, 0, 0), c(0, 1, 0), c(1, 1, 0));
        let (c001, c101, c011, c111) = (c(0, 0, 1), c(1, 0, 1), c(0, 1, 1), c(1, 1, 1));
        let one = T::one();
        let lerp = |a: T, b: T, t: T| a + (b - a) * t;
        let c00 = lerp(c000, c100, fx);
        let c10 = lerp(c010, c110, fx);
        let c01 = lerp(c001, c101, fx);
        let c11 = lerp(c011, c111, fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        let value = lerp(c0, c1, fz);

        let dx = (one - fy) * (one - fz) * (c100 - c000)
            + fy * (one - fz) * (c110 - c010)
            + (one - fy) * fz * (c101 - c001)
            + fy * fz * (c111 - c011);
        let dy = (one - fz) * (c10 - c00) + fz * (c11 - c01);
        let dz = c1 - c0;
        (value, [dx * scale[0], dy * scale[1], dz * scale[2]])
    }

    /// Trilinear value at a continuous voxel position, clamped to the grid.
    pub fn sample_voxel(&self, v: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let v = v[a].clamp(0.0, (n - 1) as f64);
            let cell = (v.ceil() as isize - 1).clamp(0, n as isize - 2) as usize;
            base[a] = cell;
            frac[a] = v - cell as f64;
        }
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let w = wx * wy * wz;
                    if w != 0.0 {
                        acc += w * self.get([base[0] + dx, base[1] + dy, base[2] + dz]) as f64;
                    }
                }
            }
        }
        acc
    }

    /// Trilinear lookup recorded on a graph. `points` is an `(.., N, 3)` node
    /// of normalized coordinates; the result has one value per point and
    /// carries the sampler's spatial gradient.
    pub fn sample_node<T: Real>(&self, g: &mut Graph<T>, points: NodeId) -> Result<NodeId, AutodiffError> {
        let pv = g.value(points);
        if pv.last_dim() != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: "trilinear_sample",
                shapes: vec![pv.shape().to_vec()],
            });
        }
        let n = pv.rows();
        let mut values = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n * 3);
        for p in pv.data().chunks_exact(3) {
            let (v, gr) = self.sample([p[0], p[1], p[2]]);
            values.push(v);
            grads.extend_from_slice(&gr);
        }
        let grad_t = Tensor::new(pv.shape().to_vec(), grads)?;
        g.local_linear(points, Tensor::vector(values), grad_t)
    }
}

/// Normalize a batch of voxel points; errors on degenerate axes.
pub fn normalize_coords(vol: &Volume, voxels: &[[f64; 3]]) -> Result<Vec<[f64; 3]>, VolumeError> {
    if let Some(axis) = vol.dims.iter().position(|&n| n < 2) {
        return Err(VolumeError::DegenerateAxis { axis, n: vol.dims[axis] });
    }
    Ok(voxels.iter().map(|&v| vol.to_normalized(v)).collect())
}

pub fn denormalize_coords(vol: &Volume, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>, VolumeError> {
    if let Some(axis) = vol.dims.iter().position(|&n| n < 2) {
        return Err(VolumeError::DegenerateAxis { axis, n: vol.dims[axis] });
    }
    Ok(points.iter().map(|&p| vol.to_voxel(p)).collect())
}

/// Binary volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Volume);

impl Mask {
    pub fn new(vol: Volume) -> Result<Self, VolumeError> {
        if let Some(v) = vol.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(VolumeError::Invalid(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self(vol))
    }

    /// Threshold `vol` at `>= threshold`.
    pub fn binarize(vol: &Volume, threshold: f32) -> Self {
        Self(Volume {
            data: vol.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
            ..vol.clone()
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims
    }

    pub fn is_set(&self, v: [usize; 3]) -> bool {
        self.0.get(v) != 0.0
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.0
            .data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One training sample drawn from a mask.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct MaskPoint {
    /// Active voxel the sample was drawn from.
    pub voxel: [usize; 3],
    /// Continuous voxel position (voxel plus jitter).
    pub position: [f64; 3],
}

/// Uniform sampler over the active voxels of a mask.
#[derive(Clone, Debug)]
pub struct MaskSampler {
    dims: [usize; 3],
    active: Vec<usize>,
    pub jitter: bool,
}

impl MaskSampler {
    pub fn new(mask: &Mask, jitter: bool) -> Result<Self, VolumeError> {
        let active = mask.active_indices();
        if active.is_empty() {
            return Err(VolumeError::EmptyMask);
        }
        Ok(Self {
            dims: mask.dims(),
            active,
            jitter,
        })
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    /// `n` i.i.d. draws; with jitter each point moves uniformly within
    /// `[-0.5, 0.5)` voxel of its voxel center.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<MaskPoint> {
        let (nx, ny) = (self.dims[0], self.dims[1]);
        (0..n)
            .map(|_| {
                let idx = self.active[rng.random_range(0..self.active.len())];
                let voxel = [idx % nx, (idx / nx) % ny, idx / (nx * ny)];
                let position = std::array::from_fn(|a| {
                    let j = if self.jitter { rng.random::<f64>() - 0.5 } else { 0.0 };
                    voxel[a] as f64 + j
                });
                MaskPoint { voxel, position }
            })
            .collect()
    }
}

/// Draw `n` points uniformly from the active voxels of `mask`.
pub fn sample_mask_points<R: Rng + ?Sized>(
    mask: &Mask,
    n: usize,
    rng: &mut R,
    jitter: bool,
) -> Result<Vec<MaskPoint>, VolumeError> {
    if n == 0 {
        return Err(VolumeError::Invalid("at least one point must be requested".into()));
    }
    Ok(MaskSampler::new(mask, jitter)?.sample(n, rng))
}

/// Text header of a `.vh`/`.raw` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: String,
    pub order: String,
    /// Values per voxel; 1 for scalar images, 3 for displacement fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    /// Regularization weight a displacement field was generated at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl VolumeHeader {
    pub fn for_grid(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        Self {
            dims,
            spacing_mm: spacing,
            origin_mm: origin,
            dtype: "f32".into(),
            order: "x-fastest".into(),
            components: None,
            alpha: None,
        }
    }
}

/// Raw path paired with a header path.
pub fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Write a header plus little-endian `f32` payload.
pub fn write_raw_pair(path: &Path, header: &VolumeHeader, values: &[f32]) -> Result<(), VolumeError> {
    let text = toml::to_string(header).map_err(|e| VolumeError::Header {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    fs::write(path, text).map_err(io_err(path))?;
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let raw = raw_path(path);
    fs::write(&raw, bytes).map_err(io_err(&raw))
}

/// Read a header plus its payload, validating the byte count.
pub fn read_raw_pair(path: &Path) -> Result<(VolumeHeader, Vec<f32>), VolumeError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let header: VolumeHeader = toml::from_str(&text).map_err(|e| VolumeError::Header {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| VolumeError::Header {
        path: path.to_path_buf(),
        reason,
    };
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.order != "x-fastest" {
        return Err(bad(format!("unsupported order {:?}", header.order)));
    }
    let comps = header.components.unwrap_or(1);
    let expected = header.dims.iter().product::<usize>() * comps * 4;
    let raw = raw_path(path);
    let bytes = fs::read(&raw).map_err(io_err(&raw))?;
    if bytes.len() != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<(), VolumeError> {
    write_raw_pair(path, &VolumeHeader::for_grid(vol.dims, vol.spacing, vol.origin), &vol.data)
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let (h, data) = read_raw_pair(path)?;
    if h.components.unwrap_or(1) != 1 {
        return Err(VolumeError::Header {
            path: path.to_path_buf(),
            reason: "expected a scalar volume".into(),
        });
    }
    Volume::new(h.dims, h.spacing_mm, h.origin_mm, data)
}

pub fn load_mask(path: &Path) -> Result<Mask, VolumeError> {
    Mask::new(load_volume(path)?)
}

/// Paired landmarks in 0-based voxel coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LandmarkSet {
    pub moving: Vec<[f64; 3]>,
    pub fixed: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.moving.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moving.is_empty()
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<(), VolumeError> {
        if self.moving.len() != self.fixed.len() {
            return Err(VolumeError::Landmark(format!(
                "{} moving vs {} fixed points",
                self.moving.len(),
                self.fixed.len()
            )));
        }
        for (i, p) in self.moving.iter().chain(&self.fixed).enumerate() {
            for a in 0..3 {
                if !(p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64) {
                    return Err(VolumeError::Landmark(format!(
                        "point {} ({p:?}) lies outside dims {dims:?}",
                        i % self.moving.len().max(1)
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct LandmarkRow {
    mx: f64,
    my: f64,
    mz: f64,
    fx: f64,
    fy: f64,
    fz: f64,
}

/// Read `mx,my,mz,fx,fy,fz` rows; `one_based` subtracts 1 from every index.
pub fn read_landmarks(path: &Path, one_based: bool) -> Result<LandmarkSet, VolumeError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| VolumeError::Landmark(format!("{}: {e}", path.display())))?;
    let shift = if one_based { 1.0 } else { 0.0 };
    let mut set = LandmarkSet::default();
    for row in rdr.deserialize::<LandmarkRow>() {
        let r = row.map_err(|e| VolumeError::Landmark(format!("{}: {e}", path.display())))?;
        set.moving.push([r.mx - shift, r.my - shift, r.mz - shift]);
        set.fixed.push([r.fx - shift, r.fy - shift, r.fz - shift]);
    }
    Ok(set)
}

pub fn write_landmarks(path: &Path, set: &LandmarkSet) -> Result<(), VolumeError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| VolumeError::Landmark(e.to_string()))?;
    for (m, f) in set.moving.iter().zip(&set.fixed) {
        w.serialize(LandmarkRow {
            mx: m[0],
            my: m[1],
            mz: m[2],
            fx: f[0],
            fy: f[1],
            fz: f[2],
        })
        .map_err(|e| VolumeError::Landmark(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_volume(dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, [1.0; 3], |[x, y, z]| 2.0 * x as f32 - 0.5 * y as f32 + 3.0 * z as f32 + 1.0).unwrap()
    }

    #[test]
    fn normalization_endpoints_and_midpoint() {
        let v = Volume::zeros([64, 64, 64], [1.0; 3]).unwrap();
        assert_eq!(v.to_normalized([0.0; 3]), [-1.0; 3]);
        assert_eq!(v.to_normalized([31.5; 3]), [0.0; 3]);
        assert_eq!(v.to_normalized([63.0; 3]), [1.0; 3]);
    }

    #[test]
    fn normalization_roundtrip() {
        let v = Volume::zeros([64, 40, 17], [1.0, 2.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| std::array::from_fn(|a| rng.random::<f64>() * (v.dims[a] - 1) as f64))
            .collect();
        let n = normalize_coords(&v, &pts).unwrap();
        let back = denormalize_coords(&v, &n).unwrap();
        let err = pts
            .iter()
            .zip(&back)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn degenerate_axis_rejected() {
        assert!(matches!(
            Volume::new([1, 4, 4], [1.0; 3], [0.0; 3], vec![0.0; 16]),
            Err(VolumeError::DegenerateAxis { axis: 0, n: 1 })
        ));
    }

    #[test]
    fn voxel_center_returns_voxel_value() {
        let v = Volume::from_fn([5, 6, 7], [1.0; 3], |[x, y, z]| (x * 100 + y * 10 + z) as f32).unwrap();
        let p = v.to_normalized([2.0, 3.0, 4.0]);
        let (val, _) = v.sample(p);
        assert!((val - 234.0f64).abs() < 1e-9);
        assert_eq!(v.sample_voxel([2.0, 3.0, 4.0]), 234.0);
    }

    #[test]
    fn linear_volume_is_reproduced_with_its_slope() {
        let v = linear_volume([8, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let vox: [f64; 3] = std::array::from_fn(|_| 0.01 + rng.random::<f64>() * 6.98);
            let (val, grad) = v.sample(v.to_normalized(vox));
            let want = 2.0 * vox[0] - 0.5 * vox[1] + 3.0 * vox[2] + 1.0;
            assert!((val - want).abs() < 1e-9);
            // d/dp = d/dv · (n-1)/2 with n-1 = 7
            assert!((grad[0] - 7.0).abs() < 1e-9);
            assert!((grad[1] + 1.75).abs() < 1e-9);
            assert!((grad[2] - 10.5).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_queries_clamp_with_zero_gradient() {
        let v = linear_volume([4, 4, 4]);
        let (val, grad) = v.sample([1.3f64, 0.0, -2.0]);
        let (edge, _) = v.sample([1.0f64, 0.0, -1.0]);
        assert_eq!(val, edge);
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[2], 0.0);
        assert!(grad[1] != 0.0);
    }

    #[test]
    fn translation_consistency() {
        let base = Volume::from_fn([9, 9, 9], [1.0; 3], |[x, y, z]| ((x * 7 + y * 3 + z * 5) % 11) as f32).unwrap();
        let shifted = Volume::from_fn([9, 9, 9], [1.0; 3], |[x, y, z]| {
            if x == 0 { 0.0 } else { base.get([x - 1, y, z]) }
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q: [f64; 3] = std::array::from_fn(|_| 1.0 + rng.random::<f64>() * 6.0);
            let a = base.sample_voxel(q);
            let b = shifted.sample_voxel([q[0] + 1.0, q[1], q[2]]);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_active_voxel_sampling() {
        let mut vol = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let i = vol.index([1, 2, 3]);
        vol.data[i] = 1.0;
        let mask = Mask::new(vol).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = sample_mask_points(&mask, 50, &mut rng, true).unwrap();
        for p in pts {
            assert_eq!(p.voxel, [1, 2, 3]);
            for a in 0..3 {
                assert!((p.position[a] - p.voxel[a] as f64).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mask = Mask::new(Volume::zeros([3, 3, 3], [1.0; 3]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_mask_points(&mask, 5, &mut rng, true), Err(VolumeError::EmptyMask)));
    }

    #[test]
    fn sampling_is_seeded() {
        let mask = Mask::new(Volume::from_fn([6, 6, 6], [1.0; 3], |[x, _, _]| (x % 2) as f32).unwrap()).unwrap();
        let a = sample_mask_points(&mask, 100, &mut ChaCha8Rng::seed_from_u64(9), true).unwrap();
        let b = sample_mask_points(&mask, 100, &mut ChaCha8Rng::seed_from_u64(9), true).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| mask.is_set(p.voxel)));
    }

    #[test]
    fn full_mask_octants_are_uniform() {
        let mask = Mask::new(Volume::from_fn([8, 8, 8], [1.0; 3], |_| 1.0).unwrap()).unwrap();
        let n = 100_000;
        let pts = sample_mask_points(&mask, n, &mut ChaCha8Rng::seed_from_u64(3), false).unwrap();
        let mut counts = [0usize; 8];
        for p in pts {
            let o = (p.voxel[0] / 4) + 2 * (p.voxel[1] / 4) + 4 * (p.voxel[2] / 4);
            counts[o] += 1;
        }
        // Binomial(n, 1/8): mean n/8, σ = √(n·(1/8)·(7/8)).
        let mean = n as f64 / 8.0;
        let sigma = (n as f64 * 0.125 * 0.875).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn file_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.vh");
        let v = Volume::new(
            [4, 4, 4],
            [1.0, 1.0, 1.0],
            [0.0; 3],
            (0..64).map(|i| (i as f32).sin()).collect(),
        )
        .unwrap();
        save_volume(&v, &path).unwrap();
        assert_eq!(fs::metadata(raw_path(&path)).unwrap().len(), 256);
        assert_eq!(load_volume(&path).unwrap(), v);

        let bytes = fs::read(raw_path(&path)).unwrap();
        fs::write(raw_path(&path), &bytes[..200]).unwrap();
        match load_volume(&path) {
            Err(VolumeError::SizeMismatch { expected, actual }) => {
                assert_eq!((expected, actual), (256, 200));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn landmark_csv_one_based() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.csv");
        fs::write(&path, "mx,my,mz,fx,fy,fz\n1,2,3,4,5,6\n10,10,10,11,11,11\n").unwrap();
        let set = read_landmarks(&path, true).unwrap();
        assert_eq!(set.moving[0], [0.0, 1.0, 2.0]);
        assert_eq!(set.fixed[1], [10.0, 10.0, 10.0]);
        assert!(set.validate([12, 12, 12]).is_ok());
        assert!(set.validate([8, 8, 8]).is_err());
        let out = dir.path().join("out.csv");
        write_landmarks(&out, &set).unwrap();
        assert_eq!(read_landmarks(&out, false).unwrap(), set);
    }
}
