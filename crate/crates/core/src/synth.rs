//! Deterministic synthetic registration benchmark: a procedural texture, an
//! analytic ground-truth displacement, the derived moving/fixed pair, masks
//! and paired landmarks.
//!
//! The truth map `φ(x) = x + u(x)` takes moving coordinates to fixed
//! coordinates (normalized units). The moving image samples the texture
//! directly; the fixed image samples it through `φ⁻¹`, so a moving-frame
//! structure at `x` appears at `φ(x)` in the fixed frame.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{DenseField, EvalError};
use crate::volume::{save_volume, write_landmarks, LandmarkSet, Mask, Volume, VolumeError};

/// Smallest admissible `det ∇φ` anywhere on the grid.
pub const MIN_DET: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("amplitude {amplitude} folds the field: min det = {min_det:.4} (must exceed {MIN_DET}){bound}")]
    Folding { amplitude: f64, min_det: f64, bound: String },
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error("analytic bending energy is only available for affine and sinusoid fields")]
    UnsupportedKind,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// Localized push `A·d·exp(−|x − c|²/2σ²)` along a seeded direction `d`.
    GaussianBump,
    /// `u_x = A·sin(πx)`, other components zero.
    Sinusoid,
    /// `u = A·S·x + t` with a fixed symmetric `S` and a voxel translation `t`.
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub kind: FieldKind,
    /// Displacement amplitude in normalized units.
    pub amplitude: f64,
    /// Width of the Gaussian bump in normalized units.
    pub bump_sigma: f64,
    /// Translation of the affine kind, in voxels.
    pub translation: [f64; 3],
    /// Number of Gaussian blobs in the texture.
    pub blobs: usize,
    pub landmarks: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: [48; 3],
            spacing: [1.0; 3],
            kind: FieldKind::GaussianBump,
            amplitude: 0.25,
            bump_sigma: 0.4,
            translation: [0.0; 3],
            blobs: 40,
            landmarks: 50,
            seed: 0,
        }
    }
}

/// Symmetric linear part of the affine kind.
const AFFINE_S: [[f64; 3]; 3] = [[1.0, 0.2, 0.0], [0.2, -0.5, 0.1], [0.0, 0.1, 0.3]];
/// Ellipsoid radii of the mask, in normalized units.
const MASK_RADII: [f64; 3] = [0.7, 0.6, 0.65];
/// Landmarks are drawn inside this fraction of the mask radii.
const LANDMARK_SHRINK: f64 = 0.85;

#[derive(Copy, Clone, Debug)]
struct Blob {
    center: [f64; 3],
    width: f64,
    weight: f64,
}

/// Analytic texture and displacement derived from a spec.
#[derive(Clone, Debug)]
pub struct SynthModel {
    pub spec: SynthSpec,
    blobs: Vec<Blob>,
    bump_center: [f64; 3],
    bump_dir: [f64; 3],
    translation_norm: [f64; 3],
}

impl SynthModel {
    pub fn new(spec: &SynthSpec) -> Result<Self, SynthError> {
        if spec.dims.iter().any(|&n| n < 2) {
            return Err(SynthError::Invalid(format!("dims must be >= 2, got {:?}", spec.dims)));
        }
        if !spec.amplitude.is_finite() || spec.amplitude < 0.0 {
            return Err(SynthError::Invalid(format!("amplitude must be >= 0, got {}", spec.amplitude)));
        }
        if !(spec.bump_sigma > 0.0) {
            return Err(SynthError::Invalid(format!("bump_sigma must be > 0, got {}", spec.bump_sigma)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let blobs = (0..spec.blobs)
            .map(|_| Blob {
                center: std::array::from_fn(|_| rng.random_range(-0.9..0.9)),
                width: rng.random_range(0.06..0.16),
                weight: rng.random_range(0.4..1.0),
            })
            .collect();
        let bump_center = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
        let raw: [f64; 3] = [1.0, rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bump_dir = raw.map(|v| v / norm);
        let translation_norm = std::array::from_fn(|a| spec.translation[a] * 2.0 / (spec.dims[a] - 1) as f64);
        Ok(Self {
            spec: spec.clone(),
            blobs,
            bump_center,
            bump_dir,
            translation_norm,
        })
    }

    /// Texture intensity at a normalized position.
    pub fn texture(&self, p: [f64; 3]) -> f64 {
        let ramp = 0.15 * (p[0] + 1.0) + 0.1 * (p[1] + 1.0) + 0.05 * (p[2] + 1.0);
        ramp + self
            .blobs
            .iter()
            .map(|b| {
                let r2: f64 = (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum();
                b.weight * (-r2 / (2.0 * b.width * b.width)).exp()
            })
            .sum::<f64>()
    }

    /// Truth displacement at a normalized position.
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let a = self.spec.amplitude;
        match self.spec.kind {
            FieldKind::GaussianBump => {
                let s = self.spec.bump_sigma;
                let r2: f64 = (0..3).map(|k| (p[k] - self.bump_center[k]).powi(2)).sum();
                let g = (-r2 / (2.0 * s * s)).exp();
                self.bump_dir.map(|d| a * d * g)
            }
            FieldKind::Sinusoid => [a * (PI * p[0]).sin(), 0.0, 0.0],
            FieldKind::Affine => std::array::from_fn(|k| {
                a * (0..3).map(|j| AFFINE_S[k][j] * p[j]).sum::<f64>() + self.translation_norm[k]
            }),
        }
    }

    /// `jac[k][j] = ∂u_k/∂x_j` of the truth displacement.
    pub fn jacobian(&self, p: [f64; 3]) -> [[f64; 3]; 3] {
        let a = self.spec.amplitude;
        match self.spec.kind {
            FieldKind::GaussianBump => {
                let s = self.spec.bump_sigma;
                let r: [f64; 3] = std::array::from_fn(|k| p[k] - self.bump_center[k]);
                let g = (-r.iter().map(|v| v * v).sum::<f64>() / (2.0 * s * s)).exp();
                std::array::from_fn(|k| std::array::from_fn(|j| -a * self.bump_dir[k] * g * r[j] / (s * s)))
            }
            FieldKind::Sinusoid => {
                let mut m = [[0.0; 3]; 3];
                m[0][0] = a * PI * (PI * p[0]).cos();
                m
            }
            FieldKind::Affine => AFFINE_S.map(|row| row.map(|v| a * v)),
        }
    }

    /// `φ(p) = p + u(p)`.
    pub fn forward(&self, p: [f64; 3]) -> [f64; 3] {
        let u = self.displacement(p);
        std::array::from_fn(|k| p[k] + u[k])
    }

    /// `φ⁻¹(y)` by fixed-point iteration; the truth maps are contractions
    /// within their fold-free amplitude range.
    pub fn inverse(&self, y: [f64; 3]) -> [f64; 3] {
        let mut x = y;
        for _ in 0..500 {
            let u = self.displacement(x);
            let next: [f64; 3] = std::array::from_fn(|k| y[k] - u[k]);
            let step = (0..3).map(|k| (next[k] - x[k]).abs()).fold(0.0, f64::max);
            x = next;
            if step < 1e-14 {
                break;
            }
        }
        x
    }

    pub fn in_mask(p: [f64; 3]) -> bool {
        (0..3).map(|a| (p[a] / MASK_RADII[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn grid(&self) -> Result<Volume, SynthError> {
        Ok(Volume::zeros(self.spec.dims, self.spec.spacing)?)
    }

    /// Minimum `det(I + ∇u)` over the voxel grid.
    pub fn min_grid_det(&self) -> Result<f64, SynthError> {
        let grid = self.grid()?;
        Ok((0..grid.len())
            .map(|i| {
                let p = grid.to_normalized(grid.coords(i).map(|c| c as f64));
                let mut f = self.jacobian(p);
                for (k, row) in f.iter_mut().enumerate() {
                    row[k] += 1.0;
                }
                f[0][0] * (f[1][1] * f[2][2] - f[1][2] * f[2][1]) - f[0][1] * (f[1][0] * f[2][2] - f[1][2] * f[2][0])
                    + f[0][2] * (f[1][0] * f[2][1] - f[1][1] * f[2][0])
            })
            .fold(f64::INFINITY, f64::min))
    }

    /// Analytic amplitude limit for a fold-free field, when known.
    pub fn fold_bound(&self) -> Option<f64> {
        match self.spec.kind {
            FieldKind::GaussianBump => Some((1.0 - MIN_DET) * self.spec.bump_sigma * 0.5f64.exp()),
            FieldKind::Sinusoid => Some((1.0 - MIN_DET) / PI),
            FieldKind::Affine => None,
        }
    }
}

/// Everything [`generate`] produces.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub moving: Volume,
    pub fixed: Volume,
    /// Moving-frame mask.
    pub mask: Mask,
    /// The moving mask carried into the fixed frame by the truth map.
    pub fixed_mask: Mask,
    /// Landmarks rounded to integer voxels.
    pub landmarks: LandmarkSet,
    /// The exact continuous landmark pairs.
    pub landmarks_exact: LandmarkSet,
    /// Truth displacement on the grid, normalized units.
    pub truth: DenseField,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    let model = SynthModel::new(spec)?;
    let min_det = model.min_grid_det()?;
    if min_det <= MIN_DET {
        let bound = model
            .fold_bound()
            .map(|b| format!("; fold-free amplitude bound for this kind is {b:.4}"))
            .unwrap_or_default();
        return Err(SynthError::Folding {
            amplitude: spec.amplitude,
            min_det,
            bound,
        });
    }
    let grid = model.grid()?;
    let norm = |i: usize| grid.to_normalized(grid.coords(i).map(|c| c as f64));
    let n = grid.len();
    let moving_data: Vec<f32> = (0..n).map(|i| model.texture(norm(i)) as f32).collect();
    let inverse: Vec<[f64; 3]> = (0..n).map(|i| model.inverse(norm(i))).collect();
    let fixed_data: Vec<f32> = inverse.iter().map(|&x| model.texture(x) as f32).collect();
    let mask_data: Vec<f32> = (0..n).map(|i| f32::from(u8::from(SynthModel::in_mask(norm(i))))).collect();
    let fixed_mask_data: Vec<f32> = inverse.iter().map(|&x| f32::from(u8::from(SynthModel::in_mask(x)))).collect();
    let vol = |data: Vec<f32>| Volume::new(spec.dims, spec.spacing, [0.0; 3], data);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let mut exact = LandmarkSet::default();
    let mut rounded = LandmarkSet::default();
    let max: [f64; 3] = std::array::from_fn(|a| (spec.dims[a] - 1) as f64);
    let mut attempts = 0usize;
    while exact.len() < spec.landmarks {
        attempts += 1;
        if attempts > 1000 * spec.landmarks.max(1) {
            return Err(SynthError::Invalid("could not place landmarks inside the grid".into()));
        }
        let p: [f64; 3] = std::array::from_fn(|a| rng.random_range(-1.0..1.0) * MASK_RADII[a] * LANDMARK_SHRINK);
        if (0..3).map(|a| (p[a] / (MASK_RADII[a] * LANDMARK_SHRINK)).powi(2)).sum::<f64>() > 1.0 {
            continue;
        }
        let m = grid.to_voxel(p);
        let f = grid.to_voxel(model.forward(p));
        let rm = m.map(f64::round);
        let rf = f.map(f64::round);
        if (0..3).any(|a| !(0.0..=max[a]).contains(&rf[a]) || !(0.0..=max[a]).contains(&f[a])) {
            continue;
        }
        exact.moving.push(m);
        exact.fixed.push(f);
        rounded.moving.push(rm);
        rounded.fixed.push(rf);
    }

    let mut truth = DenseField::from_fn(spec.dims, spec.spacing, |p| model.displacement(p))?;
    truth.alpha = None;
    Ok(SynthOutput {
        moving: vol(moving_data)?,
        fixed: vol(fixed_data)?,
        mask: Mask::new(vol(mask_data)?)?,
        fixed_mask: Mask::new(vol(fixed_mask_data)?)?,
        landmarks: rounded,
        landmarks_exact: exact,
        truth,
    })
}

/// Closed-form mean bending energy of the truth field over the cube.
pub fn analytic_bending(spec: &SynthSpec) -> Result<f64, SynthError> {
    match spec.kind {
        FieldKind::Affine => Ok(0.0),
        FieldKind::Sinusoid => Ok(spec.amplitude.powi(2) * PI.powi(4) / 2.0),
        FieldKind::GaussianBump => Err(SynthError::UnsupportedKind),
    }
}

/// File names written by [`write_outputs`].
pub mod files {
    pub const MOVING: &str = "moving.vh";
    pub const FIXED: &str = "fixed.vh";
    pub const MASK: &str = "moving_mask.vh";
    pub const FIXED_MASK: &str = "fixed_mask.vh";
    pub const LANDMARKS: &str = "landmarks.csv";
    pub const LANDMARKS_EXACT: &str = "landmarks_exact.csv";
    pub const TRUTH: &str = "truth_field.vh";
    pub const MANIFEST: &str = "manifest.toml";
}

#[derive(Serialize)]
struct Manifest<'a> {
    spec: &'a SynthSpec,
    initial_tre_mm: f64,
    min_det: f64,
    files: Vec<String>,
}

/// Write all outputs to `dir` plus a manifest listing them. Returns the paths
/// written.
pub fn write_outputs(out: &SynthOutput, spec: &SynthSpec, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    fs::create_dir_all(dir)?;
    save_volume(&out.moving, &dir.join(files::MOVING))?;
    save_volume(&out.fixed, &dir.join(files::FIXED))?;
    save_volume(out.mask.volume(), &dir.join(files::MASK))?;
    save_volume(out.fixed_mask.volume(), &dir.join(files::FIXED_MASK))?;
    write_landmarks(&dir.join(files::LANDMARKS), &out.landmarks)?;
    write_landmarks(&dir.join(files::LANDMARKS_EXACT), &out.landmarks_exact)?;
    out.truth.save(&dir.join(files::TRUTH))?;
    let names = [
        files::MOVING,
        files::FIXED,
        files::MASK,
        files::FIXED_MASK,
        files::LANDMARKS,
        files::LANDMARKS_EXACT,
        files::TRUTH,
    ];
    let mut listed = Vec::new();
    for name in names {
        listed.push(name.to_string());
        if name.ends_with(".vh") {
            listed.push(name.replace(".vh", ".raw"));
        }
    }
    let initial = crate::eval::tre_mapped(&out.landmarks, spec.spacing, |v| v).mean;
    let manifest = Manifest {
        spec,
        initial_tre_mm: initial,
        min_det: SynthModel::new(spec)?.min_grid_det()?,
        files: listed.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| SynthError::Invalid(e.to_string()))?;
    fs::write(dir.join(files::MANIFEST), text)?;
    let mut paths: Vec<PathBuf> = listed.iter().map(|n| dir.join(n)).collect();
    paths.push(dir.join(files::MANIFEST));
    Ok(paths)
}
