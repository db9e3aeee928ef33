//! Dense displacement fields, warping, landmark error and Jacobian statistics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::Real;
use crate::losses::{self, LossError};
use crate::nets::{ActivationParams, DerivOrder, Model, NetError, PointDerivatives};
use crate::parallel;
use crate::volume::{read_raw_pair, write_raw_pair, LandmarkSet, Mask, Volume, VolumeError, VolumeHeader};

/// Points per network evaluation chunk.
pub const CHUNK: usize = 8192;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("conditioned model requires alpha in [0, 1], got {0:?}")]
    Alpha(Option<f64>),
    #[error("grids differ: field {field:?} vs volume {volume:?}")]
    DimMismatch { field: [usize; 3], volume: [usize; 3] },
    #[error("{0}")]
    Invalid(String),
}

/// Displacement sampled on a voxel grid, in normalized units, stored as
/// interleaved `(u_x, u_y, u_z)` triples in x-fastest voxel order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseField {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Regularization weight the field was generated at, if any.
    pub alpha: Option<f64>,
    pub data: Vec<f32>,
}

impl DenseField {
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self {
            dims,
            spacing,
            alpha: None,
            data: vec![0.0; 3 * dims.iter().product::<usize>()],
        }
    }

    /// Build from a function of the normalized coordinate.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self, EvalError> {
        let grid = Volume::zeros(dims, spacing)?;
        let mut data = Vec::with_capacity(3 * grid.len());
        for i in 0..grid.len() {
            let p = grid.to_normalized(grid.coords(i).map(|c| c as f64));
            data.extend(f(p).map(|v| v as f32));
        }
        Ok(Self {
            dims,
            spacing,
            alpha: None,
            data,
        })
    }

    fn grid(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            origin: [0.0; 3],
            data: Vec::new(),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn get(&self, idx: usize) -> [f64; 3] {
        std::array::from_fn(|k| self.data[3 * idx + k] as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Trilinear displacement at a continuous voxel position, clamped to the
    /// grid.
    pub fn sample_voxel(&self, v: [f64; 3]) -> [f64; 3] {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let c = v[a].clamp(0.0, (n - 1) as f64);
            let cell = (c.ceil() as isize - 1).clamp(0, n as isize - 2) as usize;
            base[a] = cell;
            frac[a] = c - cell as f64;
        }
        let mut out = [0.0; 3];
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let w = wx * wy * wz;
                    if w != 0.0 {
                        let idx = (base[0] + dx) + self.dims[0] * ((base[1] + dy) + self.dims[1] * (base[2] + dz));
                        for (k, o) in out.iter_mut().enumerate() {
                            *o += w * self.data[3 * idx + k] as f64;
                        }
                    }
                }
            }
        }
        out
    }

    /// Displacement in normalized units at a normalized position.
    pub fn sample_normalized(&self, p: [f64; 3]) -> [f64; 3] {
        self.sample_voxel(self.grid().to_voxel(p))
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut h = VolumeHeader::for_grid(self.dims, self.spacing, [0.0; 3]);
        h.components = Some(3);
        h.alpha = self.alpha;
        write_raw_pair(path, &h, &self.data)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let (h, data) = read_raw_pair(path)?;
        if h.components != Some(3) {
            return Err(EvalError::Invalid(format!(
                "{} is not a displacement field (components = {:?})",
                path.display(),
                h.components
            )));
        }
        Ok(Self {
            dims: h.dims,
            spacing: h.spacing_mm,
            alpha: h.alpha,
            data,
        })
    }
}

/// Activation parameters for evaluating `model` at `alpha`.
pub fn activation_for<T: Real>(model: &Model<T>, alpha: Option<f64>) -> Result<ActivationParams<T>, EvalError> {
    if model.is_conditioned() {
        match alpha {
            Some(a) if (0.0..=1.0).contains(&a) => Ok(model.harmonize(T::lit(a))?),
            other => Err(EvalError::Alpha(other)),
        }
    } else {
        Ok(ActivationParams::sine(model.arch.omega0))
    }
}

/// Network evaluation over many points, chunked and run in parallel with
/// results assembled in input order.
pub fn evaluate_points<T: Real>(
    model: &Model<T>,
    params: ActivationParams<T>,
    points: &[[f64; 3]],
    order: DerivOrder,
) -> Result<Vec<PointDerivatives<T>>, EvalError> {
    let chunks: Vec<Result<Vec<PointDerivatives<T>>, NetError>> = parallel::install(|| {
        points
            .par_chunks(CHUNK)
            .map(|c| {
                let pts: Vec<[T; 3]> = c.iter().map(|p| p.map(T::lit)).collect();
                model.evaluate(&pts, params, order)
            })
            .collect()
    });
    let mut out = Vec::with_capacity(points.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Displacements only.
pub fn displacements<T: Real>(
    model: &Model<T>,
    alpha: Option<f64>,
    points: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>, EvalError> {
    let params = activation_for(model, alpha)?;
    Ok(evaluate_points(model, params, points, DerivOrder::Value)?
        .into_iter()
        .map(|d| d.u.map(|v| v.as_f64()))
        .collect())
}

/// Evaluate `u` at every voxel of a `dims` grid.
pub fn dense_field<T: Real>(
    model: &Model<T>,
    alpha: Option<f64>,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<DenseField, EvalError> {
    let grid = Volume::zeros(dims, spacing)?;
    let points: Vec<[f64; 3]> = (0..grid.len())
        .map(|i| grid.to_normalized(grid.coords(i).map(|c| c as f64)))
        .collect();
    let params = activation_for(model, alpha)?;
    let derivs = evaluate_points(model, params, &points, DerivOrder::Value)?;
    let data: Vec<f32> = derivs.iter().flat_map(|d| d.u.map(|v| v.as_f64() as f32)).collect();
    let field = DenseField {
        dims,
        spacing,
        alpha,
        data,
    };
    if !field.is_finite() {
        return Err(EvalError::Invalid("dense field contains non-finite values".into()));
    }
    Ok(field)
}

/// Options of the inverse-map fixed-point iteration.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct InverseOptions {
    pub iterations: usize,
    /// Stop once the update is below this, in normalized units.
    pub tolerance: f64,
}

impl Default for InverseOptions {
    fn default() -> Self {
        Self {
            iterations: 10,
            tolerance: 1e-4,
        }
    }
}

/// Approximate `φ⁻¹(y)` for a field `u` by iterating `x ← y − u(x)`.
pub fn invert_point(y: [f64; 3], u: impl Fn([f64; 3]) -> [f64; 3], opts: InverseOptions) -> [f64; 3] {
    let mut x = y;
    for _ in 0..opts.iterations {
        let d = u(x);
        let next: [f64; 3] = std::array::from_fn(|k| y[k] - d[k]);
        let step = (0..3).map(|k| (next[k] - x[k]).abs()).fold(0.0, f64::max);
        x = next;
        if step < opts.tolerance {
            break;
        }
    }
    x
}

/// Moving-frame voxel position that lands on each fixed-frame voxel.
fn pullback_positions(field: &DenseField, opts: InverseOptions) -> Vec<[f64; 3]> {
    let grid = field.grid();
    let n = field.voxel_count();
    parallel::install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let y = grid.to_normalized(grid.coords(i).map(|c| c as f64));
                let x = invert_point(y, |p| field.sample_normalized(p), opts);
                grid.to_voxel(x)
            })
            .collect()
    })
}

/// Moving image resampled into the fixed frame.
pub fn warp_volume(moving: &Volume, field: &DenseField, opts: InverseOptions) -> Result<Volume, EvalError> {
    if moving.dims != field.dims {
        return Err(EvalError::DimMismatch {
            field: field.dims,
            volume: moving.dims,
        });
    }
    let data = pullback_positions(field, opts)
        .into_iter()
        .map(|v| moving.sample_voxel(v) as f32)
        .collect();
    Ok(Volume {
        data,
        ..moving.clone()
    })
}

/// Moving mask resampled into the fixed frame and thresholded at 0.5.
pub fn warp_mask(moving: &Mask, field: &DenseField, opts: InverseOptions) -> Result<Mask, EvalError> {
    let warped = warp_volume(moving.volume(), field, opts)?;
    Ok(Mask::binarize(&warped, 0.5))
}

/// Landmark error summary in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct TreStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub per_landmark: Vec<f64>,
}

impl TreStats {
    pub fn from_distances(d: Vec<f64>) -> Self {
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            per_landmark: d,
        }
    }
}

/// Distances in mm between mapped moving landmarks and fixed landmarks, with
/// `map` taking a moving voxel position to a fixed voxel position.
pub fn tre_mapped(landmarks: &LandmarkSet, spacing: [f64; 3], map: impl Fn([f64; 3]) -> [f64; 3]) -> TreStats {
    let d = landmarks
        .moving
        .iter()
        .zip(&landmarks.fixed)
        .map(|(&m, f)| {
            let p = map(m);
            (0..3).map(|a| ((p[a] - f[a]) * spacing[a]).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    TreStats::from_distances(d)
}

/// Landmark error of a trained model on the grid of `reference`.
pub fn tre<T: Real>(
    model: &Model<T>,
    alpha: Option<f64>,
    landmarks: &LandmarkSet,
    reference: &Volume,
) -> Result<TreStats, EvalError> {
    landmarks.validate(reference.dims)?;
    let pts: Vec<[f64; 3]> = landmarks.moving.iter().map(|&v| reference.to_normalized(v)).collect();
    let u = displacements(model, alpha, &pts)?;
    // Displacements are added in voxel units so a zero field maps every
    // landmark onto itself exactly.
    let half: [f64; 3] = std::array::from_fn(|a| 0.5 * (reference.dims[a] - 1) as f64);
    let d = landmarks
        .moving
        .iter()
        .zip(&u)
        .zip(&landmarks.fixed)
        .map(|((m, d), f)| {
            (0..3)
                .map(|a| ((m[a] + d[a] * half[a] - f[a]) * reference.spacing[a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(TreStats::from_distances(d))
}

/// Statistics of `det(I + ∇u)`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct JacobianStats {
    pub fraction_nonpositive: f64,
    pub min_det: f64,
    pub mean_abs_deviation: f64,
}

impl JacobianStats {
    pub fn from_dets(dets: &[f64]) -> Self {
        let n = dets.len().max(1) as f64;
        Self {
            fraction_nonpositive: dets.iter().filter(|&&d| d <= 0.0).count() as f64 / n,
            min_det: dets.iter().copied().fold(f64::INFINITY, f64::min),
            mean_abs_deviation: dets.iter().map(|d| (d - 1.0).abs()).sum::<f64>() / n,
        }
    }
}

/// Uniform evaluation points in normalized coordinates: jittered voxels of
/// the mask when given, otherwise the whole cube.
pub fn sample_points(mask: Option<&Mask>, n: usize, seed: u64) -> Result<Vec<[f64; 3]>, EvalError> {
    if n == 0 {
        return Err(EvalError::Invalid("at least one sample point is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match mask {
        Some(m) => {
            let grid = m.volume();
            crate::volume::sample_mask_points(m, n, &mut rng, true)?
                .into_iter()
                .map(|p| {
                    let v = p.position.map(|c| c.max(0.0));
                    let v: [f64; 3] = std::array::from_fn(|a| v[a].min((grid.dims[a] - 1) as f64));
                    grid.to_normalized(v)
                })
                .collect()
        }
        None => (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0))).collect(),
    })
}

pub fn jacobian_stats<T: Real>(
    model: &Model<T>,
    alpha: Option<f64>,
    points: &[[f64; 3]],
) -> Result<JacobianStats, EvalError> {
    let params = activation_for(model, alpha)?;
    let dets: Vec<f64> = evaluate_points(model, params, points, DerivOrder::First)?
        .iter()
        .map(|d| d.det().as_f64())
        .collect();
    Ok(JacobianStats::from_dets(&dets))
}

/// Mean bending energy of the field emitted at `alpha` over `points`.
pub fn bending_energy<T: Real>(model: &Model<T>, alpha: Option<f64>, points: &[[f64; 3]]) -> Result<f64, EvalError> {
    let params = activation_for(model, alpha)?;
    let derivs = evaluate_points(model, params, points, DerivOrder::Second)?;
    let total: f64 = derivs
        .chunks(CHUNK)
        .map(|c| losses::bending_value(c).map(|v| v.as_f64() * c.len() as f64))
        .sum::<Result<f64, _>>()?;
    Ok(total / derivs.len() as f64)
}

/// `1 − NCC` between the moving image at `points` and the fixed image at
/// their mapped positions, both min-max normalized; `points` are normalized
/// coordinates.
pub fn similarity_loss<T: Real>(
    model: &Model<T>,
    alpha: Option<f64>,
    moving: &Volume,
    fixed: &Volume,
    points: &[[f64; 3]],
) -> Result<f64, EvalError> {
    moving.check_same_grid(fixed)?;
    let (m, f) = (moving.min_max_normalized(), fixed.min_max_normalized());
    let u = displacements(model, alpha, points)?;
    let mv: Vec<f64> = points.iter().map(|&p| m.sample_voxel(m.to_voxel(p))).collect();
    let fv: Vec<f64> = points
        .iter()
        .zip(&u)
        .map(|(p, d)| f.sample(std::array::from_fn::<f64, 3, _>(|k| p[k] + d[k])).0)
        .collect();
    Ok(losses::ncc_value(&mv, &fv)?)
}

/// Ranks starting at 0 with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman: length mismatch");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        0.0
    } else {
        cov / (sx * sy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init, Architecture, NetConfig};

    fn zero_model() -> Model<f32> {
        Model::zeros(Architecture {
            main: vec![3, 8, 3],
            harmonizer: None,
            omega0: 30.0,
            shared_activation: true,
        })
    }

    #[test]
    fn zero_network_gives_zero_field() {
        let f = dense_field(&zero_model(), None, [5, 4, 3], [1.0; 3]).unwrap();
        assert_eq!(f.data.len(), 5 * 4 * 3 * 3);
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_field_shape_and_determinism() {
        let m = init::<f32>(3, &NetConfig {
            main_hidden: vec![16, 16],
            harmonizer_hidden: vec![8],
            ..NetConfig::default()
        });
        let a = dense_field(&m, Some(0.4), [32, 32, 32], [1.0; 3]).unwrap();
        let b = dense_field(&m, Some(0.4), [32, 32, 32], [1.0; 3]).unwrap();
        assert_eq!(a.data.len(), 32 * 32 * 32 * 3);
        assert!(a.is_finite());
        assert_eq!(a, b);
        assert!(matches!(dense_field(&m, Some(1.5), [4, 4, 4], [1.0; 3]), Err(EvalError::Alpha(_))));
        assert!(matches!(dense_field(&m, None, [4, 4, 4], [1.0; 3]), Err(EvalError::Alpha(None))));
    }

    #[test]
    fn zero_field_warp_is_identity() {
        let v = Volume::from_fn([6, 5, 4], [1.0; 3], |[x, y, z]| (x * 3 + y * 7 + z * 11) as f32 * 0.1).unwrap();
        let f = DenseField::zeros(v.dims, v.spacing);
        assert_eq!(warp_volume(&v, &f, InverseOptions::default()).unwrap(), v);
        let m = Mask::binarize(&v, 2.0);
        assert_eq!(warp_mask(&m, &f, InverseOptions::default()).unwrap(), m);
    }

    #[test]
    fn translation_field_shifts_by_one_voxel() {
        let dims = [10, 6, 6];
        let v = Volume::from_fn(dims, [1.0; 3], |[x, y, z]| ((x * x + 3 * y + z) % 7) as f32).unwrap();
        let step = 2.0 / (dims[0] - 1) as f64;
        let f = DenseField::from_fn(dims, [1.0; 3], |_| [step, 0.0, 0.0]).unwrap();
        let w = warp_volume(&v, &f, InverseOptions::default()).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 1..10 {
                    assert!((w.get([x, y, z]) - v.get([x - 1, y, z])).abs() < 1e-5);
                }
            }
        }
        let m = Mask::binarize(&v, 3.0);
        let wm = warp_mask(&m, &f, InverseOptions::default()).unwrap();
        assert!(wm.volume().data.iter().all(|&b| b == 0.0 || b == 1.0));
    }

    #[test]
    fn tre_identity_examples() {
        let set = LandmarkSet {
            moving: vec![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]],
            fixed: vec![[1.0, 1.0, 1.0], [5.0, 6.0, 2.0]],
        };
        let ref_vol = Volume::zeros([10, 10, 10], [1.0; 3]).unwrap();
        let s = tre(&zero_model(), None, &set, &ref_vol).unwrap();
        assert_eq!(s.per_landmark, vec![0.0, 5.0]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.std, 2.5);
    }

    #[test]
    fn jacobian_stats_examples() {
        let s = JacobianStats::from_dets(&[1.0, 1.0]);
        assert_eq!((s.fraction_nonpositive, s.min_det, s.mean_abs_deviation), (0.0, 1.0, 0.0));
        let pts = sample_points(None, 10, 0).unwrap();
        let s = jacobian_stats(&zero_model(), None, &pts).unwrap();
        assert_eq!((s.fraction_nonpositive, s.min_det, s.mean_abs_deviation), (0.0, 1.0, 0.0));
        // u(x) = x
        let mut lin = Model::<f64>::zeros(Architecture {
            main: vec![3, 3],
            harmonizer: None,
            omega0: 30.0,
            shared_activation: true,
        });
        lin.main.output.weight =
            crate::autodiff::Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = jacobian_stats(&lin, None, &pts).unwrap();
        assert_eq!(s.min_det, 8.0);
        assert_eq!(s.mean_abs_deviation, 7.0);
    }

    #[test]
    fn field_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("field.vh");
        let mut f = DenseField::from_fn([4, 3, 2], [1.0, 2.0, 3.0], |p| [p[0], p[1] * 0.5, -p[2]]).unwrap();
        f.alpha = Some(0.3);
        f.save(&p).unwrap();
        assert_eq!(DenseField::load(&p).unwrap(), f);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]), 0.0);
        // ties share ranks: y ranks (0.5, 0.5, 2, 3)
        let r = spearman(&x, &[1.0, 1.0, 2.0, 3.0]);
        assert!((r - 0.948_683_298_050_513_8).abs() < 1e-12);
    }

    #[test]
    fn inverse_of_translation() {
        let x = invert_point([0.1, 0.2, 0.3], |_| [0.05, 0.0, -0.1], InverseOptions::default());
        assert!((x[0] - 0.05).abs() < 1e-12 && (x[2] - 0.4).abs() < 1e-12);
    }
}
