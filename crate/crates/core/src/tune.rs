//! Choosing the regularization weight: grid search over a conditioned model
//! with Dice as the observation, and a 1-D Gaussian-process Bayesian
//! optimizer for objectives that need a full training run per evaluation.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::autodiff::Real;
use crate::eval::{self, EvalError, InverseOptions};
use crate::nets::Model;
use crate::volume::Mask;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("mask dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("alpha grid: {0}")]
    Grid(String),
    #[error("kernel matrix is not positive definite even with jitter {0:e}")]
    NotPositiveDefinite(f64),
    #[error("Gaussian process needs at least one observation")]
    NoObservations,
    #[error("objective returned {value} at alpha = {alpha}")]
    NonFiniteObjective { alpha: f64, value: f64 },
    #[error("optimization budget must be >= 3, got {0}")]
    Budget(usize),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("objective failed at alpha = {alpha}: {message}")]
    Objective { alpha: f64, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64, TuneError> {
    if a.dims() != b.dims() {
        return Err(TuneError::DimMismatch(a.dims(), b.dims()));
    }
    let (va, vb) = (&a.volume().data, &b.volume().data);
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in va.iter().zip(vb) {
        let (x, y) = (x != 0.0, y != 0.0);
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Ascending α values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaGrid {
    values: Vec<f64>,
}

impl AlphaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, TuneError> {
        if values.is_empty() {
            return Err(TuneError::Grid("empty grid".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TuneError::Grid(format!("{v} lies outside [0, 1]")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TuneError::Grid("values must be strictly ascending".into()));
        }
        Ok(Self { values })
    }

    /// `steps + 1` evenly spaced values from 0 to 1.
    pub fn uniform(steps: usize) -> Result<Self, TuneError> {
        if steps == 0 {
            return Err(TuneError::Grid("at least one step is required".into()));
        }
        Self::new((0..=steps).map(|i| i as f64 / steps as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self::uniform(10).expect("valid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchResult {
    pub alpha_star: f64,
    /// `(α, Dice)` per grid value, in grid order.
    pub table: Vec<(f64, f64)>,
    /// Number of dense-field evaluations issued.
    pub evaluations: usize,
}

/// Index of the best score; equal scores resolve to the larger α.
pub fn argmax_prefer_larger(table: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(a, s)) in table.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (ba, bs) = table[b];
                if s > bs || (s == bs && a > ba) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Score every grid value with `score` and pick the best.
pub fn grid_search_with(
    grid: &AlphaGrid,
    mut score: impl FnMut(f64) -> Result<f64, TuneError>,
) -> Result<GridSearchResult, TuneError> {
    let mut table = Vec::with_capacity(grid.values().len());
    for &a in grid.values() {
        table.push((a, score(a)?));
    }
    let best = argmax_prefer_larger(&table).ok_or_else(|| TuneError::Grid("empty grid".into()))?;
    Ok(GridSearchResult {
        alpha_star: table[best].0,
        evaluations: table.len(),
        table,
    })
}

/// Dice between the moving mask warped by the field emitted at `alpha` and
/// the fixed mask.
pub fn dice_at<T: Real>(
    model: &Model<T>,
    alpha: f64,
    moving_mask: &Mask,
    fixed_mask: &Mask,
    opts: InverseOptions,
) -> Result<f64, TuneError> {
    let alpha = model.is_conditioned().then_some(alpha);
    let g = moving_mask.volume();
    let field = eval::dense_field(model, alpha, g.dims, g.spacing)?;
    let warped = eval::warp_mask(moving_mask, &field, opts)?;
    dice(&warped, fixed_mask)
}

/// Grid search on a conditioned model: one dense field per grid value and
/// no training.
pub fn grid_search_alpha<T: Real>(
    model: &Model<T>,
    moving_mask: &Mask,
    fixed_mask: &Mask,
    grid: &AlphaGrid,
    opts: InverseOptions,
) -> Result<GridSearchResult, TuneError> {
    if moving_mask.dims() != fixed_mask.dims() {
        return Err(TuneError::DimMismatch(moving_mask.dims(), fixed_mask.dims()));
    }
    grid_search_with(grid, |a| dice_at(model, a, moving_mask, fixed_mask, opts))
}

/// Write `alpha,dice` rows followed by an `alpha_star,<value>` line.
pub fn write_grid_table(path: &Path, r: &GridSearchResult) -> Result<(), TuneError> {
    let mut s = String::from("alpha,dice\n");
    for (a, d) in &r.table {
        s.push_str(&format!("{a},{d}\n"));
    }
    s.push_str(&format!("alpha_star,{}\n", r.alpha_star));
    fs::write(path, s)?;
    Ok(())
}

/// Squared-exponential kernel hyperparameters.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        Self {
            length_scale: 0.2,
            signal_var: 1.0,
            noise_var: 1e-4,
        }
    }
}

/// Exact GP regression posterior on 1-D inputs.
#[derive(Clone, Debug)]
pub struct GpModel {
    xs: Vec<f64>,
    hyper: GpHyper,
    chol: Cholesky<f64, nalgebra::Dyn>,
    weights: DVector<f64>,
}

impl GpModel {
    fn kernel(&self, a: f64, b: f64) -> f64 {
        se_kernel(&self.hyper, a, b)
    }

    /// Fit to observations; jitter grows tenfold from `1e-10` until the
    /// kernel matrix factors.
    pub fn fit(xs: &[f64], ys: &[f64], hyper: GpHyper) -> Result<Self, TuneError> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(TuneError::NoObservations);
        }
        let n = xs.len();
        let k = DMatrix::from_fn(n, n, |i, j| se_kernel(&hyper, xs[i], xs[j]));
        let mut jitter = 0.0;
        let chol = loop {
            let m = &k + DMatrix::identity(n, n) * (hyper.noise_var + jitter);
            if let Some(c) = Cholesky::new(m) {
                break c;
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > 1e-2 {
                return Err(TuneError::NotPositiveDefinite(jitter));
            }
        };
        let weights = chol.solve(&DVector::from_column_slice(ys));
        Ok(Self {
            xs: xs.to_vec(),
            hyper,
            chol,
            weights,
        })
    }

    /// Posterior mean and variance (variance clamped at 0).
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let ks = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|&xi| self.kernel(x, xi)));
        let mean = ks.dot(&self.weights);
        let v = self.chol.solve(&ks);
        let var = (self.kernel(x, x) - ks.dot(&v)).max(0.0);
        (mean, var)
    }
}

fn se_kernel(h: &GpHyper, a: f64, b: f64) -> f64 {
    let d = (a - b) / h.length_scale;
    h.signal_var * (-0.5 * d * d).exp()
}

/// Expected improvement over `best` for maximization.
pub fn expected_improvement(mean: f64, var: f64, best: f64) -> f64 {
    let sigma = var.max(0.0).sqrt();
    let gain = mean - best;
    if sigma < 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let normal = Normal::standard();
    (gain * normal.cdf(z) + sigma * normal.pdf(z)).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoRecord {
    pub iter: usize,
    pub alpha: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoResult {
    pub alpha_best: f64,
    pub best_objective: f64,
    pub history: Vec<BoRecord>,
}

/// Points on the acquisition lattice.
pub const EI_LATTICE: usize = 1001;
/// Uniform random evaluations before the surrogate takes over.
pub const INITIAL_POINTS: usize = 3;

/// Maximize `objective` over `[0, 1]` with `budget` evaluations.
///
/// Observations are standardized before each fit so the unit signal
/// variance of the kernel matches their scale.
pub fn bo_optimize(
    mut objective: impl FnMut(f64) -> Result<f64, TuneError>,
    budget: usize,
    seed: u64,
    hyper: GpHyper,
) -> Result<BoResult, TuneError> {
    if budget < INITIAL_POINTS {
        return Err(TuneError::Budget(budget));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history: Vec<BoRecord> = Vec::with_capacity(budget);
    let mut observe = |alpha: f64, history: &mut Vec<BoRecord>| -> Result<(), TuneError> {
        let value = objective(alpha)?;
        if !value.is_finite() {
            return Err(TuneError::NonFiniteObjective { alpha, value });
        }
        log::info!("bo iteration {}: alpha {alpha:.4} objective {value:.6}", history.len());
        history.push(BoRecord {
            iter: history.len(),
            alpha,
            objective: value,
        });
        Ok(())
    };
    for _ in 0..INITIAL_POINTS {
        let a = rng.random::<f64>();
        observe(a, &mut history)?;
    }
    while history.len() < budget {
        let xs: Vec<f64> = history.iter().map(|r| r.alpha).collect();
        let ys: Vec<f64> = history.iter().map(|r| r.objective).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
        let scale = if sd > 1e-12 { sd } else { 1.0 };
        let zs: Vec<f64> = ys.iter().map(|y| (y - mean) / scale).collect();
        let gp = GpModel::fit(&xs, &zs, hyper)?;
        let best = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut pick = (0.0, f64::NEG_INFINITY);
        for i in 0..EI_LATTICE {
            let a = i as f64 / (EI_LATTICE - 1) as f64;
            let (m, v) = gp.predict(a);
            let ei = expected_improvement(m, v, best);
            if ei > pick.1 {
                pick = (a, ei);
            }
        }
        observe(pick.0, &mut history)?;
    }
    let best = history
        .iter()
        .fold(&history[0], |b, r| if r.objective > b.objective { r } else { b });
    Ok(BoResult {
        alpha_best: best.alpha,
        best_objective: best.objective,
        history,
    })
}

/// Write `iter,alpha,objective` rows.
pub fn write_bo_history(path: &Path, r: &BoResult) -> Result<(), TuneError> {
    let mut s = String::from("iter,alpha,objective\n");
    for h in &r.history {
        s.push_str(&format!("{},{},{}\n", h.iter, h.alpha, h.objective));
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;

    fn mask(dims: [usize; 3], on: &[usize]) -> Mask {
        let mut v = Volume::zeros(dims, [1.0; 3]).unwrap();
        for &i in on {
            v.data[i] = 1.0;
        }
        Mask::new(v).unwrap()
    }

    #[test]
    fn dice_examples() {
        let d = [2, 2, 2];
        assert_eq!(dice(&mask(d, &[0, 1]), &mask(d, &[0, 1])).unwrap(), 1.0);
        assert_eq!(dice(&mask(d, &[0, 1]), &mask(d, &[2, 3])).unwrap(), 0.0);
        assert_eq!(dice(&mask(d, &[0, 1]), &mask(d, &[1, 2])).unwrap(), 0.5);
        assert_eq!(dice(&mask(d, &[]), &mask(d, &[])).unwrap(), 1.0);
        let (a, b) = (mask(d, &[0, 1, 5]), mask(d, &[1, 2]));
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        assert!(dice(&mask(d, &[]), &mask([2, 2, 3], &[])).is_err());
    }

    #[test]
    fn grid_validation() {
        assert_eq!(AlphaGrid::default().values().len(), 11);
        assert!(AlphaGrid::new(vec![]).is_err());
        assert!(AlphaGrid::new(vec![0.2, 0.1]).is_err());
        assert!(AlphaGrid::new(vec![0.5, 1.2]).is_err());
    }

    #[test]
    fn ties_prefer_larger_alpha() {
        let g = AlphaGrid::default();
        let r = grid_search_with(&g, |_| Ok(0.8)).unwrap();
        assert_eq!(r.alpha_star, 1.0);
        assert_eq!(r.evaluations, 11);
        let r = grid_search_with(&g, |a| Ok(if (0.29..0.31).contains(&a) || (0.69..0.71).contains(&a) { 0.9 } else { 0.1 }))
            .unwrap();
        assert_eq!(r.alpha_star, 0.7);
    }

    #[test]
    fn gp_interpolates_and_recovers_prior() {
        let h = GpHyper {
            noise_var: 1e-10,
            ..GpHyper::default()
        };
        let xs = [0.1, 0.4, 0.5, 0.9];
        let ys = [0.3, -0.2, 0.5, 1.0];
        let gp = GpModel::fit(&xs, &ys, h).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((gp.predict(*x).0 - y).abs() < 1e-6);
        }
        let (_, v) = gp.predict(5.0);
        assert!((v - 1.0).abs() < 0.01);
    }

    #[test]
    fn expected_improvement_is_nonnegative() {
        assert_eq!(expected_improvement(0.2, 0.0, 0.5), 0.0);
        assert_eq!(expected_improvement(0.5, 0.0, 0.5), 0.0);
        assert!(expected_improvement(0.0, 1.0, 0.5) > 0.0);
        for m in [-2.0, 0.0, 3.0] {
            for v in [0.0, 1e-8, 0.5, 4.0] {
                assert!(expected_improvement(m, v, 1.0) >= 0.0);
            }
        }
    }

    #[test]
    fn bo_budget_and_errors() {
        assert!(matches!(bo_optimize(|_| Ok(1.0), 2, 0, GpHyper::default()), Err(TuneError::Budget(2))));
        let r = bo_optimize(|_| Ok(1.0), 6, 0, GpHyper::default()).unwrap();
        assert_eq!(r.history.len(), 6);
        let r3 = bo_optimize(|a| Ok(-a), 3, 4, GpHyper::default()).unwrap();
        let min = r3.history.iter().map(|h| h.alpha).fold(f64::INFINITY, f64::min);
        assert_eq!(r3.alpha_best, min);
        assert!(matches!(
            bo_optimize(|_| Ok(f64::NAN), 5, 0, GpHyper::default()),
            Err(TuneError::NonFiniteObjective { .. })
        ));
    }
}
