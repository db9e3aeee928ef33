//! Shared fixtures and finite-difference checks for the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use std::path::Path;

use inrreg::autodiff::Real;
use inrreg::losses::{HyperelasticWeights, LossMode, Regularizer};
use inrreg::nets::{init, ActivationParams, DerivOrder, Model, NetConfig, PointDerivatives};
use inrreg::train::{objective_and_gradients, TrainingPair};
use inrreg::volume::{Mask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Edge length of the small gradient-check grid.
pub const GRID: usize = 8;

/// A fixed image that is a single trilinear polynomial over the grid.
/// Trilinear interpolation reproduces it exactly, so the sampled image is
/// smooth and central differences see no cell-boundary kinks.
pub fn trilinear_fixed(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    let c: [f64; 8] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    Volume::from_fn(dims, [1.0; 3], |[x, y, z]| {
        let (x, y, z) = (
            x as f64 / (dims[0] - 1) as f64,
            y as f64 / (dims[1] - 1) as f64,
            z as f64 / (dims[2] - 1) as f64,
        );
        (c[0] + c[1] * x + c[2] * y + c[3] * z + c[4] * x * y + c[5] * y * z + c[6] * x * z + c[7] * x * y * z) as f32
    })
    .unwrap()
}

/// Random moving image; it is only sampled at the fixed batch positions.
pub fn random_moving(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    Volume::from_fn(dims, [1.0; 3], |_| rng.random_range(0.0..1.0)).unwrap()
}

pub fn full_mask(dims: [usize; 3]) -> Mask {
    Mask::new(Volume::from_fn(dims, [1.0; 3], |_| 1.0).unwrap()).unwrap()
}

/// Tiny network with hidden widths drawn from 8..=16.
pub fn tiny_config(rng: &mut ChaCha8Rng, conditioned: bool) -> NetConfig {
    let depth = rng.random_range(1..=2);
    NetConfig {
        main_hidden: (0..depth).map(|_| rng.random_range(8..=16)).collect(),
        harmonizer_hidden: vec![rng.random_range(8..=16), rng.random_range(8..=16)],
        conditioned,
        ..NetConfig::default()
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Outcome of one parameter-gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub seed: u64,
    pub reg: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Coarse step of the Richardson-extrapolated central differences in
/// parameter space. Extrapolating from `h` and `h/2` cancels the `h²` term,
/// so the step can stay large enough that roundoff (`ε|f|/h`, about 2e-11
/// here) is negligible next to the tolerance even for gradients near 1e-7.
pub const PARAM_STEP: f64 = 1e-5;

/// `(4·D(h/2) − D(h)) / 3` with `D` the central difference of `f` at step `h`.
pub fn richardson(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    let d = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(h) - f(-h)) / (2.0 * h);
    let coarse = d(&mut f, h);
    let fine = d(&mut f, h / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Compare the parameter gradients of the total loss against extrapolated
/// central differences for one random case per regularizer. At least two entries of
/// every parameter tensor are checked. Relative errors use a floor of
/// `1e-7 · max|∇|` so parameters with vanishing gradient do not divide by
/// zero.
pub fn param_gradient_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conditioned = seed.is_multiple_of(2);
    let cfg = tiny_config(&mut rng, conditioned);
    let mode = if conditioned { LossMode::Conditioned } else { LossMode::Baseline };
    let alpha = if conditioned { rng.random_range(0.0..1.0) } else { rng.random_range(0.0..2.0) };
    let dims = [GRID; 3];
    let pair = TrainingPair::new(
        &random_moving(dims, seed),
        &trilinear_fixed(dims, seed),
        &full_mask(dims),
        false,
    )
    .unwrap();
    // Interior positions keep the warped points away from the clamped border.
    let points: Vec<[f64; 3]> = (0..12)
        .map(|_| std::array::from_fn(|_| rng.random_range(1.5..(GRID as f64 - 2.5))))
        .collect();
    let weights = HyperelasticWeights {
        alpha_l: rng.random_range(0.5..2.0),
        alpha_a: rng.random_range(0.5..2.0),
        alpha_v: rng.random_range(0.5..2.0),
    };
    let regs = [
        ("jacobian", Regularizer::Jacobian),
        ("hyperelastic", Regularizer::Hyperelastic(weights)),
        ("bending", Regularizer::Bending),
    ];
    let base = init::<f64>(seed, &cfg);
    regs.iter()
        .map(|(name, reg)| {
            let analytic = objective_and_gradients(&base, &pair, &points, alpha, reg, mode).unwrap();
            let scale = analytic
                .grads
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.abs()))
                .fold(0.0, f64::max);
            let floor = 1e-7 * scale;
            let total_at = |m: &Model<f64>| objective_and_gradients(m, &pair, &points, alpha, reg, mode).unwrap().total;
            let mut max_err: f64 = 0.0;
            let mut checked = 0;
            for (ti, g) in analytic.grads.iter().enumerate() {
                let picks = 2.min(g.numel());
                for _ in 0..picks {
                    let j = rng.random_range(0..g.numel());
                    let fd = richardson(
                        |h| {
                            let mut m = base.clone();
                            m.params_mut()[ti].data_mut()[j] += h;
                            total_at(&m)
                        },
                        PARAM_STEP,
                    );
                    max_err = max_err.max(rel_err(g.data()[j], fd, floor));
                    checked += 1;
                }
            }
            GradCheck {
                seed,
                reg: name,
                checked,
                max_rel_err: max_err,
            }
        })
        .collect()
}

/// Step of the central differences in input space.
pub const INPUT_STEP: f64 = 1e-5;

/// Largest relative errors of the propagated input Jacobian (against
/// differences of `u`) and Hessian (against differences of the propagated
/// Jacobian) for one random conditioned network. Each matrix uses a floor of
/// `1e-3` times its largest entry.
pub fn input_derivative_errors(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let cfg = tiny_config(&mut rng, true);
    let model = init::<f64>(seed, &cfg);
    let params: ActivationParams<f64> = model.harmonize(rng.random_range(0.0..1.0)).unwrap();
    let points: Vec<[f64; 3]> = (0..6)
        .map(|_| std::array::from_fn(|_| rng.random_range(-0.8..0.8)))
        .collect();
    let exact = model.evaluate(&points, params, DerivOrder::Second).unwrap();
    let at = |p: [f64; 3]| -> PointDerivatives<f64> { model.evaluate(&[p], params, DerivOrder::First).unwrap()[0] };
    let (mut jac_err, mut hess_err): (f64, f64) = (0.0, 0.0);
    for (p, d) in points.iter().zip(&exact) {
        let jac_scale = d.jac.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        let hess_scale = d.hess.iter().flatten().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        for j in 0..3 {
            let mut hi = *p;
            let mut lo = *p;
            hi[j] += INPUT_STEP;
            lo[j] -= INPUT_STEP;
            let (dh, dl) = (at(hi), at(lo));
            for k in 0..3 {
                let fd = (dh.u[k] - dl.u[k]) / (2.0 * INPUT_STEP);
                jac_err = jac_err.max(rel_err(d.jac[k][j], fd, 1e-3 * jac_scale));
                for i in 0..3 {
                    let fd2 = (dh.jac[k][i] - dl.jac[k][i]) / (2.0 * INPUT_STEP);
                    hess_err = hess_err.max(rel_err(d.hess[k][i][j], fd2, 1e-3 * hess_scale));
                }
            }
        }
    }
    (jac_err, hess_err)
}

/// Hessian of a displacement given only its Jacobian, by central
/// differences.
pub fn hessian_from_jacobian(jac: impl Fn([f64; 3]) -> [[f64; 3]; 3], p: [f64; 3], h: f64) -> [[[f64; 3]; 3]; 3] {
    let mut out = [[[0.0; 3]; 3]; 3];
    for j in 0..3 {
        let (mut a, mut b) = (p, p);
        a[j] += h;
        b[j] -= h;
        let (ja, jb) = (jac(a), jac(b));
        for k in 0..3 {
            for i in 0..3 {
                out[k][i][j] = (ja[k][i] - jb[k][i]) / (2.0 * h);
            }
        }
    }
    out
}

/// Analytic derivatives packed for the value-level loss functions.
pub fn derivs_from(u: [f64; 3], jac: [[f64; 3]; 3], hess: [[[f64; 3]; 3]; 3]) -> PointDerivatives<f64> {
    PointDerivatives { u, jac, hess }
}

/// Stratified points: one uniform sample in each cell of an `n³` lattice
/// over `[-1, 1]³`.
pub fn stratified_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = 2.0 / n as f64;
    let mut out = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let idx = [x, y, z];
                out.push(std::array::from_fn(|a| -1.0 + cell * (idx[a] as f64 + rng.random_range(0.0..1.0))));
            }
        }
    }
    out
}

pub fn read_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Cast check so f32 models can be compared against f64 references.
pub fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// Derivatives of an analytic field at `points`, with the Hessian obtained
/// by differencing the analytic Jacobian.
pub fn analytic_derivs(
    u: impl Fn([f64; 3]) -> [f64; 3],
    jac: impl Fn([f64; 3]) -> [[f64; 3]; 3],
    points: &[[f64; 3]],
) -> Vec<PointDerivatives<f64>> {
    points
        .iter()
        .map(|&p| derivs_from(u(p), jac(p), hessian_from_jacobian(&jac, p, 1e-4)))
        .collect()
}

/// Regularizer values on fields with closed-form answers.
pub mod oracles {
    use super::*;
    use inrreg::losses::{bending_value, hyperelastic_value, jacobian_value};
    use inrreg::synth::{analytic_bending, FieldKind, SynthModel, SynthSpec};

    /// Bending energy of the affine synthetic field (expected exactly 0).
    pub fn bending_of_affine() -> f64 {
        let spec = SynthSpec {
            kind: FieldKind::Affine,
            amplitude: 0.3,
            ..SynthSpec::default()
        };
        let m = SynthModel::new(&spec).unwrap();
        let pts = stratified_points(10, 1);
        bending_value(&analytic_derivs(|p| m.displacement(p), |p| m.jacobian(p), &pts)).unwrap()
    }

    /// Bending energy of `u_x = x²` on stratified points (expected 4).
    pub fn bending_of_square() -> f64 {
        let pts = stratified_points(20, 2);
        let derivs = analytic_derivs(
            |p| [p[0] * p[0], 0.0, 0.0],
            |p| {
                let mut j = [[0.0; 3]; 3];
                j[0][0] = 2.0 * p[0];
                j
            },
            &pts,
        );
        bending_value(&derivs).unwrap()
    }

    /// Monte-Carlo bending energy of the sinusoid synthetic field at `n`
    /// uniform points, and its closed form.
    pub fn sinusoid_bending(n: usize, seed: u64) -> (f64, f64) {
        let spec = SynthSpec {
            kind: FieldKind::Sinusoid,
            amplitude: 0.2,
            ..SynthSpec::default()
        };
        let m = SynthModel::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let est = bending_value(&analytic_derivs(|p| m.displacement(p), |p| m.jacobian(p), &pts)).unwrap();
        (est, analytic_bending(&spec).unwrap())
    }

    fn scaled_identity(s: f64, n: usize) -> Vec<PointDerivatives<f64>> {
        let mut d = PointDerivatives::zero();
        for k in 0..3 {
            d.jac[k][k] = s - 1.0;
        }
        vec![d; n]
    }

    /// Jacobian penalty of `φ(x) = 2x` (expected exactly 7).
    pub fn jacobian_of_doubling() -> f64 {
        jacobian_value(&scaled_identity(2.0, 9)).unwrap()
    }

    /// Hyperelastic penalty of the identity map (expected exactly 0).
    pub fn hyperelastic_of_identity() -> f64 {
        hyperelastic_value(&scaled_identity(1.0, 9), &HyperelasticWeights::default()).unwrap()
    }
}
