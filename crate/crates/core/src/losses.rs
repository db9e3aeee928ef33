//! Similarity and regularization terms as Monte-Carlo estimates over a point
//! batch, and their combination into the training objective.
//!
//! Every term is built on a [`Graph`] from the derivative nodes of the
//! network, so parameter gradients follow from one reverse sweep. The
//! `*_value` helpers evaluate the same code on plain per-point records.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{cofactor3, det3, AutodiffError, Graph, NodeId, Real, Tensor, HESSIAN_PAIRS};
use crate::nets::{DerivNodes, DerivOrder, PointDerivatives};

/// Stabilizer added to each variance in the correlation.
pub const NCC_EPS: f64 = 1e-8;
/// Lower guard on the determinant in the volume term.
pub const VOLUME_EPS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("correlation needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("batch sizes differ: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("conditioned mode requires alpha in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("baseline mode requires a finite alpha >= 0, got {0}")]
    NegativeAlpha(f64),
    #[error("{0} derivatives were not propagated")]
    MissingDerivatives(&'static str),
    #[error("invalid hyperelastic weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Weights of the length, area and volume terms of the hyperelastic penalty.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperelasticWeights {
    pub alpha_l: f64,
    pub alpha_a: f64,
    pub alpha_v: f64,
}

impl Default for HyperelasticWeights {
    fn default() -> Self {
        Self {
            alpha_l: 1.0,
            alpha_a: 1.0,
            alpha_v: 1.0,
        }
    }
}

impl HyperelasticWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("alpha_l", self.alpha_l), ("alpha_a", self.alpha_a), ("alpha_v", self.alpha_v)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Regularizer on the displacement field.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Regularizer {
    /// Mean `|det ∇φ − 1|`.
    Jacobian,
    /// Length, area and volume penalties on `∇φ`.
    Hyperelastic(HyperelasticWeights),
    /// Mean squared second derivatives.
    Bending,
}

impl Regularizer {
    /// Derivative order the network must propagate for this term.
    pub fn order(&self) -> DerivOrder {
        match self {
            Regularizer::Jacobian | Regularizer::Hyperelastic(_) => DerivOrder::First,
            Regularizer::Bending => DerivOrder::Second,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::Jacobian => "jacobian",
            Regularizer::Hyperelastic(_) => "hyperelastic",
            Regularizer::Bending => "bending",
        }
    }

    pub fn node<T: Real>(&self, g: &mut Graph<T>, d: &DerivNodes) -> Result<NodeId, LossError> {
        match self {
            Regularizer::Jacobian => jacobian_penalty(g, d),
            Regularizer::Hyperelastic(w) => hyperelastic_penalty(g, d, w),
            Regularizer::Bending => bending_penalty(g, d),
        }
    }
}

/// How the similarity and regularizer are weighted.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// `(1 − α)·sim + α·reg` with `α ∈ [0, 1]`.
    Conditioned,
    /// `sim + α·reg` with any `α ≥ 0`.
    Baseline,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub sim: T,
    pub reg: T,
    pub total: T,
    pub alpha: T,
}

/// `1 − NCC` of two same-shaped batches.
pub fn ncc_loss<T: Real>(g: &mut Graph<T>, u: NodeId, v: NodeId) -> Result<NodeId, LossError> {
    let (nu, nv) = (g.value(u).numel(), g.value(v).numel());
    if nu != nv {
        return Err(LossError::BatchMismatch(nu, nv));
    }
    if nu < 2 {
        return Err(LossError::BatchTooSmall(nu));
    }
    if g.shape(u) != g.shape(v) {
        return Err(LossError::Autodiff(AutodiffError::ShapeMismatch {
            op: "ncc_loss",
            shapes: vec![g.shape(u).to_vec(), g.shape(v).to_vec()],
        }));
    }
    let centered = |g: &mut Graph<T>, x: NodeId| -> Result<(NodeId, NodeId), LossError> {
        let m = g.mean(x)?;
        let dx = g.sub(x, m)?;
        let sq = g.square(dx)?;
        let var = g.mean(sq)?;
        let var = g.add_const(var, T::lit(NCC_EPS))?;
        Ok((dx, g.sqrt(var)?))
    };
    let (du, su) = centered(g, u)?;
    let (dv, sv) = centered(g, v)?;
    let p = g.mul(du, dv)?;
    let cov = g.mean(p)?;
    let den = g.mul(su, sv)?;
    let ncc = g.div(cov, den)?;
    let neg = g.neg(ncc)?;
    Ok(g.add_const(neg, T::one())?)
}

/// Entries of `∇φ = I + ∇u`, each of shape `(1, N, 1)`.
pub fn deformation_gradient_nodes<T: Real>(g: &mut Graph<T>, d: &DerivNodes) -> Result<[[NodeId; 3]; 3], LossError> {
    if d.jac.is_none() {
        return Err(LossError::MissingDerivatives("first"));
    }
    let mut f = [[d.u; 3]; 3];
    for (k, row) in f.iter_mut().enumerate() {
        for (j, entry) in row.iter_mut().enumerate() {
            let e = d.jac_entry(g, k, j)?;
            *entry = if k == j { g.add_const(e, T::one())? } else { e };
        }
    }
    Ok(f)
}

/// Mean over points of `|det(I + ∇u) − 1|`.
pub fn jacobian_penalty<T: Real>(g: &mut Graph<T>, d: &DerivNodes) -> Result<NodeId, LossError> {
    let f = deformation_gradient_nodes(g, d)?;
    let det = det3(g, &f)?;
    let dev = g.add_const(det, -T::one())?;
    let abs = g.abs(dev)?;
    Ok(g.mean(abs)?)
}

/// Mean over points of `½·α_l·‖∇u‖² + α_a·φ_c(cof ∇φ) + α_v·ψ(det ∇φ)` with
/// `φ_c(C) = Σ_j max(‖C e_j‖² − 1, 0)²` and
/// `ψ(v) = ((v − 1)² / max(v, 1e-3))²`.
pub fn hyperelastic_penalty<T: Real>(
    g: &mut Graph<T>,
    d: &DerivNodes,
    w: &HyperelasticWeights,
) -> Result<NodeId, LossError> {
    w.validate()?;
    let jac = d.jac.ok_or(LossError::MissingDerivatives("first"))?;
    let n = T::lit(d.n as f64);
    let mut terms = Vec::new();

    if w.alpha_l != 0.0 {
        let sq = g.square(jac)?;
        let s = g.sum(sq)?;
        terms.push(g.mul_const(s, T::lit(0.5 * w.alpha_l) / n)?);
    }
    let need_f = w.alpha_a != 0.0 || w.alpha_v != 0.0;
    let f = if need_f { Some(deformation_gradient_nodes(g, d)?) } else { None };
    if let (Some(f), true) = (&f, w.alpha_a != 0.0) {
        let c = cofactor3(g, f)?;
        let mut acc: Option<NodeId> = None;
        for j in 0..3 {
            let mut norm: Option<NodeId> = None;
            for row in &c {
                let sq = g.square(row[j])?;
                norm = Some(match norm {
                    Some(a) => g.add(a, sq)?,
                    None => sq,
                });
            }
            let excess = g.add_const(norm.expect("three rows"), -T::one())?;
            let hinge = g.max_with_constant(excess, T::zero())?;
            let sq = g.square(hinge)?;
            acc = Some(match acc {
                Some(a) => g.add(a, sq)?,
                None => sq,
            });
        }
        let s = g.sum(acc.expect("three columns"))?;
        terms.push(g.mul_const(s, T::lit(w.alpha_a) / n)?);
    }
    if let (Some(f), true) = (&f, w.alpha_v != 0.0) {
        let det = det3(g, f)?;
        let dev = g.add_const(det, -T::one())?;
        let num = g.square(dev)?;
        let den = g.max_with_constant(det, T::lit(VOLUME_EPS))?;
        let ratio = g.div(num, den)?;
        let psi = g.square(ratio)?;
        let s = g.sum(psi)?;
        terms.push(g.mul_const(s, T::lit(w.alpha_v) / n)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Ok(g.constant_scalar(T::zero())),
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Mean over points of `Σ_k (H_xx² + H_yy² + H_zz² + 2H_xy² + 2H_xz² + 2H_yz²)`.
pub fn bending_penalty<T: Real>(g: &mut Graph<T>, d: &DerivNodes) -> Result<NodeId, LossError> {
    let hess = d.hess.ok_or(LossError::MissingDerivatives("second"))?;
    let diag: Vec<usize> = HESSIAN_PAIRS.iter().enumerate().filter(|(_, (i, j))| i == j).map(|(q, _)| q).collect();
    let off: Vec<usize> = HESSIAN_PAIRS.iter().enumerate().filter(|(_, (i, j))| i != j).map(|(q, _)| q).collect();
    let hd = g.select_blocks(hess, &diag)?;
    let ho = g.select_blocks(hess, &off)?;
    let sd = g.square(hd)?;
    let so = g.square(ho)?;
    let sd = g.sum(sd)?;
    let so = g.sum(so)?;
    let so = g.mul_const(so, T::lit(2.0))?;
    let s = g.add(sd, so)?;
    Ok(g.mul_const(s, T::one() / T::lit(d.n as f64))?)
}

/// Combine similarity and regularizer nodes. Returns the total node.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    sim: NodeId,
    reg: NodeId,
    alpha: f64,
    mode: LossMode,
) -> Result<NodeId, LossError> {
    check_alpha(alpha, mode)?;
    let weighted_reg = g.mul_const(reg, T::lit(alpha))?;
    let weighted_sim = match mode {
        LossMode::Conditioned => g.mul_const(sim, T::lit(1.0 - alpha))?,
        LossMode::Baseline => sim,
    };
    Ok(g.add(weighted_sim, weighted_reg)?)
}

pub fn check_alpha(alpha: f64, mode: LossMode) -> Result<(), LossError> {
    match mode {
        LossMode::Conditioned if !(0.0..=1.0).contains(&alpha) => Err(LossError::AlphaOutOfRange(alpha)),
        LossMode::Baseline if !(alpha >= 0.0 && alpha.is_finite()) => Err(LossError::NegativeAlpha(alpha)),
        _ => Ok(()),
    }
}

/// Scalar combination with the same arithmetic as [`combined_loss`].
pub fn combine_values(sim: f64, reg: f64, alpha: f64, mode: LossMode) -> Result<LossBreakdown<f64>, LossError> {
    check_alpha(alpha, mode)?;
    let total = match mode {
        LossMode::Conditioned => sim * (1.0 - alpha) + reg * alpha,
        LossMode::Baseline => sim + reg * alpha,
    };
    Ok(LossBreakdown {
        sim,
        reg,
        total,
        alpha,
    })
}

/// Record per-point derivative records as constant graph nodes.
pub fn constant_derivs<T: Real>(g: &mut Graph<T>, derivs: &[PointDerivatives<T>]) -> Result<DerivNodes, LossError> {
    let n = derivs.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let mut u = Vec::with_capacity(n * 3);
    let mut jac = vec![T::zero(); 3 * n * 3];
    let mut hess = vec![T::zero(); 6 * n * 3];
    for (p, d) in derivs.iter().enumerate() {
        u.extend_from_slice(&d.u);
        for k in 0..3 {
            for j in 0..3 {
                jac[j * n * 3 + p * 3 + k] = d.jac[k][j];
            }
            for (q, &(i, j)) in HESSIAN_PAIRS.iter().enumerate() {
                hess[q * n * 3 + p * 3 + k] = d.hess[k][i][j];
            }
        }
    }
    Ok(DerivNodes {
        u: g.constant(Tensor::new(vec![1, n, 3], u)?),
        jac: Some(g.constant(Tensor::new(vec![3, n, 3], jac)?)),
        hess: Some(g.constant(Tensor::new(vec![6, n, 3], hess)?)),
        n,
    })
}

fn eval_on_records<T: Real>(
    derivs: &[PointDerivatives<T>],
    f: impl FnOnce(&mut Graph<T>, &DerivNodes) -> Result<NodeId, LossError>,
) -> Result<T, LossError> {
    let mut g = Graph::new();
    let d = constant_derivs(&mut g, derivs)?;
    let out = f(&mut g, &d)?;
    Ok(g.scalar(out))
}

/// `1 − NCC` of two plain batches.
pub fn ncc_value<T: Real>(u: &[T], v: &[T]) -> Result<T, LossError> {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(u.to_vec()));
    let b = g.constant(Tensor::vector(v.to_vec()));
    let l = ncc_loss(&mut g, a, b)?;
    Ok(g.scalar(l))
}

pub fn jacobian_value<T: Real>(derivs: &[PointDerivatives<T>]) -> Result<T, LossError> {
    eval_on_records(derivs, jacobian_penalty)
}

pub fn hyperelastic_value<T: Real>(derivs: &[PointDerivatives<T>], w: &HyperelasticWeights) -> Result<T, LossError> {
    eval_on_records(derivs, |g, d| hyperelastic_penalty(g, d, w))
}

pub fn bending_value<T: Real>(derivs: &[PointDerivatives<T>]) -> Result<T, LossError> {
    eval_on_records(derivs, bending_penalty)
}

pub fn regularizer_value<T: Real>(reg: &Regularizer, derivs: &[PointDerivatives<T>]) -> Result<T, LossError> {
    eval_on_records(derivs, |g, d| reg.node(g, d))
}
