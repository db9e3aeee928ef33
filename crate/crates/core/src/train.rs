//! Training loop: per-epoch α draws, masked point batches, the similarity plus
//! regularizer objective and Adam updates.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamId, Real, Tensor};
use crate::losses::{self, HyperelasticWeights, LossError, LossMode, Regularizer};
use crate::nets::{init, Model, NetConfig, NetError, Propagation};
use crate::volume::{Mask, MaskSampler, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("numeric failure at epoch {epoch} (alpha = {alpha}): {detail}")]
    Numeric { epoch: usize, alpha: f64, detail: String },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Whether the failure comes from non-finite arithmetic rather than from
    /// inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::Numeric { .. }
                | TrainError::NonFiniteGradient { .. }
                | TrainError::Autodiff(AutodiffError::NonFinite { .. })
                | TrainError::Net(NetError::Autodiff(AutodiffError::NonFinite { .. }))
                | TrainError::Loss(LossError::Autodiff(AutodiffError::NonFinite { .. }))
        )
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    Jacobian,
    Hyperelastic,
    Bending,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatMode {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_points: usize,
    pub learning_rate: f64,
    pub mode: LossMode,
    /// Regularization weight in baseline mode.
    pub baseline_alpha: f64,
    pub reg: RegKind,
    pub hyper: HyperelasticWeights,
    pub seed: u64,
    pub net: NetConfig,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub float: FloatMode,
    /// Spread samples uniformly inside their voxels.
    pub jitter: bool,
    /// Rescale the global gradient norm to at most this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50_000,
            batch_points: 10_000,
            learning_rate: 1e-4,
            mode: LossMode::Conditioned,
            baseline_alpha: 10.0,
            reg: RegKind::Bending,
            hyper: HyperelasticWeights::default(),
            seed: 0,
            net: NetConfig::default(),
            checkpoint_every: 0,
            float: FloatMode::F32,
            jitter: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn regularizer(&self) -> Regularizer {
        match self.reg {
            RegKind::Jacobian => Regularizer::Jacobian,
            RegKind::Hyperelastic => Regularizer::Hyperelastic(self.hyper),
            RegKind::Bending => Regularizer::Bending,
        }
    }

    /// Network configuration with conditioning matching the loss mode.
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            conditioned: self.mode == LossMode::Conditioned,
            ..self.net.clone()
        }
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs < 1 {
            out.push("epochs must be >= 1".to_string());
        }
        if self.batch_points < 2 {
            out.push(format!("batch_points must be >= 2, got {}", self.batch_points));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.mode == LossMode::Baseline {
            if let Err(e) = losses::check_alpha(self.baseline_alpha, LossMode::Baseline) {
                out.push(e.to_string());
            }
        }
        if let Err(e) = self.hyper.validate() {
            out.push(e.to_string());
        }
        if self.net.main_hidden.is_empty() || self.net.main_hidden.contains(&0) {
            out.push("net.main_hidden must list positive widths".to_string());
        }
        if self.mode == LossMode::Conditioned
            && (self.net.harmonizer_hidden.is_empty() || self.net.harmonizer_hidden.contains(&0))
        {
            out.push("net.harmonizer_hidden must list positive widths".to_string());
        }
        if !(self.net.omega0 > 0.0 && self.net.omega0.is_finite()) {
            out.push(format!("net.omega0 must be > 0, got {}", self.net.omega0));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                out.push(format!("grad_clip must be > 0, got {c}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(p))
        }
    }
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. All gradients are checked before any
/// parameter changes.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config(vec![format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )]));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(TrainError::Config(vec![format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )]));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient { param: i });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let one = T::one();
    let c1 = one - T::lit(state.beta1.powi(t));
    let c2 = one - T::lit(state.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(state.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gr;
            *vi = b2 * *vi + (one - b2) * gr * gr;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One row of the loss log.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: Vec<EpochRecord>,
}

/// Moving and fixed images prepared for training.
pub struct TrainingPair {
    moving: Volume,
    fixed: Volume,
    sampler: MaskSampler,
}

impl TrainingPair {
    pub fn new(moving: &Volume, fixed: &Volume, mask: &Mask, jitter: bool) -> Result<Self, TrainError> {
        moving.check_same_grid(fixed)?;
        moving.check_same_grid(mask.volume())?;
        Ok(Self {
            moving: moving.min_max_normalized(),
            fixed: fixed.min_max_normalized(),
            sampler: MaskSampler::new(mask, jitter)?,
        })
    }
}

/// Values of one objective evaluation and the parameter gradients.
pub struct StepResult<T> {
    pub sim: f64,
    pub reg: f64,
    pub total: f64,
    pub grads: Vec<Tensor<T>>,
}

/// Evaluate the objective on one batch and differentiate it.
pub fn objective_and_gradients<T: Real>(
    model: &Model<T>,
    pair: &TrainingPair,
    points: &[[f64; 3]],
    alpha: f64,
    reg: &Regularizer,
    mode: LossMode,
) -> Result<StepResult<T>, TrainError> {
    let n = points.len();
    let normalized: Vec<[T; 3]> = points
        .iter()
        .map(|&v| pair.moving.to_normalized(v).map(T::lit))
        .collect();
    let moving_vals: Vec<T> = points.iter().map(|&v| T::lit(pair.moving.sample_voxel(v))).collect();

    let mut g = Graph::<T>::new();
    let bound = model.bind(&mut g, true);
    let alpha_node = model
        .is_conditioned()
        .then(|| Tensor::new(vec![1, 1], vec![T::lit(alpha)]).map(|t| g.constant(t)))
        .transpose()?;
    let act = bound.activation(&mut g, alpha_node)?;
    let derivs = bound.forward(&mut g, &normalized, act, reg.order(), Propagation::Fused)?;
    let x = g.constant(Tensor::new(vec![1, n, 3], normalized.iter().flatten().copied().collect())?);
    let warped = g.add(x, derivs.u)?;
    let fixed_vals = pair.fixed.sample_node(&mut g, warped)?;
    let moving_node = g.constant(Tensor::vector(moving_vals));
    let sim = losses::ncc_loss(&mut g, moving_node, fixed_vals)?;
    let reg_node = reg.node(&mut g, &derivs)?;
    let total = losses::combined_loss(&mut g, sim, reg_node, alpha, mode)?;
    let grads = g.backward(total)?;
    let count = model.params().len();
    let grads = (0..count)
        .map(|i| grads.param(ParamId(i)).cloned().expect("every parameter is bound"))
        .collect();
    Ok(StepResult {
        sim: g.scalar(sim).as_f64(),
        reg: g.scalar(reg_node).as_f64(),
        total: g.scalar(total).as_f64(),
        grads,
    })
}

fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
}

/// Seeded initialization followed by [`train_model`].
pub fn train<T: Real>(
    moving: &Volume,
    fixed: &Volume,
    mask: &Mask,
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochRecord, &Model<T>) -> Result<(), TrainError>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let model = init::<T>(cfg.seed, &cfg.net_config());
    train_model(model, moving, fixed, mask, cfg, observer)
}

/// Optimize `model` for `cfg.epochs` epochs. `observer` sees each epoch's
/// record together with the parameters after that epoch's update.
pub fn train_model<T: Real>(
    mut model: Model<T>,
    moving: &Volume,
    fixed: &Volume,
    mask: &Mask,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &Model<T>) -> Result<(), TrainError>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if model.is_conditioned() != (cfg.mode == LossMode::Conditioned) {
        return Err(TrainError::Config(vec![format!(
            "{:?} mode does not match a {} model",
            cfg.mode,
            if model.is_conditioned() { "conditioned" } else { "baseline" }
        )]));
    }
    let pair = TrainingPair::new(moving, fixed, mask, cfg.jitter)?;
    let reg = cfg.regularizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(&model.params());
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let alpha = match cfg.mode {
            LossMode::Conditioned => rng.random::<f64>(),
            LossMode::Baseline => cfg.baseline_alpha,
        };
        let batch = pair.sampler.sample(cfg.batch_points, &mut rng);
        let positions: Vec<[f64; 3]> = batch.iter().map(|p| p.position).collect();
        let step = objective_and_gradients(&model, &pair, &positions, alpha, &reg, cfg.mode).map_err(|e| {
            if e.is_numeric() {
                TrainError::Numeric {
                    epoch,
                    alpha,
                    detail: e.to_string(),
                }
            } else {
                e
            }
        })?;
        if !step.total.is_finite() {
            return Err(TrainError::Numeric {
                epoch,
                alpha,
                detail: format!("sim = {}, reg = {}, total = {}", step.sim, step.reg, step.total),
            });
        }
        let mut grads = step.grads;
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
        adam_step(&mut model.params_mut(), &grad_refs, &mut adam, cfg.learning_rate).map_err(|e| match e {
            TrainError::NonFiniteGradient { param } => TrainError::Numeric {
                epoch,
                alpha,
                detail: format!(
                    "non-finite gradient for parameter {param} (sim = {}, reg = {})",
                    step.sim, step.reg
                ),
            },
            other => other,
        })?;
        let record = EpochRecord {
            epoch,
            alpha,
            sim: step.sim,
            reg: step.reg,
            total: step.total,
        };
        if epoch % 100 == 0 || epoch + 1 == cfg.epochs {
            log::info!(
                "epoch {epoch}: alpha {alpha:.3} sim {:.5} reg {:.5} total {:.5}",
                record.sim,
                record.reg,
                record.total
            );
        }
        observer(&record, &model)?;
        log.push(record);
    }
    Ok(TrainOutcome { model, log })
}

/// Write the loss log as CSV `epoch,alpha,sim,reg,total`.
pub fn write_loss_log(path: &Path, log: &[EpochRecord]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,alpha,sim,reg,total\n");
    for r in log {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.alpha, r.sim, r.reg, r.total));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochRecord>, TrainError> {
    let bad = |e: csv::Error| TrainError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()));
    let mut rdr = csv::Reader::from_path(path).map_err(bad)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(bad)?;
        let num = |i: usize| -> Result<f64, TrainError> {
            row.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
                TrainError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("malformed loss log row {row:?}"),
                ))
            })
        };
        out.push(EpochRecord {
            epoch: num(0)? as usize,
            alpha: num(1)?,
            sim: num(2)?,
            reg: num(3)?,
            total: num(4)?,
        });
    }
    Ok(out)
}
