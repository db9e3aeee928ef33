//! Coordinate network with parameterized sine activations and the harmonizer
//! that predicts the activation parameters from the regularization weight.
//!
//! The main network maps a normalized coordinate `x ∈ [-1, 1]³` to a
//! displacement `u(x)`, so the deformation is `φ(x) = x + u(x)`. Every hidden
//! layer applies `a·sin(b·z + c) + d` with one `(a, b, c, d)` quadruple shared
//! across layers. In conditioned mode the quadruple is the output of the
//! harmonizer evaluated at `α`; in baseline mode it is fixed to `(1, ω₀, 0, 0)`,
//! which is a plain sine network.
//!
//! Input derivatives are carried through the layers as a channel stack of
//! shape `(C, N, width)`: channel 0 is the value, channels 1..=3 the first
//! derivatives along x, y, z, and channels 4..10 the second derivatives in
//! [`HESSIAN_PAIRS`] order. For a layer `y = σ(W·s + β)` the stack obeys
//! `J_y = σ'·W·J_s` and `H_y = σ''·(W·J_s)⊗(W·J_s) + σ'·W·H_s`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, Real, Tensor, HESSIAN_PAIRS};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("empty point batch")]
    EmptyBatch,
    #[error("alpha must be finite, got {0}")]
    NonFiniteAlpha(f64),
    #[error("model is not conditioned; it has no harmonizer")]
    NotConditioned,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameters of `σ(x) = a·sin(b·x + c) + d`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ActivationParams<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
}

impl<T: Real> ActivationParams<T> {
    /// Standard sine activation with frequency `omega0`.
    pub fn sine(omega0: f64) -> Self {
        Self {
            a: T::one(),
            b: T::lit(omega0),
            c: T::zero(),
            d: T::zero(),
        }
    }

    pub fn to_tensor(self) -> Tensor<T> {
        Tensor::new(vec![1, 4], vec![self.a, self.b, self.c, self.d]).expect("4 values")
    }

    pub fn is_finite(&self) -> bool {
        [self.a, self.b, self.c, self.d].iter().all(|v| v.is_finite())
    }
}

/// How many input-derivative channels to propagate.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DerivOrder {
    Value,
    First,
    Second,
}

impl DerivOrder {
    pub fn channels(self) -> usize {
        match self {
            DerivOrder::Value => 1,
            DerivOrder::First => 4,
            DerivOrder::Second => 10,
        }
    }
}

/// Implementation route of the activation's derivative propagation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default)]
pub enum Propagation {
    /// One recorded op per layer with a hand-derived reverse rule.
    #[default]
    Fused,
    /// The same rule spelled out with elementary ops; slower, used as a
    /// cross-check.
    Composed,
}

/// Layer widths and activation settings; written into checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    /// Main network widths including the 3-D input and output.
    pub main: Vec<usize>,
    /// Harmonizer widths including the scalar input and the 4 outputs;
    /// `None` for an unconditioned network.
    pub harmonizer: Option<Vec<usize>>,
    pub omega0: f64,
    pub shared_activation: bool,
}

impl Architecture {
    pub fn is_conditioned(&self) -> bool {
        self.harmonizer.is_some()
    }

    /// Number of scalar parameters in declared order.
    pub fn param_count(&self) -> usize {
        let linear = |w: &[usize]| w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>();
        let ln = |w: &[usize]| w[1..w.len() - 1].iter().map(|h| 2 * h).sum::<usize>();
        let h = self.harmonizer.as_deref().map(|w| linear(w) + ln(w)).unwrap_or(0);
        h + linear(&self.main)
    }
}

/// Network hyperparameters for [`init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub main_hidden: Vec<usize>,
    pub harmonizer_hidden: Vec<usize>,
    pub omega0: f64,
    pub conditioned: bool,
    /// Extra factor on the output layers' initial weights so training starts
    /// near the identity map and near the plain sine activation.
    pub output_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            main_hidden: vec![256, 256, 256],
            harmonizer_hidden: vec![128, 64, 32],
            omega0: 30.0,
            conditioned: true,
            output_scale: 0.1,
        }
    }
}

impl NetConfig {
    pub fn architecture(&self) -> Architecture {
        let mut main = vec![3];
        main.extend(&self.main_hidden);
        main.push(3);
        let harmonizer = self.conditioned.then(|| {
            let mut w = vec![1];
            w.extend(&self.harmonizer_hidden);
            w.push(4);
            w
        });
        Architecture {
            main,
            harmonizer,
            omega0: self.omega0,
            shared_activation: true,
        }
    }
}

/// Dense layer `y = x·W + β` with `W` stored as `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Hidden harmonizer block: linear, layer norm, SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct NormBlock<T> {
    pub linear: Linear<T>,
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Harmonizer<T> {
    pub hidden: Vec<NormBlock<T>>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MainNet<T> {
    pub hidden: Vec<Linear<T>>,
    pub output: Linear<T>,
}

/// Harmonizer (optional) plus main network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub harmonizer: Option<Harmonizer<T>>,
    pub main: MainNet<T>,
}

/// First and second input derivatives of `u` at one point.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct PointDerivatives<T> {
    pub u: [T; 3],
    /// `jac[k][j] = ∂u_k/∂x_j`.
    pub jac: [[T; 3]; 3],
    /// `hess[k][i][j] = ∂²u_k/∂x_i∂x_j`.
    pub hess: [[[T; 3]; 3]; 3],
}

impl<T: Real> PointDerivatives<T> {
    pub fn zero() -> Self {
        let z = T::zero();
        Self {
            u: [z; 3],
            jac: [[z; 3]; 3],
            hess: [[[z; 3]; 3]; 3],
        }
    }

    /// `∇φ = I + ∇u`.
    pub fn deformation_gradient(&self) -> [[T; 3]; 3] {
        let mut f = self.jac;
        for (i, row) in f.iter_mut().enumerate() {
            row[i] = row[i] + T::one();
        }
        f
    }

    pub fn det(&self) -> T {
        let f = self.deformation_gradient();
        f[0][0] * (f[1][1] * f[2][2] - f[1][2] * f[2][1]) - f[0][1] * (f[1][0] * f[2][2] - f[1][2] * f[2][0])
            + f[0][2] * (f[1][0] * f[2][1] - f[1][1] * f[2][0])
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Seeded initialization.
///
/// Main network: first layer `U(±1/fan_in)`, later layers
/// `U(±√(6/fan_in)/ω₀)`, biases `U(±1/√fan_in)`; the output layer is further
/// scaled by `output_scale`. Harmonizer: weights `U(±√(6/fan_in))`, layer
/// norm gain 1 and bias 0, output weights scaled by `output_scale` and output
/// bias `(1, ω₀, 0, 0)`.
pub fn init<T: Real>(seed: u64, cfg: &NetConfig) -> Model<T> {
    let arch = cfg.architecture();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let harmonizer = arch.harmonizer.as_ref().map(|w| {
        let mut hidden = Vec::new();
        for pair in w[..w.len() - 1].windows(2) {
            let (fi, fo) = (pair[0], pair[1]);
            let bound = (6.0 / fi as f64).sqrt();
            hidden.push(NormBlock {
                linear: Linear {
                    weight: uniform_tensor(&mut rng, vec![fi, fo], bound).cast(),
                    bias: uniform_tensor(&mut rng, vec![fo], 1.0 / (fi as f64).sqrt()).cast(),
                },
                ln_gain: Tensor::full(vec![fo], T::one()),
                ln_bias: Tensor::zeros(vec![fo]),
            });
        }
        let fi = w[w.len() - 2];
        let bound = (6.0 / fi as f64).sqrt() * cfg.output_scale;
        Harmonizer {
            hidden,
            output: Linear {
                weight: uniform_tensor(&mut rng, vec![fi, 4], bound).cast(),
                bias: ActivationParams::<T>::sine(cfg.omega0).to_tensor().reshaped(vec![4]).expect("4"),
            },
        }
    });
    let w = &arch.main;
    let mut layers = Vec::new();
    for (l, pair) in w.windows(2).enumerate() {
        let (fi, fo) = (pair[0], pair[1]);
        let is_out = l == w.len() - 2;
        let mut bound = if l == 0 {
            1.0 / fi as f64
        } else {
            (6.0 / fi as f64).sqrt() / cfg.omega0
        };
        let mut bias_bound = 1.0 / (fi as f64).sqrt();
        if is_out {
            bound *= cfg.output_scale;
            bias_bound *= cfg.output_scale;
        }
        layers.push(Linear {
            weight: uniform_tensor(&mut rng, vec![fi, fo], bound).cast(),
            bias: uniform_tensor(&mut rng, vec![fo], bias_bound).cast(),
        });
    }
    let output = layers.pop().expect("output layer");
    Model {
        arch,
        harmonizer,
        main: MainNet { hidden: layers, output },
    }
}

impl<T: Real> Model<T> {
    /// All-zero parameters with the given architecture.
    pub fn zeros(arch: Architecture) -> Self {
        let harmonizer = arch.harmonizer.as_ref().map(|w| Harmonizer {
            hidden: w[..w.len() - 1]
                .windows(2)
                .map(|p| NormBlock {
                    linear: Linear::zeros(p[0], p[1]),
                    ln_gain: Tensor::zeros(vec![p[1]]),
                    ln_bias: Tensor::zeros(vec![p[1]]),
                })
                .collect(),
            output: Linear::zeros(w[w.len() - 2], w[w.len() - 1]),
        });
        let mut layers: Vec<_> = arch.main.windows(2).map(|p| Linear::zeros(p[0], p[1])).collect();
        let output = layers.pop().expect("output layer");
        Self {
            arch,
            harmonizer,
            main: MainNet { hidden: layers, output },
        }
    }

    pub fn is_conditioned(&self) -> bool {
        self.harmonizer.is_some()
    }

    /// Parameters in checkpoint order: harmonizer layers (weight, bias,
    /// layer-norm gain, layer-norm bias), harmonizer output, then main layers.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        if let Some(h) = &self.harmonizer {
            for b in &h.hidden {
                out.extend([&b.linear.weight, &b.linear.bias, &b.ln_gain, &b.ln_bias]);
            }
            out.extend([&h.output.weight, &h.output.bias]);
        }
        for l in self.main.hidden.iter().chain(std::iter::once(&self.main.output)) {
            out.extend([&l.weight, &l.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(h) = &mut self.harmonizer {
            for b in &mut h.hidden {
                out.push(&mut b.linear.weight);
                out.push(&mut b.linear.bias);
                out.push(&mut b.ln_gain);
                out.push(&mut b.ln_bias);
            }
            out.push(&mut h.output.weight);
            out.push(&mut h.output.bias);
        }
        for l in self.main.hidden.iter_mut().chain(std::iter::once(&mut self.main.output)) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            harmonizer: self.harmonizer.as_ref().map(|h| Harmonizer {
                hidden: h
                    .hidden
                    .iter()
                    .map(|b| NormBlock {
                        linear: b.linear.cast(),
                        ln_gain: b.ln_gain.cast(),
                        ln_bias: b.ln_bias.cast(),
                    })
                    .collect(),
                output: h.output.cast(),
            }),
            main: MainNet {
                hidden: self.main.hidden.iter().map(Linear::cast).collect(),
                output: self.main.output.cast(),
            },
        }
    }

    /// Record every parameter on `g`, as trainable leaves (ids in declared
    /// order) or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let mut next = 0usize;
        let mut leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            let id = if trainable {
                g.param(ParamId(next), t.clone())
            } else {
                g.constant(t.clone())
            };
            next += 1;
            id
        };
        let harmonizer = self.harmonizer.as_ref().map(|h| {
            let hidden = h
                .hidden
                .iter()
                .map(|b| BoundNormBlock {
                    linear: BoundLinear {
                        weight: leaf(g, &b.linear.weight),
                        bias: leaf(g, &b.linear.bias),
                    },
                    ln_gain: leaf(g, &b.ln_gain),
                    ln_bias: leaf(g, &b.ln_bias),
                })
                .collect();
            let output = BoundLinear {
                weight: leaf(g, &h.output.weight),
                bias: leaf(g, &h.output.bias),
            };
            BoundHarmonizer { hidden, output }
        });
        let hidden = self
            .main
            .hidden
            .iter()
            .map(|l| BoundLinear {
                weight: leaf(g, &l.weight),
                bias: leaf(g, &l.bias),
            })
            .collect();
        let output = BoundLinear {
            weight: leaf(g, &self.main.output.weight),
            bias: leaf(g, &self.main.output.bias),
        };
        BoundModel {
            omega0: self.arch.omega0,
            harmonizer,
            hidden,
            output,
        }
    }

    /// Activation parameters predicted for `alpha`.
    pub fn harmonize(&self, alpha: T) -> Result<ActivationParams<T>, NetError> {
        if !alpha.is_finite() {
            return Err(NetError::NonFiniteAlpha(alpha.as_f64()));
        }
        if !self.is_conditioned() {
            return Err(NetError::NotConditioned);
        }
        if alpha < T::zero() || alpha > T::one() {
            log::warn!("harmonizer queried outside the training range: alpha = {alpha}");
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let a = g.constant(Tensor::new(vec![1, 1], vec![alpha])?);
        let out = bound.harmonize(&mut g, a)?;
        let v = g.value(out).data();
        Ok(ActivationParams {
            a: v[0],
            b: v[1],
            c: v[2],
            d: v[3],
        })
    }

    /// Activation parameters used at `alpha`: harmonized when conditioned,
    /// otherwise the fixed sine activation.
    pub fn activation_at(&self, alpha: T) -> Result<ActivationParams<T>, NetError> {
        if self.is_conditioned() {
            self.harmonize(alpha)
        } else {
            Ok(ActivationParams::sine(self.arch.omega0))
        }
    }

    /// Displacements `u(x)` for a batch of normalized points.
    pub fn forward(&self, points: &[[T; 3]], params: ActivationParams<T>) -> Result<Vec<[T; 3]>, NetError> {
        let derivs = self.evaluate(points, params, DerivOrder::Value)?;
        Ok(derivs.into_iter().map(|d| d.u).collect())
    }

    /// Displacements with exact first and second input derivatives.
    pub fn forward_with_derivs(
        &self,
        points: &[[T; 3]],
        params: ActivationParams<T>,
    ) -> Result<Vec<PointDerivatives<T>>, NetError> {
        self.evaluate(points, params, DerivOrder::Second)
    }

    /// Evaluate up to `order` without recording gradients of parameters.
    pub fn evaluate(
        &self,
        points: &[[T; 3]],
        params: ActivationParams<T>,
        order: DerivOrder,
    ) -> Result<Vec<PointDerivatives<T>>, NetError> {
        self.evaluate_with(points, params, order, Propagation::Fused)
    }

    pub fn evaluate_with(
        &self,
        points: &[[T; 3]],
        params: ActivationParams<T>,
        order: DerivOrder,
        propagation: Propagation,
    ) -> Result<Vec<PointDerivatives<T>>, NetError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let act = g.constant(params.to_tensor());
        let derivs = bound.forward(&mut g, points, act, order, propagation)?;
        Ok(derivs.extract(&g))
    }
}

#[derive(Copy, Clone, Debug)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

#[derive(Copy, Clone, Debug)]
pub struct BoundNormBlock {
    pub linear: BoundLinear,
    pub ln_gain: NodeId,
    pub ln_bias: NodeId,
}

#[derive(Clone, Debug)]
pub struct BoundHarmonizer {
    pub hidden: Vec<BoundNormBlock>,
    pub output: BoundLinear,
}

/// Model parameters recorded on a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    omega0: f64,
    pub harmonizer: Option<BoundHarmonizer>,
    pub hidden: Vec<BoundLinear>,
    pub output: BoundLinear,
}

/// Output of the main network on a graph.
#[derive(Copy, Clone, Debug)]
pub struct DerivNodes {
    /// Displacements, shape `(1, N, 3)`.
    pub u: NodeId,
    /// First derivatives, shape `(3, N, 3)`; block `j` holds `∂u/∂x_j`.
    pub jac: Option<NodeId>,
    /// Second derivatives, shape `(6, N, 3)` in [`HESSIAN_PAIRS`] order.
    pub hess: Option<NodeId>,
    pub n: usize,
}

impl DerivNodes {
    /// Node of shape `(1, N, 1)` holding `∂u_k/∂x_j`.
    pub fn jac_entry<T: Real>(&self, g: &mut Graph<T>, k: usize, j: usize) -> Result<NodeId, AutodiffError> {
        let jac = self.jac.ok_or(AutodiffError::InvalidArgument {
            op: "jac_entry",
            reason: "first derivatives were not propagated".into(),
        })?;
        let block = g.select_blocks(jac, &[j])?;
        g.slice_last(block, k, 1)
    }

    /// Copy values off the graph into per-point records.
    pub fn extract<T: Real>(&self, g: &Graph<T>) -> Vec<PointDerivatives<T>> {
        let n = self.n;
        let u = g.value(self.u).data();
        let jac = self.jac.map(|j| g.value(j).data());
        let hess = self.hess.map(|h| g.value(h).data());
        (0..n)
            .map(|p| {
                let mut d = PointDerivatives::zero();
                for k in 0..3 {
                    d.u[k] = u[p * 3 + k];
                    if let Some(jd) = jac {
                        for j in 0..3 {
                            d.jac[k][j] = jd[j * n * 3 + p * 3 + k];
                        }
                    }
                    if let Some(hd) = hess {
                        for (q, &(i, j)) in HESSIAN_PAIRS.iter().enumerate() {
                            let v = hd[q * n * 3 + p * 3 + k];
                            d.hess[k][i][j] = v;
                            d.hess[k][j][i] = v;
                        }
                    }
                }
                d
            })
            .collect()
    }
}

/// Constant derivative stack `(C, N, 3)` for the input coordinates: the points
/// themselves, unit first derivatives and zero second derivatives.
pub fn input_stack<T: Real>(points: &[[T; 3]], order: DerivOrder) -> Tensor<T> {
    let n = points.len();
    let c = order.channels();
    let mut data = vec![T::zero(); c * n * 3];
    for (p, x) in points.iter().enumerate() {
        data[p * 3..p * 3 + 3].copy_from_slice(x);
    }
    if c >= 4 {
        for j in 0..3 {
            for p in 0..n {
                data[(1 + j) * n * 3 + p * 3 + j] = T::one();
            }
        }
    }
    Tensor::new(vec![c, n, 3], data).expect("shape")
}

impl BoundModel {
    /// Harmonizer output `(1, 4)` for an `alpha` node of shape `(1, 1)`.
    pub fn harmonize<T: Real>(&self, g: &mut Graph<T>, alpha: NodeId) -> Result<NodeId, NetError> {
        let h = self.harmonizer.as_ref().ok_or(NetError::NotConditioned)?;
        let mut x = alpha;
        for b in &h.hidden {
            let z = g.matmul(x, b.linear.weight)?;
            let z = g.add(z, b.linear.bias)?;
            let n = g.layer_norm(z, b.ln_gain, b.ln_bias)?;
            x = g.silu(n)?;
        }
        let z = g.matmul(x, h.output.weight)?;
        Ok(g.add(z, h.output.bias)?)
    }

    /// Activation-parameter node: harmonized `alpha` when conditioned, the
    /// constant sine quadruple otherwise.
    pub fn activation<T: Real>(&self, g: &mut Graph<T>, alpha: Option<NodeId>) -> Result<NodeId, NetError> {
        match (&self.harmonizer, alpha) {
            (Some(_), Some(a)) => self.harmonize(g, a),
            (Some(_), None) => Err(NetError::Checkpoint("conditioned model needs alpha".into())),
            (None, _) => Ok(g.constant(ActivationParams::<T>::sine(self.omega0).to_tensor())),
        }
    }

    /// Main network on a batch of points with derivatives up to `order`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        points: &[[T; 3]],
        act: NodeId,
        order: DerivOrder,
        propagation: Propagation,
    ) -> Result<DerivNodes, NetError> {
        if points.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        let stack = g.constant(input_stack(points, order));
        self.forward_stack(g, stack, points.len(), act, order, propagation)
    }

    /// Main network on a prepared input stack node of shape `(C, N, 3)`.
    pub fn forward_stack<T: Real>(
        &self,
        g: &mut Graph<T>,
        stack: NodeId,
        n: usize,
        act: NodeId,
        order: DerivOrder,
        propagation: Propagation,
    ) -> Result<DerivNodes, NetError> {
        let mut s = stack;
        for l in &self.hidden {
            let z = g.matmul(s, l.weight)?;
            s = match propagation {
                Propagation::Fused => g.sine_stack(z, l.bias, act)?,
                Propagation::Composed => sine_stack_composed(g, z, l.bias, act, order)?,
            };
        }
        let z = g.matmul(s, self.output.weight)?;
        let value = g.select_blocks(z, &[0])?;
        let u = g.add(value, self.output.bias)?;
        let jac = if order >= DerivOrder::First {
            Some(g.select_blocks(z, &[1, 2, 3])?)
        } else {
            None
        };
        let hess = if order == DerivOrder::Second {
            Some(g.select_blocks(z, &[4, 5, 6, 7, 8, 9])?)
        } else {
            None
        };
        Ok(DerivNodes { u, jac, hess, n })
    }
}

/// Reference spelling of [`Graph::sine_stack`] with elementary ops.
pub fn sine_stack_composed<T: Real>(
    g: &mut Graph<T>,
    z: NodeId,
    bias: NodeId,
    act: NodeId,
    order: DerivOrder,
) -> Result<NodeId, AutodiffError> {
    let a = g.slice_last(act, 0, 1)?;
    let b = g.slice_last(act, 1, 1)?;
    let c = g.slice_last(act, 2, 1)?;
    let d = g.slice_last(act, 3, 1)?;
    let z0 = g.select_blocks(z, &[0])?;
    let pre = g.add(z0, bias)?;
    let bz = g.mul(pre, b)?;
    let t = g.add(bz, c)?;
    let s = g.sin(t)?;
    let as_ = g.mul(s, a)?;
    let y0 = g.add(as_, d)?;
    if order == DerivOrder::Value {
        return Ok(y0);
    }
    let co = g.cos(t)?;
    let ab = g.mul(a, b)?;
    let g1 = g.mul(co, ab)?;
    let zj = g.select_blocks(z, &[1, 2, 3])?;
    let yj = g.mul(zj, g1)?;
    if order == DerivOrder::First {
        return g.concat_blocks(&[y0, yj]);
    }
    let bb = g.square(b)?;
    let abb = g.mul(a, bb)?;
    let sabb = g.mul(s, abb)?;
    let g2 = g.neg(sabb)?;
    let left: Vec<usize> = HESSIAN_PAIRS.iter().map(|&(j, _)| 1 + j).collect();
    let right: Vec<usize> = HESSIAN_PAIRS.iter().map(|&(_, k)| 1 + k).collect();
    let zl = g.select_blocks(z, &left)?;
    let zr = g.select_blocks(z, &right)?;
    let outer = g.mul(zl, zr)?;
    let t1 = g.mul(outer, g2)?;
    let zh = g.select_blocks(z, &[4, 5, 6, 7, 8, 9])?;
    let t2 = g.mul(zh, g1)?;
    let yh = g.add(t1, t2)?;
    g.concat_blocks(&[y0, yj, yh])
}

#[cfg(test)]
mod tests;
