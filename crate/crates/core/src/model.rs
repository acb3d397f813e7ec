//! Single-hidden-layer ReLU MLP split into a representation block (the hidden
//! layer, `θ`) and a decision block (the output layer, `φ`).
//!
//! Flattening order is fixed crate-wide: hidden weights row-major (`hidden x
//! input`), then hidden biases; output weights row-major (`output x hidden`),
//! then output biases. Client masks and server aggregation all refer to these
//! indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::laplace::{GaussianPrior, SubnetworkMask};
use crate::linalg::DenseMatrix;
use crate::scalar::{all_finite, log_sum_exp, softmax, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("layer dimensions must be at least 1")]
    EmptyLayer,
    #[error("mask index {index} out of range for {len} representation parameters")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("class label {label} out of range for {classes} outputs")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("target kind does not match the likelihood")]
    TargetMismatch,
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerLayout {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Hidden,
    Output,
}

/// Position of one scalar parameter inside its layer. Biases use
/// `col == None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub layer: Layer,
    pub row: usize,
    pub col: Option<usize>,
}

impl LayerLayout {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(ModelError::EmptyLayer);
        }
        Ok(Self { input_dim, hidden_dim, output_dim })
    }

    /// `|R|`: hidden weights plus hidden biases.
    pub fn repr_len(&self) -> usize {
        self.input_dim * self.hidden_dim + self.hidden_dim
    }

    /// `|B|`: output weights plus output biases.
    pub fn decision_len(&self) -> usize {
        self.hidden_dim * self.output_dim + self.output_dim
    }

    /// Coordinates of a flat index into the concatenation `θ ++ φ`.
    pub fn coordinate(&self, flat: usize) -> Option<ParamCoord> {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let r = self.repr_len();
        if flat < h * i {
            Some(ParamCoord { layer: Layer::Hidden, row: flat / i, col: Some(flat % i) })
        } else if flat < r {
            Some(ParamCoord { layer: Layer::Hidden, row: flat - h * i, col: None })
        } else if flat < r + o * h {
            let k = flat - r;
            Some(ParamCoord { layer: Layer::Output, row: k / h, col: Some(k % h) })
        } else if flat < r + self.decision_len() {
            Some(ParamCoord { layer: Layer::Output, row: flat - r - o * h, col: None })
        } else {
            None
        }
    }

    pub fn flat_index(&self, c: ParamCoord) -> Option<usize> {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        match (c.layer, c.col) {
            (Layer::Hidden, Some(col)) if c.row < h && col < i => Some(c.row * i + col),
            (Layer::Hidden, None) if c.row < h => Some(h * i + c.row),
            (Layer::Output, Some(col)) if c.row < o && col < h => Some(self.repr_len() + c.row * h + col),
            (Layer::Output, None) if c.row < o => Some(self.repr_len() + o * h + c.row),
            _ => None,
        }
    }
}

/// Regression or classification target for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target<'a, T> {
    Class(usize),
    Value(&'a [T]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a, T> {
    pub x: &'a [T],
    pub target: Target<'a, T>,
}

impl<'a, T> Sample<'a, T> {
    pub fn class(x: &'a [T], label: usize) -> Self {
        Self { x, target: Target::Class(label) }
    }

    pub fn value(x: &'a [T], y: &'a [T]) -> Self {
        Self { x, target: Target::Value(y) }
    }
}

/// Observation model `p(y | f)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood<T> {
    /// Softmax over the outputs.
    Categorical,
    /// Independent Gaussian noise with the given variance on every output.
    Gaussian { variance: T },
}

impl<T: Real> Likelihood<T> {
    /// `-log p(y | f)`
    pub fn nll(&self, f: &[T], target: &Target<'_, T>) -> Result<T> {
        match (self, target) {
            (Likelihood::Categorical, Target::Class(y)) => {
                check_label(*y, f.len())?;
                Ok(log_sum_exp(f) - f[*y])
            }
            (Likelihood::Gaussian { variance }, Target::Value(y)) => {
                check_len("target", f.len(), y.len())?;
                let half = T::lit(0.5);
                let norm = half * (T::lit(2.0 * std::f64::consts::PI) * *variance).ln();
                Ok(f.iter()
                    .zip(y.iter())
                    .map(|(&fo, &yo)| half * (fo - yo) * (fo - yo) / *variance + norm)
                    .sum())
            }
            _ => Err(ModelError::TargetMismatch),
        }
    }

    /// `∂(-log p) / ∂f`
    pub fn residual(&self, f: &[T], target: &Target<'_, T>) -> Result<Vec<T>> {
        match (self, target) {
            (Likelihood::Categorical, Target::Class(y)) => {
                check_label(*y, f.len())?;
                let mut p = softmax(f);
                p[*y] -= T::one();
                Ok(p)
            }
            (Likelihood::Gaussian { variance }, Target::Value(y)) => {
                check_len("target", f.len(), y.len())?;
                Ok(f.iter().zip(y.iter()).map(|(&fo, &yo)| (fo - yo) / *variance).collect())
            }
            _ => Err(ModelError::TargetMismatch),
        }
    }

    /// `Λ = -∇²_f log p(y | f)`; independent of the target for both models.
    pub fn hessian(&self, f: &[T]) -> DenseMatrix<T> {
        match self {
            Likelihood::Categorical => {
                let p = softmax(f);
                let n = p.len();
                let mut lam = DenseMatrix::zeros(n, n);
                for a in 0..n {
                    for b in 0..n {
                        let d = if a == b { p[a] } else { T::zero() };
                        lam[(a, b)] = d - p[a] * p[b];
                    }
                }
                lam
            }
            Likelihood::Gaussian { variance } => {
                let mut lam = DenseMatrix::identity(f.len());
                for i in 0..f.len() {
                    lam[(i, i)] = T::one() / *variance;
                }
                lam
            }
        }
    }

    /// Rows `A` with `AᵀA = Jᵀ Λ J` for one example.
    ///
    /// For the softmax, `Λ = M Mᵀ` with `M = diag(√p) - p √pᵀ`, so row `o` of
    /// `MᵀJ` is `√p_o (j_o - Σ_k p_k j_k)`. The factor keeps the GGN positive
    /// semi-definite in floating point.
    pub fn hessian_root_rows(&self, f: &[T], jac: &DenseMatrix<T>) -> DenseMatrix<T> {
        let (o, s) = (jac.rows(), jac.cols());
        let mut out = DenseMatrix::zeros(o, s);
        match self {
            Likelihood::Categorical => {
                let p = softmax(f);
                let mut mean = vec![T::zero(); s];
                for (k, &pk) in p.iter().enumerate() {
                    crate::scalar::axpy(pk, jac.row(k), &mut mean);
                }
                for k in 0..o {
                    let w = p[k].sqrt();
                    for ((dst, &jv), &mv) in out.row_mut(k).iter_mut().zip(jac.row(k)).zip(&mean) {
                        *dst = w * (jv - mv);
                    }
                }
            }
            Likelihood::Gaussian { variance } => {
                let w = T::one() / variance.sqrt();
                for k in 0..o {
                    for (dst, &jv) in out.row_mut(k).iter_mut().zip(jac.row(k)) {
                        *dst = w * jv;
                    }
                }
            }
        }
        out
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ModelError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// A model whose representation parameters `θ` are trained and inferred;
/// anything else it carries is held fixed.
pub trait RepresentationModel<T: Real> {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn theta(&self) -> &[T];
    fn theta_mut(&mut self) -> &mut [T];

    fn forward(&self, x: &[T]) -> Result<Vec<T>>;

    /// Adds `weight · ∂(-log p(y | f(x))) / ∂θ` into `grad` and returns the
    /// unweighted per-example loss.
    fn accumulate_theta_grad(
        &self,
        sample: &Sample<'_, T>,
        likelihood: &Likelihood<T>,
        weight: T,
        grad: &mut [T],
    ) -> Result<T>;

    /// Outputs and `∂f/∂θ_S` (`output_dim x |S|`) at `x`.
    fn jacobian(&self, x: &[T], mask: &SubnetworkMask) -> Result<(Vec<T>, DenseMatrix<T>)>;
}

/// Client network: `θ` is the hidden layer, `φ` the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel<T> {
    pub layout: LayerLayout,
    pub theta: Vec<T>,
    pub phi: Vec<T>,
}

/// Cached hidden-layer pre-activations.
struct Hidden<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

impl<T: Real> ClientModel<T> {
    pub fn new(layout: LayerLayout, theta: Vec<T>, phi: Vec<T>) -> Result<Self> {
        check_len("theta", layout.repr_len(), theta.len())?;
        check_len("phi", layout.decision_len(), phi.len())?;
        Ok(Self { layout, theta, phi })
    }

    pub fn zeros(layout: LayerLayout) -> Self {
        Self {
            layout,
            theta: vec![T::zero(); layout.repr_len()],
            phi: vec![T::zero(); layout.decision_len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.theta) && all_finite(&self.phi)
    }

    fn hidden(&self, x: &[T]) -> Result<Hidden<T>> {
        let LayerLayout { input_dim: d, hidden_dim: h, .. } = self.layout;
        check_len("input", d, x.len())?;
        let (w1, b1) = self.theta.split_at(h * d);
        let mut pre = Vec::with_capacity(h);
        for u in 0..h {
            pre.push(crate::scalar::dot(&w1[u * d..(u + 1) * d], x) + b1[u]);
        }
        let act = pre.iter().map(|&z| if z > T::zero() { z } else { T::zero() }).collect();
        Ok(Hidden { pre, act })
    }

    fn output(&self, act: &[T]) -> Vec<T> {
        let LayerLayout { hidden_dim: h, output_dim: o, .. } = self.layout;
        let (w2, b2) = self.phi.split_at(o * h);
        (0..o).map(|k| crate::scalar::dot(&w2[k * h..(k + 1) * h], act) + b2[k]).collect()
    }

    /// Hidden activations `relu(W₁x + b₁)`; the features the decision layer sees.
    pub fn features(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.hidden(x)?.act)
    }

    /// Backward pass for one example, accumulating `weight ·` gradients into
    /// whichever of `grad_theta` / `grad_phi` are supplied.
    pub fn accumulate_grads(
        &self,
        sample: &Sample<'_, T>,
        likelihood: &Likelihood<T>,
        weight: T,
        grad_theta: Option<&mut [T]>,
        grad_phi: Option<&mut [T]>,
    ) -> Result<T> {
        let LayerLayout { input_dim: d, hidden_dim: h, output_dim: o } = self.layout;
        let hid = self.hidden(sample.x)?;
        let f = self.output(&hid.act);
        let loss = likelihood.nll(&f, &sample.target)?;
        let r = likelihood.residual(&f, &sample.target)?;
        if let Some(gp) = grad_phi {
            check_len("phi gradient", self.layout.decision_len(), gp.len())?;
            let (gw2, gb2) = gp.split_at_mut(o * h);
            for k in 0..o {
                let rk = weight * r[k];
                crate::scalar::axpy(rk, &hid.act, &mut gw2[k * h..(k + 1) * h]);
                gb2[k] += rk;
            }
        }
        if let Some(gt) = grad_theta {
            check_len("theta gradient", self.layout.repr_len(), gt.len())?;
            let w2 = &self.phi[..o * h];
            let (gw1, gb1) = gt.split_at_mut(h * d);
            for u in 0..h {
                if hid.pre[u] <= T::zero() {
                    continue;
                }
                let mut delta = T::zero();
                for k in 0..o {
                    delta += r[k] * w2[k * h + u];
                }
                let delta = weight * delta;
                if delta != T::zero() {
                    crate::scalar::axpy(delta, sample.x, &mut gw1[u * d..(u + 1) * d]);
                    gb1[u] += delta;
                }
            }
        }
        Ok(loss)
    }
}

impl<T: Real> RepresentationModel<T> for ClientModel<T> {
    fn input_dim(&self) -> usize {
        self.layout.input_dim
    }

    fn output_dim(&self) -> usize {
        self.layout.output_dim
    }

    fn theta(&self) -> &[T] {
        &self.theta
    }

    fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let hid = self.hidden(x)?;
        Ok(self.output(&hid.act))
    }

    fn accumulate_theta_grad(
        &self,
        sample: &Sample<'_, T>,
        likelihood: &Likelihood<T>,
        weight: T,
        grad: &mut [T],
    ) -> Result<T> {
        self.accumulate_grads(sample, likelihood, weight, Some(grad), None)
    }

    fn jacobian(&self, x: &[T], mask: &SubnetworkMask) -> Result<(Vec<T>, DenseMatrix<T>)> {
        let LayerLayout { input_dim: d, hidden_dim: h, output_dim: o } = self.layout;
        check_mask(mask, self.layout.repr_len())?;
        let hid = self.hidden(x)?;
        let f = self.output(&hid.act);
        let w2 = &self.phi[..o * h];
        let mut jac = DenseMatrix::zeros(o, mask.len());
        // one backward pass per output coordinate
        let mut gate = vec![T::zero(); h];
        for k in 0..o {
            for u in 0..h {
                gate[u] = if hid.pre[u] > T::zero() { w2[k * h + u] } else { T::zero() };
            }
            let row = jac.row_mut(k);
            for (dst, &s) in row.iter_mut().zip(mask.indices()) {
                *dst = if s < h * d { gate[s / d] * x[s % d] } else { gate[s - h * d] };
            }
        }
        Ok((f, jac))
    }
}

fn check_mask(mask: &SubnetworkMask, len: usize) -> Result<()> {
    if let Some(&last) = mask.indices().last() {
        if last >= len {
            return Err(ModelError::IndexOutOfRange { index: last, len });
        }
    }
    Ok(())
}

/// Linear map `f = Θ x` with `Θ` (`outputs x inputs`, row-major) as the
/// representation parameters. Used for closed-form checks of the Laplace
/// machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub theta: Vec<T>,
}

impl<T: Real> LinearModel<T> {
    pub fn new(inputs: usize, outputs: usize, theta: Vec<T>) -> Result<Self> {
        check_len("theta", inputs * outputs, theta.len())?;
        Ok(Self { inputs, outputs, theta })
    }
}

impl<T: Real> RepresentationModel<T> for LinearModel<T> {
    fn input_dim(&self) -> usize {
        self.inputs
    }

    fn output_dim(&self) -> usize {
        self.outputs
    }

    fn theta(&self) -> &[T] {
        &self.theta
    }

    fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        check_len("input", self.inputs, x.len())?;
        Ok((0..self.outputs)
            .map(|k| crate::scalar::dot(&self.theta[k * self.inputs..(k + 1) * self.inputs], x))
            .collect())
    }

    fn accumulate_theta_grad(
        &self,
        sample: &Sample<'_, T>,
        likelihood: &Likelihood<T>,
        weight: T,
        grad: &mut [T],
    ) -> Result<T> {
        let f = self.forward(sample.x)?;
        let loss = likelihood.nll(&f, &sample.target)?;
        let r = likelihood.residual(&f, &sample.target)?;
        for k in 0..self.outputs {
            crate::scalar::axpy(weight * r[k], sample.x, &mut grad[k * self.inputs..(k + 1) * self.inputs]);
        }
        Ok(loss)
    }

    fn jacobian(&self, x: &[T], mask: &SubnetworkMask) -> Result<(Vec<T>, DenseMatrix<T>)> {
        check_mask(mask, self.theta.len())?;
        let f = self.forward(x)?;
        let mut jac = DenseMatrix::zeros(self.outputs, mask.len());
        for (c, &s) in mask.indices().iter().enumerate() {
            jac[(s / self.inputs, c)] = x[s % self.inputs];
        }
        Ok((f, jac))
    }
}

/// He-normal weights (`std = √(2 / fan_in)`), zero biases; deterministic in
/// `seed`.
pub fn init_model<T: Real>(layout: LayerLayout, seed: u64) -> ClientModel<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let LayerLayout { input_dim: d, hidden_dim: h, output_dim: o } = layout;
    let mut draw = |count: usize, fan_in: usize| -> Vec<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..count)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(std * z)
            })
            .collect()
    };
    let mut theta = draw(h * d, d);
    theta.extend(std::iter::repeat_n(T::zero(), h));
    let mut phi = draw(o * h, h);
    phi.extend(std::iter::repeat_n(T::zero(), o));
    ClientModel { layout, theta, phi }
}

/// Negative log posterior over `θ` on a batch and its gradient:
/// `-Σ log p(y | f(x)) - log N(θ | μ, diag g)`.
pub fn nll_and_grad<T: Real, M: RepresentationModel<T>>(
    model: &M,
    batch: &[Sample<'_, T>],
    prior: &GaussianPrior<T>,
    likelihood: &Likelihood<T>,
) -> Result<(T, Vec<T>)> {
    weighted_nll_and_grad(model, batch, prior, likelihood, T::one())
}

/// As [`nll_and_grad`] with the data term scaled by `data_weight`.
pub fn weighted_nll_and_grad<T: Real, M: RepresentationModel<T>>(
    model: &M,
    batch: &[Sample<'_, T>],
    prior: &GaussianPrior<T>,
    likelihood: &Likelihood<T>,
    data_weight: T,
) -> Result<(T, Vec<T>)> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let theta = model.theta();
    check_len("prior", theta.len(), prior.len())?;
    let mut grad = vec![T::zero(); theta.len()];
    let mut data_loss = T::zero();
    for s in batch {
        data_loss += model.accumulate_theta_grad(s, likelihood, data_weight, &mut grad)?;
    }
    let prior_loss = prior.neg_log_density_and_accumulate_grad(theta, &mut grad);
    let loss = data_weight * data_loss + prior_loss;
    if !loss.is_finite() || !all_finite(&grad) {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u32,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut [T], grad: &[T], lr: T, hyper: &AdamHyper) {
    assert_eq!(params.len(), grad.len(), "adam: gradient length");
    assert_eq!(state.m.len(), grad.len(), "adam: state length");
    state.step += 1;
    let b1 = T::lit(hyper.beta1);
    let b2 = T::lit(hyper.beta2);
    let eps = T::lit(hyper.eps);
    let t = state.step as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
