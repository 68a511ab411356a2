//! Desk-scale differentiable objectives with hand-derived gradients, and the
//! synthetic forget/retain task generator.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, check_finite, GuError, Result};
use crate::linalg::{dot, norm};
use crate::metric::DiagonalMetric;

/// Floor applied to reference probabilities inside the KL anchor.
pub const KL_FLOOR: f64 = 1e-12;

pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn loss(&self, theta: &[f64]) -> Result<f64>;

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;

    fn loss_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.loss(theta)?, self.gradient(theta)?))
    }

    /// Lipschitz constant of the H-gradient in `‖·‖_H`, when known exactly.
    fn lipschitz_h(&self, _metric: &DiagonalMetric) -> Option<f64> {
        None
    }
}

impl<T: Objective + ?Sized> Objective for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        (**self).loss(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        (**self).gradient(theta)
    }
    fn loss_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        (**self).loss_and_gradient(theta)
    }
    fn lipschitz_h(&self, metric: &DiagonalMetric) -> Option<f64> {
        (**self).lipschitz_h(metric)
    }
}

#[derive(Debug, Clone)]
pub struct ConstantObjective {
    pub dim: usize,
    pub value: f64,
}

impl Objective for ConstantObjective {
    fn dim(&self) -> usize {
        self.dim
    }
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim, theta.len())?;
        Ok(self.value)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, theta.len())?;
        Ok(vec![0.0; self.dim])
    }
    fn lipschitz_h(&self, _metric: &DiagonalMetric) -> Option<f64> {
        Some(0.0)
    }
}

/// `L(θ) = ½ Σ cᵢ (θᵢ - centerᵢ)²`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    center: Vec<f64>,
    curvature: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(center: Vec<f64>, curvature: Vec<f64>) -> Result<Self> {
        check_dim(center.len(), curvature.len())?;
        check_finite(&center, "quadratic center")?;
        if let Some(c) = curvature.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(GuError::InvalidInput(format!("curvature entries must be positive, got {c}")));
        }
        Ok(Self { center, curvature })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }
}

pub fn quadratic_objective(center: Vec<f64>, curvature_diag: Vec<f64>) -> Result<QuadraticObjective> {
    QuadraticObjective::new(center, curvature_diag)
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        Ok(0.5
            * theta.iter().zip(&self.center).zip(&self.curvature).map(|((t, m), c)| c * (t - m) * (t - m)).sum::<f64>())
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        Ok(theta.iter().zip(&self.center).zip(&self.curvature).map(|((t, m), c)| c * (t - m)).collect())
    }

    /// `max cᵢ / hᵢ`, the top eigenvalue of `H⁻¹ diag(c)`.
    fn lipschitz_h(&self, metric: &DiagonalMetric) -> Option<f64> {
        if metric.dim() != self.dim() {
            return None;
        }
        Some(self.curvature.iter().zip(metric.diag_h()).fold(0.0_f64, |m, (c, h)| m.max(c / h)))
    }
}

/// `Σ wₖ Lₖ(θ)`
#[derive(Clone)]
pub struct WeightedSum {
    terms: Vec<(f64, Arc<dyn Objective>)>,
}

impl WeightedSum {
    pub fn new(terms: Vec<(f64, Arc<dyn Objective>)>) -> Result<Self> {
        let first = terms.first().ok_or_else(|| GuError::InvalidInput("empty weighted sum".into()))?;
        let dim = first.1.dim();
        for (_, t) in &terms {
            check_dim(dim, t.dim())?;
        }
        Ok(Self { terms })
    }
}

impl Objective for WeightedSum {
    fn dim(&self) -> usize {
        self.terms[0].1.dim()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        self.terms.iter().map(|(w, t)| Ok(w * t.loss(theta)?)).sum()
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        for (w, t) in &self.terms {
            for (gi, ti) in g.iter_mut().zip(t.gradient(theta)?) {
                *gi += w * ti;
            }
        }
        Ok(g)
    }

    fn lipschitz_h(&self, metric: &DiagonalMetric) -> Option<f64> {
        self.terms.iter().map(|(w, t)| t.lipschitz_h(metric).map(|l| w.abs() * l)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softplus,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(z),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            "identity" => Ok(Activation::Identity),
            other => Err(GuError::InvalidInput(format!("unknown activation {other:?}"))),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Parametric map from inputs to output logits with reverse-mode gradients.
pub trait Network: Send + Sync {
    fn param_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Output logits for one input.
    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64>;

    /// Adds `∂(dlogitsᵀ·logits)/∂θ` at input `x` into `grad`.
    fn backward(&self, theta: &[f64], x: &[f64], dlogits: &[f64], grad: &mut [f64]);
}

/// Bias-free linear map `x ↦ θ·x` with a single logit.
#[derive(Debug, Clone)]
pub struct LinearNet {
    pub input_dim: usize,
}

impl Network for LinearNet {
    fn param_dim(&self) -> usize {
        self.input_dim
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        vec![dot(theta, x)]
    }
    fn backward(&self, _theta: &[f64], x: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += dlogits[0] * xi;
        }
    }
}

/// Fully connected network; hidden layers use `activation`, the last layer
/// is linear. Parameters are laid out layer by layer as a row-major weight
/// matrix followed by the bias vector.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(GuError::InvalidInput("an MLP needs at least one hidden layer".into()));
        }
        if widths.contains(&0) {
            return Err(GuError::InvalidInput("layer widths must be positive".into()));
        }
        Ok(Self { widths, activation })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for w in self.widths.windows(2) {
            let last = *off.last().unwrap();
            off.push(last + w[0] * w[1] + w[1]);
        }
        off
    }

    /// Pre-activations and activations of every layer.
    fn trace(&self, theta: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let off = self.layer_offsets();
        let layers = self.widths.len() - 1;
        let mut acts = vec![x.to_vec()];
        let mut pres = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w = &theta[off[l]..off[l] + fan_in * fan_out];
            let b = &theta[off[l] + fan_in * fan_out..off[l + 1]];
            let input = &acts[l];
            let z: Vec<f64> = (0..fan_out).map(|o| b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], input)).collect();
            let a = if l + 1 == layers { z.clone() } else { z.iter().map(|v| self.activation.apply(*v)).collect() };
            pres.push(z);
            acts.push(a);
        }
        (pres, acts)
    }
}

impl Network for Mlp {
    fn param_dim(&self) -> usize {
        *self.layer_offsets().last().unwrap()
    }
    fn input_dim(&self) -> usize {
        self.widths[0]
    }
    fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        self.trace(theta, x).1.pop().unwrap()
    }

    fn backward(&self, theta: &[f64], x: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let off = self.layer_offsets();
        let (pres, acts) = self.trace(theta, x);
        let layers = self.widths.len() - 1;
        let mut delta = dlogits.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w_off = off[l];
            let b_off = off[l] + fan_in * fan_out;
            for o in 0..fan_out {
                let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(&acts[l]) {
                    *g += delta[o] * a;
                }
                grad[b_off + o] += delta[o];
            }
            if l > 0 {
                let w = &theta[w_off..b_off];
                let prev: Vec<f64> = (0..fan_in)
                    .map(|i| {
                        let back: f64 = (0..fan_out).map(|o| w[o * fan_in + i] * delta[o]).sum();
                        back * self.activation.derivative(pres[l - 1][i])
                    })
                    .collect();
                delta = prev;
            }
        }
    }
}

/// One supervised example. For classification heads `target` is `[y]` with
/// `y ∈ {0, 1}` on single-logit networks and a probability vector otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Log-probabilities of the categorical output. A single logit `z` is the
/// binary distribution `(σ(z), 1 - σ(z))`.
pub fn log_probs(logits: &[f64]) -> Vec<f64> {
    if logits.len() == 1 {
        let z = logits[0];
        return vec![-softplus(-z), -softplus(z)];
    }
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `∂/∂logits` of `Σₖ cₖ log pₖ` given `∂/∂log p = c`.
fn logit_grad_from_logprob_grad(logits: &[f64], logp: &[f64], c: &[f64]) -> Vec<f64> {
    let csum: f64 = c.iter().sum();
    if logits.len() == 1 {
        // softmax over (z, 0); only the first logit is a parameter
        let p0 = logp[0].exp();
        return vec![c[0] - p0 * csum];
    }
    logp.iter().zip(c).map(|(lp, ci)| ci - lp.exp() * csum).collect()
}

/// Mean loss of a network over samples.
#[derive(Clone)]
pub struct SupervisedObjective {
    net: Arc<dyn Network>,
    samples: Vec<Sample>,
    loss: LossKind,
}

impl SupervisedObjective {
    pub fn new(net: Arc<dyn Network>, samples: Vec<Sample>, loss: LossKind) -> Result<Self> {
        if samples.is_empty() {
            return Err(GuError::InvalidInput("objective needs at least one sample".into()));
        }
        let target_dim = match (loss, net.output_dim()) {
            (LossKind::CrossEntropy, 1) => 1,
            (_, k) => k,
        };
        for s in &samples {
            check_dim(net.input_dim(), s.input.len())?;
            check_dim(target_dim, s.target.len())?;
        }
        Ok(Self { net, samples, loss })
    }

    pub fn network(&self) -> &Arc<dyn Network> {
        &self.net
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Per-sample loss and its logit gradient.
    fn sample_terms(&self, theta: &[f64], s: &Sample) -> (f64, Vec<f64>, Vec<f64>) {
        let logits = self.net.forward(theta, &s.input);
        match self.loss {
            LossKind::Mse => {
                let diff: Vec<f64> = logits.iter().zip(&s.target).map(|(o, y)| o - y).collect();
                (0.5 * dot(&diff, &diff), diff, logits)
            }
            LossKind::CrossEntropy => {
                let lp = log_probs(&logits);
                let target = if logits.len() == 1 { vec![s.target[0], 1.0 - s.target[0]] } else { s.target.clone() };
                let loss = -dot(&target, &lp);
                let c: Vec<f64> = target.iter().map(|t| -t).collect();
                (loss, logit_grad_from_logprob_grad(&logits, &lp, &c), logits)
            }
        }
    }

    /// Gradient of one sample's loss.
    pub fn sample_gradient(&self, theta: &[f64], index: usize) -> Result<Vec<f64>> {
        check_dim(self.net.param_dim(), theta.len())?;
        let s = self.samples.get(index).ok_or_else(|| GuError::InvalidInput(format!("no sample {index}")))?;
        let (_, dl, _) = self.sample_terms(theta, s);
        let mut g = vec![0.0; theta.len()];
        self.net.backward(theta, &s.input, &dl, &mut g);
        Ok(g)
    }
}

impl Objective for SupervisedObjective {
    fn dim(&self) -> usize {
        self.net.param_dim()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        let total: f64 = self.samples.iter().map(|s| self.sample_terms(theta, s).0).sum();
        Ok(total / self.samples.len() as f64)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.loss_and_gradient(theta)?.1)
    }

    fn loss_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim(), theta.len())?;
        let n = self.samples.len() as f64;
        let mut g = vec![0.0; theta.len()];
        let mut loss = 0.0;
        for s in &self.samples {
            let (l, dl, _) = self.sample_terms(theta, s);
            loss += l;
            let scaled: Vec<f64> = dl.iter().map(|d| d / n).collect();
            self.net.backward(theta, &s.input, &scaled, &mut g);
        }
        Ok((loss / n, g))
    }
}

/// Mean binary cross-entropy of a bias-free linear classifier.
pub fn logistic_objective(samples: Vec<Sample>) -> Result<SupervisedObjective> {
    let dim = samples
        .first()
        .map(|s| s.input.len())
        .ok_or_else(|| GuError::InvalidInput("logistic objective needs at least one sample".into()))?;
    SupervisedObjective::new(Arc::new(LinearNet { input_dim: dim }), samples, LossKind::CrossEntropy)
}

pub fn mlp_objective(
    widths: Vec<usize>,
    samples: Vec<Sample>,
    activation: Activation,
    loss: LossKind,
) -> Result<SupervisedObjective> {
    SupervisedObjective::new(Arc::new(Mlp::new(widths, activation)?), samples, loss)
}

/// `L(θ) = -inner(θ)`: gradient ascent on `inner` as a minimized loss.
#[derive(Clone)]
pub struct Negated<O>(pub O);

impl<O: Objective> Objective for Negated<O> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(-self.0.loss(theta)?)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.gradient(theta)?.into_iter().map(|g| -g).collect())
    }
    fn loss_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (l, g) = self.0.loss_and_gradient(theta)?;
        Ok((-l, g.into_iter().map(|v| -v).collect()))
    }
    fn lipschitz_h(&self, metric: &DiagonalMetric) -> Option<f64> {
        self.0.lipschitz_h(metric)
    }
}

/// `KL(p‖q)` for two categorical distributions, with `q` floored at
/// [`KL_FLOOR`]. Returns the divergence and whether the floor was hit.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> (f64, bool) {
    let mut clamped = false;
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        let qq = if qi < KL_FLOOR {
            clamped = true;
            KL_FLOOR
        } else {
            qi
        };
        kl += pi * (pi.ln() - qq.ln());
    }
    (kl, clamped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlEvaluation {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// True when a reference probability fell below [`KL_FLOOR`].
    pub clamped: bool,
}

/// Mean `KL(π_θ(·|x) ‖ π_ref(·|x))` over retain inputs, with the reference
/// distribution frozen at construction.
#[derive(Clone)]
pub struct KlAnchor {
    net: Arc<dyn Network>,
    inputs: Vec<Vec<f64>>,
    ref_log_probs: Vec<Vec<f64>>,
    clamped_reference: bool,
}

impl KlAnchor {
    pub fn new(net: Arc<dyn Network>, theta_ref: &[f64], retain_inputs: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(net.param_dim(), theta_ref.len())?;
        check_finite(theta_ref, "reference parameters")?;
        if retain_inputs.is_empty() {
            return Err(GuError::InvalidInput("KL anchor needs at least one retain input".into()));
        }
        let floor = KL_FLOOR.ln();
        let mut clamped_reference = false;
        let mut ref_log_probs = Vec::with_capacity(retain_inputs.len());
        for x in &retain_inputs {
            check_dim(net.input_dim(), x.len())?;
            let lp: Vec<f64> = log_probs(&net.forward(theta_ref, x))
                .into_iter()
                .map(|v| {
                    if v < floor {
                        clamped_reference = true;
                        floor
                    } else {
                        v
                    }
                })
                .collect();
            ref_log_probs.push(lp);
        }
        Ok(Self { net, inputs: retain_inputs, ref_log_probs, clamped_reference })
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<KlEvaluation> {
        check_dim(self.net.param_dim(), theta.len())?;
        let n = self.inputs.len() as f64;
        let mut gradient = vec![0.0; theta.len()];
        let mut loss = 0.0;
        for (x, lq) in self.inputs.iter().zip(&self.ref_log_probs) {
            let logits = self.net.forward(theta, x);
            let lp = log_probs(&logits);
            let kl: f64 = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum();
            loss += kl;
            // ∂KL/∂log pₖ = pₖ (log pₖ - log qₖ + 1); the +1 terms cancel through
            // the softmax Jacobian, so they are dropped.
            let c: Vec<f64> = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).collect();
            let dl: Vec<f64> = logit_grad_from_logprob_grad(&logits, &lp, &c).iter().map(|d| d / n).collect();
            self.net.backward(theta, x, &dl, &mut gradient);
        }
        Ok(KlEvaluation { loss: loss / n, gradient, clamped: self.clamped_reference })
    }

    pub fn clamped_reference(&self) -> bool {
        self.clamped_reference
    }
}

/// Builds the KL retain anchor for `model` around `theta_ref`.
pub fn kl_retain_anchor(model: Arc<dyn Network>, theta_ref: &[f64], retain_samples: &[Sample]) -> Result<KlAnchor> {
    KlAnchor::new(model, theta_ref, retain_samples.iter().map(|s| s.input.clone()).collect())
}

impl Objective for KlAnchor {
    fn dim(&self) -> usize {
        self.net.param_dim()
    }
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta)?.loss)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(theta)?.gradient)
    }
    fn loss_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let e = self.evaluate(theta)?;
        Ok((e.loss, e.gradient))
    }
}

/// Labeled input used by the task generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInput {
    pub input: Vec<f64>,
    pub label: usize,
}

impl LabeledInput {
    /// Converts to a [`Sample`] for a head with `classes` outputs
    /// (one logit when `classes == 1`).
    pub fn to_sample(&self, classes: usize) -> Sample {
        let target = if classes <= 1 {
            vec![self.label as f64]
        } else {
            (0..classes).map(|k| if k == self.label { 1.0 } else { 0.0 }).collect()
        };
        Sample { input: self.input.clone(), target }
    }
}

/// Mean amplitude of inputs along their population direction.
pub const TASK_SIGNAL: f64 = 1.5;
/// Isotropic input noise.
pub const TASK_NOISE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ForgetRetainTask {
    pub dimension: usize,
    pub overlap: f64,
    pub seed: u64,
    pub forget_samples: Vec<LabeledInput>,
    pub retain_samples: Vec<LabeledInput>,
    /// Reference model parameters; empty until a model is fitted.
    pub reference_parameters: Vec<f64>,
}

/// Generates a binary forget/retain task.
///
/// Retain inputs are `±SIGNAL·μ_r + noise`, forget inputs `±SIGNAL·μ_f + noise`,
/// labelled by the sign, with `cos(μ_f, μ_r) = overlap`.
pub fn make_task(
    dimension: usize,
    forget_count: usize,
    retain_count: usize,
    overlap: f64,
    seed: u64,
) -> Result<ForgetRetainTask> {
    if forget_count == 0 || retain_count == 0 {
        return Err(GuError::InvalidInput("forget and retain counts must be at least 1".into()));
    }
    if dimension < 2 {
        return Err(GuError::InvalidInput("task dimension must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(GuError::InvalidInput(format!("overlap must lie in [0, 1], got {overlap}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dimension).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
    };
    let a = gauss(&mut rng);
    let na = norm(&a);
    let mu_r: Vec<f64> = a.iter().map(|x| x / na).collect();
    let mut b = gauss(&mut rng);
    let c = dot(&b, &mu_r);
    for (bi, ui) in b.iter_mut().zip(&mu_r) {
        *bi -= c * ui;
    }
    let nb = norm(&b);
    let e_b: Vec<f64> = b.iter().map(|x| x / nb).collect();
    let ortho = (1.0 - overlap * overlap).max(0.0).sqrt();
    let mu_f: Vec<f64> = mu_r.iter().zip(&e_b).map(|(r, e)| overlap * r + ortho * e).collect();

    let draw = |mu: &[f64], count: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledInput> {
        (0..count)
            .map(|i| {
                let label = i % 2;
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let noise = gauss(rng);
                let input = mu.iter().zip(&noise).map(|(m, n)| sign * TASK_SIGNAL * m + TASK_NOISE * n).collect();
                LabeledInput { input, label }
            })
            .collect()
    };
    let forget_samples = draw(&mu_f, forget_count, &mut rng);
    let retain_samples = draw(&mu_r, retain_count, &mut rng);
    if forget_samples.iter().any(|f| retain_samples.iter().any(|r| r.input == f.input)) {
        return Err(GuError::InvalidInput("forget and retain samples collided".into()));
    }
    Ok(ForgetRetainTask { dimension, overlap, seed, forget_samples, retain_samples, reference_parameters: Vec::new() })
}

impl ForgetRetainTask {
    pub fn forget_count(&self) -> usize {
        self.forget_samples.len()
    }

    pub fn retain_count(&self) -> usize {
        self.retain_samples.len()
    }

    pub fn forget_as_samples(&self, classes: usize) -> Vec<Sample> {
        self.forget_samples.iter().map(|s| s.to_sample(classes)).collect()
    }

    pub fn retain_as_samples(&self, classes: usize) -> Vec<Sample> {
        self.retain_samples.iter().map(|s| s.to_sample(classes)).collect()
    }

    /// Text fixture: the generator arguments, from which the task is regenerated.
    pub fn to_fixture(&self) -> String {
        format!(
            "seed={}\ndimension={}\nforget_count={}\nretain_count={}\noverlap={}\n",
            self.seed,
            self.dimension,
            self.forget_count(),
            self.retain_count(),
            self.overlap
        )
    }

    pub fn from_fixture(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut dimension = None;
        let mut fc = None;
        let mut rc = None;
        let mut overlap = None;
        let bad = |k: &str| GuError::Config(format!("task fixture: bad value for {k}"));
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| GuError::Config(format!("task fixture line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => seed = Some(v.parse().map_err(|_| bad(k))?),
                "dimension" => dimension = Some(v.parse().map_err(|_| bad(k))?),
                "forget_count" => fc = Some(v.parse().map_err(|_| bad(k))?),
                "retain_count" => rc = Some(v.parse().map_err(|_| bad(k))?),
                "overlap" => overlap = Some(v.parse().map_err(|_| bad(k))?),
                other => return Err(GuError::Config(format!("task fixture: unknown key {other}"))),
            }
        }
        let need = |k: &str| GuError::Config(format!("task fixture: missing {k}"));
        make_task(
            dimension.ok_or_else(|| need("dimension"))?,
            fc.ok_or_else(|| need("forget_count"))?,
            rc.ok_or_else(|| need("retain_count"))?,
            overlap.ok_or_else(|| need("overlap"))?,
            seed.ok_or_else(|| need("seed"))?,
        )
    }
}

/// Seeded small-scale initialization (uniform in ±`scale`).
pub fn init_parameters(dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Coordinate-wise central-difference gradient (test oracle).
    fn fd_gradient(obj: &dyn Objective, theta: &[f64], h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                let mut p = theta.to_vec();
                let mut m = theta.to_vec();
                p[i] += h;
                m[i] -= h;
                (obj.loss(&p).unwrap() - obj.loss(&m).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(obj: &dyn Objective, theta: &[f64], rel: f64) {
        let g = obj.gradient(theta).unwrap();
        let fd = fd_gradient(obj, theta, 1e-5);
        let scale = norm(&g).max(1e-8);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= rel * scale + 1e-9, "analytic {a} vs fd {b}");
        }
    }

    fn task_samples(seed: u64, classes: usize) -> Vec<Sample> {
        make_task(5, 6, 6, 0.5, seed).unwrap().retain_as_samples(classes)
    }

    #[test]
    fn quadratic_examples() {
        let q = QuadraticObjective::new(vec![1.0, -2.0], vec![3.0, 0.5]).unwrap();
        assert_eq!(q.loss(&[1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(q.gradient(&[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        let q = QuadraticObjective::new(vec![0.0], vec![2.0]).unwrap();
        assert_eq!(q.loss(&[3.0]).unwrap(), 9.0);
        assert_eq!(q.gradient(&[3.0]).unwrap(), vec![6.0]);
        assert!(QuadraticObjective::new(vec![0.0], vec![0.0]).is_err());
        assert!(QuadraticObjective::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn quadratic_lipschitz_matches_dense_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..5.0)).collect();
            let h: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..5.0)).collect();
            let q = QuadraticObjective::new(vec![0.0; 6], c.clone()).unwrap();
            let m = DiagonalMetric::from_diag(h.clone()).unwrap();
            // Symmetrized H^{-1/2} A H^{-1/2} has the same spectrum as H⁻¹A.
            let dense = nalgebra::DMatrix::from_fn(6, 6, |i, j| if i == j { c[i] / h[i] } else { 0.0 });
            let top = dense.symmetric_eigen().eigenvalues.iter().fold(0.0_f64, |a, b| a.max(*b));
            assert!((q.lipschitz_h(&m).unwrap() - top).abs() <= 1e-12 * top);
        }
    }

    #[test]
    fn logistic_single_sample_at_zero() {
        let x = vec![0.3, -1.2, 2.0];
        for y in [0.0, 1.0] {
            let obj = logistic_objective(vec![Sample { input: x.clone(), target: vec![y] }]).unwrap();
            let theta = vec![0.0; 3];
            assert!((obj.loss(&theta).unwrap() - 2f64.ln()).abs() < 1e-15);
            let sign = if y == 1.0 { -1.0 } else { 1.0 };
            let g = obj.gradient(&theta).unwrap();
            for (gi, xi) in g.iter().zip(&x) {
                assert!((gi - sign * xi / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logistic_separable_asymptote() {
        let samples = vec![
            Sample { input: vec![1.0, 0.0], target: vec![1.0] },
            Sample { input: vec![-1.0, 0.0], target: vec![0.0] },
        ];
        let obj = logistic_objective(samples).unwrap();
        assert!(obj.loss(&[20.0, 0.0]).unwrap() < 1e-3);
        assert!(logistic_objective(Vec::new()).is_err());
    }

    #[test]
    fn logistic_gradient_check() {
        let obj = logistic_objective(task_samples(3, 1)).unwrap();
        let theta = init_parameters(obj.dim(), 1.0, 9);
        assert_grad_close(&obj, &theta, 1e-6);
    }

    #[test]
    fn mlp_gradient_checks() {
        for (act, loss, classes) in [
            (Activation::Tanh, LossKind::CrossEntropy, 2),
            (Activation::Tanh, LossKind::CrossEntropy, 1),
            (Activation::Sigmoid, LossKind::Mse, 2),
            (Activation::Softplus, LossKind::CrossEntropy, 3),
        ] {
            let samples = task_samples(4, classes);
            let obj = mlp_objective(vec![5, 4, 3, classes], samples, act, loss).unwrap();
            let theta = init_parameters(obj.dim(), 0.7, 12);
            assert_grad_close(&obj, &theta, 1e-5);
        }
    }

    #[test]
    fn mlp_zero_weights_mse() {
        let samples: Vec<Sample> =
            task_samples(6, 2).into_iter().map(|s| Sample { target: vec![0.0, 0.0], ..s }).collect();
        let obj = mlp_objective(vec![5, 3, 2], samples, Activation::Tanh, LossKind::Mse).unwrap();
        let mut theta = vec![0.0; obj.dim()];
        assert_eq!(obj.loss(&theta).unwrap(), 0.0);
        // Output bias only: loss = ½‖b‖².
        let n = theta.len();
        theta[n - 2] = 0.3;
        theta[n - 1] = -0.4;
        assert!((obj.loss(&theta).unwrap() - 0.5 * (0.09 + 0.16)).abs() < 1e-15);
        assert_grad_close(&obj, &theta, 1e-6);
    }

    #[test]
    fn mlp_reduces_to_linear_models() {
        let d = 5;
        let w: Vec<f64> = vec![0.4, -0.2, 0.1, 0.7, -0.5];
        // Hidden identity layer with W1 = I, b1 = 0; output weights w, bias 0.
        let mut theta = Vec::new();
        for i in 0..d {
            for j in 0..d {
                theta.push(if i == j { 1.0 } else { 0.0 });
            }
        }
        theta.extend(std::iter::repeat_n(0.0, d));
        theta.extend(&w);
        theta.push(0.0);

        let samples = task_samples(8, 1);
        let mlp = mlp_objective(vec![d, d, 1], samples.clone(), Activation::Identity, LossKind::CrossEntropy).unwrap();
        let lin = logistic_objective(samples.clone()).unwrap();
        assert!((mlp.loss(&theta).unwrap() - lin.loss(&w).unwrap()).abs() < 1e-14);
        let g = mlp.gradient(&theta).unwrap();
        let gl = lin.gradient(&w).unwrap();
        for j in 0..d {
            assert!((g[d * d + d + j] - gl[j]).abs() < 1e-14);
        }

        // Linear regression closed form.
        let reg: Vec<Sample> =
            samples.iter().map(|s| Sample { input: s.input.clone(), target: vec![s.target[0] * 2.0 - 1.0] }).collect();
        let mse = mlp_objective(vec![d, d, 1], reg.clone(), Activation::Identity, LossKind::Mse).unwrap();
        let direct: f64 =
            reg.iter().map(|s| 0.5 * (dot(&w, &s.input) - s.target[0]).powi(2)).sum::<f64>() / reg.len() as f64;
        assert!((mse.loss(&theta).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn mlp_rejects_bad_shapes() {
        assert!(Mlp::new(vec![3, 1], Activation::Tanh).is_err());
        let samples = task_samples(1, 2);
        assert!(mlp_objective(vec![4, 3, 2], samples, Activation::Tanh, LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn kl_scalar_value() {
        let (kl, clamped) = categorical_kl(&[0.9, 0.1], &[0.5, 0.5]);
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl - expect).abs() < 1e-15);
        assert!((kl - 0.3681).abs() < 1e-4);
        assert!(!clamped);
        let (kl, clamped) = categorical_kl(&[0.5, 0.5], &[1.0, 0.0]);
        assert!(clamped && kl.is_finite());
    }

    #[test]
    fn kl_anchor_zero_at_reference_and_gradient_check() {
        for classes in [1usize, 2] {
            let samples = task_samples(2, classes);
            let net: Arc<dyn Network> = Arc::new(Mlp::new(vec![5, 4, classes], Activation::Tanh).unwrap());
            let theta_ref = init_parameters(net.param_dim(), 0.8, 2);
            let anchor = kl_retain_anchor(net.clone(), &theta_ref, &samples).unwrap();
            let e = anchor.evaluate(&theta_ref).unwrap();
            assert_eq!(e.loss, 0.0);
            assert!(e.gradient.iter().all(|g| *g == 0.0));
            let mut rng = ChaCha8Rng::seed_from_u64(classes as u64);
            for _ in 0..10 {
                let theta: Vec<f64> = theta_ref.iter().map(|t| t + rng.random_range(-0.3..0.3)).collect();
                assert!(anchor.loss(&theta).unwrap() >= 0.0);
                assert_grad_close(&anchor, &theta, 1e-6);
            }
        }
    }

    #[test]
    fn kl_anchor_binary_head_matches_scalar_kl() {
        // Single logit: θ·x = logit(0.9) against θ_ref·x = 0.
        let net: Arc<dyn Network> = Arc::new(LinearNet { input_dim: 1 });
        let anchor = KlAnchor::new(net, &[0.0], vec![vec![1.0]]).unwrap();
        let z = (0.9f64 / 0.1).ln();
        let expect = categorical_kl(&[0.9, 0.1], &[0.5, 0.5]).0;
        assert!((anchor.loss(&[z]).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn task_generation_is_deterministic() {
        let a = make_task(16, 8, 12, 0.7, 42).unwrap();
        let b = make_task(16, 8, 12, 0.7, 42).unwrap();
        assert_eq!(a, b);
        let c = make_task(16, 8, 12, 0.7, 43).unwrap();
        assert_ne!(a, c);
        assert!(make_task(16, 0, 12, 0.7, 1).is_err());
        assert!(make_task(16, 4, 12, 1.5, 1).is_err());
        let back = ForgetRetainTask::from_fixture(&a.to_fixture()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn task_overlap_controls_mean_direction_cosine() {
        for overlap in [0.0, 0.5, 1.0] {
            let t = make_task(64, 400, 400, overlap, 7).unwrap();
            let mean = |s: &[LabeledInput]| -> Vec<f64> {
                let mut m = vec![0.0; 64];
                for x in s {
                    let sign = if x.label == 1 { 1.0 } else { -1.0 };
                    for (mi, xi) in m.iter_mut().zip(&x.input) {
                        *mi += sign * xi / s.len() as f64;
                    }
                }
                m
            };
            let (mf, mr) = (mean(&t.forget_samples), mean(&t.retain_samples));
            let cos = dot(&mf, &mr) / (norm(&mf) * norm(&mr));
            assert!((cos - overlap).abs() < 0.1, "overlap {overlap} measured {cos}");
        }
    }
}
