//! Differentiable loss families with hand-written gradients.
//!
//! Batch losses and gradients are accumulated with [`ExactSum`], so a batch
//! and the same batch with every sample duplicated give bitwise identical
//! results.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{GaussianLinear, Sample};
use crate::error::{Error, Result};
use crate::numeric::{cholesky, cholesky_solve, symmetric_eigenvalues, ExactSum};
use crate::params::{BlockLayout, ParamVector, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    /// Per-sample loss `½(xᵀθ − y)² + (λ/2)‖θ‖²`, no bias.
    Ridge { lambda: f64 },
    /// Binary logistic loss on labels in {−1, +1} with weight and bias blocks.
    LogisticL2 { lambda: f64 },
    /// Fully connected network; one block per layer (weights then bias).
    /// Softmax cross-entropy when `output_dim > 1`, squared error otherwise.
    Mlp { hidden: Vec<usize>, activation: Activation, l2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub input_dim: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: ParamVector,
}

impl ModelSpec {
    pub fn ridge(input_dim: usize, lambda: f64) -> Self {
        Self { family: Family::Ridge { lambda }, input_dim, output_dim: 1 }
    }

    pub fn logistic(input_dim: usize, lambda: f64) -> Self {
        Self { family: Family::LogisticL2 { lambda }, input_dim, output_dim: 1 }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, output_dim: usize, activation: Activation, l2: f64) -> Self {
        Self { family: Family::Mlp { hidden, activation, l2 }, input_dim, output_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let reg = match &self.family {
            Family::Ridge { lambda } | Family::LogisticL2 { lambda } => {
                if self.output_dim != 1 {
                    return Err(Error::Config("ridge/logistic models have output_dim = 1".into()));
                }
                *lambda
            }
            Family::Mlp { hidden, l2, .. } => {
                if hidden.contains(&0) {
                    return Err(Error::Config("hidden layer widths must be positive".into()));
                }
                *l2
            }
        };
        if !(reg >= 0.0 && reg.is_finite()) {
            return Err(Error::Config(format!("regularization must be finite and >= 0, got {reg}")));
        }
        Ok(())
    }

    fn l2(&self) -> f64 {
        match &self.family {
            Family::Ridge { lambda } | Family::LogisticL2 { lambda } => *lambda,
            Family::Mlp { l2, .. } => *l2,
        }
    }

    pub fn is_classifier(&self) -> bool {
        match &self.family {
            Family::Ridge { .. } => false,
            Family::LogisticL2 { .. } => true,
            Family::Mlp { .. } => self.output_dim > 1,
        }
    }

    /// Layer widths from input to output (MLP only).
    fn widths(&self) -> Vec<usize> {
        match &self.family {
            Family::Mlp { hidden, .. } => {
                let mut w = Vec::with_capacity(hidden.len() + 2);
                w.push(self.input_dim);
                w.extend(hidden);
                w.push(self.output_dim);
                w
            }
            _ => vec![self.input_dim, self.output_dim],
        }
    }

    /// Default layout: every block but the last is representation, the last
    /// is the head. Ridge has a single head block.
    pub fn layout(&self) -> BlockLayout {
        let n = self.num_blocks();
        self.layout_with_representation(n.saturating_sub(1))
    }

    /// Total number of parameters.
    pub fn param_count(&self) -> usize {
        match &self.family {
            Family::Ridge { .. } => self.input_dim,
            Family::LogisticL2 { .. } => self.input_dim + 1,
            Family::Mlp { .. } => self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        match &self.family {
            Family::Ridge { .. } => 1,
            Family::LogisticL2 { .. } => 2,
            Family::Mlp { hidden, .. } => hidden.len() + 1,
        }
    }

    /// Layout with the first `rep_blocks` blocks tagged Representation.
    pub fn layout_with_representation(&self, rep_blocks: usize) -> BlockLayout {
        let role = |i: usize| if i < rep_blocks { Role::Representation } else { Role::Head };
        let parts: Vec<(String, usize, Role)> = match &self.family {
            Family::Ridge { .. } => vec![("w".into(), self.input_dim, role(0))],
            Family::LogisticL2 { .. } => {
                vec![("w".into(), self.input_dim, role(0)), ("b".into(), 1, role(1))]
            }
            Family::Mlp { .. } => self
                .widths()
                .windows(2)
                .enumerate()
                .map(|(i, w)| (format!("layer{i}"), w[0] * w[1] + w[1], role(i)))
                .collect(),
        };
        BlockLayout::from_sizes(parts).expect("model dimensions validated")
    }

    /// Initial parameters: zeros for linear families, scaled Gaussian weights
    /// and zero biases for the MLP.
    pub fn init_params<R: Rng>(&self, layout: Arc<BlockLayout>, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(layout);
        if let Family::Mlp { .. } = self.family {
            let widths = self.widths();
            let v = p.values_mut();
            let mut off = 0;
            for w in widths.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
                for x in &mut v[off..off + fan_in * fan_out] {
                    let z: f64 = rng.sample(StandardNormal);
                    *x = scale * z;
                }
                off += fan_in * fan_out + fan_out;
            }
        }
        p
    }

    fn check_batch(&self, params: &ParamVector, batch: &[&Sample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let expected = self.param_count();
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        for s in batch {
            if s.x.len() != self.input_dim {
                return Err(Error::DimensionMismatch { expected: self.input_dim, got: s.x.len() });
            }
        }
        Ok(())
    }

    /// Mean loss over the batch (plus regularization) and its gradient.
    pub fn loss_and_grad(&self, params: &ParamVector, batch: &[&Sample]) -> Result<LossEval> {
        self.check_batch(params, batch)?;
        let theta = params.values();
        let mut value_acc = ExactSum::new();
        let mut grad_acc = vec![ExactSum::new(); theta.len()];
        let mut scratch = vec![0.0; theta.len()];
        let mut mlp_ws = MlpWorkspace::default();
        for s in batch {
            let loss = match &self.family {
                Family::Ridge { .. } => ridge_sample(theta, s, Some(&mut scratch)),
                Family::LogisticL2 { .. } => logistic_sample(theta, s, Some(&mut scratch))?,
                Family::Mlp { activation, .. } => {
                    self.mlp_sample(*activation, theta, s, Some(&mut scratch), &mut mlp_ws)?
                }
            };
            value_acc.add(loss);
            for (acc, g) in grad_acc.iter_mut().zip(&scratch) {
                acc.add(*g);
            }
        }
        let n = batch.len() as f64;
        let l2 = self.l2();
        let reg = 0.5 * l2 * theta.iter().map(|t| t * t).sum::<f64>();
        let value = value_acc.value() / n + reg;
        let grad: Vec<f64> = grad_acc.iter().zip(theta).map(|(acc, t)| acc.value() / n + l2 * t).collect();
        if !value.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        let grad = ParamVector::from_values(Arc::clone(params.layout()), grad)?;
        Ok(LossEval { value, grad })
    }

    /// Mean loss without the gradient.
    pub fn loss(&self, params: &ParamVector, batch: &[&Sample]) -> Result<f64> {
        self.check_batch(params, batch)?;
        let theta = params.values();
        let mut acc = ExactSum::new();
        let mut ws = MlpWorkspace::default();
        for s in batch {
            acc.add(match &self.family {
                Family::Ridge { .. } => ridge_sample(theta, s, None),
                Family::LogisticL2 { .. } => logistic_sample(theta, s, None)?,
                Family::Mlp { activation, .. } => self.mlp_sample(*activation, theta, s, None, &mut ws)?,
            });
        }
        let reg = 0.5 * self.l2() * theta.iter().map(|t| t * t).sum::<f64>();
        Ok(acc.value() / batch.len() as f64 + reg)
    }

    /// Predicted class: argmax of logits for the MLP, sign for logistic
    /// (returned as class 1 for +1 and 0 for −1).
    pub fn predict_class(&self, params: &ParamVector, x: &[f64]) -> usize {
        let theta = params.values();
        match &self.family {
            Family::Ridge { .. } => 0,
            Family::LogisticL2 { .. } => {
                let d = x.len();
                let z: f64 = theta[..d].iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + theta[d];
                usize::from(z >= 0.0)
            }
            Family::Mlp { activation, .. } => {
                let mut ws = MlpWorkspace::default();
                self.mlp_forward(*activation, theta, x, &mut ws);
                let out = ws.acts.last().expect("output layer");
                out.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            }
        }
    }

    /// Whether `sample` is classified correctly.
    pub fn is_correct(&self, params: &ParamVector, sample: &Sample) -> bool {
        let predicted = self.predict_class(params, &sample.x);
        match self.family {
            Family::LogisticL2 { .. } => (sample.y > 0.0) == (predicted == 1),
            _ => predicted as f64 == sample.y,
        }
    }

    fn mlp_forward(&self, act: Activation, theta: &[f64], x: &[f64], ws: &mut MlpWorkspace) {
        let widths = self.widths();
        let layers = widths.len() - 1;
        ws.pre.resize(layers, Vec::new());
        ws.acts.resize(layers + 1, Vec::new());
        ws.acts[0].clear();
        ws.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..layers {
            let (din, dout) = (widths[l], widths[l + 1]);
            let w = &theta[off..off + din * dout];
            let b = &theta[off + din * dout..off + din * dout + dout];
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input = &before[l];
            let pre = &mut ws.pre[l];
            pre.clear();
            for o in 0..dout {
                let row = &w[o * din..(o + 1) * din];
                pre.push(row.iter().zip(input.iter()).map(|(a, b)| a * b).sum::<f64>() + b[o]);
            }
            let out = &mut after[0];
            out.clear();
            if l + 1 < layers {
                out.extend(pre.iter().map(|&z| act.apply(z)));
            } else {
                out.extend_from_slice(pre);
            }
            off += din * dout + dout;
        }
    }

    fn mlp_sample(
        &self,
        act: Activation,
        theta: &[f64],
        s: &Sample,
        grad: Option<&mut [f64]>,
        ws: &mut MlpWorkspace,
    ) -> Result<f64> {
        self.mlp_forward(act, theta, &s.x, ws);
        let widths = self.widths();
        let layers = widths.len() - 1;
        let logits = &ws.acts[layers];
        // dL/d(output pre-activation)
        let (loss, mut delta) = if self.output_dim > 1 {
            let label = class_label(s.y, self.output_dim)?;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let loss = sum.ln() + m - logits[label];
            let mut d: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            d[label] -= 1.0;
            (loss, d)
        } else {
            let r = logits[0] - s.y;
            (0.5 * r * r, vec![r])
        };
        let Some(grad) = grad else { return Ok(loss) };
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += widths[l] * widths[l + 1] + widths[l + 1];
        }
        for l in (0..layers).rev() {
            let (din, dout) = (widths[l], widths[l + 1]);
            let o = offsets[l];
            let input = &ws.acts[l];
            for j in 0..dout {
                let row = &mut grad[o + j * din..o + (j + 1) * din];
                for (g, a) in row.iter_mut().zip(input) {
                    *g = delta[j] * a;
                }
                grad[o + din * dout + j] = delta[j];
            }
            if l > 0 {
                let w = &theta[o..o + din * dout];
                let mut prev = vec![0.0; din];
                for j in 0..dout {
                    let row = &w[j * din..(j + 1) * din];
                    for (p, wv) in prev.iter_mut().zip(row) {
                        *p += delta[j] * wv;
                    }
                }
                for (i, p) in prev.iter_mut().enumerate() {
                    *p *= act.derivative(ws.pre[l - 1][i], ws.acts[l][i]);
                }
                delta = prev;
            }
        }
        Ok(loss)
    }

    /// Extreme eigenvalues `(μ, L)` of the ridge empirical-risk Hessian
    /// `(1/n) XᵀX + λI`.
    pub fn mu_l_exact(&self, data: &[Sample]) -> Result<(f64, f64)> {
        let Family::Ridge { lambda } = self.family else {
            return Err(Error::UnsupportedFamily("mu_l_exact"));
        };
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (h, _) = ridge_normal_equations(self.input_dim, lambda, data)?;
        let eig = symmetric_eigenvalues(&h, self.input_dim);
        Ok((eig[0], eig[eig.len() - 1]))
    }

    /// Ridge empirical risk minimizer via Cholesky with one refinement step.
    pub fn erm_closed_form(&self, layout: Arc<BlockLayout>, data: &[Sample]) -> Result<ParamVector> {
        let Family::Ridge { lambda } = self.family else {
            return Err(Error::UnsupportedFamily("erm_closed_form"));
        };
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = self.input_dim;
        let (a, rhs) = ridge_normal_equations(d, lambda, data)?;
        let l = cholesky(&a, d)?;
        let mut theta = cholesky_solve(&l, d, &rhs);
        let resid: Vec<f64> = (0..d).map(|i| rhs[i] - (0..d).map(|j| a[i * d + j] * theta[j]).sum::<f64>()).collect();
        let corr = cholesky_solve(&l, d, &resid);
        for (t, c) in theta.iter_mut().zip(corr) {
            *t += c;
        }
        ParamVector::from_values(layout, theta)
    }

    /// Exact population risk of ridge under the Gaussian linear generator for
    /// client `client`: `½(θ−θ*)ᵀΣ(θ−θ*) + ½s² + (λ/2)‖θ‖²`.
    pub fn population_risk_closed_form(
        &self,
        gen: &GaussianLinear,
        client: usize,
        params: &ParamVector,
    ) -> Result<f64> {
        let Family::Ridge { lambda } = self.family else {
            return Err(Error::UnsupportedFamily("population_risk_closed_form"));
        };
        let d = self.input_dim;
        if gen.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: gen.dim() });
        }
        let theta = params.values();
        let star = gen.theta_star_for(client);
        let diff: Vec<f64> = theta.iter().zip(star).map(|(a, b)| a - b).collect();
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                quad += diff[i] * gen.cov[i][j] * diff[j];
            }
        }
        let reg = 0.5 * lambda * theta.iter().map(|t| t * t).sum::<f64>();
        Ok(0.5 * quad + 0.5 * gen.noise_std * gen.noise_std + reg)
    }
}

#[derive(Default)]
struct MlpWorkspace {
    pre: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
}

fn class_label(y: f64, classes: usize) -> Result<usize> {
    if y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes {
        Ok(y as usize)
    } else {
        Err(Error::Config(format!("label {y} is not a class id below {classes}")))
    }
}

fn ridge_sample(theta: &[f64], s: &Sample, grad: Option<&mut [f64]>) -> f64 {
    let r = theta.iter().zip(&s.x).map(|(t, x)| t * x).sum::<f64>() - s.y;
    if let Some(g) = grad {
        for (g, x) in g.iter_mut().zip(&s.x) {
            *g = r * x;
        }
    }
    0.5 * r * r
}

fn logistic_sample(theta: &[f64], s: &Sample, grad: Option<&mut [f64]>) -> Result<f64> {
    if s.y != 1.0 && s.y != -1.0 {
        return Err(Error::Config(format!("logistic labels must be -1 or +1, got {}", s.y)));
    }
    let d = s.x.len();
    let z = theta[..d].iter().zip(&s.x).map(|(w, x)| w * x).sum::<f64>() + theta[d];
    let m = s.y * z;
    // softplus(-m), stable in both tails
    let loss = if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
    if let Some(g) = grad {
        // d/dz = -y * sigmoid(-m)
        let sig = if m > 0.0 {
            let e = (-m).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + m.exp())
        };
        let dz = -s.y * sig;
        for (g, x) in g[..d].iter_mut().zip(&s.x) {
            *g = dz * x;
        }
        g[d] = dz;
    }
    Ok(loss)
}

/// `((1/n) XᵀX + λI, (1/n) Xᵀy)` as a row-major matrix and vector.
fn ridge_normal_equations(d: usize, lambda: f64, data: &[Sample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = data.len() as f64;
    let mut a = vec![ExactSum::new(); d * d];
    let mut b = vec![ExactSum::new(); d];
    for s in data {
        if s.x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.x.len() });
        }
        for i in 0..d {
            b[i].add(s.x[i] * s.y);
            for j in 0..d {
                a[i * d + j].add(s.x[i] * s.x[j]);
            }
        }
    }
    let mut h: Vec<f64> = a.iter().map(|acc| acc.value() / n).collect();
    for i in 0..d {
        h[i * d + i] += lambda;
    }
    Ok((h, b.iter().map(|acc| acc.value() / n).collect()))
}
