//! Differentiable objectives with hand-derived gradients: axis-aligned
//! quadratics, linear regression, multinomial logistic regression, and a
//! one-hidden-layer tanh MLP, plus a central finite-difference gradient
//! checker.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::partition::Dataset;

/// Flattened model parameters. All entries are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Usage("parameter vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite parameter at coordinate {i}: {}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance to `other`; dims must match.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Exact bit equality, for reduction/equivalence tests.
    pub fn bits_eq(&self, other: &ParamVector) -> bool {
        self.dim() == other.dim()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Mutable view; callers must keep entries finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// Loss and gradient at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub loss: f64,
    pub grad: ParamVector,
}

/// A differentiable objective. Data-bound kinds index into a shared
/// [`Dataset`]; the quadratic is analytic and ignores batch contents.
#[derive(Debug, Clone)]
pub enum Objective {
    /// f(theta) = 1/2 sum_i c_i theta_i^2 with nonnegative curvatures.
    Quadratic { curvature: Vec<f64> },
    /// Squared error 1/2 (x^T theta - y)^2, mean over the batch.
    LinReg { data: Arc<Dataset> },
    /// Multinomial softmax cross-entropy; theta is class-major (p per class).
    LogReg { data: Arc<Dataset> },
    /// One hidden tanh layer, softmax cross-entropy head.
    Mlp { data: Arc<Dataset>, hidden: usize },
}

pub const MAX_MLP_HIDDEN: usize = 64;

impl Objective {
    pub fn quadratic(curvature: Vec<f64>) -> Result<Self> {
        if curvature.is_empty() {
            return Err(Error::Usage(
                "quadratic needs at least one coordinate".into(),
            ));
        }
        if curvature.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Usage(
                "quadratic curvatures must be finite and >= 0".into(),
            ));
        }
        Ok(Objective::Quadratic { curvature })
    }

    pub fn linreg(data: Arc<Dataset>) -> Self {
        Objective::LinReg { data }
    }

    pub fn logreg(data: Arc<Dataset>) -> Self {
        Objective::LogReg { data }
    }

    pub fn mlp(data: Arc<Dataset>, hidden: usize) -> Result<Self> {
        if hidden == 0 || hidden > MAX_MLP_HIDDEN {
            return Err(Error::Usage(format!(
                "mlp hidden width {hidden} out of range 1..={MAX_MLP_HIDDEN}"
            )));
        }
        Ok(Objective::Mlp { data, hidden })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Objective::Quadratic { .. } => "quadratic",
            Objective::LinReg { .. } => "linreg",
            Objective::LogReg { .. } => "logreg",
            Objective::Mlp { .. } => "mlp",
        }
    }

    pub fn data(&self) -> Option<&Arc<Dataset>> {
        match self {
            Objective::Quadratic { .. } => None,
            Objective::LinReg { data }
            | Objective::LogReg { data }
            | Objective::Mlp { data, .. } => Some(data),
        }
    }

    /// Same model over a different dataset (e.g. the held-out test set).
    /// The feature space and class count must match.
    pub fn rebind(&self, data: Arc<Dataset>) -> Result<Self> {
        if let Some(old) = self.data() {
            if old.num_features() != data.num_features() || old.num_classes() != data.num_classes()
            {
                return Err(Error::Usage(format!(
                    "cannot rebind: dataset shape {}x{} classes {} vs {}x{} classes {}",
                    old.len(),
                    old.num_features(),
                    old.num_classes(),
                    data.len(),
                    data.num_features(),
                    data.num_classes()
                )));
            }
        }
        Ok(match self {
            Objective::Quadratic { curvature } => Objective::Quadratic {
                curvature: curvature.clone(),
            },
            Objective::LinReg { .. } => Objective::LinReg { data },
            Objective::LogReg { .. } => Objective::LogReg { data },
            Objective::Mlp { hidden, .. } => Objective::Mlp {
                data,
                hidden: *hidden,
            },
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic { curvature } => curvature.len(),
            Objective::LinReg { data } => data.num_features(),
            Objective::LogReg { data } => data.num_features() * data.num_classes(),
            Objective::Mlp { data, hidden } => {
                let p = data.num_features();
                let k = data.num_classes();
                p * hidden + hidden + hidden * k + k
            }
        }
    }

    pub fn n_examples(&self) -> usize {
        self.data().map(|d| d.len()).unwrap_or(1)
    }

    /// Initial parameters: zeros for the analytic/linear kinds, uniform
    /// +-1/sqrt(fan_in) per layer for the MLP, drawn from the labeled stream.
    pub fn init_params(&self, stream: &RngStream) -> ParamVector {
        match self {
            Objective::Mlp { data, hidden } => {
                let p = data.num_features();
                let k = data.num_classes();
                let mut rng = stream.rng();
                let mut values = Vec::with_capacity(self.dim());
                let bound1 = 1.0 / (p as f64).sqrt();
                for _ in 0..(p * hidden + hidden) {
                    values.push(rng.random_range(-bound1..bound1));
                }
                let bound2 = 1.0 / (*hidden as f64).sqrt();
                for _ in 0..(hidden * k + k) {
                    values.push(rng.random_range(-bound2..bound2));
                }
                ParamVector::from_raw(values)
            }
            _ => ParamVector::zeros(self.dim()),
        }
    }

    fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        if let Some(data) = self.data() {
            if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
                return Err(Error::Usage(format!(
                    "batch index {bad} out of range (n = {})",
                    data.len()
                )));
            }
        }
        Ok(())
    }

    /// Mean loss and gradient over the batch. Deterministic given
    /// `(self, theta, batch)`.
    pub fn eval(&self, theta: &ParamVector, batch: &[usize]) -> Result<GradResult> {
        if theta.dim() != self.dim() {
            return Err(Error::Usage(format!(
                "theta has dim {}, objective expects {}",
                theta.dim(),
                self.dim()
            )));
        }
        self.check_batch(batch)?;

        let (loss, grad) = match self {
            Objective::Quadratic { curvature } => {
                let th = theta.values();
                let loss = 0.5
                    * th.iter()
                        .zip(curvature)
                        .map(|(t, c)| c * t * t)
                        .sum::<f64>();
                let grad = th.iter().zip(curvature).map(|(t, c)| c * t).collect();
                (loss, grad)
            }
            Objective::LinReg { data } => eval_linreg(data, theta, batch),
            Objective::LogReg { data } => eval_logreg(data, theta, batch),
            Objective::Mlp { data, hidden } => eval_mlp(data, *hidden, theta, batch),
        };

        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss: {loss}")));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i}: {}",
                grad[i]
            )));
        }
        Ok(GradResult {
            loss,
            grad: ParamVector::from_raw(grad),
        })
    }

    /// Analytic Lipschitz constant of the gradient where available:
    /// quadratic -> max curvature, linreg -> lambda_max(X^T X)/n,
    /// logreg -> lambda_max(X^T X)/(4n) (the classical logistic bound),
    /// mlp -> none.
    pub fn smoothness_constant(&self) -> Option<f64> {
        match self {
            Objective::Quadratic { curvature } => {
                curvature.iter().cloned().fold(None, |acc: Option<f64>, c| {
                    Some(acc.map_or(c, |a| a.max(c)))
                })
            }
            Objective::LinReg { data } => Some(gram_lambda_max(data)),
            Objective::LogReg { data } => Some(gram_lambda_max(data) / 4.0),
            Objective::Mlp { .. } => None,
        }
    }

    /// Classification accuracy of `theta` over the whole bound dataset.
    /// For linreg a prediction counts when it rounds to the label.
    pub fn accuracy(&self, theta: &ParamVector) -> Result<f64> {
        let data = self
            .data()
            .ok_or_else(|| Error::Unsupported("accuracy requires a data-bound objective".into()))?;
        let mut correct = 0usize;
        for i in 0..data.len() {
            let pred = self.predict_class(theta, data.row(i))?;
            if pred == data.label(i) as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    fn predict_class(&self, theta: &ParamVector, x: &[f64]) -> Result<usize> {
        match self {
            Objective::Quadratic { .. } => Err(Error::Unsupported(
                "quadratic has no class predictions".into(),
            )),
            Objective::LinReg { .. } => {
                let pred: f64 = x.iter().zip(theta.values()).map(|(a, b)| a * b).sum();
                Ok(pred.round().max(0.0) as usize)
            }
            Objective::LogReg { data } => {
                let p = data.num_features();
                let th = theta.values();
                let mut best = (0usize, f64::NEG_INFINITY);
                for k in 0..data.num_classes() {
                    let z: f64 = x
                        .iter()
                        .zip(&th[k * p..(k + 1) * p])
                        .map(|(a, b)| a * b)
                        .sum();
                    if z > best.1 {
                        best = (k, z);
                    }
                }
                Ok(best.0)
            }
            Objective::Mlp { data, hidden } => {
                let logits = mlp_forward(data, *hidden, theta, x).1;
                let mut best = (0usize, f64::NEG_INFINITY);
                for (k, &z) in logits.iter().enumerate() {
                    if z > best.1 {
                        best = (k, z);
                    }
                }
                Ok(best.0)
            }
        }
    }
}

fn eval_linreg(data: &Dataset, theta: &ParamVector, batch: &[usize]) -> (f64, Vec<f64>) {
    let p = data.num_features();
    let th = theta.values();
    let mut loss = 0.0;
    let mut grad = vec![0.0; p];
    for &i in batch {
        let x = data.row(i);
        let r: f64 = x.iter().zip(th).map(|(a, b)| a * b).sum::<f64>() - f64::from(data.label(i));
        loss += 0.5 * r * r;
        for (g, xv) in grad.iter_mut().zip(x) {
            *g += r * xv;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    for g in &mut grad {
        *g *= inv;
    }
    (loss, grad)
}

fn eval_logreg(data: &Dataset, theta: &ParamVector, batch: &[usize]) -> (f64, Vec<f64>) {
    let p = data.num_features();
    let k = data.num_classes();
    let th = theta.values();
    let mut loss = 0.0;
    let mut grad = vec![0.0; p * k];
    let mut logits = vec![0.0; k];
    for &i in batch {
        let x = data.row(i);
        for (c, z) in logits.iter_mut().enumerate() {
            *z = x
                .iter()
                .zip(&th[c * p..(c + 1) * p])
                .map(|(a, b)| a * b)
                .sum();
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - m).exp()).sum();
        let y = data.label(i) as usize;
        loss += -(logits[y] - m - sum_exp.ln());
        for c in 0..k {
            let pc = (logits[c] - m).exp() / sum_exp;
            let coeff = pc - f64::from(c == y);
            for (g, xv) in grad[c * p..(c + 1) * p].iter_mut().zip(x) {
                *g += coeff * xv;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    for g in &mut grad {
        *g *= inv;
    }
    (loss, grad)
}

// theta layout: W1 (p*h, column per hidden unit), b1 (h), W2 (h*k, column per
// class), b2 (k).
fn mlp_slices(p: usize, h: usize, k: usize, th: &[f64]) -> (&[f64], &[f64], &[f64], &[f64]) {
    let (w1, rest) = th.split_at(p * h);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(h * k);
    (w1, b1, w2, b2)
}

fn mlp_forward(
    data: &Dataset,
    hidden: usize,
    theta: &ParamVector,
    x: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let p = data.num_features();
    let k = data.num_classes();
    let (w1, b1, w2, b2) = mlp_slices(p, hidden, k, theta.values());
    let mut act = vec![0.0; hidden];
    for j in 0..hidden {
        let z: f64 = x
            .iter()
            .zip(&w1[j * p..(j + 1) * p])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + b1[j];
        act[j] = z.tanh();
    }
    let mut logits = vec![0.0; k];
    for (c, z) in logits.iter_mut().enumerate() {
        *z = act
            .iter()
            .zip(&w2[c * hidden..(c + 1) * hidden])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + b2[c];
    }
    (act, logits)
}

fn eval_mlp(
    data: &Dataset,
    hidden: usize,
    theta: &ParamVector,
    batch: &[usize],
) -> (f64, Vec<f64>) {
    let p = data.num_features();
    let k = data.num_classes();
    let (_, _, w2, _) = mlp_slices(p, hidden, k, theta.values());
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.dim()];
    let w1_len = p * hidden;
    let b1_off = w1_len;
    let w2_off = b1_off + hidden;
    let b2_off = w2_off + hidden * k;

    for &i in batch {
        let x = data.row(i);
        let (act, logits) = mlp_forward(data, hidden, theta, x);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - m).exp()).sum();
        let y = data.label(i) as usize;
        loss += -(logits[y] - m - sum_exp.ln());

        // output deltas
        let mut dz = vec![0.0; k];
        for (c, d) in dz.iter_mut().enumerate() {
            *d = (logits[c] - m).exp() / sum_exp - f64::from(c == y);
        }
        // W2, b2
        for c in 0..k {
            for j in 0..hidden {
                grad[w2_off + c * hidden + j] += dz[c] * act[j];
            }
            grad[b2_off + c] += dz[c];
        }
        // hidden deltas through tanh
        for j in 0..hidden {
            let mut da = 0.0;
            for (c, d) in dz.iter().enumerate() {
                da += d * w2[c * hidden + j];
            }
            let dpre = da * (1.0 - act[j] * act[j]);
            for (i_feat, xv) in x.iter().enumerate() {
                grad[j * p + i_feat] += dpre * xv;
            }
            grad[b1_off + j] += dpre;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    for g in &mut grad {
        *g *= inv;
    }
    (loss, grad)
}

// Largest eigenvalue of (1/n) X^T X by power iteration with a deterministic
// start vector.
fn gram_lambda_max(data: &Dataset) -> f64 {
    let p = data.num_features();
    let n = data.len();
    let mut gram = vec![0.0; p * p];
    for i in 0..n {
        let x = data.row(i);
        for a in 0..p {
            for b in a..p {
                gram[a * p + b] += x[a] * x[b];
            }
        }
    }
    let inv = 1.0 / n as f64;
    for a in 0..p {
        for b in a..p {
            gram[a * p + b] *= inv;
            gram[b * p + a] = gram[a * p + b];
        }
    }
    power_iteration(&gram, p)
}

pub(crate) fn power_iteration(matrix: &[f64], p: usize) -> f64 {
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut w = vec![0.0; p];
        for a in 0..p {
            for b in 0..p {
                w[a] += matrix[a * p + b] * v[b];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in &mut w {
            *x /= norm;
        }
        let mut next = 0.0;
        for a in 0..p {
            let mut row = 0.0;
            for b in 0..p {
                row += matrix[a * p + b] * w[b];
            }
            next += w[a] * row;
        }
        let done = (next - lambda).abs() <= 1e-13 * next.abs().max(1.0);
        lambda = next;
        v = w;
        if done {
            break;
        }
    }
    lambda
}

/// Central finite-difference check: max over coordinates of
/// `|g_fd - g| / (|g| + 1e-12)`.
pub fn grad_check(obj: &Objective, theta: &ParamVector, batch: &[usize], h: f64) -> Result<f64> {
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::Usage(format!("h = {h} must lie in [1e-8, 1e-3]")));
    }
    let analytic = obj.eval(theta, batch)?;
    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for i in 0..theta.dim() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = obj.eval(&probe, batch)?.loss;
        probe.values_mut()[i] = orig - h;
        let minus = obj.eval(&probe, batch)?.loss;
        probe.values_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let g = analytic.grad.values()[i];
        worst = worst.max((fd - g).abs() / (g.abs() + 1e-12));
    }
    Ok(worst)
}
