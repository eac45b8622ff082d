//! Multinomial logistic regression on frozen features.

use scl_autodiff::Tensor;

use crate::error::contract;
use crate::Result;

pub const MAX_ITERS: usize = 1000;
pub const GRAD_TOL: f64 = 1e-6;

/// Scores are `x·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `[C, D]`
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub l2_penalty: f64,
}

impl LinearClassifier {
    pub fn zeros(classes: usize, dim: usize, l2_penalty: f64) -> Self {
        Self {
            weights: Tensor::zeros(&[classes, dim]),
            bias: vec![0.0; classes],
            l2_penalty,
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `[n, C]` pre-softmax scores.
    pub fn scores(&self, x: &Tensor) -> Tensor {
        let (n, d, c) = (x.shape()[0], self.dim(), self.classes());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let xi = x.row(i);
            for k in 0..c {
                let w = self.weights.row(k);
                let mut s = self.bias[k];
                for j in 0..d {
                    s += xi[j] * w[j];
                }
                out[i * c + k] = s;
            }
        }
        Tensor::new(vec![n, c], out).expect("sizes")
    }

    /// Penalised objective `Σ_i CE_i + (penalty/2)·‖W‖²`.
    pub fn objective(&self, x: &Tensor, labels: &[usize]) -> f64 {
        objective_and_grad(self, x, labels, false).0
    }
}

fn objective_and_grad(
    m: &LinearClassifier,
    x: &Tensor,
    labels: &[usize],
    want_grad: bool,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (d, c) = (m.dim(), m.classes());
    let scores = m.scores(x);
    let mut loss = 0.0;
    let mut gw = if want_grad {
        vec![0.0; c * d]
    } else {
        Vec::new()
    };
    let mut gb = if want_grad { vec![0.0; c] } else { Vec::new() };
    for (i, &y) in labels.iter().enumerate() {
        let s = scores.row(i);
        let mx = s.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
        loss += mx + z.ln() - s[y];
        if want_grad {
            let xi = x.row(i);
            for k in 0..c {
                let r = (s[k] - mx).exp() / z - if k == y { 1.0 } else { 0.0 };
                gb[k] += r;
                let row = &mut gw[k * d..(k + 1) * d];
                for j in 0..d {
                    row[j] += r * xi[j];
                }
            }
        }
    }
    let w = m.weights.data();
    loss += 0.5 * m.l2_penalty * w.iter().map(|v| v * v).sum::<f64>();
    if want_grad {
        for (g, &v) in gw.iter_mut().zip(w) {
            *g += m.l2_penalty * v;
        }
    }
    (loss, gw, gb)
}

/// Fits by full-batch gradient descent with step halving, starting from
/// `init` or zero. Stops once the gradient norm reaches [`GRAD_TOL`] or after
/// [`MAX_ITERS`] iterations.
pub fn fit_linear(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    l2_penalty: f64,
    init: Option<LinearClassifier>,
) -> Result<LinearClassifier> {
    if x.rank() != 2 || x.shape()[0] != labels.len() || labels.is_empty() {
        return Err(contract(format!(
            "{} labels for features {:?}",
            labels.len(),
            x.shape()
        )));
    }
    if !x.is_finite() {
        return Err(contract("features contain non-finite values"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if l2_penalty.is_nan() || l2_penalty < 0.0 {
        return Err(contract(format!(
            "penalty must be nonnegative, got {l2_penalty}"
        )));
    }
    let d = x.shape()[1];
    let mut m = match init {
        Some(mut m) if m.classes() == classes && m.dim() == d => {
            m.l2_penalty = l2_penalty;
            m
        }
        Some(_) => return Err(contract("initial classifier has the wrong shape")),
        None => LinearClassifier::zeros(classes, d, l2_penalty),
    };
    let mut step = 1.0;
    let (mut loss, mut gw, mut gb) = objective_and_grad(&m, x, labels, true);
    for _ in 0..MAX_ITERS {
        let g2: f64 = gw.iter().chain(&gb).map(|v| v * v).sum();
        if g2.sqrt() <= GRAD_TOL {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = m.clone();
            for (w, g) in trial.weights.data_mut().iter_mut().zip(&gw) {
                *w -= step * g;
            }
            for (b, g) in trial.bias.iter_mut().zip(&gb) {
                *b -= step * g;
            }
            let (tl, tgw, tgb) = objective_and_grad(&trial, x, labels, true);
            if tl <= loss - 0.5 * step * g2 {
                (m, loss, gw, gb) = (trial, tl, tgw, tgb);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step *= 2.0;
    }
    Ok(m)
}

/// Rows are the normalised class means of `x`; biases are zero.
pub fn imprint_weights(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    l2_penalty: f64,
) -> Result<LinearClassifier> {
    if x.rank() != 2 || x.shape()[0] != labels.len() {
        return Err(contract(format!(
            "{} labels for features {:?}",
            labels.len(),
            x.shape()
        )));
    }
    let d = x.shape()[1];
    let mut m = LinearClassifier::zeros(classes, d, l2_penalty);
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(contract(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
        for (w, v) in m.weights.data_mut()[y * d..(y + 1) * d]
            .iter_mut()
            .zip(x.row(i))
        {
            *w += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(contract(format!("class {c} has no examples")));
    }
    for row in m.weights.data_mut().chunks_mut(d) {
        let n = row
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(scl_autodiff::NORM_EPS);
        for v in row {
            *v /= n;
        }
    }
    Ok(m)
}
