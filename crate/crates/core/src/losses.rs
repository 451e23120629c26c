//! Margin-softmax losses on cosine logits, and the instance-FPR penalty.
//!
//! For sample `i` with label `y`, every loss here has the form
//!
//! ```text
//! L_i = -log( e^{s·G(cos θ_y)} / (e^{s·G(cos θ_y)} + Σ_{j≠y} e^{H_j}) )
//! ```
//!
//! with `G` the target modulation (identity, `cos θ - m`, or `cos(θ + m)`)
//! and `H_j = s·cos θ_j`. The penalty kinds shift every non-target logit of
//! the row by the same amount, `H_j = s·(cos θ_j + α·γ̄_i / γ_u)`, where
//! `γ̄_i` is the row's weighted instance FPR against the batch threshold.
//!
//! The mask and threshold are constants of the iteration; the gradient flows
//! through `γ̄_i` via the masked `F(cos θ_j) = sgn(z)|z|^p` terms only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fmt_shape, l2_normalize_columns, matmul_a_bt, matmul_at_b, Matrix};
use crate::thresholding::ThresholdEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    PlainSoftmax,
    Cosface,
    Arcface,
    FprPenaltyCosface,
    FprPenaltyArcface,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::PlainSoftmax,
        LossKind::Cosface,
        LossKind::Arcface,
        LossKind::FprPenaltyCosface,
        LossKind::FprPenaltyArcface,
    ];

    pub fn is_penalty(self) -> bool {
        matches!(self, LossKind::FprPenaltyCosface | LossKind::FprPenaltyArcface)
    }

    fn is_angular(self) -> bool {
        matches!(self, LossKind::Arcface | LossKind::FprPenaltyArcface)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::PlainSoftmax => "plain-softmax",
            LossKind::Cosface => "cosface",
            LossKind::Arcface => "arcface",
            LossKind::FprPenaltyCosface => "fpr-penalty-cosface",
            LossKind::FprPenaltyArcface => "fpr-penalty-arcface",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub s: f64,
    pub m: f64,
    pub alpha: f64,
    pub p: f64,
    pub gamma_u: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::FprPenaltyCosface,
            s: 64.0,
            m: 0.35,
            alpha: 0.05,
            p: 2.0,
            gamma_u: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.s > 0.0 && self.s.is_finite()) {
            return bad(format!("scale s must be positive, got {}", self.s));
        }
        let m_max = if self.kind.is_angular() { std::f64::consts::FRAC_PI_2 } else { 1.0 };
        if !(self.m >= 0.0 && self.m < m_max) {
            return bad(format!("margin m={} outside [0, {m_max}) for {}", self.m, self.kind));
        }
        if !(self.gamma_u > 0.0 && self.gamma_u < 1.0) {
            return bad(format!("gamma_u must lie in (0, 1), got {}", self.gamma_u));
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return bad(format!("exponent p must be >= 1, got {}", self.p));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        Ok(())
    }

    /// Target-logit modulation `G(cos)` and its derivative.
    fn target(&self, cos: f64) -> (f64, f64) {
        match self.kind {
            LossKind::PlainSoftmax => (cos, 1.0),
            LossKind::Cosface | LossKind::FprPenaltyCosface => (cos - self.m, 1.0),
            LossKind::Arcface | LossKind::FprPenaltyArcface => {
                let lim = 1.0 - ARCCOS_CLAMP;
                let c = cos.clamp(-lim, lim);
                let theta = c.acos();
                let g = (theta + self.m).cos();
                let dg = if cos.abs() < lim { (theta + self.m).sin() / theta.sin() } else { 0.0 };
                (g, dg)
            }
        }
    }
}

/// Distance from ±1 at which `cos θ` is clamped before `acos`.
pub const ARCCOS_CLAMP: f64 = 1e-7;

/// Cosine logits of a batch against `c` classes, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    pub cosines: Matrix,
    pub labels: Vec<usize>,
}

impl LogitsBatch {
    pub fn new(cosines: Matrix, labels: Vec<usize>) -> Result<Self> {
        if cosines.rows() != labels.len() {
            return Err(Error::dims("logits labels", cosines.rows(), labels.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= cosines.cols()) {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {} classes", cosines.cols())));
        }
        if cosines.data().iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) {
            return Err(Error::InvalidArgument("cosines must be finite and within [-1, 1]".into()));
        }
        Ok(Self { cosines, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.cosines.cols()
    }
}

/// `cos[i][j] = x_i · W_j` for unit-norm rows `x_i` and unit-norm columns
/// `W_j` of the `d x c` weight matrix, clamped to `[-1, 1]`.
pub fn cosine_logits(embeddings: &Matrix, class_weights: &Matrix, labels: &[usize]) -> Result<LogitsBatch> {
    if embeddings.cols() != class_weights.rows() {
        return Err(Error::dims("cosine_logits embedding dim", class_weights.rows(), embeddings.cols()));
    }
    let mut cos = matmul_a_bt(embeddings, &class_weights.transpose())?;
    cos.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    LogitsBatch::new(cos, labels.to_vec())
}

/// `F(z) = sgn(z)|z|^p`; equals `z^p` whenever `z > 0`.
pub fn fpr_weight(z: f64, p: f64) -> f64 {
    if z == 0.0 {
        0.0
    } else {
        z.signum() * z.abs().powf(p)
    }
}

/// `F'(z) = p|z|^{p-1}`.
pub fn fpr_weight_derivative(z: f64, p: f64) -> f64 {
    if p == 1.0 {
        1.0
    } else {
        p * z.abs().powf(p - 1.0)
    }
}

/// Per-batch mask and instance false positive rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyState {
    pub threshold: ThresholdEstimate,
    /// `mask[i][j]` is true iff `j != y_i` and `cos θ_j > T_u`.
    pub mask: Vec<Vec<bool>>,
    pub instance_fpr: Vec<f64>,
    pub weighted_instance_fpr: Vec<f64>,
}

/// Plain and weighted instance FPR of every row against `threshold`.
pub fn instance_fpr(batch: &LogitsBatch, threshold: &ThresholdEstimate, p: f64) -> Result<PenaltyState> {
    let c = batch.num_classes();
    if c < 2 {
        return Err(Error::InvalidArgument("instance FPR needs at least 2 classes".into()));
    }
    if !threshold.t_u.is_finite() {
        return Err(Error::NonFinite("threshold".into()));
    }
    let t = threshold.t_u;
    let denom = (c - 1) as f64;
    let mut mask = Vec::with_capacity(batch.batch_size());
    let mut plain = Vec::with_capacity(batch.batch_size());
    let mut weighted = Vec::with_capacity(batch.batch_size());
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = batch.cosines.row(i);
        let row_mask: Vec<bool> = row.iter().enumerate().map(|(j, &v)| j != y && v > t).collect();
        let count = row_mask.iter().filter(|b| **b).count();
        let wsum: f64 = row.iter().zip(&row_mask).filter(|(_, m)| **m).map(|(v, _)| fpr_weight(*v, p)).sum();
        plain.push(count as f64 / denom);
        weighted.push(wsum / denom);
        mask.push(row_mask);
    }
    Ok(PenaltyState {
        threshold: *threshold,
        mask,
        instance_fpr: plain,
        weighted_instance_fpr: weighted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean over the batch.
    pub loss: f64,
    /// Gradient of the mean loss w.r.t. every cosine.
    pub grad_wrt_cosines: Matrix,
    pub per_sample_loss: Vec<f64>,
    pub penalty_state: Option<PenaltyState>,
}

pub fn loss_forward(batch: &LogitsBatch, cfg: &LossConfig, threshold: Option<&ThresholdEstimate>) -> Result<LossOutput> {
    cfg.validate()?;
    let state = if cfg.kind.is_penalty() {
        let t = threshold.ok_or_else(|| {
            Error::InvalidArgument(format!("loss kind {} requires a threshold estimate", cfg.kind))
        })?;
        Some(instance_fpr(batch, t, cfg.p)?)
    } else {
        None
    };
    evaluate(batch, cfg, state)
}

/// Forward pass with an externally supplied penalty state (mask and
/// weighted instance FPRs are taken as given).
pub fn loss_forward_with_state(batch: &LogitsBatch, cfg: &LossConfig, state: PenaltyState) -> Result<LossOutput> {
    cfg.validate()?;
    if !cfg.kind.is_penalty() {
        return Err(Error::InvalidArgument(format!("loss kind {} takes no penalty state", cfg.kind)));
    }
    evaluate(batch, cfg, Some(state))
}

pub fn loss_backward(batch: &LogitsBatch, cfg: &LossConfig, out: &LossOutput) -> Result<Matrix> {
    if out.grad_wrt_cosines.shape() != batch.cosines.shape() || out.per_sample_loss.len() != batch.batch_size() {
        return Err(Error::dims(
            "loss_backward",
            fmt_shape(batch.cosines.shape()),
            fmt_shape(out.grad_wrt_cosines.shape()),
        ));
    }
    Ok(evaluate(batch, cfg, out.penalty_state.clone())?.grad_wrt_cosines)
}

fn evaluate(batch: &LogitsBatch, cfg: &LossConfig, state: Option<PenaltyState>) -> Result<LossOutput> {
    let (n, c) = batch.cosines.shape();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if c < 2 {
        return Err(Error::InvalidArgument("softmax losses need at least 2 classes".into()));
    }
    if let Some(st) = &state {
        if st.mask.len() != n || st.weighted_instance_fpr.len() != n || st.mask.iter().any(|r| r.len() != c) {
            return Err(Error::dims("penalty state", format!("{n}x{c}"), st.mask.len()));
        }
    }
    let s = cfg.s;
    let inv_n = 1.0 / n as f64;
    let coupling_scale = s * cfg.alpha / cfg.gamma_u / (c - 1) as f64;
    let mut grad = Matrix::zeros(n, c);
    let mut per_sample = Vec::with_capacity(n);
    let mut logits = vec![0.0; c];

    for i in 0..n {
        let y = batch.labels[i];
        let row = batch.cosines.row(i);
        let shift = state
            .as_ref()
            .map_or(0.0, |st| cfg.alpha * st.weighted_instance_fpr[i] / cfg.gamma_u);
        let (g, dg) = cfg.target(row[y]);
        for (j, z) in logits.iter_mut().enumerate() {
            *z = if j == y { s * g } else { s * (row[j] + shift) };
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let loss_i = lse - logits[y];
        if !loss_i.is_finite() {
            return Err(Error::NonFinite(format!("loss of sample {i}")));
        }
        per_sample.push(loss_i);

        let grow = grad.row_mut(i);
        let mut non_target_mass = 0.0;
        for j in 0..c {
            let prob = (logits[j] - lse).exp();
            if j == y {
                grow[j] = (prob - 1.0) * s * dg;
            } else {
                grow[j] = prob * s;
                non_target_mass += prob;
            }
        }
        if let Some(st) = &state {
            if cfg.alpha > 0.0 {
                // every H_k (k != y) depends on cos θ_j through γ̄_i
                let factor = non_target_mass * coupling_scale;
                for j in 0..c {
                    if st.mask[i][j] {
                        grow[j] += factor * fpr_weight_derivative(row[j], cfg.p);
                    }
                }
            }
        }
        grow.iter_mut().for_each(|v| *v *= inv_n);
    }

    if !grad.is_finite() {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    let loss = per_sample.iter().sum::<f64>() * inv_n;
    Ok(LossOutput {
        loss,
        grad_wrt_cosines: grad,
        per_sample_loss: per_sample,
        penalty_state: state,
    })
}

/// Backpropagates cosine gradients to the raw (unnormalized, `d x c`) class
/// weights and to the unit-norm embeddings.
///
/// Returns `(grad_raw_weights, grad_embeddings)`. The weight gradient goes
/// through the column normalization: `(I - ŵŵᵀ) ∂L/∂ŵ / ||w||`.
pub fn classifier_grads(embeddings: &Matrix, raw_class_weights: &Matrix, grad_wrt_cosines: &Matrix) -> Result<(Matrix, Matrix)> {
    let (n, d) = embeddings.shape();
    let c = raw_class_weights.cols();
    if raw_class_weights.rows() != d || grad_wrt_cosines.shape() != (n, c) {
        return Err(Error::dims(
            "classifier_grads",
            format!("emb {n}x{d}, weights {d}x{c}, grad {n}x{c}"),
            format!(
                "emb {}, weights {}, grad {}",
                fmt_shape(embeddings.shape()),
                fmt_shape(raw_class_weights.shape()),
                fmt_shape(grad_wrt_cosines.shape())
            ),
        ));
    }
    let norms = raw_class_weights.column_norms();
    let w_hat = l2_normalize_columns(raw_class_weights)?;
    let grad_embeddings = matmul_a_bt(grad_wrt_cosines, &w_hat)?;
    let mut grad_w = matmul_at_b(embeddings, grad_wrt_cosines)?;
    for j in 0..c {
        let along: f64 = (0..d).map(|r| w_hat[(r, j)] * grad_w[(r, j)]).sum();
        for r in 0..d {
            grad_w[(r, j)] = (grad_w[(r, j)] - along * w_hat[(r, j)]) / norms[j];
        }
    }
    Ok((grad_w, grad_embeddings))
}
