//! Training objectives of the three streams and the uncertainty-adaptive
//! referral threshold.
//!
//! Every loss is defined once as a graph builder (`*_graph`) so that training
//! and gradient checking share the same code. The plain-value functions
//! evaluate those builders on constant inputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Sign convention of the feature-decoupling hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UfdSign {
    /// `max(0, h(u) - D)`: penalises feature pairs closer than the margin.
    Hinge,
    /// `-max(0, h(u) - D)`: the literal leading-minus form, kept for study.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Focusing weight: `g(u) = gamma * u`.
    pub gamma: f64,
    /// Margin slope: `h(u) = min(alpha * u, 1)`.
    pub alpha: f64,
    /// Threshold curvature.
    pub beta: f64,
    /// Scalar weight on the decoupling term in the joint loss.
    pub ufd_weight: f64,
    pub ufd_sign: UfdSign,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 4.0,
            alpha: 1.4,
            beta: 2.0,
            ufd_weight: 1.0,
            ufd_sign: UfdSign::Hinge,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("ufd_weight", self.ufd_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Focal exponent `g(u) = gamma * u`.
pub fn focal_exponent(u: f64, gamma: f64) -> f64 {
    gamma * u
}

/// Dynamic margin `h(u) = min(alpha * u, 1)`.
pub fn decoupling_margin(u: f64, alpha: f64) -> f64 {
    (alpha * u).min(1.0)
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_prob_rows(probs: &Tensor) -> Result<()> {
    if probs.shape().len() != 2 {
        return Err(Error::shape(format!(
            "probabilities must be [N, K], got {:?}",
            probs.shape()
        )));
    }
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "prediction row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

fn check_uncertainties(u: &[f64], n: usize) -> Result<()> {
    if u.len() != n {
        return Err(Error::shape(format!("{} uncertainty scores for {n} samples", u.len())));
    }
    if let Some(bad) = u.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "uncertainty must be finite and nonnegative, got {bad}"
        )));
    }
    Ok(())
}

/// `(1/N) sum (pred - target)^2` over `[N, 1]` columns.
pub fn mse_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    g.mean(sq)
}

/// `-(1/N) sum_i sum_k t_ik ln p_ik`.
pub fn cross_entropy_graph(g: &mut Graph, probs: Var, targets: Var) -> Var {
    let n = g.value(probs).rows() as f64;
    let lp = g.ln(probs, PROB_FLOOR);
    let tl = g.mul(targets, lp);
    let s = g.sum(tl);
    g.scale(s, -1.0 / n)
}

/// `-(1/N) sum_i sum_k (1 - p_ik)^(gamma u_i) t_ik ln p_ik`.
pub fn ugf_graph(g: &mut Graph, probs: Var, targets: Var, u: &[f64], gamma: f64) -> Var {
    let n = g.value(probs).rows() as f64;
    let lp = g.ln(probs, PROB_FLOOR);
    let tl = g.mul(targets, lp);
    let neg = g.scale(probs, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let exps = u.iter().map(|&ui| focal_exponent(ui, gamma)).collect();
    let w = g.pow_rows(one_minus, exps);
    let wtl = g.mul(w, tl);
    let s = g.sum(wtl);
    g.scale(s, -1.0 / n)
}

/// Mean hinge on the Pearson distance between disease and uncertainty features.
pub fn ufd_graph(g: &mut Graph, f_di: Var, f_un: Var, u: &[f64], hp: &Hyperparams) -> Var {
    let d = g.pearson_rows(f_di, f_un);
    let margins: Vec<f64> = u.iter().map(|&ui| decoupling_margin(ui, hp.alpha)).collect();
    let h = g.constant(Tensor::from_parts(vec![margins.len(), 1], margins));
    let gap = g.sub(h, d);
    let hinge = g.relu(gap);
    let loss = g.mean(hinge);
    match hp.ufd_sign {
        UfdSign::Hinge => loss,
        UfdSign::Printed => g.scale(loss, -1.0),
    }
}

/// `L_UGF + w * L_UFD`.
pub fn joint_graph(g: &mut Graph, ugf: Var, ufd: Var, hp: &Hyperparams) -> Var {
    let weighted = if hp.ufd_weight == 1.0 {
        ufd
    } else {
        g.scale(ufd, hp.ufd_weight)
    };
    g.add(ugf, weighted)
}

pub fn mse_loss(pred_u: &[f64], true_u: &[f64]) -> Result<f64> {
    if pred_u.len() != true_u.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} targets",
            pred_u.len(),
            true_u.len()
        )));
    }
    if pred_u.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::column(pred_u)?);
    let t = g.constant(Tensor::column(true_u)?);
    let l = mse_graph(&mut g, p, t);
    Ok(g.scalar(l))
}

pub fn cross_entropy(pred_probs: &Tensor, targets: &Tensor) -> Result<f64> {
    check_same_shape(pred_probs, targets, "cross-entropy predictions vs targets")?;
    check_prob_rows(pred_probs)?;
    let mut g = Graph::new();
    let p = g.constant(pred_probs.clone());
    let t = g.constant(targets.clone());
    let l = cross_entropy_graph(&mut g, p, t);
    Ok(g.scalar(l))
}

pub fn ugf_loss(pred_probs: &Tensor, targets: &Tensor, u: &[f64], hp: &Hyperparams) -> Result<f64> {
    check_same_shape(pred_probs, targets, "focal predictions vs targets")?;
    check_prob_rows(pred_probs)?;
    check_uncertainties(u, pred_probs.rows())?;
    let mut g = Graph::new();
    let p = g.constant(pred_probs.clone());
    let t = g.constant(targets.clone());
    let l = ugf_graph(&mut g, p, t, u, hp.gamma);
    Ok(g.scalar(l))
}

fn check_feature_rows(f: &Tensor) -> Result<()> {
    if f.shape().len() != 2 || f.cols() < 2 {
        return Err(Error::shape(format!(
            "feature matrix must be [N, F] with F >= 2, got {:?}",
            f.shape()
        )));
    }
    if f.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    Ok(())
}

/// `1 - r` for two equal-length vectors. Zero-variance input is defined as
/// distance 1 and logged.
pub fn pearson_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let fa = Tensor::new(vec![1, a.len().max(1)], a.to_vec()).map_err(|_| Error::shape("empty feature vector"))?;
    let fb = Tensor::new(vec![1, b.len().max(1)], b.to_vec()).map_err(|_| Error::shape("empty feature vector"))?;
    check_same_shape(&fa, &fb, "pearson operands")?;
    check_feature_rows(&fa)?;
    check_feature_rows(&fb)?;
    if crate::autodiff::graph::PearsonParts::new(a, b).is_none() {
        log::warn!("zero-variance feature vector; Pearson distance defined as 1");
    }
    let mut g = Graph::new();
    let x = g.constant(fa);
    let y = g.constant(fb);
    let d = g.pearson_rows(x, y);
    Ok(g.value(d).item())
}

/// Row-wise Pearson distances between two `[N, F]` feature matrices.
/// Zero-variance rows give 1 without logging.
pub fn pearson_distances(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    check_same_shape(a, b, "pearson operands")?;
    check_feature_rows(a)?;
    check_feature_rows(b)?;
    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let y = g.constant(b.clone());
    let d = g.pearson_rows(x, y);
    Ok(g.value(d).data().to_vec())
}

pub fn ufd_loss(f_di: &Tensor, f_un: &Tensor, u: &[f64], hp: &Hyperparams) -> Result<f64> {
    check_same_shape(f_di, f_un, "decoupling features")?;
    check_feature_rows(f_di)?;
    check_feature_rows(f_un)?;
    check_uncertainties(u, f_di.rows())?;
    let mut g = Graph::new();
    let a = g.constant(f_di.clone());
    let b = g.constant(f_un.clone());
    let l = ufd_graph(&mut g, a, b, u, hp);
    Ok(g.scalar(l))
}

pub fn joint_loss(ugf: f64, ufd: f64) -> Result<f64> {
    if !ugf.is_finite() || !ufd.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss component ({ugf}, {ufd})")));
    }
    Ok(ugf + ufd)
}

/// Maps a predicted uncertainty onto `[0, 1]` by dividing by its maximum
/// `log_base(K)` and clamping.
pub fn normalize_uncertainty(u_pred: f64, num_classes: usize, log_base: f64) -> f64 {
    let max = crate::label_model::max_uncertainty(num_classes, log_base);
    if !u_pred.is_finite() || max <= 0.0 {
        return if u_pred > 0.0 { 1.0 } else { 0.0 };
    }
    (u_pred / max).clamp(0.0, 1.0)
}

/// `tau = 1 - ((K-1)/K) (1 - u)^beta` for a normalised uncertainty `u`.
pub fn adaptive_threshold(u_norm: f64, num_classes: usize, hp: &Hyperparams) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "adaptive threshold needs K >= 2, got {num_classes}"
        )));
    }
    if u_norm.is_nan() {
        return Err(Error::InvalidArgument("normalised uncertainty is NaN".into()));
    }
    let u = u_norm.clamp(0.0, 1.0);
    let k = num_classes as f64;
    // Same value as the closed form, rearranged so both endpoints are exact.
    let q = (1.0 - u).powf(hp.beta);
    Ok((1.0 + (k - 1.0) * (1.0 - q)) / k)
}
