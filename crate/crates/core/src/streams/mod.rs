//! The three streams: uncertainty regression (US), simple-case classifier
//! (SC) and hard-case classifier (HC), plus uncertainty-routed inference.

mod ablation;
mod bundle;
pub mod pipeline;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backbone, ForwardOutput, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::label_model::max_uncertainty;
use crate::losses::{adaptive_threshold, Hyperparams};

pub use ablation::{ablation_variant, AblationLevel, HcLoss, HcObjective, TargetEncoding};
pub use bundle::{sha256_file, BundleManifest, WeightEntry, BUNDLE_FORMAT_VERSION, BUNDLE_MANIFEST};
pub use train::{
    log_to_csv, train_hc_net, train_sc_net, train_us_net, transfer_init, EpochLog, StreamData, TrainConfig,
    TrainedStream,
};

/// A backbone with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub backbone: Backbone,
    pub params: ParamStore,
}

impl Net {
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        self.backbone.forward(&self.params, batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    SimpleRoute,
    HardRoute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningDecision {
    pub route: Route,
    pub predicted_class: usize,
    pub referable: bool,
    /// Raw US-Net output.
    pub u_pred: f64,
    /// `u_pred` clamped to `[0, log_b K]`; this is what routing compares.
    pub u_clamped: f64,
    /// `u_clamped / log_b K`.
    pub u_norm: f64,
    /// 0.5 on the simple route, the adaptive threshold on the hard route.
    pub threshold_used: f64,
    pub class_probs: Vec<f64>,
    /// `1 - p(non-referable)`, the ROC score.
    pub referable_score: f64,
}

/// Fixed rule reported for the simple route.
pub const SIMPLE_ROUTE_THRESHOLD: f64 = 0.5;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Total probability of the classes that are not referred.
pub fn non_referable_probability(probs: &[f64], referable: &[bool]) -> f64 {
    probs.iter().zip(referable).filter(|&(_, &r)| !r).map(|(p, _)| p).sum()
}

/// Hard-route rule: refer iff `p(non-referable) < tau(u_norm)`.
/// Returns the decision and `tau`.
pub fn hard_route_referable(probs: &[f64], u_norm: f64, referable: &[bool], hp: &Hyperparams) -> Result<(bool, f64)> {
    if probs.len() != referable.len() {
        return Err(Error::shape(format!(
            "{} probabilities for {} classes",
            probs.len(),
            referable.len()
        )));
    }
    let tau = adaptive_threshold(u_norm, probs.len(), hp)?;
    Ok((non_referable_probability(probs, referable) < tau, tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBundle {
    pub num_classes: usize,
    /// Simple/hard cut-off, in units of `log_base`.
    pub u_threshold: f64,
    pub log_base: f64,
    pub hyperparams: Hyperparams,
    pub referable: Vec<bool>,
    pub variant: AblationLevel,
    pub us: Net,
    pub sc: Net,
    /// Absent when training saw no hard cases; hard-routed samples then use
    /// the simple-case classifier with the adaptive rule.
    pub hc: Option<Net>,
}

impl StreamBundle {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if self.us.backbone.output_width != 1 {
            return Err(Error::shape("uncertainty stream must have a single output"));
        }
        if self.sc.backbone.output_width != k {
            return Err(Error::shape(format!("simple-case stream width differs from K = {k}")));
        }
        if let Some(hc) = &self.hc {
            if hc.backbone.output_width != k {
                return Err(Error::shape(format!("hard-case stream width differs from K = {k}")));
            }
            if hc.backbone.input_width != self.sc.backbone.input_width {
                return Err(Error::shape("streams disagree on input width"));
            }
        }
        if self.us.backbone.input_width != self.sc.backbone.input_width {
            return Err(Error::shape("streams disagree on input width"));
        }
        if self.referable.len() != k {
            return Err(Error::shape("referable map does not cover every class"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.sc.backbone.input_width
    }

    pub fn is_sc_only(&self) -> bool {
        self.hc.is_none()
    }

    pub fn infer(&self, features: &[f64]) -> Result<ScreeningDecision> {
        let x = Tensor::new(vec![1, features.len().max(1)], features.to_vec())
            .map_err(|_| Error::shape("empty feature vector"))?;
        Ok(self.infer_batch(&x)?.remove(0))
    }

    /// Runs every stream once over the batch and routes each row.
    pub fn infer_batch(&self, features: &Tensor) -> Result<Vec<ScreeningDecision>> {
        if features.shape().len() != 2 || features.cols() != self.input_width() {
            return Err(Error::shape(format!(
                "feature batch {:?} does not match input width {}",
                features.shape(),
                self.input_width()
            )));
        }
        let u = self.us.forward(features)?.output;
        let sc = self.sc.forward(features)?.output;
        let hc = match &self.hc {
            Some(net) => Some(net.forward(features)?.output),
            None => None,
        };
        let max_u = max_uncertainty(self.num_classes, self.log_base);
        (0..features.rows())
            .map(|i| {
                let u_pred = u.row(i)[0];
                if u_pred.is_nan() {
                    return Err(Error::Numerical(format!("predicted uncertainty is NaN for row {i}")));
                }
                let u_clamped = u_pred.clamp(0.0, max_u);
                let u_norm = u_clamped / max_u;
                let (route, probs) = if u_clamped > self.u_threshold {
                    (Route::HardRoute, hc.as_ref().unwrap_or(&sc).row(i))
                } else {
                    (Route::SimpleRoute, sc.row(i))
                };
                let predicted_class = argmax(probs);
                let (referable, threshold_used) = match route {
                    Route::SimpleRoute => (self.referable[predicted_class], SIMPLE_ROUTE_THRESHOLD),
                    Route::HardRoute => hard_route_referable(probs, u_norm, &self.referable, &self.hyperparams)?,
                };
                Ok(ScreeningDecision {
                    route,
                    predicted_class,
                    referable,
                    u_pred,
                    u_clamped,
                    u_norm,
                    threshold_used,
                    class_probs: probs.to_vec(),
                    referable_score: 1.0 - non_referable_probability(probs, &self.referable),
                })
            })
            .collect()
    }
}
