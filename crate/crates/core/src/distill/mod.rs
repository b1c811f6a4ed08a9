//! Distillation objectives with analytic gradients.
//!
//! * [`kd_loss`]: cross-entropy plus temperature-scaled KL on logits.
//! * [`freq_loss`]: MSE between stacked spatial half spectra of channel-aligned features.
//! * [`proj_loss`]: MSE between a per-position affine projection of student
//!   features and teacher features.
//!
//! Every loss returns a [`LossReport`] whose gradients are keyed by the
//! argument they differentiate, so [`total_loss`] can merge them.

mod align;
mod config;
mod feature;
mod fit;
mod gradcheck;
mod kd;

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use align::{channel_align, channel_align_adjoint, channel_unpool, pool_window};
pub use config::{DistillConfig, LayerSelection};
pub use feature::{freq_loss, proj_loss, Projector};
pub use fit::{fit_student_features, FitOptions, FitResult};
pub use gradcheck::{gradcheck, gradcheck_with, FaultInjection, GradOp, GradcheckReport, GRADCHECK_STEP};
pub use kd::{kd_loss, KdTerms, KlDirection};

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("beta must be non-negative, got {0}")]
    Beta(f64),
    #[error("bin count must be at least 1")]
    Bins,
    #[error("label {label} at batch index {index} is outside [0, {classes})")]
    Label { index: usize, label: usize, classes: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("cannot pool {c_in} channels up to {c_out}")]
    Upsample { c_in: usize, c_out: usize },
    #[error("layer selection first:{first},last:{last} does not fit depth {depth} of the {side}")]
    Selection {
        first: usize,
        last: usize,
        depth: usize,
        side: &'static str,
    },
    #[error("bad layer selection `{0}`; expected first:X,last:Y")]
    SelectionSyntax(String),
    #[error("invalid fit options: {0}")]
    FitOptions(String),
    #[error("fit diverged at step {step}: loss {loss} exceeds 1e6 x initial")]
    Diverged { step: usize, loss: f64, trace: Vec<f64> },
}

/// The argument a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradKey {
    StudentLogits,
    StudentFeatures,
    ProjectorWeight,
    ProjectorBias,
}

/// Transform and reduction conventions a report was computed under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conventions {
    pub rfft_norm: String,
    pub kl_base: String,
    pub reduction: String,
    pub kl_direction: KlDirection,
}

impl Conventions {
    pub fn with_direction(kl_direction: KlDirection) -> Self {
        Self {
            rfft_norm: "none".into(),
            kl_base: "nats".into(),
            reduction: "mean".into(),
            kl_direction,
        }
    }
}

impl Default for Conventions {
    fn default() -> Self {
        Self::with_direction(KlDirection::default())
    }
}

/// A loss value, its parts, and gradients.
///
/// `total == kd + beta * feature` always holds. A pure logit loss has
/// `feature = 0, beta = 0`; a pure feature loss has `kd = 0, beta = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub kd: f64,
    pub feature: f64,
    pub beta: f64,
    pub gradients: BTreeMap<GradKey, ArrayD<f64>>,
    pub conventions: Conventions,
    /// Cross-entropy and KL parts, for reports that include a logit loss.
    pub kd_terms: Option<KdTerms>,
}

#[derive(Serialize)]
struct LossReportJson<'a> {
    total: f64,
    kd: f64,
    feature: f64,
    beta: f64,
    conventions: &'a Conventions,
}

impl LossReport {
    pub(crate) fn feature_only(value: f64, gradients: BTreeMap<GradKey, ArrayD<f64>>) -> Self {
        Self {
            total: value,
            kd: 0.0,
            feature: value,
            beta: 1.0,
            gradients,
            conventions: Conventions::default(),
            kd_terms: None,
        }
    }

    pub fn gradient(&self, key: GradKey) -> Option<&ArrayD<f64>> {
        self.gradients.get(&key)
    }

    /// The serialized form: `{total, kd, feature, beta, conventions}`.
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(LossReportJson {
            total: self.total,
            kd: self.kd,
            feature: self.feature,
            beta: self.beta,
            conventions: &self.conventions,
        })
        .expect("plain struct serializes")
    }
}

impl Serialize for LossReport {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        LossReportJson {
            total: self.total,
            kd: self.kd,
            feature: self.feature,
            beta: self.beta,
            conventions: &self.conventions,
        }
        .serialize(serializer)
    }
}

/// `L_total = L_kd + beta * L_feature`.
///
/// Gradients are combined per argument: kd gradients pass through, feature
/// gradients are scaled by `beta`, and entries sharing a key are summed.
pub fn total_loss(kd: &LossReport, feature: &LossReport, beta: f64) -> Result<LossReport, DistillError> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(DistillError::Beta(beta));
    }
    if !kd.total.is_finite() || !feature.total.is_finite() {
        return Err(DistillError::NonFinite("loss report"));
    }
    let mut gradients = kd.gradients.clone();
    for (key, g) in &feature.gradients {
        let scaled = g * beta;
        match gradients.get_mut(key) {
            Some(existing) => {
                if existing.shape() != scaled.shape() {
                    return Err(DistillError::Shape(format!(
                        "{key:?} gradients have shapes {:?} and {:?}",
                        existing.shape(),
                        scaled.shape()
                    )));
                }
                *existing += &scaled;
            }
            None => {
                gradients.insert(*key, scaled);
            }
        }
    }
    Ok(LossReport {
        total: kd.total + beta * feature.total,
        kd: kd.total,
        feature: feature.total,
        beta,
        gradients,
        conventions: kd.conventions.clone(),
        kd_terms: kd.kd_terms,
    })
}
