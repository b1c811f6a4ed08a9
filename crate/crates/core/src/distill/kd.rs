use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Conventions, DistillError, GradKey, LossReport};

/// Which distribution weights the KL log-ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_teacher || p_student)`.
    #[default]
    TeacherReference,
    /// `KL(p_student || p_teacher)`.
    StudentReference,
}

/// Batch-mean parts of a logit distillation loss, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdTerms {
    pub ce: f64,
    /// KL between the tempered distributions, before the `T^2` factor.
    pub kl: f64,
    pub temperature: f64,
}

impl KdTerms {
    /// `T^2 * KL`, the term that enters the loss with weight `alpha`.
    pub fn scaled_kl(&self) -> f64 {
        self.temperature * self.temperature * self.kl
    }
}

fn log_softmax(z: ArrayView1<'_, f64>, scale: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let lse = max + z.iter().map(|&v| (v * scale - max).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v * scale - lse).collect()
}

/// `(1 - alpha) * CE(s, y) + alpha * T^2 * KL(softmax(t/T), softmax(s/T))`,
/// averaged over the batch, with its gradient with respect to the student logits.
pub fn kd_loss(
    student_logits: ArrayView2<'_, f64>,
    teacher_logits: ArrayView2<'_, f64>,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
    direction: KlDirection,
) -> Result<LossReport, DistillError> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(DistillError::Temperature(temperature));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DistillError::Alpha(alpha));
    }
    let (batch, classes) = student_logits.dim();
    if teacher_logits.dim() != (batch, classes) {
        return Err(DistillError::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student_logits.dim(),
            teacher_logits.dim()
        )));
    }
    if labels.len() != batch || batch == 0 {
        return Err(DistillError::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if classes < 2 {
        return Err(DistillError::TooFewClasses(classes));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(DistillError::Label { index, label, classes });
    }
    if student_logits.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFinite("student logits"));
    }
    if teacher_logits.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFinite("teacher logits"));
    }

    let inv_t = 1.0 / temperature;
    let inv_b = 1.0 / batch as f64;
    let mut grad = Array2::<f64>::zeros((batch, classes));
    let (mut ce_sum, mut kl_sum) = (0.0, 0.0);

    for (b, &y) in labels.iter().enumerate() {
        let s = student_logits.row(b);
        let log_q = log_softmax(s, 1.0);
        let log_ps = log_softmax(s, inv_t);
        let log_pt = log_softmax(teacher_logits.row(b), inv_t);
        ce_sum -= log_q[y];

        // gradient of KL with respect to the tempered student logits s/T
        let mut g_kl = vec![0.0; classes];
        let kl = match direction {
            KlDirection::TeacherReference => {
                let mut kl = 0.0;
                for k in 0..classes {
                    let pt = log_pt[k].exp();
                    kl += pt * (log_pt[k] - log_ps[k]);
                    g_kl[k] = log_ps[k].exp() - pt;
                }
                kl
            }
            KlDirection::StudentReference => {
                let kl: f64 = (0..classes).map(|k| log_ps[k].exp() * (log_ps[k] - log_pt[k])).sum();
                for k in 0..classes {
                    g_kl[k] = log_ps[k].exp() * ((log_ps[k] - log_pt[k]) - kl);
                }
                kl
            }
        };
        kl_sum += kl;

        for k in 0..classes {
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad[[b, k]] = inv_b * ((1.0 - alpha) * (log_q[k].exp() - onehot) + alpha * temperature * g_kl[k]);
        }
    }

    let terms = KdTerms {
        ce: ce_sum * inv_b,
        kl: kl_sum * inv_b,
        temperature,
    };
    let value = (1.0 - alpha) * terms.ce + alpha * terms.scaled_kl();
    let mut gradients = BTreeMap::new();
    gradients.insert(GradKey::StudentLogits, grad.into_dyn());
    Ok(LossReport {
        total: value,
        kd: value,
        feature: 0.0,
        beta: 0.0,
        gradients,
        conventions: Conventions::with_direction(direction),
        kd_terms: Some(terms),
    })
}
