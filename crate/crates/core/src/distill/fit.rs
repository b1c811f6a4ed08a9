//! Gradient descent on free feature variables against the frequency loss.

use ndarray::{Array4, ArrayView4};

use super::align::{channel_align, channel_unpool};
use super::feature::freq_loss;
use super::{DistillError, GradKey};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { steps: 500, lr: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub features: Array4<f64>,
    /// Loss before each step, then the loss after the last step.
    pub trace: Vec<f64>,
    /// MSE between the fitted features and the teacher, both pooled to the
    /// shared channel count.
    pub feature_mse: f64,
    /// MSE against the unpooled teacher. When the student has fewer channels
    /// the fitted features are first spread back with [`channel_unpool`].
    pub raw_residual: f64,
}

impl FitResult {
    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

fn mse(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Plain fixed-step gradient descent from `init`. Aborts with
/// [`DistillError::Diverged`] once the loss exceeds `1e6` times its initial value.
pub fn fit_student_features(
    teacher: ArrayView4<'_, f64>,
    init: Array4<f64>,
    options: FitOptions,
) -> Result<FitResult, DistillError> {
    if options.steps == 0 {
        return Err(DistillError::FitOptions("steps must be at least 1".into()));
    }
    if !options.lr.is_finite() || options.lr <= 0.0 {
        return Err(DistillError::FitOptions(format!(
            "lr must be positive, got {}",
            options.lr
        )));
    }
    let mut x = init;
    let mut trace = Vec::with_capacity(options.steps + 1);
    let mut initial = None;
    for step in 0..=options.steps {
        let report = freq_loss(x.view(), teacher)?;
        let loss = report.total;
        trace.push(loss);
        let start = *initial.get_or_insert(loss);
        if !loss.is_finite() || (start > 0.0 && loss > 1e6 * start) {
            return Err(DistillError::Diverged { step, loss, trace });
        }
        if step == options.steps {
            break;
        }
        let grad = report
            .gradient(GradKey::StudentFeatures)
            .expect("freq_loss reports a feature gradient");
        x.zip_mut_with(grad, |v, g| *v -= options.lr * g);
    }

    let (c_s, c_t) = (x.dim().1, teacher.dim().1);
    let c = c_s.min(c_t);
    let teacher_owned = teacher.to_owned();
    let feature_mse = mse(&channel_align(x.view(), c)?, &channel_align(teacher, c)?);
    let raw_residual = if c_s < c_t {
        mse(&channel_unpool(x.view(), c_t), &teacher_owned)
    } else {
        mse(&channel_align(x.view(), c_t)?, &teacher_owned)
    };
    Ok(FitResult {
        features: x,
        trace,
        feature_mse,
        raw_residual,
    })
}
