//! Central finite-difference checks of the analytic loss gradients.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4, ArrayD, Dimension, Ix2, Ix4};
use serde::{Deserialize, Serialize};

use super::feature::{freq_loss, proj_loss, Projector};
use super::kd::{kd_loss, KlDirection};
use super::{total_loss, DistillError, GradKey};
use crate::rng::StreamRng;

/// Finite-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Relative errors divide by `max(|analytic|, |numeric|, SCALE_FLOOR)`, so
/// near-zero entries are compared on an absolute scale.
const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    KdLoss,
    FreqLoss,
    ProjLoss,
    Total,
}

impl GradOp {
    pub const ALL: [GradOp; 4] = [GradOp::KdLoss, GradOp::FreqLoss, GradOp::ProjLoss, GradOp::Total];
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradOp::KdLoss => "kd_loss",
            GradOp::FreqLoss => "freq_loss",
            GradOp::ProjLoss => "proj_loss",
            GradOp::Total => "total",
        })
    }
}

impl FromStr for GradOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.to_string() == s)
            .ok_or_else(|| format!("unknown op `{s}`; expected kd_loss, freq_loss, proj_loss or total"))
    }
}

/// Test hook: adds `delta` to one analytic gradient entry before comparing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultInjection {
    pub key: GradKey,
    /// Flat (row-major) index into the gradient.
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstEntry {
    pub key: GradKey,
    pub index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub op: GradOp,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub passed: bool,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<WorstEntry>,
}

type Params = BTreeMap<GradKey, ArrayD<f64>>;
type Objective = Box<dyn Fn(&Params) -> Result<(f64, Params), DistillError>>;

fn random_array(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(shape.to_vec(), || rng.uniform_in(lo, hi))
}

fn view4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("4-d parameter")
}

fn view2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d parameter")
}

/// Seeded instance: starting parameters and an objective returning the loss
/// and its analytic gradients over those parameters.
fn instance(op: GradOp, seed: u64) -> (Params, Objective) {
    let mut rng = StreamRng::new(seed);
    let mut params = Params::new();
    match op {
        GradOp::KdLoss => {
            params.insert(GradKey::StudentLogits, random_array(&mut rng, &[3, 5], -2.0, 2.0));
            let teacher = random_array(&mut rng, &[3, 5], -2.0, 2.0)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let labels: Vec<usize> = (0..3).map(|_| rng.below(5)).collect();
            let objective = move |p: &Params| {
                let r = kd_loss(
                    view2(&p[&GradKey::StudentLogits]),
                    teacher.view(),
                    &labels,
                    0.7,
                    2.0,
                    KlDirection::TeacherReference,
                )?;
                Ok((r.total, r.gradients))
            };
            (params, Box::new(objective))
        }
        GradOp::FreqLoss => {
            params.insert(
                GradKey::StudentFeatures,
                random_array(&mut rng, &[1, 6, 4, 5], -1.0, 1.0),
            );
            let teacher: Array4<f64> = random_array(&mut rng, &[1, 4, 4, 5], -1.0, 1.0)
                .into_dimensionality()
                .unwrap();
            let objective = move |p: &Params| {
                let r = freq_loss(view4(&p[&GradKey::StudentFeatures]), teacher.view())?;
                Ok((r.total, r.gradients))
            };
            (params, Box::new(objective))
        }
        GradOp::ProjLoss => {
            params.insert(
                GradKey::StudentFeatures,
                random_array(&mut rng, &[1, 3, 2, 2], -1.0, 1.0),
            );
            params.insert(GradKey::ProjectorWeight, random_array(&mut rng, &[5, 3], -0.6, 0.6));
            params.insert(GradKey::ProjectorBias, random_array(&mut rng, &[5], -0.5, 0.5));
            let teacher: Array4<f64> = random_array(&mut rng, &[1, 5, 2, 2], -1.0, 1.0)
                .into_dimensionality()
                .unwrap();
            let objective = move |p: &Params| {
                let projector = Projector::new(
                    view2(&p[&GradKey::ProjectorWeight]).to_owned(),
                    p[&GradKey::ProjectorBias]
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .expect("1-d bias")
                        .to_owned(),
                )?;
                let r = proj_loss(view4(&p[&GradKey::StudentFeatures]), teacher.view(), &projector)?;
                Ok((r.total, r.gradients))
            };
            (params, Box::new(objective))
        }
        GradOp::Total => {
            params.insert(GradKey::StudentLogits, random_array(&mut rng, &[2, 4], -2.0, 2.0));
            params.insert(
                GradKey::StudentFeatures,
                random_array(&mut rng, &[1, 3, 3, 4], -1.0, 1.0),
            );
            let teacher_logits: Array2<f64> = random_array(&mut rng, &[2, 4], -2.0, 2.0)
                .into_dimensionality()
                .unwrap();
            let teacher_feat: Array4<f64> = random_array(&mut rng, &[1, 5, 3, 4], -1.0, 1.0)
                .into_dimensionality()
                .unwrap();
            let labels: Vec<usize> = (0..2).map(|_| rng.below(4)).collect();
            let objective = move |p: &Params| {
                let kd = kd_loss(
                    view2(&p[&GradKey::StudentLogits]),
                    teacher_logits.view(),
                    &labels,
                    0.9,
                    1.0,
                    KlDirection::TeacherReference,
                )?;
                let feat = freq_loss(view4(&p[&GradKey::StudentFeatures]), teacher_feat.view())?;
                let r = total_loss(&kd, &feat, 0.2)?;
                Ok((r.total, r.gradients))
            };
            (params, Box::new(objective))
        }
    }
}

/// Compares analytic and central-difference gradients on a seeded instance.
pub fn gradcheck(op: GradOp, seed: u64, tolerance: f64) -> Result<GradcheckReport, DistillError> {
    gradcheck_with(op, seed, tolerance, None)
}

pub fn gradcheck_with(
    op: GradOp,
    seed: u64,
    tolerance: f64,
    fault: Option<FaultInjection>,
) -> Result<GradcheckReport, DistillError> {
    let (mut params, objective) = instance(op, seed);
    let (_, mut analytic) = objective(&params)?;
    if let Some(f) = fault {
        let g = analytic
            .get_mut(&f.key)
            .ok_or_else(|| DistillError::Shape(format!("{op} has no {:?} gradient", f.key)))?;
        let slot = g
            .as_slice_mut()
            .and_then(|s| s.get_mut(f.index))
            .ok_or_else(|| DistillError::Shape(format!("fault index {} out of range", f.index)))?;
        *slot += f.delta;
    }

    let keys: Vec<GradKey> = params.keys().copied().collect();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for key in keys {
        let grad = analytic
            .get(&key)
            .ok_or_else(|| DistillError::Shape(format!("{op} is missing the {key:?} gradient")))?
            .clone();
        let shape = grad.shape().to_vec();
        let indices: Vec<_> = ndarray::indices(shape.as_slice()).into_iter().collect();
        for idx in indices {
            let original = params[&key][&idx];
            params.get_mut(&key).unwrap()[&idx] = original + GRADCHECK_STEP;
            let (plus, _) = objective(&params)?;
            params.get_mut(&key).unwrap()[&idx] = original - GRADCHECK_STEP;
            let (minus, _) = objective(&params)?;
            params.get_mut(&key).unwrap()[&idx] = original;

            let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
            let a = grad[&idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(SCALE_FLOOR);
            checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some(WorstEntry {
                    key,
                    index: idx.as_array_view().to_vec(),
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(GradcheckReport {
        op,
        seed,
        tolerance,
        step: GRADCHECK_STEP,
        passed: max_rel <= tolerance,
        max_rel_error: max_rel,
        checked,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ops_pass_seed_zero() {
        for op in GradOp::ALL {
            let r = gradcheck(op, 0, 1e-5).unwrap();
            assert!(r.passed, "{op}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn proj_parameters_seed_one() {
        let r = gradcheck(GradOp::ProjLoss, 1, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 12 + 15 + 5);
    }

    #[test]
    fn injected_fault_is_localized() {
        let fault = FaultInjection {
            key: GradKey::StudentFeatures,
            index: 7,
            delta: 1e-2,
        };
        let r = gradcheck_with(GradOp::FreqLoss, 0, 1e-5, Some(fault)).unwrap();
        assert!(!r.passed);
        let worst = r.worst.unwrap();
        assert_eq!(worst.key, GradKey::StudentFeatures);
        // flat index 7 of a (1, 6, 4, 5) tensor
        assert_eq!(worst.index, vec![0, 0, 1, 2]);
    }

    #[test]
    fn op_names_roundtrip() {
        for op in GradOp::ALL {
            assert_eq!(op.to_string().parse::<GradOp>().unwrap(), op);
        }
        assert!("bogus".parse::<GradOp>().is_err());
    }
}
