//! Feature-map objectives: frequency alignment and projector regression.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};
use rustfft::num_complex::Complex64;

use super::align::{channel_align, channel_align_adjoint};
use super::{DistillError, GradKey, LossReport};
use crate::rng::StreamRng;
use crate::spectral::SpatialRfft;

fn check_spatial(student: &ArrayView4<'_, f64>, teacher: &ArrayView4<'_, f64>) -> Result<(), DistillError> {
    let (sb, _, sh, sw) = student.dim();
    let (tb, _, th, tw) = teacher.dim();
    if (sb, sh, sw) != (tb, th, tw) {
        return Err(DistillError::Shape(format!(
            "student (B,H,W)=({sb},{sh},{sw}) vs teacher ({tb},{th},{tw})"
        )));
    }
    if student.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFinite("student features"));
    }
    if teacher.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFinite("teacher features"));
    }
    Ok(())
}

/// MSE between the stacked half spectra of channel-aligned features.
///
/// The side with more channels is pooled down to `min(C_s, C_t)`. The mean
/// runs over every element of the `(B, C, H, W/2+1, 2)` stacks. The gradient
/// is with respect to the unpooled student features.
pub fn freq_loss(student: ArrayView4<'_, f64>, teacher: ArrayView4<'_, f64>) -> Result<LossReport, DistillError> {
    check_spatial(&student, &teacher)?;
    let (b_count, c_s, hh, ww) = student.dim();
    let c = c_s.min(teacher.dim().1);
    let s_al = channel_align(student, c)?;
    let t_al = channel_align(teacher, c)?;

    let rfft = SpatialRfft::new(hh, ww);
    let count = (b_count * c * hh * rfft.half_width() * 2) as f64;
    let mut sum_sq = 0.0;
    let mut diffs: Vec<Array2<Complex64>> = Vec::with_capacity(b_count * c);
    for b in 0..b_count {
        for ch in 0..c {
            let zs = rfft.forward(s_al.index_axis(Axis(0), b).index_axis(Axis(0), ch));
            let zt = rfft.forward(t_al.index_axis(Axis(0), b).index_axis(Axis(0), ch));
            let d = zs - zt;
            sum_sq += d.iter().map(|z| z.re * z.re + z.im * z.im).sum::<f64>();
            diffs.push(d);
        }
    }
    let value = sum_sq / count;

    let mut grad_al = Array4::<f64>::zeros((b_count, c, hh, ww));
    let scale = 2.0 / count;
    for (i, d) in diffs.into_iter().enumerate() {
        let (b, ch) = (i / c, i % c);
        let scaled = d.mapv(|z| z * scale);
        rfft.adjoint(
            scaled.view(),
            grad_al.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), ch),
        );
    }
    let grad = channel_align_adjoint(grad_al.view(), c_s);

    let mut gradients = BTreeMap::new();
    gradients.insert(GradKey::StudentFeatures, grad.into_dyn());
    Ok(LossReport::feature_only(value, gradients))
}

/// Per-position affine map over channels, `C_s -> C_t` (a 1x1 convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `C_t x C_s`.
    pub weight: Array2<f64>,
    /// `C_t`.
    pub bias: Array1<f64>,
}

impl Projector {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self, DistillError> {
        if bias.len() != weight.nrows() {
            return Err(DistillError::Shape(format!(
                "projector weight {:?} with bias of length {}",
                weight.dim(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(DistillError::NonFinite("projector parameters"));
        }
        Ok(Self { weight, bias })
    }

    /// Rectangular identity weight and zero bias.
    pub fn identity(c_s: usize, c_t: usize) -> Self {
        Self {
            weight: Array2::from_shape_fn((c_t, c_s), |(o, i)| if o == i { 1.0 } else { 0.0 }),
            bias: Array1::zeros(c_t),
        }
    }

    /// Weights uniform on `[-1/sqrt(C_s), 1/sqrt(C_s))`, zero bias.
    pub fn random(c_s: usize, c_t: usize, seed: u64) -> Self {
        let mut rng = StreamRng::new(seed);
        let bound = 1.0 / (c_s as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((c_t, c_s), || rng.uniform_in(-bound, bound)),
            bias: Array1::zeros(c_t),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    /// `(B, C_s, H, W) -> (B, C_t, H, W)`.
    pub fn apply(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, _, h, w) = x.dim();
        let y = self.weight.dot(&channels_major(x)) + self.bias.view().insert_axis(Axis(1));
        from_channels_major(y, b, h, w)
    }
}

/// `(B, C, H, W)` as a `C x (B*H*W)` matrix.
fn channels_major(x: ArrayView4<'_, f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    x.permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, b * h * w))
        .expect("standard layout")
}

fn from_channels_major(m: Array2<f64>, b: usize, h: usize, w: usize) -> Array4<f64> {
    let c = m.nrows();
    m.into_shape_with_order((c, b, h, w))
        .expect("element count preserved")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

/// `MSE(projector(student), teacher)` with gradients for the student
/// features and both projector parameters.
pub fn proj_loss(
    student: ArrayView4<'_, f64>,
    teacher: ArrayView4<'_, f64>,
    projector: &Projector,
) -> Result<LossReport, DistillError> {
    check_spatial(&student, &teacher)?;
    let (b, c_s, h, w) = student.dim();
    let c_t = teacher.dim().1;
    if projector.in_channels() != c_s || projector.out_channels() != c_t {
        return Err(DistillError::Shape(format!(
            "projector maps {} -> {} channels but features have {c_s} -> {c_t}",
            projector.in_channels(),
            projector.out_channels()
        )));
    }
    let x = channels_major(student);
    let t = channels_major(teacher);
    let y = projector.weight.dot(&x) + projector.bias.view().insert_axis(Axis(1));
    let resid = y - t;
    let count = resid.len() as f64;
    let value = resid.iter().map(|r| r * r).sum::<f64>() / count;

    let r = resid * (2.0 / count);
    let d_weight = r.dot(&x.t());
    let d_bias = r.sum_axis(Axis(1));
    let d_x = projector.weight.t().dot(&r);

    let mut gradients = BTreeMap::new();
    gradients.insert(GradKey::StudentFeatures, from_channels_major(d_x, b, h, w).into_dyn());
    gradients.insert(GradKey::ProjectorWeight, d_weight.into_dyn());
    gradients.insert(GradKey::ProjectorBias, d_bias.into_dyn());
    Ok(LossReport::feature_only(value, gradients))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::spatial_rfft_stack;

    fn features(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = StreamRng::new(seed);
        Array4::from_shape_simple_fn(shape, || rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn equal_features_give_zero() {
        let x = features((2, 3, 4, 5), 1);
        let r = freq_loss(x.view(), x.view()).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.gradient(GradKey::StudentFeatures).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_teacher_is_mean_square_spectrum() {
        let s = features((1, 2, 2, 2), 2);
        let t = Array4::zeros((1, 2, 2, 2));
        let r = freq_loss(s.view(), t.view()).unwrap();
        let stacked = spatial_rfft_stack(s.view());
        let expect = stacked.data.iter().map(|v| v * v).sum::<f64>() / stacked.len() as f64;
        assert!((r.total - expect).abs() < 1e-14);
    }

    #[test]
    fn pooling_side_follows_channel_counts() {
        let s = features((1, 6, 3, 3), 3);
        let t = features((1, 4, 3, 3), 4);
        let r = freq_loss(s.view(), t.view()).unwrap();
        assert_eq!(r.gradient(GradKey::StudentFeatures).unwrap().shape(), &[1, 6, 3, 3]);
        let r2 = freq_loss(t.view(), s.view()).unwrap();
        assert_eq!(r2.gradient(GradKey::StudentFeatures).unwrap().shape(), &[1, 4, 3, 3]);
        assert!((r.total - r2.total).abs() < 1e-12);
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let s = features((1, 2, 3, 3), 5);
        let t = features((1, 2, 3, 4), 6);
        assert!(matches!(freq_loss(s.view(), t.view()), Err(DistillError::Shape(_))));
        let p = Projector::identity(2, 2);
        assert!(matches!(proj_loss(s.view(), t.view(), &p), Err(DistillError::Shape(_))));
    }

    #[test]
    fn identity_projector_on_equal_features() {
        let x = features((2, 3, 2, 2), 7);
        let r = proj_loss(x.view(), x.view(), &Projector::identity(3, 3)).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn zero_projector_against_ones() {
        let s = features((2, 3, 2, 2), 8);
        let t = Array4::ones((2, 5, 2, 2));
        let p = Projector::new(Array2::zeros((5, 3)), Array1::zeros(5)).unwrap();
        let r = proj_loss(s.view(), t.view(), &p).unwrap();
        assert!((r.total - 1.0).abs() < 1e-15);
        assert!(proj_loss(s.view(), t.view(), &Projector::identity(3, 4)).is_err());
    }

    #[test]
    fn projector_apply_matches_loops() {
        let x = features((2, 3, 2, 3), 9);
        let p = Projector::random(3, 4, 10);
        let y = p.apply(x.view());
        for ((b, o, h, w), v) in y.indexed_iter() {
            let e: f64 = (0..3).map(|c| p.weight[[o, c]] * x[[b, c, h, w]]).sum::<f64>() + p.bias[o];
            assert!((v - e).abs() < 1e-14);
        }
        let bound = 1.0 / 3f64.sqrt();
        assert!(p.weight.iter().all(|w| w.abs() <= bound));
        assert!(p.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn bad_projector_rejected() {
        assert!(Projector::new(Array2::zeros((2, 2)), Array1::zeros(3)).is_err());
        assert!(Projector::new(Array2::from_elem((1, 1), f64::NAN), Array1::zeros(1)).is_err());
    }
}
