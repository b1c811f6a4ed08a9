//! Channel-axis spectra of activation stacks and the spatial real-input
//! transform used by the frequency-alignment loss.
//!
//! The channel transform is normalized by `1/C`:
//! `F[k] = (1/C) * sum_c v[c] * exp(-2*pi*i*k*c/C)`.
//! The spatial transform is unnormalized and keeps the real-input half
//! spectrum, `W_r = W/2 + 1` columns.

use std::sync::Arc;

use ndarray::{Array2, Array5, ArrayView2, ArrayView4, ArrayViewMut2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::ActivationStack;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("cannot transform an empty vector")]
    Empty,
    #[error("non-finite input {value} at position {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("layer index {index} out of range for profile with {layers} rows")]
    LayerOutOfRange { index: usize, layers: usize },
}

/// Reusable `1/C`-normalized forward DFT for a fixed channel count.
pub struct ChannelDft {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl ChannelDft {
    pub fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        Self {
            fft,
            buf: vec![Complex64::default(); len],
            scratch,
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Transforms `v` (length must equal [`Self::len`]); finiteness is the caller's concern.
    pub fn transform(&mut self, v: &[f64]) -> &[Complex64] {
        assert_eq!(v.len(), self.buf.len(), "channel vector length");
        for (slot, &x) in self.buf.iter_mut().zip(v) {
            *slot = Complex64::new(x, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        let scale = 1.0 / v.len() as f64;
        for z in &mut self.buf {
            *z *= scale;
        }
        &self.buf
    }
}

/// `1/C`-normalized DFT of a real channel vector.
pub fn channel_dft(v: &[f64]) -> Result<Vec<Complex64>, SpectralError> {
    if v.is_empty() {
        return Err(SpectralError::Empty);
    }
    if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(SpectralError::NonFinite { index, value });
    }
    Ok(ChannelDft::new(v.len()).transform(v).to_vec())
}

/// Per-layer channel spectrum `S` of shape `(L, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    pub layer_names: Vec<String>,
    /// Row `l` is the mean DFT magnitude of layer `l` over batch and space.
    pub values: Array2<f64>,
}

impl SpectralProfile {
    pub fn num_layers(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, l: usize) -> Result<&[f64], SpectralError> {
        if l >= self.num_layers() {
            return Err(SpectralError::LayerOutOfRange {
                index: l,
                layers: self.num_layers(),
            });
        }
        Ok(self.values.row(l).to_slice().expect("profile rows are contiguous"))
    }

    /// Rows as nested vectors, for JSON export.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.outer_iter().map(|r| r.to_vec()).collect()
    }

    /// CSV with a `layer,0,1,..,C-1` header and one row per layer.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec![String::from("layer")];
        header.extend((0..self.num_bins()).map(|k| k.to_string()));
        out.write_record(&header)?;
        for (name, row) in self.layer_names.iter().zip(self.values.outer_iter()) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `S_l[k] = (1/(B*H*W)) * sum_{b,h,w} |F_{l,b,h,w}[k]|`.
///
/// Summation runs over `b`, then `h`, then `w`, in index order.
pub fn layer_spectrum(stack: &ActivationStack) -> SpectralProfile {
    let (l_count, b_count, c_count, h_count, w_count) = stack.dims();
    let mut dft = ChannelDft::new(c_count);
    let mut v = vec![0.0; c_count];
    let mut values = Array2::<f64>::zeros((l_count, c_count));
    let denom = (b_count * h_count * w_count) as f64;

    for l in 0..l_count {
        let mut acc = vec![0.0; c_count];
        for b in 0..b_count {
            for h in 0..h_count {
                for w in 0..w_count {
                    stack.channel_vector_into(l, b, h, w, &mut v);
                    for (a, z) in acc.iter_mut().zip(dft.transform(&v)) {
                        *a += z.norm();
                    }
                }
            }
        }
        for (k, a) in acc.into_iter().enumerate() {
            values[[l, k]] = a / denom;
        }
    }
    SpectralProfile {
        layer_names: stack.layer_names().to_vec(),
        values,
    }
}

/// Real and imaginary parts of the half spectrum, shape `(B, C, H, W/2+1, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSpectrum {
    pub data: Array5<f64>,
}

impl StackedSpectrum {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Unnormalized 2-D real-input transform over `(H, W)` and its adjoint.
pub struct SpatialRfft {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl SpatialRfft {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            col_fwd: planner.plan_fft_forward(height),
            row_inv: planner.plan_fft_inverse(width),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn half_width(&self) -> usize {
        self.width / 2 + 1
    }

    /// `X[p, q] = sum_{h,w} x[h,w] * exp(-2*pi*i*(p*h/H + q*w/W))` for `q < W/2+1`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<Complex64> {
        let (hh, ww, wr) = (self.height, self.width, self.half_width());
        let mut rows = Array2::<Complex64>::zeros((hh, wr));
        let mut line = vec![Complex64::default(); ww];
        for h in 0..hh {
            for (w, slot) in line.iter_mut().enumerate() {
                *slot = Complex64::new(x[[h, w]], 0.0);
            }
            self.row_fwd.process(&mut line);
            for q in 0..wr {
                rows[[h, q]] = line[q];
            }
        }
        let mut col = vec![Complex64::default(); hh];
        for q in 0..wr {
            for h in 0..hh {
                col[h] = rows[[h, q]];
            }
            self.col_fwd.process(&mut col);
            for p in 0..hh {
                rows[[p, q]] = col[p];
            }
        }
        rows
    }

    /// Adjoint of [`Self::forward`] viewed as a real-linear map into `(re, im)` pairs:
    /// `g[h,w] = Re sum_{p, q<W_r} Z[p,q] * exp(+2*pi*i*(p*h/H + q*w/W))`.
    pub fn adjoint(&self, z: ArrayView2<'_, Complex64>, mut out: ArrayViewMut2<'_, f64>) {
        let (hh, ww, wr) = (self.height, self.width, self.half_width());
        let mut full = Array2::<Complex64>::zeros((hh, ww));
        let mut col = vec![Complex64::default(); hh];
        for q in 0..wr {
            for p in 0..hh {
                col[p] = z[[p, q]];
            }
            self.col_inv.process(&mut col);
            for h in 0..hh {
                full[[h, q]] = col[h];
            }
        }
        let mut line = vec![Complex64::default(); ww];
        for h in 0..hh {
            for w in 0..ww {
                line[w] = full[[h, w]];
            }
            self.row_inv.process(&mut line);
            for w in 0..ww {
                out[[h, w]] = line[w].re;
            }
        }
    }
}

/// Applies [`SpatialRfft::forward`] to every `(b, c)` slice and stacks real
/// and imaginary parts on a trailing axis.
pub fn spatial_rfft_stack(layer: ArrayView4<'_, f64>) -> StackedSpectrum {
    let (b_count, c_count, hh, ww) = layer.dim();
    let rfft = SpatialRfft::new(hh, ww);
    let wr = rfft.half_width();
    let mut data = Array5::<f64>::zeros((b_count, c_count, hh, wr, 2));
    for b in 0..b_count {
        for c in 0..c_count {
            let spec = rfft.forward(layer.index_axis(Axis(0), b).index_axis(Axis(0), c));
            for ((p, q), z) in spec.indexed_iter() {
                data[[b, c, p, q, 0]] = z.re;
                data[[b, c, p, q, 1]] = z.im;
            }
        }
    }
    StackedSpectrum { data }
}

/// Qualitative shape of a layer's channel spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralPhase {
    UniformLowEnergy,
    LowPass,
    UniformHighEnergy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseThresholds {
    /// A row is low-pass when its log-magnitude slope per bin is below this.
    pub slope: f64,
    /// Added to magnitudes before taking logs.
    pub epsilon: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        Self {
            slope: -0.01,
            epsilon: 1e-12,
        }
    }
}

/// Least-squares slope of `ln(S[k] + eps)` against `k` for `1 <= k <= C/2`.
///
/// Bins above `C/2` mirror the lower half for real input and are skipped.
/// Fewer than two usable bins give a slope of zero.
pub fn spectral_slope(row: &[f64], epsilon: f64) -> f64 {
    let upper = row.len() / 2;
    if upper < 2 {
        return 0.0;
    }
    let n = upper as f64;
    let xs = 1..=upper;
    let mean_x = xs.clone().map(|k| k as f64).sum::<f64>() / n;
    let mean_y = xs.clone().map(|k| (row[k] + epsilon).ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for k in xs {
        let dx = k as f64 - mean_x;
        sxy += dx * ((row[k] + epsilon).ln() - mean_y);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Sum of squared magnitudes of a spectrum row.
pub fn row_energy(row: &[f64]) -> f64 {
    row.iter().map(|s| s * s).sum()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median row energy across the whole profile.
pub fn median_row_energy(profile: &SpectralProfile) -> f64 {
    median(
        profile
            .values
            .outer_iter()
            .map(|r| r.iter().map(|s| s * s).sum())
            .collect(),
    )
}

/// Labels row `l` as low-pass (decaying spectrum) or as a uniform spectrum
/// with energy above or below the profile's median row energy.
pub fn spectral_phase_classify(
    profile: &SpectralProfile,
    l: usize,
    thresholds: PhaseThresholds,
) -> Result<SpectralPhase, SpectralError> {
    let row = profile.row(l)?;
    Ok(classify_row(row, median_row_energy(profile), thresholds))
}

fn classify_row(row: &[f64], median_energy: f64, thresholds: PhaseThresholds) -> SpectralPhase {
    if row.iter().all(|&s| s == 0.0) {
        return SpectralPhase::UniformLowEnergy;
    }
    if spectral_slope(row, thresholds.epsilon) < thresholds.slope {
        SpectralPhase::LowPass
    } else if row_energy(row) > median_energy {
        SpectralPhase::UniformHighEnergy
    } else {
        SpectralPhase::UniformLowEnergy
    }
}

/// Phase label for every row.
pub fn classify_all(profile: &SpectralProfile, thresholds: PhaseThresholds) -> Vec<SpectralPhase> {
    let med = median_row_energy(profile);
    profile
        .values
        .outer_iter()
        .map(|r| classify_row(r.as_slice().expect("contiguous"), med, thresholds))
        .collect()
}
