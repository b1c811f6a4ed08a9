//! Histogram entropy of channel vectors, mean activation magnitude, and
//! shape diagnostics for per-layer profiles.
//!
//! Entropies are in bits. Bin `n` (0-based) covers
//! `[min + n*d, min + (n+1)*d)` with `d = (max - min) / n_bins`; the last bin
//! is closed at `max`, so the counts at every position sum to `C`.

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::ActivationStack;

#[derive(Debug, Error, PartialEq)]
pub enum InfoError {
    #[error("bin count must be at least 1")]
    ZeroBins,
}

/// Which values define the histogram range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeMode {
    /// One `[min, max]` over the entire stack.
    #[default]
    Global,
    /// A separate `[min, max]` per layer.
    PerLayer,
}

impl std::fmt::Display for RangeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RangeMode::Global => "global",
            RangeMode::PerLayer => "per-layer",
        })
    }
}

/// Equal-width binning of `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binning {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
}

impl Binning {
    fn edge(&self, n: usize) -> f64 {
        self.min + n as f64 * ((self.max - self.min) / self.bins as f64)
    }

    /// Bin index of `v`, assumed to lie in `[min, max]`.
    pub fn index(&self, v: f64) -> usize {
        if self.max <= self.min {
            return 0;
        }
        let last = self.bins - 1;
        let width = (self.max - self.min) / self.bins as f64;
        let mut n = (((v - self.min) / width).floor().max(0.0) as usize).min(last);
        // the quotient can land one bin off near an edge
        while n > 0 && v < self.edge(n) {
            n -= 1;
        }
        while n < last && v >= self.edge(n + 1) {
            n += 1;
        }
        n
    }
}

/// Shannon entropy (bits) of a histogram with `total` samples.
///
/// Uses `log2(total) - (1/total) * sum h*log2(h)`, which is exact for the
/// one-sample-per-bin case, and clamps to `[0, log2(occupied bins)]`.
pub fn histogram_entropy(counts: &[usize], total: usize) -> f64 {
    let occupied = counts.iter().filter(|&&h| h > 0).count();
    if occupied <= 1 {
        return 0.0;
    }
    let t = total as f64;
    let weighted: f64 = counts
        .iter()
        .filter(|&&h| h > 1)
        .map(|&h| h as f64 * (h as f64).log2())
        .sum();
    (t.log2() - weighted / t).clamp(0.0, (occupied as f64).log2())
}

/// Per-position entropy `E` of shape `(L, B, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub values: Array4<f64>,
    pub n_bins: usize,
    pub range_mode: RangeMode,
    /// `(min, max)` used for each layer; identical across layers in global mode.
    pub ranges: Vec<(f64, f64)>,
}

fn value_range<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Histograms every channel vector into `n_bins` bins and takes its entropy.
///
/// The range pass over the data finishes before any histogramming starts.
/// A degenerate range (`min == max`) puts all mass in the first bin.
pub fn entropy_map(stack: &ActivationStack, n_bins: usize, range_mode: RangeMode) -> Result<EntropyMap, InfoError> {
    if n_bins == 0 {
        return Err(InfoError::ZeroBins);
    }
    let (l_count, b_count, c_count, h_count, w_count) = stack.dims();
    let data = stack.data();
    let ranges: Vec<(f64, f64)> = match range_mode {
        RangeMode::Global => vec![value_range(data.iter()); l_count],
        RangeMode::PerLayer => data.axis_iter(Axis(0)).map(|layer| value_range(layer.iter())).collect(),
    };

    let mut values = Array4::<f64>::zeros((l_count, b_count, h_count, w_count));
    let mut counts = vec![0usize; n_bins];
    for (l, &(min, max)) in ranges.iter().enumerate() {
        let binning = Binning { min, max, bins: n_bins };
        for b in 0..b_count {
            for h in 0..h_count {
                for w in 0..w_count {
                    counts.fill(0);
                    for c in 0..c_count {
                        counts[binning.index(data[[l, b, c, h, w]])] += 1;
                    }
                    values[[l, b, h, w]] = histogram_entropy(&counts, c_count);
                }
            }
        }
    }
    Ok(EntropyMap {
        values,
        n_bins,
        range_mode,
        ranges,
    })
}

/// Compression/expansion annotation of a per-layer profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UShape {
    pub nadir: usize,
    pub is_u_shaped: bool,
    /// True when the nadir sits at either end, so one phase is empty.
    pub degenerate: bool,
    /// Inclusive layer range `[0, nadir]`.
    pub compression: (usize, usize),
    /// Inclusive layer range `[nadir, L-1]`.
    pub expansion: (usize, usize),
}

/// Default U-shape tolerance: 2% of the profile's value range per step.
pub fn default_u_tolerance(values: &[f64]) -> f64 {
    let (lo, hi) = value_range(values.iter());
    if values.is_empty() {
        0.0
    } else {
        0.02 * (hi - lo)
    }
}

/// Locates the first global minimum and checks for descent-then-ascent,
/// allowing each step to go against the trend by at most `tolerance`.
///
/// Returns `None` for fewer than three values.
pub fn detect_u_shape(values: &[f64], tolerance: f64) -> Option<UShape> {
    let n = values.len();
    if n < 3 {
        return None;
    }
    let nadir = values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v < values[best] { i } else { best });
    let descends = values[..=nadir].windows(2).all(|p| p[1] <= p[0] + tolerance);
    let ascends = values[nadir..].windows(2).all(|p| p[1] >= p[0] - tolerance);
    Some(UShape {
        nadir,
        is_u_shaped: descends && ascends,
        degenerate: nadir == 0 || nadir == n - 1,
        compression: (0, nadir),
        expansion: (nadir, n - 1),
    })
}

/// Mean entropy per layer, optionally annotated with a [`UShape`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub values: Vec<f64>,
    pub shape: Option<UShape>,
}

impl EntropyProfile {
    pub fn nadir_index(&self) -> Option<usize> {
        self.shape.map(|s| s.nadir)
    }

    pub fn annotate(mut self, tolerance: f64) -> Self {
        self.shape = detect_u_shape(&self.values, tolerance);
        self
    }
}

/// `E_bar_l`: mean of the entropy map over `(b, h, w)`.
pub fn entropy_profile(map: &EntropyMap) -> EntropyProfile {
    let values = map
        .values
        .axis_iter(Axis(0))
        .map(|layer| layer.iter().sum::<f64>() / layer.len() as f64)
        .collect();
    EntropyProfile { values, shape: None }
}

/// `M_l`: mean absolute activation per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeProfile {
    pub values: Vec<f64>,
    pub shape: Option<UShape>,
}

impl MagnitudeProfile {
    pub fn annotate(mut self, tolerance: f64) -> Self {
        self.shape = detect_u_shape(&self.values, tolerance);
        self
    }
}

pub fn magnitude_profile(stack: &ActivationStack) -> MagnitudeProfile {
    let values = stack
        .data()
        .axis_iter(Axis(0))
        .map(|layer| layer.iter().map(|v| v.abs()).sum::<f64>() / layer.len() as f64)
        .collect();
    MagnitudeProfile { values, shape: None }
}

/// Writes `layer,<column>` CSV rows.
pub fn write_profile_csv<W: std::io::Write>(
    writer: W,
    column: &str,
    names: &[String],
    values: &[f64],
) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["layer", column])?;
    for (name, v) in names.iter().zip(values) {
        out.write_record([name.as_str(), &v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
