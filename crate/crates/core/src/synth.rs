//! Synthetic activation stacks with analytically known analysis outputs.
//!
//! Except for [`FixtureKind::SeededRandom`] and [`FixtureKind::UProfile`],
//! every spatial position of every layer carries the same channel vector, so
//! the per-layer spectrum equals the spectrum of that one vector.

use std::f64::consts::PI;

use ndarray::Array5;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{StreamRng, GENERATOR_ID};
use crate::spectral::SpectralPhase;
use crate::tensor::{ActivationStack, Precision, TensorError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid fixture: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixtureKind {
    /// Every element equals `value`.
    Constant { value: f64 },
    /// Channel `c` holds `(c + 0.5) / C`: one value per bin when binned into `C` bins.
    OnePerBin,
    /// `amplitude * cos(2*pi*k0*c/C)`.
    ChannelSinusoid { k0: usize, amplitude: f64 },
    /// Channel vector whose normalized spectrum is `exp(-rate * min(k, C-k))`.
    LowpassDecay { rate: f64 },
    /// Layer `l` spreads a channel ramp over `[-levels[l], levels[l]]`,
    /// rotated by the position index.
    UProfile { levels: Vec<f64> },
    /// Independent uniform values on `[-1, 1)`; layer `l` draws from seed `seed ^ l`.
    SeededRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    #[serde(flatten)]
    pub kind: FixtureKind,
    /// `[L, B, C, H, W]`.
    pub shape: [usize; 5],
    pub seed: u64,
    pub precision: Precision,
}

/// Closed-form analysis values a fixture must reproduce.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutputs {
    pub generator: String,
    pub spec: Option<FixtureSpec>,
    /// Bin count the entropy values assume.
    pub entropy_bins: Option<usize>,
    pub entropy: Option<Vec<f64>>,
    pub magnitude: Option<Vec<f64>>,
    pub spectrum: Option<Vec<Vec<f64>>>,
    pub entropy_nadir: Option<usize>,
    pub phases: Option<Vec<SpectralPhase>>,
    /// Absolute tolerance for comparing against computed values.
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub stack: ActivationStack,
    pub expected: ExpectedOutputs,
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::Invalid(msg.into())
}

impl FixtureSpec {
    pub fn new(kind: FixtureKind, shape: [usize; 5]) -> Self {
        Self {
            kind,
            shape,
            seed: 0,
            precision: Precision::F64,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.shape.contains(&0) {
            return Err(invalid(format!("shape {:?} has a zero axis", self.shape)));
        }
        let [l_count, _, c_count, _, _] = self.shape;
        match &self.kind {
            FixtureKind::Constant { value } if !value.is_finite() => Err(invalid("constant value must be finite")),
            FixtureKind::ChannelSinusoid { k0, amplitude } => {
                if *k0 >= c_count {
                    Err(invalid(format!("k0={k0} must be below C={c_count}")))
                } else if !amplitude.is_finite() {
                    Err(invalid("amplitude must be finite"))
                } else {
                    Ok(())
                }
            }
            FixtureKind::LowpassDecay { rate } if !(*rate > 0.0 && rate.is_finite()) => {
                Err(invalid(format!("rate must be positive, got {rate}")))
            }
            FixtureKind::UProfile { levels } => {
                if levels.len() != l_count {
                    Err(invalid(format!("{} levels for {l_count} layers", levels.len())))
                } else if levels.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    Err(invalid("levels must be positive and finite"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

fn lowpass_vector(c_count: usize, rate: f64) -> Vec<f64> {
    // inverse of the 1/C-normalized transform of a real, symmetric spectrum
    (0..c_count)
        .map(|c| {
            (0..c_count)
                .map(|k| {
                    let d = k.min(c_count - k) as f64;
                    (-rate * d).exp() * (2.0 * PI * (k * c % c_count) as f64 / c_count as f64).cos()
                })
                .sum()
        })
        .collect()
}

fn mean_abs_ramp(c_count: usize) -> f64 {
    let c = c_count as f64;
    if c_count.is_multiple_of(2) {
        0.5
    } else {
        (c * c - 1.0) / (2.0 * c * c)
    }
}

/// Builds the stack described by `spec` with its expected analysis outputs.
pub fn generate(spec: &FixtureSpec) -> Result<Fixture, SynthError> {
    spec.validate()?;
    let [l_count, b_count, c_count, h_count, w_count] = spec.shape;
    let dims = (l_count, b_count, c_count, h_count, w_count);
    let cf = c_count as f64;
    let mut expected = ExpectedOutputs {
        generator: GENERATOR_ID.to_string(),
        spec: Some(spec.clone()),
        tolerance: 1e-9,
        ..Default::default()
    };

    let data = match &spec.kind {
        FixtureKind::Constant { value } => {
            let mut row = vec![0.0; c_count];
            row[0] = value.abs();
            expected.entropy = Some(vec![0.0; l_count]);
            expected.magnitude = Some(vec![value.abs(); l_count]);
            expected.spectrum = Some(vec![row; l_count]);
            Array5::from_elem(dims, *value)
        }
        FixtureKind::OnePerBin => {
            let row: Vec<f64> = (0..c_count)
                .map(|k| {
                    if k == 0 {
                        0.5
                    } else {
                        1.0 / (2.0 * cf * (PI * k as f64 / cf).sin())
                    }
                })
                .collect();
            expected.entropy_bins = Some(c_count);
            expected.entropy = Some(vec![cf.log2(); l_count]);
            expected.magnitude = Some(vec![0.5; l_count]);
            expected.spectrum = Some(vec![row; l_count]);
            Array5::from_shape_fn(dims, |(_, _, c, _, _)| (c as f64 + 0.5) / cf)
        }
        FixtureKind::ChannelSinusoid { k0, amplitude } => {
            let (k0, a) = (*k0, *amplitude);
            let mut row = vec![0.0; c_count];
            if k0 == 0 || 2 * k0 == c_count {
                row[k0] = a.abs();
            } else {
                row[k0] = a.abs() / 2.0;
                row[c_count - k0] = a.abs() / 2.0;
            }
            expected.spectrum = Some(vec![row; l_count]);
            Array5::from_shape_fn(dims, |(_, _, c, _, _)| {
                a * (2.0 * PI * (k0 * c % c_count) as f64 / cf).cos()
            })
        }
        FixtureKind::LowpassDecay { rate } => {
            let v = lowpass_vector(c_count, *rate);
            let row: Vec<f64> = (0..c_count)
                .map(|k| (-rate * k.min(c_count - k) as f64).exp())
                .collect();
            expected.spectrum = Some(vec![row; l_count]);
            if c_count >= 4 && *rate > 0.01 {
                expected.phases = Some(vec![SpectralPhase::LowPass; l_count]);
            }
            Array5::from_shape_fn(dims, |(_, _, c, _, _)| v[c])
        }
        FixtureKind::UProfile { levels } => {
            let nadir = levels
                .iter()
                .enumerate()
                .fold(0, |best, (i, &s)| if s < levels[best] { i } else { best });
            // with C bins over the global range, occupied bins grow with the level
            expected.entropy_bins = Some(c_count);
            expected.entropy_nadir = Some(nadir);
            expected.magnitude = Some(levels.iter().map(|s| s * mean_abs_ramp(c_count)).collect());
            Array5::from_shape_fn(dims, |(l, b, c, h, w)| {
                let pos = (b * h_count + h) * w_count + w;
                let slot = ((c + pos) % c_count) as f64;
                levels[l] * (2.0 * (slot + 0.5) / cf - 1.0)
            })
        }
        FixtureKind::SeededRandom => {
            let mut data = Array5::<f64>::zeros(dims);
            for (l, mut layer) in data.outer_iter_mut().enumerate() {
                let mut rng = StreamRng::new(spec.seed ^ l as u64);
                layer.iter_mut().for_each(|v| *v = rng.uniform_in(-1.0, 1.0));
            }
            data
        }
    };

    let stack = ActivationStack::with_default_names(data, spec.precision)?.with_model(format!(
        "synth-{}",
        match &spec.kind {
            FixtureKind::Constant { .. } => "constant",
            FixtureKind::OnePerBin => "one-per-bin",
            FixtureKind::ChannelSinusoid { .. } => "sinusoid",
            FixtureKind::LowpassDecay { .. } => "lowpass",
            FixtureKind::UProfile { .. } => "u-profile",
            FixtureKind::SeededRandom => "random",
        }
    ));
    if spec.precision == Precision::F32 {
        // closed forms assume exact values
        expected.tolerance = 1e-5;
    }
    Ok(Fixture { stack, expected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infodyn::{detect_u_shape, entropy_map, entropy_profile, magnitude_profile, RangeMode};
    use crate::spectral::{classify_all, layer_spectrum, PhaseThresholds};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn check_fixture(f: &Fixture) {
        let e = &f.expected;
        let tol = e.tolerance;
        if let Some(spec) = &e.spectrum {
            let p = layer_spectrum(&f.stack);
            for (row, want) in p.rows().iter().zip(spec) {
                assert!(close(row, want, tol), "{row:?} vs {want:?}");
            }
        }
        if let Some(mag) = &e.magnitude {
            assert!(close(&magnitude_profile(&f.stack).values, mag, tol));
        }
        if let Some(ent) = &e.entropy {
            let bins = e.entropy_bins.unwrap_or(100);
            let p = entropy_profile(&entropy_map(&f.stack, bins, RangeMode::Global).unwrap());
            assert!(close(&p.values, ent, tol), "{:?} vs {ent:?}", p.values);
        }
        if let Some(nadir) = e.entropy_nadir {
            let p = entropy_profile(&entropy_map(&f.stack, 100, RangeMode::Global).unwrap());
            assert_eq!(detect_u_shape(&p.values, 0.0).unwrap().nadir, nadir);
        }
        if let Some(phases) = &e.phases {
            assert_eq!(
                &classify_all(&layer_spectrum(&f.stack), PhaseThresholds::default()),
                phases
            );
        }
    }

    #[test]
    fn constant_closed_forms() {
        let f = generate(&FixtureSpec::new(FixtureKind::Constant { value: 5.0 }, [3, 2, 6, 2, 2])).unwrap();
        assert_eq!(f.expected.magnitude, Some(vec![5.0; 3]));
        check_fixture(&f);
    }

    #[test]
    fn sinusoid_splits_across_conjugate_bins() {
        let f = generate(&FixtureSpec::new(
            FixtureKind::ChannelSinusoid { k0: 3, amplitude: 1.0 },
            [1, 1, 16, 2, 2],
        ))
        .unwrap();
        let row = &f.expected.spectrum.as_ref().unwrap()[0];
        assert_eq!((row[3], row[13]), (0.5, 0.5));
        check_fixture(&f);
        for k0 in [0, 8] {
            let f = generate(&FixtureSpec::new(
                FixtureKind::ChannelSinusoid { k0, amplitude: 2.0 },
                [1, 1, 16, 1, 1],
            ))
            .unwrap();
            check_fixture(&f);
        }
    }

    #[test]
    fn other_kinds_reproduce_expectations() {
        for (kind, shape) in [
            (FixtureKind::OnePerBin, [2, 1, 100, 1, 2]),
            (FixtureKind::OnePerBin, [1, 2, 7, 2, 1]),
            (FixtureKind::LowpassDecay { rate: 0.3 }, [2, 2, 16, 2, 2]),
            (FixtureKind::LowpassDecay { rate: 0.5 }, [1, 1, 15, 1, 1]),
            (
                FixtureKind::UProfile {
                    levels: vec![4.0, 1.0, 3.0],
                },
                [3, 2, 32, 2, 2],
            ),
            (
                FixtureKind::UProfile {
                    levels: vec![2.0, 0.5, 0.25, 1.0, 2.0],
                },
                [5, 1, 33, 3, 3],
            ),
        ] {
            check_fixture(&generate(&FixtureSpec::new(kind, shape)).unwrap());
        }
    }

    #[test]
    fn u_profile_nadir_at_narrow_layer() {
        let f = generate(&FixtureSpec::new(
            FixtureKind::UProfile {
                levels: vec![4.0, 1.0, 4.0],
            },
            [3, 2, 64, 2, 2],
        ))
        .unwrap();
        let p = entropy_profile(&entropy_map(&f.stack, 100, RangeMode::Global).unwrap());
        let u = detect_u_shape(&p.values, 0.0).unwrap();
        assert_eq!(u.nadir, 1);
        assert!(u.is_u_shaped);
    }

    #[test]
    fn seeded_random_is_deterministic() {
        let spec = FixtureSpec::new(FixtureKind::SeededRandom, [3, 2, 8, 2, 2]).with_seed(9);
        let a = generate(&spec).unwrap().stack;
        let b = generate(&spec).unwrap().stack;
        assert_eq!(a.data(), b.data());
        let c = generate(&spec.clone().with_seed(10)).unwrap().stack;
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn f32_fixtures_loosen_tolerance() {
        let mut spec = FixtureSpec::new(FixtureKind::LowpassDecay { rate: 0.2 }, [1, 1, 12, 2, 2]);
        spec.precision = Precision::F32;
        check_fixture(&generate(&spec).unwrap());
    }

    #[test]
    fn invalid_specs() {
        for (kind, shape) in [
            (FixtureKind::ChannelSinusoid { k0: 4, amplitude: 1.0 }, [1, 1, 4, 1, 1]),
            (FixtureKind::LowpassDecay { rate: 0.0 }, [1, 1, 4, 1, 1]),
            (FixtureKind::UProfile { levels: vec![1.0] }, [2, 1, 4, 1, 1]),
            (FixtureKind::Constant { value: f64::NAN }, [1, 1, 4, 1, 1]),
            (FixtureKind::SeededRandom, [1, 0, 4, 1, 1]),
        ] {
            assert!(matches!(
                generate(&FixtureSpec::new(kind, shape)),
                Err(SynthError::Invalid(_))
            ));
        }
    }
}
