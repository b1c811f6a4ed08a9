use serde::Serialize;

use super::{prepare_out, sha256_file, write_csv_file, write_json, AnalyzeArgs, CliError, TOOL};
use crate::distill::LossReport;
use crate::infodyn::{
    default_u_tolerance, entropy_map, entropy_profile, magnitude_profile, write_profile_csv, RangeMode, UShape,
};
use crate::spectral::{classify_all, layer_spectrum, PhaseThresholds, SpectralPhase};
use crate::tensor::{load_stack, ClsPolicy};

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub manifest: String,
    pub manifest_sha256: String,
    pub model: String,
}

#[derive(Debug, Serialize)]
pub struct AnalyzeConfig {
    pub bins: usize,
    pub range: RangeMode,
    pub cls: ClsPolicy,
    /// `None` means 2% of each profile's value range per step.
    pub u_tolerance: Option<f64>,
    pub slope_threshold: f64,
    pub epsilon: f64,
}

#[derive(Debug, Serialize)]
pub struct SpectralSection {
    pub source: String,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct EntropySection {
    pub source: String,
    pub unit: &'static str,
    pub range_mode: RangeMode,
    pub ranges: Vec<(f64, f64)>,
    pub values: Vec<f64>,
    pub tolerance: f64,
    pub shape: Option<UShape>,
}

#[derive(Debug, Serialize)]
pub struct MagnitudeSection {
    pub source: String,
    pub values: Vec<f64>,
    pub tolerance: f64,
    pub shape: Option<UShape>,
}

#[derive(Debug, Serialize)]
pub struct PhaseSection {
    pub source: String,
    pub labels: Vec<SpectralPhase>,
}

/// Everything `analyze` writes to `report.json`.
#[derive(Debug, Serialize)]
pub struct ReportBundle {
    pub provenance: Provenance,
    pub config: AnalyzeConfig,
    pub layers: Vec<String>,
    pub spectral: SpectralSection,
    pub entropy: EntropySection,
    pub magnitude: MagnitudeSection,
    pub phases: PhaseSection,
    pub losses: Vec<LossReport>,
}

/// Runs all three analyses plus the shape detectors and writes
/// `spectrum.csv`, `entropy.csv`, `magnitude.csv` and `report.json`.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<ReportBundle, CliError> {
    let stack = load_stack(&args.manifest)?;
    if let Some(cls) = args.cls {
        let want = ClsPolicy::from(cls);
        if want != stack.cls_policy() {
            return Err(CliError::Usage(format!(
                "manifest class-token policy is `{}` but `--cls {want}` was requested",
                stack.cls_policy()
            )));
        }
    }
    let range = RangeMode::from(args.range);
    let thresholds = PhaseThresholds {
        slope: args.slope_threshold,
        epsilon: args.epsilon,
    };
    let source = args.manifest.display().to_string();

    let spectrum = layer_spectrum(&stack);
    let emap = entropy_map(&stack, args.bins, range)?;
    let ent = entropy_profile(&emap);
    let ent_tol = args.u_tolerance.unwrap_or_else(|| default_u_tolerance(&ent.values));
    let ent = ent.annotate(ent_tol);
    let mag = magnitude_profile(&stack);
    let mag_tol = args.u_tolerance.unwrap_or_else(|| default_u_tolerance(&mag.values));
    let mag = mag.annotate(mag_tol);
    let labels = classify_all(&spectrum, thresholds);

    prepare_out(&args.out)?;
    let names = stack.layer_names().to_vec();
    write_csv_file(&args.out.join("spectrum.csv"), |w| spectrum.write_csv(w))?;
    write_csv_file(&args.out.join("entropy.csv"), |w| {
        write_profile_csv(w, "entropy_bits", &names, &ent.values)
    })?;
    write_csv_file(&args.out.join("magnitude.csv"), |w| {
        write_profile_csv(w, "mean_abs", &names, &mag.values)
    })?;

    let bundle = ReportBundle {
        provenance: Provenance {
            tool: TOOL,
            manifest: source.clone(),
            manifest_sha256: sha256_file(&args.manifest)?,
            model: stack.model().to_string(),
        },
        config: AnalyzeConfig {
            bins: args.bins,
            range,
            cls: stack.cls_policy(),
            u_tolerance: args.u_tolerance,
            slope_threshold: args.slope_threshold,
            epsilon: args.epsilon,
        },
        layers: names,
        spectral: SpectralSection {
            source: source.clone(),
            values: spectrum.rows(),
        },
        entropy: EntropySection {
            source: source.clone(),
            unit: "bits",
            range_mode: range,
            ranges: emap.ranges.clone(),
            values: ent.values,
            tolerance: ent_tol,
            shape: ent.shape,
        },
        magnitude: MagnitudeSection {
            source: source.clone(),
            values: mag.values,
            tolerance: mag_tol,
            shape: mag.shape,
        },
        phases: PhaseSection { source, labels },
        losses: Vec::new(),
    };
    write_json(&args.out.join("report.json"), &bundle)?;
    Ok(bundle)
}
