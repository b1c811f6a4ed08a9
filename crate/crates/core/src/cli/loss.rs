use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD};
use ndarray_npy::WriteNpyExt;
use serde::{Deserialize, Serialize};

use super::{prepare_out, sha256_file, write_json, CliError, FeatureMethod, LossArgs, ProjectorInit, TOOL};
use crate::distill::{
    freq_loss, kd_loss, proj_loss, total_loss, DistillConfig, GradKey, KdTerms, LossReport, Projector,
};
use crate::io_util::write_atomic;
use crate::tensor::load_stack;

#[derive(Debug, Deserialize)]
struct LogitsFile {
    logits: Vec<Vec<f64>>,
    #[serde(default)]
    labels: Option<Vec<usize>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn logits_matrix(file: &LogitsFile, path: &Path) -> Result<Array2<f64>, CliError> {
    let rows = file.logits.len();
    let cols = file.logits.first().map_or(0, Vec::len);
    if rows == 0 || file.logits.iter().any(|r| r.len() != cols) {
        return Err(CliError::Usage(format!(
            "{}: logits must be a non-empty rectangular array",
            path.display()
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), file.logits.concat()).expect("rectangular"))
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct LossProvenance {
    tool: &'static str,
    student: InputRecord,
    teacher: InputRecord,
    student_logits: InputRecord,
    teacher_logits: InputRecord,
}

#[derive(Debug, Serialize)]
struct LossConfigEcho {
    #[serde(flatten)]
    distill: DistillConfig,
    method: FeatureMethod,
    projector_init: ProjectorInit,
    seed: u64,
}

#[derive(Debug, Serialize)]
pub struct PairRecord {
    pub student_index: usize,
    pub teacher_index: usize,
    pub student_layer: String,
    pub teacher_layer: String,
    pub feature: LossReport,
}

#[derive(Debug, Serialize)]
struct KdTermsRecord {
    ce: f64,
    kl: f64,
    scaled_kl: f64,
}

impl From<KdTerms> for KdTermsRecord {
    fn from(t: KdTerms) -> Self {
        Self {
            ce: t.ce,
            kl: t.kl,
            scaled_kl: t.scaled_kl(),
        }
    }
}

#[derive(Debug, Serialize)]
struct LossOutput<'a> {
    provenance: LossProvenance,
    config: LossConfigEcho,
    kd: &'a LossReport,
    kd_terms: Option<KdTermsRecord>,
    pairs: &'a [PairRecord],
    total: &'a LossReport,
}

/// Summary returned to callers of [`cmd_loss`].
#[derive(Debug)]
pub struct LossRun {
    pub kd: LossReport,
    pub pairs: Vec<PairRecord>,
    pub total: LossReport,
}

fn record(path: &Path) -> Result<InputRecord, CliError> {
    Ok(InputRecord {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

fn dump(path: &Path, array: &ArrayD<f64>) -> Result<(), CliError> {
    write_atomic(path, |w| array.write_npy(w).map_err(std::io::Error::other)).map_err(|e| CliError::io(path, e))
}

/// Computes the logit loss plus one feature loss per aligned layer pair and
/// writes `loss.json`. Feature losses of all pairs are summed before weighting.
pub fn cmd_loss(args: &LossArgs) -> Result<LossRun, CliError> {
    let config = DistillConfig {
        alpha: args.alpha,
        beta: args.beta,
        temperature: args.temperature,
        layers: args.layers,
        n_bins: args.bins,
        kl_direction: args.kl_direction.into(),
    };
    config.validate()?;

    let student = load_stack(&args.student)?;
    let teacher = load_stack(&args.teacher)?;
    let s_file: LogitsFile = read_json(&args.student_logits)?;
    let t_file: LogitsFile = read_json(&args.teacher_logits)?;
    let s_logits = logits_matrix(&s_file, &args.student_logits)?;
    let t_logits = logits_matrix(&t_file, &args.teacher_logits)?;
    let labels = match &args.labels {
        Some(path) => read_json::<Vec<usize>>(path)?,
        None => s_file
            .labels
            .clone()
            .or_else(|| t_file.labels.clone())
            .ok_or_else(|| CliError::Usage("no labels: pass --labels or include them in a logits file".into()))?,
    };

    let kd = kd_loss(
        s_logits.view(),
        t_logits.view(),
        &labels,
        config.alpha,
        config.temperature,
        config.kl_direction,
    )?;

    let pairs_idx = match args.method {
        FeatureMethod::Soft => Vec::new(),
        _ => config.layers.pairs(student.num_layers(), teacher.num_layers())?,
    };
    let mut pairs = Vec::with_capacity(pairs_idx.len());
    let mut pair_grads = Vec::new();
    for (n, &(si, ti)) in pairs_idx.iter().enumerate() {
        let s = student.slice_layer(si)?;
        let t = teacher.slice_layer(ti)?;
        let mut report = match args.method {
            FeatureMethod::Spectral => freq_loss(s, t)?,
            FeatureMethod::Projector => {
                let (c_s, c_t) = (s.dim().1, t.dim().1);
                let projector = match args.projector_init {
                    ProjectorInit::Identity => Projector::identity(c_s, c_t),
                    ProjectorInit::Random => Projector::random(c_s, c_t, args.seed ^ n as u64),
                };
                proj_loss(s, t, &projector)?
            }
            FeatureMethod::Soft => unreachable!("soft distillation has no pairs"),
        };
        report.conventions = kd.conventions.clone();
        pair_grads.push(std::mem::take(&mut report.gradients));
        pairs.push(PairRecord {
            student_index: si,
            teacher_index: ti,
            student_layer: student.layer_names()[si].clone(),
            teacher_layer: teacher.layer_names()[ti].clone(),
            feature: report,
        });
    }

    let feature_sum: f64 = pairs.iter().map(|p| p.feature.total).sum();
    let mut aggregate = LossReport {
        total: feature_sum,
        kd: 0.0,
        feature: feature_sum,
        beta: 1.0,
        gradients: BTreeMap::new(),
        conventions: kd.conventions.clone(),
        kd_terms: None,
    };
    let mut total = total_loss(&kd, &aggregate, config.beta)?;
    total.gradients.retain(|k, _| *k == GradKey::StudentLogits);
    aggregate.total = total.total;

    prepare_out(&args.out)?;
    if args.dump_gradients {
        if let Some(g) = kd.gradient(GradKey::StudentLogits) {
            dump(&args.out.join("grad_student_logits.npy"), g)?;
        }
        for (n, grads) in pair_grads.iter().enumerate() {
            for (key, g) in grads {
                let name = serde_json::to_value(key).expect("enum serializes");
                let name = name.as_str().expect("string tag");
                dump(&args.out.join(format!("grad_pair{n}_{name}.npy")), g)?;
            }
        }
    }

    let output = LossOutput {
        provenance: LossProvenance {
            tool: TOOL,
            student: record(&args.student)?,
            teacher: record(&args.teacher)?,
            student_logits: record(&args.student_logits)?,
            teacher_logits: record(&args.teacher_logits)?,
        },
        config: LossConfigEcho {
            distill: config,
            method: args.method,
            projector_init: args.projector_init,
            seed: args.seed,
        },
        kd: &kd,
        kd_terms: kd.kd_terms.map(Into::into),
        pairs: &pairs,
        total: &total,
    };
    write_json(&args.out.join("loss.json"), &output)?;
    Ok(LossRun { kd, pairs, total })
}
