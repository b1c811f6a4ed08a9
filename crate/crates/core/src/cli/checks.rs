use ndarray::Array4;
use serde::Serialize;

use super::{
    parse_list, prepare_out, write_json, CliError, DtypeArg, FitArgs, FitInit, GradcheckArgs, Outcome, SynthArgs,
    SynthKind, TOOL,
};
use crate::distill::{
    channel_align, channel_unpool, fit_student_features, gradcheck, DistillError, FitOptions, GradOp, GradcheckReport,
};
use crate::rng::{StreamRng, GENERATOR_ID};
use crate::synth::{generate, ExpectedOutputs, FixtureKind, FixtureSpec};
use crate::tensor::{load_stack, save_stack_with, ClsPolicy, Precision};

#[derive(Debug, Serialize)]
struct GradcheckOutput<'a> {
    tool: &'static str,
    passed: bool,
    checks: &'a [GradcheckReport],
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Outcome, CliError> {
    let ops: Vec<GradOp> = if args.all || args.op.is_empty() {
        GradOp::ALL.to_vec()
    } else {
        args.op
            .iter()
            .map(|s| s.parse::<GradOp>().map_err(CliError::Usage))
            .collect::<Result<_, _>>()?
    };
    let mut reports = Vec::with_capacity(ops.len());
    for op in ops {
        let r = gradcheck(op, args.seed, args.tol)?;
        println!(
            "{} {op}: max rel error {:.3e} over {} entries (tol {:e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.checked,
            r.tolerance
        );
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    prepare_out(&args.out)?;
    write_json(
        &args.out.join("gradcheck.json"),
        &GradcheckOutput {
            tool: TOOL,
            passed,
            checks: &reports,
        },
    )?;
    Ok(if passed { Outcome::Passed } else { Outcome::CheckFailed })
}

#[derive(Debug, Serialize)]
struct FitOutput {
    tool: &'static str,
    target: String,
    target_shape: [usize; 4],
    student_channels: usize,
    init: FitInit,
    steps: usize,
    lr: f64,
    seed: u64,
    diverged: Option<usize>,
    initial_loss: f64,
    final_loss: f64,
    feature_mse: Option<f64>,
    raw_residual: Option<f64>,
    max_mse: Option<f64>,
    passed: bool,
    trace: Vec<f64>,
}

pub fn cmd_fit(args: &FitArgs) -> Result<Outcome, CliError> {
    let (target, label) = match &args.teacher {
        Some(path) => {
            let stack = load_stack(path)?;
            (
                stack.slice_layer(args.layer)?.to_owned(),
                format!("{}#{}", path.display(), args.layer),
            )
        }
        None => {
            let dims: Vec<usize> = parse_list(&args.shape, "shape")?;
            let [b, c, h, w]: [usize; 4] = dims
                .try_into()
                .map_err(|_| CliError::Usage(format!("--shape needs four values, got `{}`", args.shape)))?;
            if [b, c, h, w].contains(&0) {
                return Err(CliError::Usage(format!("--shape `{}` has a zero axis", args.shape)));
            }
            let mut rng = StreamRng::new(args.seed);
            let t = Array4::from_shape_simple_fn((b, c, h, w), || rng.uniform_in(-1.0, 1.0));
            (t, format!("random(seed={})", args.seed))
        }
    };
    let (b, c_t, h, w) = target.dim();
    let c_s = args.student_channels.unwrap_or(c_t);
    if c_s == 0 {
        return Err(CliError::Usage("--student-channels must be positive".into()));
    }
    let init = match args.init {
        FitInit::Zero => Array4::zeros((b, c_s, h, w)),
        FitInit::Teacher if c_s <= c_t => channel_align(target.view(), c_s)?,
        FitInit::Teacher => channel_unpool(target.view(), c_s),
    };
    let options = FitOptions {
        steps: args.steps,
        lr: args.lr,
    };
    let mut out = FitOutput {
        tool: TOOL,
        target: label,
        target_shape: [b, c_t, h, w],
        student_channels: c_s,
        init: args.init,
        steps: args.steps,
        lr: args.lr,
        seed: args.seed,
        diverged: None,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        feature_mse: None,
        raw_residual: None,
        max_mse: args.max_mse,
        passed: false,
        trace: Vec::new(),
    };
    match fit_student_features(target.view(), init, options) {
        Ok(r) => {
            out.initial_loss = r.trace[0];
            out.final_loss = r.final_loss();
            out.feature_mse = Some(r.feature_mse);
            out.raw_residual = Some(r.raw_residual);
            out.passed = args.max_mse.is_none_or(|m| r.feature_mse <= m);
            out.trace = r.trace;
        }
        Err(DistillError::Diverged { step, loss, trace }) => {
            out.diverged = Some(step);
            out.initial_loss = trace[0];
            out.final_loss = loss;
            out.trace = trace;
        }
        Err(e) => return Err(e.into()),
    }
    match (out.diverged, out.feature_mse) {
        (Some(step), _) => println!("FAIL fit: diverged at step {step}"),
        (None, Some(mse)) => println!(
            "{} fit: feature MSE {mse:.3e} after {} steps",
            if out.passed { "PASS" } else { "FAIL" },
            args.steps
        ),
        _ => {}
    }
    prepare_out(&args.out)?;
    write_json(&args.out.join("fit.json"), &out)?;
    Ok(if out.passed {
        Outcome::Passed
    } else {
        Outcome::CheckFailed
    })
}

fn synth_kind(args: &SynthArgs, layers: usize) -> Result<FixtureKind, CliError> {
    Ok(match args.kind {
        SynthKind::Constant => FixtureKind::Constant { value: args.value },
        SynthKind::OnePerBin => FixtureKind::OnePerBin,
        SynthKind::Sinusoid => FixtureKind::ChannelSinusoid {
            k0: args.k0,
            amplitude: args.amplitude,
        },
        SynthKind::Lowpass => FixtureKind::LowpassDecay { rate: args.rate },
        SynthKind::UProfile => {
            let levels = match &args.levels {
                Some(s) => parse_list(s, "levels")?,
                // symmetric V over the layers
                None => (0..layers)
                    .map(|l| {
                        let mid = (layers as f64 - 1.0) / 2.0;
                        1.0 + (l as f64 - mid).abs()
                    })
                    .collect(),
            };
            FixtureKind::UProfile { levels }
        }
        SynthKind::Random => FixtureKind::SeededRandom,
    })
}

pub fn cmd_synth(args: &SynthArgs) -> Result<ExpectedOutputs, CliError> {
    let dims: Vec<usize> = parse_list(&args.shape, "shape")?;
    let shape: [usize; 5] = dims
        .try_into()
        .map_err(|_| CliError::Usage(format!("--shape needs five values, got `{}`", args.shape)))?;
    let mut spec = FixtureSpec::new(synth_kind(args, shape[0])?, shape).with_seed(args.seed);
    spec.precision = match args.dtype {
        DtypeArg::F4 => Precision::F32,
        DtypeArg::F8 => Precision::F64,
    };
    let fixture = generate(&spec)?;
    let stack = fixture.stack.with_cls_policy(ClsPolicy::from(args.cls));
    save_stack_with(&stack, &args.out, Some(GENERATOR_ID.to_string()))?;
    write_json(&args.out.join("expected.json"), &fixture.expected)?;
    Ok(fixture.expected)
}
