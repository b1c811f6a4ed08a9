mod common;

use std::path::Path;

use common::*;
use distill_dynamics::tensor::save_stack;

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn synth(dir: &Path, args: &[&str]) -> String {
    let out = s(dir);
    let mut all = vec!["synth", "--out", &out];
    all.extend_from_slice(args);
    let r = ddyn(&all);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    s(&dir.join("manifest.json"))
}

fn analyze(manifest: &str, out: &Path, extra: &[&str]) -> serde_json::Value {
    let o = s(out);
    let mut all = vec!["analyze", "--manifest", manifest, "--out", &o];
    all.extend_from_slice(extra);
    let r = ddyn(&all);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    read_json(&out.join("report.json"))
}

fn as_vec(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn constant_fixture_has_zero_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("fx"), &["--kind", "constant", "--value", "-2.5"]);
    let report = analyze(&m, &dir.path().join("an"), &[]);
    assert!(as_vec(&report["entropy"]["values"]).iter().all(|&e| e == 0.0));
    assert!(as_vec(&report["magnitude"]["values"]).iter().all(|&m| m == 2.5));
    let csv = std::fs::read_to_string(dir.path().join("an/entropy.csv")).unwrap();
    assert!(csv.starts_with("layer,entropy_bits\n"));
}

#[test]
fn synth_outputs_match_expected() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [
        &["--kind", "one-per-bin", "--shape", "2,1,100,2,2"][..],
        &["--kind", "sinusoid", "--k0", "3", "--shape", "3,2,16,2,3"],
        &["--kind", "lowpass", "--rate", "0.4"],
        &["--kind", "u-profile", "--shape", "5,2,8,3,3"],
        &["--kind", "random", "--seed", "9"],
        &["--kind", "constant", "--dtype", "f4", "--value", "0.1"],
    ] {
        let fx = dir.path().join(kind[1]);
        let m = synth(&fx, kind);
        let expected = read_json(&fx.join("expected.json"));
        let bins = expected["entropy_bins"].as_u64().unwrap_or(100).to_string();
        let report = analyze(&m, &dir.path().join(format!("an_{}", kind[1])), &["--bins", &bins]);
        let tol = expected["tolerance"].as_f64().unwrap();
        for (field, section) in [("entropy", "entropy"), ("magnitude", "magnitude")] {
            if expected[field].is_array() {
                let (want, got) = (as_vec(&expected[field]), as_vec(&report[section]["values"]));
                for (w, g) in want.iter().zip(&got) {
                    assert!((w - g).abs() <= tol, "{}: {field} {w} vs {g}", kind[1]);
                }
            }
        }
        if let Some(rows) = expected["spectrum"].as_array() {
            for (want, got) in rows.iter().zip(report["spectral"]["values"].as_array().unwrap()) {
                for (w, g) in as_vec(want).iter().zip(as_vec(got)) {
                    assert!((w - g).abs() <= tol, "{}: spectrum {w} vs {g}", kind[1]);
                }
            }
        }
        if expected["phases"].is_array() {
            assert_eq!(expected["phases"], report["phases"]["labels"], "{}", kind[1]);
        }
        if let Some(n) = expected["entropy_nadir"].as_u64() {
            assert_eq!(report["entropy"]["shape"]["nadir"].as_u64(), Some(n));
        }
    }
}

#[test]
fn range_modes_differ_when_layer_scales_differ() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(
        &dir.path().join("fx"),
        &["--kind", "u-profile", "--shape", "3,1,8,2,2", "--levels", "1,0.1,1"],
    );
    let global = analyze(&m, &dir.path().join("g"), &["--bins", "8"]);
    let per_layer = analyze(&m, &dir.path().join("p"), &["--bins", "8", "--range", "per-layer"]);
    assert_eq!(per_layer["config"]["range"], "per-layer");
    let (g, p) = (
        as_vec(&global["entropy"]["values"]),
        as_vec(&per_layer["entropy"]["values"]),
    );
    assert!(g[1] < p[1], "global {g:?} per-layer {p:?}");
    assert_eq!(per_layer["entropy"]["ranges"].as_array().unwrap().len(), 3);
}

#[test]
fn cls_assertion_rejects_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("fx"), &["--kind", "random", "--cls", "folded"]);
    let out = s(&dir.path().join("an"));
    assert_eq!(
        ddyn(&["analyze", "--manifest", &m, "--out", &out, "--cls", "dropped"])
            .status
            .code(),
        Some(2)
    );
    assert!(ddyn(&["analyze", "--manifest", &m, "--out", &out, "--cls", "folded"])
        .status
        .success());
}

fn loss_inputs(dir: &Path, same: bool) -> [String; 4] {
    let student = random_stack(3, (3, 2, 6, 3, 2));
    let teacher = if same {
        student.clone()
    } else {
        random_stack(4, (5, 2, 10, 3, 2))
    };
    save_stack(&student, &dir.join("s")).unwrap();
    save_stack(&teacher, &dir.join("t")).unwrap();
    write_logits(
        &dir.join("sl.json"),
        &[vec![0.2, -1.0, 0.4], vec![0.0, 0.3, 0.1]],
        &[2, 1],
    );
    write_logits(
        &dir.join("tl.json"),
        &[vec![1.2, -0.5, 0.4], vec![0.2, 0.1, 0.9]],
        &[2, 1],
    );
    [
        s(&dir.join("s/manifest.json")),
        s(&dir.join("t/manifest.json")),
        s(&dir.join("sl.json")),
        s(&dir.join("tl.json")),
    ]
}

fn loss(inputs: &[String; 4], out: &Path, extra: &[&str]) -> serde_json::Value {
    let o = s(out);
    let mut all = vec![
        "loss",
        "--student",
        &inputs[0],
        "--teacher",
        &inputs[1],
        "--student-logits",
        &inputs[2],
        "--teacher-logits",
        &inputs[3],
        "--out",
        &o,
    ];
    all.extend_from_slice(extra);
    let r = ddyn(&all);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    read_json(&out.join("loss.json"))
}

#[test]
fn identical_features_give_zero_feature_loss() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = loss_inputs(dir.path(), true);
    for method in ["spectral", "projector"] {
        let r = loss(&inputs, &dir.path().join(method), &["--method", method]);
        assert_eq!(r["total"]["feature"].as_f64(), Some(0.0), "{method}");
        assert_eq!(r["pairs"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn feature_method_leaves_kd_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = loss_inputs(dir.path(), false);
    let spectral = loss(&inputs, &dir.path().join("a"), &[]);
    let projector = loss(&inputs, &dir.path().join("b"), &["--method", "projector"]);
    let soft = loss(
        &inputs,
        &dir.path().join("c"),
        &["--method", "soft", "--dump-gradients"],
    );
    assert_eq!(spectral["kd"], projector["kd"]);
    assert_eq!(spectral["kd"], soft["kd"]);
    assert!(soft["pairs"].as_array().unwrap().is_empty());
    assert_eq!(soft["total"]["total"], soft["kd"]["total"]);
    assert!(dir.path().join("c/grad_student_logits.npy").exists());
    let beta = spectral["config"]["beta"].as_f64().unwrap();
    let want = spectral["kd"]["total"].as_f64().unwrap() + beta * spectral["total"]["feature"].as_f64().unwrap();
    assert!((spectral["total"]["total"].as_f64().unwrap() - want).abs() <= 1e-12);
}

#[test]
fn bad_arguments_exit_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = loss_inputs(dir.path(), false);
    let out = s(&dir.path().join("x"));
    let base = [
        "loss",
        "--student",
        &inputs[0],
        "--teacher",
        &inputs[1],
        "--student-logits",
        &inputs[2],
        "--teacher-logits",
        &inputs[3],
        "--out",
        &out,
    ];
    for extra in [
        &["--alpha", "1.5"][..],
        &["--temperature", "0"],
        &["--layers", "first:9,last:1"],
    ] {
        let mut all = base.to_vec();
        all.extend_from_slice(extra);
        assert_eq!(ddyn(&all).status.code(), Some(2), "{extra:?}");
    }
    let missing = s(&dir.path().join("nope/manifest.json"));
    assert_eq!(
        ddyn(&["analyze", "--manifest", &missing, "--out", &out]).status.code(),
        Some(2)
    );
}

#[test]
fn gradcheck_all_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let r = ddyn(&["gradcheck", "--all", "--out", &out]);
    assert!(r.status.success());
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{stdout}");
    let report = read_json(&dir.path().join("gradcheck.json"));
    assert_eq!(report["passed"], true);
}

#[test]
fn fit_reports_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    let a = s(&dir.path().join("a"));
    assert!(ddyn(&["fit", "--out", &a, "--max-mse", "1e-6"]).status.success());
    let fit = read_json(&dir.path().join("a/fit.json"));
    assert_eq!(fit["trace"].as_array().unwrap().len(), 501);

    let b = s(&dir.path().join("b"));
    let r = ddyn(&["fit", "--out", &b, "--student-channels", "2", "--max-mse", "1e-6"]);
    assert_eq!(r.status.code(), Some(0));
    let fit = read_json(&dir.path().join("b/fit.json"));
    assert!(fit["raw_residual"].as_f64().unwrap() > 1e-3);

    let c = s(&dir.path().join("c"));
    assert_eq!(
        ddyn(&["fit", "--out", &c, "--steps", "3", "--max-mse", "1e-9"])
            .status
            .code(),
        Some(1)
    );
    let d = s(&dir.path().join("d"));
    assert_eq!(ddyn(&["fit", "--out", &d, "--lr", "50"]).status.code(), Some(1));
    assert!(read_json(&dir.path().join("d/fit.json"))["diverged"].is_u64());
}
