use maxent_hmm::cli;
use maxent_hmm::io::{write_events, write_seq};
use maxent_hmm::synth::{grouped_dataset, memm_generate, GroupedSpec, MemmSpec};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use tempfile::TempDir;

fn run(args: &[&str]) -> maxent_hmm::Result<BTreeMap<String, String>> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["maxent-hmm"];
    full.extend_from_slice(args);
    cli::run(full, &mut out, &mut err)?;
    Ok(String::from_utf8(out)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(' '))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn ok(args: &[&str]) -> BTreeMap<String, String> {
    run(args).unwrap_or_else(|e| panic!("{args:?}: {e}"))
}

fn num(report: &BTreeMap<String, String>, key: &str) -> f64 {
    report[key]
        .parse()
        .unwrap_or_else(|_| panic!("{key} = {}", report[key]))
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn grouped_file(dir: &TempDir) -> PathBuf {
    let data = grouped_dataset(
        &GroupedSpec {
            num_outputs: 3,
            num_groups: 3,
            group_size: 2,
            num_histories: 4,
            num_events: 40,
            skip_prob: 0.0,
        },
        5,
    )
    .unwrap();
    let path = p(dir, "events.txt");
    std::fs::write(&path, write_events(&data)).unwrap();
    path
}

#[test]
fn compare_model_with_itself_is_zero() {
    let dir = TempDir::new().unwrap();
    let data = grouped_file(&dir);
    let model = p(&dir, "m.txt");
    ok(&[
        "train",
        "--method",
        "gis",
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--iters",
        "50",
    ]);
    let r = ok(&[
        "compare",
        "--model",
        s(&model),
        "--model",
        s(&model),
        "--data",
        s(&data),
    ]);
    assert_eq!(r["max_tv"], "0.000000e+00");
}

#[test]
fn gis_then_check_and_eval() {
    let dir = TempDir::new().unwrap();
    let data = grouped_file(&dir);
    let model = p(&dir, "m.txt");
    let t = ok(&[
        "train",
        "--method",
        "gis",
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--tol",
        "1e-6",
    ]);
    assert_eq!(t["converged"], "true");
    let c = ok(&["check", "--model", s(&model), "--data", s(&data)]);
    assert!(num(&c, "residual") <= 1e-6);
    assert_eq!(c["unobserved_features"], "0");
    let e = ok(&["eval", "--model", s(&model), "--data", s(&data)]);
    assert_eq!(e["events"], "40");
    assert!((num(&e, "log_likelihood") - num(&t, "log_likelihood")).abs() < 1e-9);
    let acc = num(&e, "accuracy");
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn fb_and_gis_agree() {
    let dir = TempDir::new().unwrap();
    let data = grouped_file(&dir);
    let (g, f, fr) = (p(&dir, "g.txt"), p(&dir, "f.txt"), p(&dir, "fr.txt"));
    ok(&[
        "train",
        "--method",
        "gis",
        "--data",
        s(&data),
        "--out",
        s(&g),
        "--tol",
        "1e-6",
    ]);
    let fb = ok(&[
        "train",
        "--method",
        "fb",
        "--data",
        s(&data),
        "--out",
        s(&f),
        "--tol",
        "1e-6",
    ]);
    assert_eq!(fb["converged"], "true");
    assert_eq!(fb["groups"], "3");
    ok(&[
        "train",
        "--method",
        "fb",
        "--rotate",
        "--data",
        s(&data),
        "--out",
        s(&fr),
        "--tol",
        "1e-6",
    ]);
    for other in [&f, &fr] {
        let r = ok(&["compare", "--model", s(&g), "--model", s(other), "--data", s(&data)]);
        assert!(num(&r, "max_tv") <= 1e-3, "{r:?}");
    }
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = TempDir::new().unwrap();
    let mut files = Vec::new();
    for run_id in 0..2 {
        let (out, truth) = (p(&dir, &format!("e{run_id}")), p(&dir, &format!("t{run_id}")));
        ok(&[
            "synth",
            "--gen",
            "hv",
            "--seed",
            "7",
            "--events",
            "60",
            "--out",
            s(&out),
            "--truth",
            s(&truth),
        ]);
        files.push((std::fs::read(&out).unwrap(), std::fs::read(&truth).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    let (other, truth) = (p(&dir, "e2"), p(&dir, "t2"));
    ok(&[
        "synth",
        "--gen",
        "hv",
        "--seed",
        "8",
        "--events",
        "60",
        "--out",
        s(&other),
        "--truth",
        s(&truth),
    ]);
    assert_ne!(std::fs::read(&other).unwrap(), files[0].0);
}

#[test]
fn transform_round_trip_keeps_distributions() {
    let dir = TempDir::new().unwrap();
    let data = grouped_file(&dir);
    let (m, grouped, sub, back) = (p(&dir, "m"), p(&dir, "g"), p(&dir, "s"), p(&dir, "b"));
    ok(&[
        "train",
        "--method",
        "gis",
        "--data",
        s(&data),
        "--out",
        s(&m),
        "--iters",
        "30",
    ]);
    ok(&[
        "transform",
        "--model",
        s(&m),
        "--data",
        s(&data),
        "--op",
        "group",
        "--out",
        s(&grouped),
    ]);
    let r = ok(&[
        "transform",
        "--model",
        s(&grouped),
        "--data",
        s(&data),
        "--op",
        "subunit",
        "--out",
        s(&sub),
    ]);
    assert!(num(&r, "max_weight") < 1.0);
    ok(&[
        "transform",
        "--model",
        s(&sub),
        "--data",
        s(&data),
        "--op",
        "strip",
        "--out",
        s(&back),
    ]);
    let c = ok(&["compare", "--model", s(&m), "--model", s(&back), "--data", s(&data)]);
    assert!(num(&c, "max_tv") < 1e-12);
}

#[test]
fn subunit_needs_a_grouped_model() {
    let dir = TempDir::new().unwrap();
    let data = grouped_file(&dir);
    let m = p(&dir, "m");
    ok(&[
        "train",
        "--method",
        "gis",
        "--data",
        s(&data),
        "--out",
        s(&m),
        "--iters",
        "5",
    ]);
    assert!(run(&[
        "transform",
        "--model",
        s(&m),
        "--data",
        s(&data),
        "--op",
        "subunit",
        "--out",
        s(&p(&dir, "x"))
    ])
    .is_err());
}

#[test]
fn memm_train_and_decode() {
    let dir = TempDir::new().unwrap();
    let d = memm_generate(&MemmSpec {
        num_states: 3,
        num_observations: 2,
        num_sequences: 400,
        length: 4,
        num_test: 3,
        seed: 2,
    })
    .unwrap();
    let (train, test, model) = (p(&dir, "train"), p(&dir, "test"), p(&dir, "model"));
    std::fs::write(&train, write_seq(&d.train)).unwrap();
    std::fs::write(&test, write_seq(&d.test)).unwrap();
    let t = ok(&["memm-train", "--data", s(&train), "--out", s(&model), "--tol", "1e-4"]);
    assert!(t.keys().any(|k| k.starts_with("iterations.s")));
    for (k, v) in t.iter().filter(|(k, _)| k.starts_with("residual.")) {
        assert!(v.parse::<f64>().unwrap() <= 1e-4, "{k} = {v}");
    }
    let r = ok(&["memm-decode", "--model", s(&model), "--data", s(&test)]);
    let paths: Vec<_> = r.iter().filter(|(k, _)| k.starts_with("path.")).collect();
    assert_eq!(paths.len(), 3);
    for (_, v) in paths {
        assert_eq!(v.split(',').count(), 4);
    }
    assert!((0.0..=1.0).contains(&num(&r, "accuracy")));
    for (_, v) in r.iter().filter(|(k, _)| k.starts_with("prob.")) {
        let p: f64 = v.parse().unwrap();
        assert!(p > 0.0 && p <= 1.0);
    }
}

#[test]
fn hidden_training_from_files() {
    let dir = TempDir::new().unwrap();
    let (data, truth) = (p(&dir, "e"), p(&dir, "t"));
    ok(&[
        "synth",
        "--gen",
        "hv",
        "--seed",
        "1",
        "--events",
        "150",
        "--out",
        s(&data),
        "--truth",
        s(&truth),
    ]);
    let mut lls = Vec::new();
    for method in ["em", "fb"] {
        let out = p(&dir, method);
        let r = ok(&[
            "hv-train",
            "--data",
            s(&data),
            "--hidden",
            "2",
            "--method",
            method,
            "--out",
            s(&out),
            "--iters",
            "20",
        ]);
        assert_eq!(r["iterations"], "20");
        lls.push(num(&r, "log_likelihood"));
        let e = ok(&["eval", "--model", s(&out), "--data", s(&data), "--report", "ll"]);
        assert!((num(&e, "log_likelihood") - lls.last().unwrap()).abs() < 1e-6);
    }
}

#[test]
fn bad_input_fails_with_nonzero_exit() {
    let dir = TempDir::new().unwrap();
    let bad = p(&dir, "bad");
    std::fs::write(&bad, "EVENT e1 y0\nCAND y0 0\nCAND y0 1\nEND\n").unwrap();
    let exe = env!("CARGO_BIN_EXE_maxent-hmm");
    let o = Command::new(exe)
        .args(["train", "--method", "gis", "--data", s(&bad), "--out", s(&p(&dir, "m"))])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let missing = Command::new(exe)
        .args(["eval", "--model", "/nonexistent/m", "--data", s(&bad)])
        .output()
        .unwrap();
    assert!(!missing.status.success());
    let usage = Command::new(exe).arg("train").output().unwrap();
    assert!(!usage.status.success());
}
