use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
master_seed = 11

[graph]
kind = "erdos_renyi"
p = 0.3
n = 9
p_min = 0.05
p_max = 0.2

[response]
profile = "concave"
kappa = 0.05
strata = 2

[data]
noise_sigma = 0.1
replications = 60

[policy]
kind = "random_pool"
k = 2
pool = 6

[pipeline]
k = 2
repetitions = 1
"#;

fn cim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cim"))
        .args(args)
        .env("CIM_THREADS", "2")
        .output()
        .expect("cim runs")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("cfg.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.join("gen");
    let o = cim(&["gen", "--config", &s(&cfg), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn gen_writes_instance_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(dir.path());
    for f in [
        "graph.txt",
        "spec.json",
        "model.json",
        "data.jsonl",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["master_seed"], 11);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn gen_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ga, gb) = (generate(a.path()), generate(b.path()));
    for f in ["graph.txt", "spec.json", "model.json", "data.jsonl"] {
        assert_eq!(
            std::fs::read(ga.join(f)).unwrap(),
            std::fs::read(gb.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gen_rejects_missing_field_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, CONFIG.replace("n = 9\n", "")).unwrap();
    let o = cim(&[
        "gen",
        "--config",
        &s(&cfg),
        "--out",
        &s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`n`"), "{}", stderr(&o));
}

#[test]
fn missing_input_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cim(&[
        "gen",
        "--config",
        "/nonexistent/cfg.toml",
        "--out",
        &s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fitted_model_passes_shape_check_and_selects() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(dir.path());
    let fit = dir.path().join("fit");
    let o = cim(&[
        "fit",
        "--data",
        &s(&g.join("data.jsonl")),
        "--strata",
        &s(&g.join("model.json")),
        "--lambda",
        "0.01",
        "--out",
        &s(&fit),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cim(&["check-shape", "--model", &s(&fit.join("fitted.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));

    let sel = dir.path().join("sel");
    let o = cim(&[
        "select",
        "--graph",
        &s(&g.join("graph.txt")),
        "--spec",
        &s(&g.join("spec.json")),
        "--model",
        &s(&fit.join("fitted.json")),
        "-K",
        "2",
        "-R",
        "200",
        "--lazy",
        "--out",
        &s(&sel),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sel.join("selection.json")).unwrap())
            .unwrap();
    assert_eq!(v["seeds"]["members"].as_array().unwrap().len(), 2);
    assert!(v.get("wall_time_ms").is_none());

    let eval = dir.path().join("eval");
    let o = cim(&[
        "evaluate",
        "--graph",
        &s(&g.join("graph.txt")),
        "--spec",
        &s(&g.join("spec.json")),
        "--model",
        &s(&fit.join("fitted.json")),
        "--truth",
        &s(&g.join("model.json")),
        "--data",
        &s(&g.join("data.jsonl")),
        "--selection",
        &s(&sel.join("selection.json")),
        "-R",
        "500",
        "--out",
        &s(&eval),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(eval.join("report.json").exists() && eval.join("report.csv").exists());
}

#[test]
fn ips_weighting_without_propensities_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    std::fs::write(
        &data,
        "{\"seed\":[0],\"context\":0,\"rows\":[{\"i\":0,\"z\":1,\"kp\":0,\"kn\":0,\"y\":0.5},{\"i\":1,\"z\":0,\"kp\":1,\"kn\":0,\"y\":0.2}]}\n",
    )
    .unwrap();
    let strata = dir.path().join("strata.json");
    std::fs::write(&strata, "[0, 1]").unwrap();
    let o = cim(&[
        "fit",
        "--data",
        &s(&data),
        "--strata",
        &s(&strata),
        "--weighting",
        "ips",
        "--target",
        "0",
        "--out",
        &s(&dir.path().join("fit")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("propensit"), "{}", stderr(&o));
}

#[test]
fn degree_baseline_picks_star_center() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("star.txt");
    std::fs::write(
        &graph,
        "3 0 0.1\n3 1 0.1\n3 2 0.1\n3 4 0.1\n3 5 0.1\n0 1 0.1\n",
    )
    .unwrap();
    let out = dir.path().join("sel");
    let o = cim(&[
        "select",
        "--graph",
        &s(&graph),
        "--method",
        "degree",
        "-K",
        "1",
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("selection.json")).unwrap())
            .unwrap();
    assert_eq!(v["seeds"]["members"], serde_json::json!([3]));
}

#[test]
fn check_shape_flags_convex_values() {
    assert_eq!(
        cim(&["check-shape", "--values", "0,1,3"]).status.code(),
        Some(1)
    );
    assert_eq!(
        cim(&["check-shape", "--values", "0,1,1.5"]).status.code(),
        Some(0)
    );
    assert_eq!(
        cim(&["check-shape", "--values", "0,-0.5"]).status.code(),
        Some(1)
    );
}

#[test]
fn verify_passes_and_injected_fault_fails_with_reproducer() {
    let dir = tempfile::tempdir().unwrap();
    let o = cim(&[
        "verify",
        "--suite",
        "all",
        "--instances",
        "5",
        "--seed",
        "1",
        "--out",
        &s(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for suite in ["reduction", "moments", "jensen", "estimation", "end2end"] {
        assert!(stdout.contains(suite), "{stdout}");
    }
    let o = cim(&[
        "verify",
        "--suite",
        "reduction",
        "--instances",
        "3",
        "--inject-fault",
        "convex-curve",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("master_seed"), "{}", stderr(&o));
}

#[test]
fn sweep_writes_matrix_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("sweep");
    let o = cim(&[
        "sweep",
        "--config",
        &s(&cfg),
        "--axis",
        "sigma",
        "--values",
        "0.05,0.2",
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let matrix = std::fs::read_to_string(out.join("matrix.csv")).unwrap();
    let mut lines = matrix.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("axis,value,repetition,method"));
    // Two values, one repetition, cim plus degree and random baselines.
    assert_eq!(lines.count(), 6);
    assert!(out.join("summary.csv").exists());
}
