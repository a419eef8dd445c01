use std::path::Path;
use std::process::{Command, Output};

use kktrain::cli::{compare, parse_metrics_csv, METRICS_HEADER};

fn kktrain(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kktrain"));
    cmd.args(args).env_remove("KKTRAIN_OUT");
    if let Some(dir) = env_out {
        cmd.env("KKTRAIN_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL_SPHERES: &str =
    "kind = \"spheres\"\nseed = 4\n[spheres]\ndim = 50\nn_constraints = 12\niters = 15\nn_active = 4\nsoft_lr = 1e-4\n";

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (name, text) in [
        ("syntax.toml", "kind = \"spheres\"\nseed = = 3\n"),
        ("unknown.toml", "kind = \"spheres\"\nlearning_rate = 3\n"),
        ("seed.toml", "kind = \"spheres\"\nseed = 1\n[train]\nseed = 2\n"),
        ("range.toml", "kind = \"spheres\"\n[train]\nlr = -1.0\n"),
    ] {
        let cfg = write(dir.path(), name, text);
        let o = kktrain(&["run", &cfg, "--out-dir", out.to_str().unwrap()], None);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
        assert!(!out.exists(), "{name} created outputs");
    }
    let o = kktrain(&["run", dir.path().join("missing.toml").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_iteration_run_writes_only_the_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "zero.toml", &SMALL_SPHERES.replace("iters = 15", "iters = 0"));
    let out = dir.path().join("out");
    let o = kktrain(&["run", &cfg, "--out-dir", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for arm in ["hard", "soft"] {
        let text = std::fs::read_to_string(out.join(arm).join("metrics.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(lines[1].starts_with("0,"));
    }
    assert!(out.join("resolved_config.toml").exists());
    assert!(out.join("summary.json").exists());
}

#[test]
fn paired_run_has_one_row_per_iteration_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "pair.toml", SMALL_SPHERES);
    let out = dir.path().join("out");
    let o = kktrain(&["run", &cfg, "--out-dir", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
    assert_eq!(summary["soft_lr"], 1e-4);

    let hard = out.join("hard/metrics.csv");
    let soft = out.join("soft/metrics.csv");
    for p in [&hard, &soft] {
        let trace = parse_metrics_csv(&std::fs::read_to_string(p).unwrap()).unwrap();
        // the initial row plus one per configured iteration
        assert_eq!(trace.iters, (0..=15).collect::<Vec<_>>());
    }
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("soft_lr = 0.0001"));

    let o = kktrain(&["compare", hard.to_str().unwrap(), hard.to_str().unwrap()], None);
    assert!(o.status.success());
    let c: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(c["delta_std_ratio"], 1.0);
    assert_eq!(c["final_median_violation_diff"], 0.0);

    let o = kktrain(&["compare", hard.to_str().unwrap(), soft.to_str().unwrap(), "--from-iter", "5"], None);
    assert!(o.status.success());
    let c: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let a = parse_metrics_csv(&std::fs::read_to_string(&hard).unwrap()).unwrap();
    let b = parse_metrics_csv(&std::fs::read_to_string(&soft).unwrap()).unwrap();
    assert_eq!(c["smoother"], compare(&a, &b, 5).unwrap().smoother.as_str());

    let short = write(dir.path(), "short.csv", &format!("{METRICS_HEADER}\n0,1,1,1,0,0,none,0\n"));
    let o = kktrain(&["compare", hard.to_str().unwrap(), &short], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn identical_configs_give_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "det.toml", SMALL_SPHERES);
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert!(kktrain(&["run", &cfg, "--out-dir", out.to_str().unwrap()], None).status.success());
        (std::fs::read(out.join("hard/metrics.csv")).unwrap(), std::fs::read(out.join("soft/metrics.csv")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
    let out = dir.path().join("c");
    assert!(kktrain(&["run", &cfg, "--out-dir", out.to_str().unwrap(), "--seed", "5"], None).status.success());
    assert_ne!(std::fs::read(out.join("hard/metrics.csv")).unwrap(), run("a").0);
}

#[test]
fn divergence_exits_3_and_keeps_last_good_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let text = "kind = \"spheres\"\n[spheres]\ndim = 20\nn_constraints = 5\npaired = false\nn_active = 5\n\
                [train]\nmethod = \"soft_sgd\"\nlr = 1e6\nlambda = 100.0\nepochs = 200\nconstraint_batch = 5\n";
    let cfg = write(dir.path(), "boom.toml", text);
    let out = dir.path().join("out");
    let o = kktrain(&["run", &cfg, "--out-dir", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows = csv.lines().count() - 2;
    assert!(rows < 200);
    assert!(csv.lines().skip(1).all(|l| l.split(',').all(|c| c.parse::<f64>().map_or(true, f64::is_finite))));
    let (w, _) = kktrain::autodiff::read_checkpoint(&out.join("params.ckpt"), None).unwrap();
    assert!(w.as_slice().iter().all(|x| x.is_finite()));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "envrun.toml", &SMALL_SPHERES.replace("iters = 15", "iters = 2"));
    let root = dir.path().join("root");
    let o = kktrain(&["run", &cfg], Some(&root));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("envrun/hard/metrics.csv").exists());
}

#[test]
fn solve_check_run_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sc.toml", "kind = \"solve_check\"\n[solve_check]\ncount = 5\nmax_n = 12\n");
    let out = dir.path().join("out");
    let o = kktrain(&["run", &cfg, "--out-dir", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("solve_check.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["solve_check"]["systems"], 5);
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            kktrain::cli::ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
