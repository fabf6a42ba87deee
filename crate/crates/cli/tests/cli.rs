use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use loramerge_core::io::{adapters_from_bundle, TensorBundle};
use loramerge_core::ModelGraph;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_loramerge"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Copy of the packaged example, so outputs land in a scratch directory.
fn example_copy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixtures().join("example")).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    dir
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn merge_packaged_example_stops_within_bound() {
    let dir = example_copy();
    let manifest = dir.path().join("manifest.json");
    ok(&["merge", "--manifest", s(&manifest), "--method", "iteris", "--alpha", "1e-4", "--max-iter", "20"]);
    let report = read_json(&dir.path().join("report.json"));
    let bound = report["iteration_bound"].as_u64().unwrap();
    let converged = report["converged_at"].as_u64().expect("converged");
    assert!(converged <= bound + 1, "converged_at {converged}, bound {bound}");
    assert!(report.get("timings").is_none());

    // fixed point: features captured on the merged model are the ones the last
    // solve used, relative to the size of the task features
    let disc = report["discrepancy"].as_array().unwrap();
    for (j, row) in report["self_discrepancy"].as_array().unwrap().iter().enumerate() {
        for (n, v) in row.as_array().unwrap().iter().enumerate() {
            let scale = 1.0 + disc[j][n].as_f64().unwrap();
            assert!(v.as_f64().unwrap() <= 1e-8 * scale, "site {j} task {n}: {v}");
        }
    }
    assert!(dir.path().join("merged.bundle").exists());
}

#[test]
fn linear_merge_of_identical_adapters_is_bit_exact() {
    let dir = example_copy();
    let mut m = read_json(&dir.path().join("manifest.json"));
    m["adapters"] = serde_json::json!(["task0.adapters.bundle", "task0.adapters.bundle"]);
    let manifest = dir.path().join("same.json");
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    ok(&["merge", "--manifest", s(&manifest), "--method", "linear"]);

    let graph = ModelGraph::load(&dir.path().join("graph.json")).unwrap();
    let adapter_path = dir.path().join("task0.adapters.bundle");
    let set = adapters_from_bundle(&graph, &TensorBundle::read(&adapter_path).unwrap(), 0, &adapter_path).unwrap();
    let merged = TensorBundle::read(&dir.path().join("merged.bundle")).unwrap();
    for (j, delta) in set.deltas().iter().enumerate() {
        let got = merged.get(&format!("site{j}.delta")).unwrap();
        let a: Vec<u64> = got.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = delta.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "site {j}");
    }
}

#[test]
fn missing_sample_bundle_names_the_path() {
    let dir = example_copy();
    fs::remove_file(dir.path().join("task1.samples.bundle")).unwrap();
    let out = run(&["merge", "--manifest", s(&dir.path().join("manifest.json"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("task1.samples.bundle"), "{err}");
    assert!(!dir.path().join("merged.bundle").exists());
}

#[test]
fn invalid_overrides_are_config_errors() {
    let dir = example_copy();
    let manifest = dir.path().join("manifest.json");
    let out = run(&["merge", "--manifest", s(&manifest), "--regmean-offdiag", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["merge", "--manifest", s(&manifest), "--method", "linear", "--linear-weights", "0.7,0.7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unregularized_rank_deficient_merge_reports_singularity() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    // 2 tasks × 2 samples span at most 4 of 16 input dimensions
    fs::write(
        &spec,
        r#"{"architecture": {"kind": "mlp_chain", "depth": 1, "width": 16}, "tasks": 2,
            "samples": 2, "holdout_samples": 10, "rank": 2, "distribution": {"kind": "isotropic"}}"#,
    )
    .unwrap();
    ok(&["synth", "--spec", s(&spec), "--out-dir", s(dir.path())]);
    let manifest = dir.path().join("manifest.json");
    let out = run(&["merge", "--manifest", s(&manifest), "--alpha", "0"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("singular"));
    ok(&["merge", "--manifest", s(&manifest), "--alpha", "1e-4"]);
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = fixtures().join("mlp.synth.json");
    ok(&["synth", "--spec", s(&spec), "--out-dir", s(a.path())]);
    ok(&["synth", "--spec", s(&spec), "--out-dir", s(b.path())]);
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    // graph, base, manifest, and three bundles per task
    assert_eq!(names.len(), 3 + 3 * 3);
    for name in &names {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name:?}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    ok(&["synth", "--spec", s(&spec), "--out-dir", s(c.path()), "--seed", "12"]);
    assert_ne!(
        fs::read(a.path().join("base.bundle")).unwrap(),
        fs::read(c.path().join("base.bundle")).unwrap()
    );
}

#[test]
fn repeated_merges_write_identical_files() {
    let dir = example_copy();
    let manifest = dir.path().join("manifest.json");
    let outputs = |tag: &str| {
        let m = dir.path().join(format!("{tag}.bundle"));
        let r = dir.path().join(format!("{tag}.json"));
        ok(&["merge", "--manifest", s(&manifest), "--out", s(&m), "--report", s(&r)]);
        (fs::read(m).unwrap(), fs::read(r).unwrap())
    };
    assert_eq!(outputs("first"), outputs("second"));
}

#[test]
fn timings_only_on_request() {
    let dir = example_copy();
    let manifest = dir.path().join("manifest.json");
    ok(&["merge", "--manifest", s(&manifest), "--timings", "--csv"]);
    let report = read_json(&dir.path().join("report.json"));
    assert!(report["timings"]["total_seconds"].as_f64().unwrap() >= 0.0);
    let csv = fs::read_to_string(dir.path().join("report.iterations.csv")).unwrap();
    assert!(csv.starts_with("iteration,site,label,objective"));
}

#[test]
fn bound_of_fixture_graphs() {
    let bound = |name: &str| {
        let out = ok(&["bound", "--graph", s(&fixtures().join(name))]);
        serde_json::from_str::<Value>(&out).unwrap()["iteration_bound"].as_u64().unwrap()
    };
    assert_eq!(bound("encdec1.graph.json"), 2);
    assert_eq!(bound("mlp3.graph.json"), 2);
    assert_eq!(bound("example/graph.json"), 1);
}

#[test]
fn bound_rejects_cyclic_graph() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = read_json(&fixtures().join("mlp3.graph.json"));
    // point the first layer at the last one
    let nodes = g["nodes"].as_array_mut().unwrap();
    let last = nodes.last().unwrap()["id"].clone();
    for n in nodes.iter_mut() {
        if n["inputs"].as_array().is_some_and(|i| i.iter().any(|v| v == "x")) {
            n["inputs"] = serde_json::json!([last]);
            break;
        }
    }
    let path = dir.path().join("cyclic.json");
    fs::write(&path, serde_json::to_string(&g).unwrap()).unwrap();
    let out = run(&["bound", "--graph", s(&path)]);
    assert_eq!(out.status.code(), Some(8), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn analyze_writes_diagnostics() {
    let dir = example_copy();
    let manifest = dir.path().join("manifest.json");
    ok(&["merge", "--manifest", s(&manifest), "--f32", "--rank", "2"]);
    let out_dir = dir.path().join("analysis");
    let stdout = ok(&[
        "analyze",
        "--manifest",
        s(&manifest),
        "--out-dir",
        s(&out_dir),
        "--ablate",
        "alpha",
        "--grid",
        "0,1e-4",
    ]);
    assert!(stdout.contains("mean held-out alignment error"));
    for f in ["analysis.json", "discrepancy.csv", "balance.csv", "ablation.json", "ablation.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let analysis = read_json(&out_dir.join("analysis.json"));
    // adaptive shares per site sum to 1
    for row in analysis["balance_shares"].as_array().unwrap() {
        let total: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    // first-level sites see the raw input, so their features never drift
    assert_eq!(analysis["discrepancy"][0][0].as_f64(), Some(0.0));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
