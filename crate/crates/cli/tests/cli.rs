use std::path::Path;
use std::process::{Command, Output};

fn mt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixedtrees")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(root: &Path, preset: &str, seed: &str) -> std::path::PathBuf {
    let out = root.join(format!("sim-{preset}-{seed}"));
    let res = mt(&["simulate", "--preset", preset, "--seed", seed, "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    out
}

fn write(root: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = root.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn simulate_paper_shape_has_707_rows_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "paper-shape", "4");
    let text = std::fs::read_to_string(a.join("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 708);
    for f in ["truth.json", "spec.json", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let b = dir.path().join("again");
    assert!(mt(&["simulate", "--preset", "paper-shape", "--seed", "4", "--out", s(&b)]).status.success());
    assert_eq!(std::fs::read(a.join("data.csv")).unwrap(), std::fs::read(b.join("data.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn invalid_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bad = write(root, "bad.json", "{\"m\": 0}");
    let res = mt(&["simulate", "--spec", s(&bad), "--seed", "1", "--out", s(&root.join("o"))]);
    assert_eq!(res.status.code(), Some(2));

    let res = mt(&["summarize", "--data", "/no/such/file.csv", "--out", s(&root.join("o2"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("/no/such/file.csv"));

    let res = mt(&["simulate", "--preset", "nope", "--seed", "1", "--out", s(&root.join("o3"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error[UnknownPreset]"));

    let cfg = write(root, "typo.toml", "[model]\nfamily = \"reem\"\nfoo = 1\n");
    let sim = simulate(root, "null", "1");
    let res =
        mt(&["fit", "--data", s(&sim.join("data.csv")), "--config", s(&cfg), "--seed", "1", "--out", s(&root.join("o4"))]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn stochastic_commands_need_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let res = mt(&["simulate", "--preset", "null", "--out", s(&dir.path().join("o"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("seed"));
}

#[test]
fn summarize_paper_shape_lists_14_variables() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "paper-shape", "2");
    let out = dir.path().join("stats");
    let res = mt(&["summarize", "--data", s(&sim.join("data.csv")), "--out", s(&out)]);
    assert!(res.status.success());
    let csv = std::fs::read_to_string(out.join("stats.csv")).unwrap();
    assert_eq!(csv.lines().count(), 15);
    assert!(csv.lines().nth(1).unwrap().starts_with("BDI,"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("stats.json")).unwrap()).unwrap();
    assert!(json.is_object());
}

#[test]
fn fit_outputs_per_family() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sim = simulate(root, "tree-2split", "3");
    let data = sim.join("data.csv");

    let reem = write(root, "reem.toml", "[model]\nfamily = \"reem\"\n");
    let out = root.join("reem");
    assert!(mt(&["fit", "--data", s(&data), "--config", s(&reem), "--seed", "1", "--out", s(&out)]).status.success());
    let model = std::fs::read_to_string(out.join("model.json")).unwrap();
    assert!(model.contains("reem/v1"));
    assert!(std::fs::read_to_string(out.join("tree.dot")).unwrap().starts_with("digraph"));

    let lmm = write(
        root,
        "lmm.toml",
        "[model]\nfamily = \"lmm\"\n[model.fixed]\nterms = [\"Brooding\", \"Worry\", \"Brooding*Worry\"]\n",
    );
    let out = root.join("lmm");
    let res = mt(&["fit", "--data", s(&data), "--config", s(&lmm), "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let wald = std::fs::read_to_string(out.join("wald.csv")).unwrap();
    assert_eq!(wald.lines().next().unwrap(), "term,b,se,t,p");
    assert_eq!(wald.lines().count(), 5);

    let merf = write(
        root,
        "merf.toml",
        "[model]\nfamily = \"merf\"\n[model.params]\nn_iter = 100\n[model.params.forest]\nn_trees = 300\nmax_depth = 3\n",
    );
    let out = root.join("merf");
    assert!(mt(&["fit", "--data", s(&data), "--config", s(&merf), "--seed", "1", "--out", s(&out)]).status.success());
    assert!(out.join("representative_tree.dot").exists());
    assert!(std::fs::read_to_string(out.join("model.json")).unwrap().contains("merf/v1"));
}

#[test]
fn cv_compares_three_families() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sim = simulate(root, "tree-2split", "8");
    let cfg = write(
        root,
        "cv.toml",
        "[cv]\nk = 5\n\n[[models]]\nfamily = \"lmm\"\n[models.fixed]\nterms = [\"Brooding\"]\n\n\
         [[models]]\nfamily = \"reem\"\n\n[[models]]\nfamily = \"merf\"\n[models.params]\nn_iter = 5\n\
         [models.params.forest]\nn_trees = 20\n",
    );
    let out = root.join("cv");
    let res = mt(&["cv", "--data", s(&sim.join("data.csv")), "--config", s(&cfg), "--seed", "2", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("comparison.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["family"], "lmm");
    assert_eq!(rows[0]["improvement_pct"], 0.0);
    for f in ["cv_lmm.json", "cv_reem.json", "cv_merf.json", "comparison.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("cv_reem.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 5);
}

#[test]
fn cv_defaults_to_ten_folds() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sim = simulate(root, "paper-shape", "6");
    let cfg = write(root, "cv.toml", "[[models]]\nfamily = \"lmm\"\n[models.fixed]\nterms = [\"Brooding\"]\n");
    let out = root.join("cv");
    assert!(mt(&["cv", "--data", s(&sim.join("data.csv")), "--config", s(&cfg), "--seed", "1", "--out", s(&out)])
        .status
        .success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("cv_lmm.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 10);
    assert_eq!(report["folds"].as_array().unwrap().len(), 10);
}

#[test]
fn predict_flags_seen_and_unseen_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sim = simulate(root, "tree-2split", "5");
    let data = sim.join("data.csv");
    let lmm = write(root, "lmm.toml", "[model]\nfamily = \"lmm\"\n[model.fixed]\nterms = [\"Brooding\"]\n");
    let fit = root.join("fit");
    assert!(mt(&["fit", "--data", s(&data), "--config", s(&lmm), "--out", s(&fit)]).status.success());
    let model = fit.join("model.json");

    let out = root.join("pred");
    assert!(mt(&["predict", "--model", s(&model), "--data", s(&data), "--out", s(&out)]).status.success());
    let text = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "subject,wave,prediction,cluster");
    assert_eq!(text.lines().count(), 501);
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(cells[2].parse::<f64>().unwrap().is_finite());
        assert_eq!(cells[3], "seen");
    }

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let new = write(root, "new.csv", "subject,wave,Brooding\nNEW,0,10\nNEW,1,12\n");
    let out = root.join("pred-new");
    assert!(mt(&["predict", "--model", s(&model), "--data", s(&new), "--out", s(&out)]).status.success());
    let text = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let beta: Vec<f64> = json["beta"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (line, x) in text.lines().skip(1).zip([10.0, 12.0]) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[3], "unseen");
        let v: f64 = cells[2].parse().unwrap();
        assert!((v - (beta[0] + beta[1] * x)).abs() < 1e-9);
    }
}

#[test]
fn predict_missing_split_value_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sim = simulate(root, "tree-2split", "5");
    let data = sim.join("data.csv");
    let cfg = write(root, "reem.toml", "[model]\nfamily = \"reem\"\n[data]\npredictors = [\"Brooding\"]\n");
    let fit = root.join("fit");
    assert!(mt(&["fit", "--data", s(&data), "--config", s(&cfg), "--seed", "1", "--out", s(&fit)]).status.success());
    let rows = write(root, "rows.csv", "subject,wave,Brooding\nS001,0,\n");
    let res = mt(&["predict", "--model", s(&fit.join("model.json")), "--data", s(&rows), "--out", s(&root.join("p"))]);
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("MissingSplitValue") && err.contains("Brooding"), "{err}");
}

#[test]
fn malformed_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = write(root, "m.json", "{\"format\": \"lmm/v1\", \"beta\": 3}");
    let data = write(root, "d.csv", "subject,wave,y,x\nA,0,1,2\n");
    let res = mt(&["predict", "--model", s(&model), "--data", s(&data), "--out", s(&root.join("p"))]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_predictor_rows_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut csv = String::from("subject,wave,y,x\n");
    for i in 0..30 {
        for w in 0..3 {
            let x = if i == 0 && w == 1 { String::new() } else { format!("{}", (i * 3 + w) % 7) };
            csv.push_str(&format!("S{i:02},{w},{},{x}\n", (i % 5) as f64 + w as f64));
        }
    }
    let data = write(root, "d.csv", &csv);
    let cfg = write(root, "lmm.toml", "[model]\nfamily = \"lmm\"\n[model.fixed]\nterms = [\"x\"]\n");
    let out = root.join("fit");
    let res = mt(&["fit", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let dropped = std::fs::read_to_string(out.join("dropped.json")).unwrap();
    assert!(dropped.contains("S00"));
}
