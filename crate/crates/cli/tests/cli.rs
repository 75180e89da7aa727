use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ddec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddec"))
        .args(args)
        .env_remove("DDEC_OUT")
        .output()
        .expect("run ddec")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, case: &str, extra: &[&str]) {
    let mut args = vec!["generate", "--case", case, "--fine", "12", "--out", p(dir)];
    args.extend_from_slice(extra);
    let o = ddec(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn sample_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir.join("samples"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn generate_d1_writes_one_sample_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d1", &["--parts", "3"]);
    assert_eq!(sample_files(t.path()), vec!["d1-alpha-1.json"]);
    for f in ["manifest.json", "fine.json", "coarse.json", "map.json"] {
        assert!(t.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn generate_d2_enumerates_alphas() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d2", &["--alphas", "1,2,4"]);
    assert_eq!(sample_files(t.path()).len(), 3);
}

#[test]
fn missing_output_directory_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = ddec(&["generate", "--case", "d1", "--fine", "6", "--out", p(&t.path().join("nope"))]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&ddec(&["generate", "--case", "d7"])), 2);
    assert_eq!(code(&ddec(&["frobnicate"])), 2);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ddec"))
        .args(["generate", "--case", "d1", "--fine", "6"])
        .env("DDEC_OUT", t.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(t.path().join("manifest.json").is_file());
}

#[test]
fn coarsen_reproduces_the_generated_coarse_complex() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d1", &[]);
    let c = t.path().join("c");
    fs::create_dir(&c).unwrap();
    let o = ddec(&["coarsen", "--fine", p(&t.path().join("fine.json")), "--parts", "3", "--out", p(&c)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(c.join("coarse.json")).unwrap(),
        fs::read(t.path().join("coarse.json")).unwrap()
    );
    assert_eq!(fs::read(c.join("map.json")).unwrap(), fs::read(t.path().join("map.json")).unwrap());
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    fs::create_dir_all(out).unwrap();
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(extra);
    ddec(&args)
}

fn model_params(path: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let b = &v["body"];
    serde_json::json!([b["metric"], b["net"]])
}

#[test]
fn zero_epochs_and_zero_rate_keep_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d2", &["--alphas", "1,2"]);
    let a = t.path().join("a");
    assert_eq!(code(&train(t.path(), &a, &["--epochs", "0", "--no-target"])), 0);
    assert_eq!(fs::read_to_string(a.join("history.csv")).unwrap().lines().count(), 1);
    let b = t.path().join("b");
    let o = train(t.path(), &b, &["--epochs", "3", "--lr", "0", "--no-target"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(model_params(&a.join("model.json")), model_params(&b.join("model.json")));
    let hist = fs::read_to_string(b.join("history.csv")).unwrap();
    let losses: Vec<&str> = hist.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(losses.len(), 6);
    assert_eq!(losses[0], losses[2]);
    assert_eq!(losses[1], losses[5]);
}

#[test]
fn zero_decay_after_a_milestone_stops_updates() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d2", &["--alphas", "1,2"]);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_eq!(code(&train(t.path(), &a, &["--epochs", "1", "--no-target"])), 0);
    let o = train(t.path(), &b, &["--epochs", "3", "--lr-milestones", "1", "--lr-gamma", "0", "--no-target"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(model_params(&a.join("model.json")), model_params(&b.join("model.json")));
}

#[test]
fn unmet_target_exits_with_three() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d1", &[]);
    let o = train(t.path(), &t.path().join("m"), &["--epochs", "2", "--target-rms", "1e-30"]);
    assert_eq!(code(&o), 3);
    assert!(t.path().join("m/model.json").is_file());
}

#[test]
fn d1_training_reaches_its_target_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d1", &["--alphas", "10"]);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_eq!(code(&train(t.path(), &a, &["--seed", "4"])), 0);
    assert_eq!(code(&train(t.path(), &b, &["--seed", "4"])), 0);
    for f in ["model.json", "history.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn solve_verify_and_export() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d1", &[]);
    let m = t.path().join("m");
    assert_eq!(code(&train(t.path(), &m, &["--epochs", "0", "--no-target"])), 0);
    let model = m.join("model.json");
    let problem = t.path().join("samples/d1-alpha-1.json");

    let o = ddec(&["solve", "--model", p(&model), "--problem", p(&problem), "--out", p(&m)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains(" 1 Newton iterations"));
    let profile = fs::read_to_string(m.join("profile.csv")).unwrap();
    assert_eq!(profile.lines().count(), 1 + 3);
    assert!(m.join("state.json").is_file());

    let o = ddec(&["export", "--model", p(&model), "--problem", p(&problem), "--out", p(&m)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(m.join("data_profile.csv")).unwrap().lines().count(), 4);

    let o = ddec(&["verify", "--model", p(&model)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    let entry = &mut v["body"]["complex"]["delta"][0]["entries"][0][2];
    *entry = serde_json::json!(-entry.as_i64().unwrap());
    let bad = m.join("bad.json");
    fs::write(&bad, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let o = ddec(&["verify", "--model", p(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL: exactness"));
}

#[test]
fn problem_for_another_complex_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    generate(t.path(), "d1", &[]);
    let other = t.path().join("other");
    fs::create_dir(&other).unwrap();
    generate(&other, "d1", &["--parts", "4"]);
    let m = t.path().join("m");
    assert_eq!(code(&train(t.path(), &m, &["--epochs", "0", "--no-target"])), 0);
    let o = ddec(&[
        "solve",
        "--model",
        p(&m.join("model.json")),
        "--problem",
        p(&other.join("samples/d1-alpha-1.json")),
        "--out",
        p(&m),
    ]);
    assert_eq!(code(&o), 2);
}
