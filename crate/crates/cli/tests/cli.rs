use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rubricscore"));
    c.env_remove("RUST_LOG").env_remove("AUTOSCORE_API_KEY");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Copy of the demo fixtures in a scratch directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/demo");
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    dir
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_string_lossy().into_owned()
}

fn score(dir: &Path, mode: &str, backend: &str, out: &str, extra: &[&str]) -> Output {
    let config = p(dir, "config.toml");
    let out = p(dir, out);
    let mut args = vec!["score", "--config", &config, "--item", "organization", "--mode", mode, "--backend", backend, "--out", &out];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn score_then_replay_from_cache() {
    let ws = workspace();
    let d = ws.path();
    let o = score(d, "baseline", "scripted", "runs/base", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("records:  12"));
    assert!(d.join("cache/completions.jsonl").exists());

    let o = score(d, "baseline", "replay", "runs/replay", &["--parallelism", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(d.join("runs/base/records.jsonl")).unwrap(),
        fs::read(d.join("runs/replay/records.jsonl")).unwrap()
    );
}

#[test]
fn resume_finished_run_makes_no_calls() {
    let ws = workspace();
    let d = ws.path();
    assert_eq!(code(&score(d, "autoscore", "scripted", "runs/auto", &[])), 0);
    let before = fs::read(d.join("runs/auto/records.jsonl")).unwrap();
    // Any backend call now fails: the rule file is empty and there is no cache.
    fs::write(d.join("script.jsonl"), "").unwrap();
    fs::remove_dir_all(d.join("cache")).unwrap();
    let o = score(d, "autoscore", "scripted", "runs/auto", &["--resume"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("failures: 0"), "{}", stdout(&o));
    assert_eq!(fs::read(d.join("runs/auto/records.jsonl")).unwrap(), before);
}

#[test]
fn config_errors_exit_2() {
    let ws = workspace();
    let d = ws.path();
    let config = p(d, "config.toml");
    assert_eq!(code(&run(&["score", "--config", &config, "--item", "english"])), 2);
    assert_eq!(code(&run(&["score", "--config", &p(d, "missing.toml"), "--item", "organization"])), 2);
    assert_eq!(code(&run(&["score", "--config", &config, "--item", "organization", "--bogus"])), 2);
    fs::write(d.join("bad.toml"), fs::read_to_string(d.join("config.toml")).unwrap().replace("model_name", "api_key = \"x\"\nmodel_name")).unwrap();
    let o = run(&["score", "--config", &p(d, "bad.toml"), "--item", "organization"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("AUTOSCORE_API_KEY"));
}

#[test]
fn dataset_errors_exit_3() {
    let ws = workspace();
    let d = ws.path();
    fs::write(d.join("responses.tsv"), "Id\tEssaySet\tScore1\tEssayText\n1\t1\t0\tx\n").unwrap();
    assert_eq!(code(&score(d, "baseline", "scripted", "runs/x", &[])), 3);
}

#[test]
fn unreachable_backend_exits_4() {
    let ws = workspace();
    let d = ws.path();
    let text = fs::read_to_string(d.join("config.toml"))
        .unwrap()
        .replace("kind = \"scripted\"", "kind = \"remote\"\nbase_url = \"http://127.0.0.1:9\"\nmax_attempts = 1\nbackoff_base_ms = 0")
        .replace("cache_path = \"cache/completions.jsonl\"\n", "");
    fs::write(d.join("config.toml"), text).unwrap();
    let o = score(d, "baseline", "remote", "runs/u", &[]);
    assert_eq!(code(&o), 4, "{}", stdout(&o));
}

#[test]
fn evaluate_pairs_and_digest_guard() {
    let ws = workspace();
    let d = ws.path();
    assert_eq!(code(&score(d, "baseline", "scripted", "runs/base", &[])), 0);
    assert_eq!(code(&score(d, "autoscore", "scripted", "runs/auto", &[])), 0);

    let o = run(&["evaluate", "--run", &p(d, "runs/base"), "--run", &p(d, "runs/auto"), "--out", &p(d, "reports")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let md = fs::read_to_string(d.join("reports/comparison.md")).unwrap();
    assert!(md.contains("| organization | demo-model |"), "{md}");
    assert!(md.contains("Δ (%)"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("reports/comparison.json")).unwrap()).unwrap();
    assert_eq!(json["rows"][0]["metrics"][0]["metric"], "qwk");
    let auto: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("reports/auto.metrics.json")).unwrap()).unwrap();
    assert!((auto["qwk"].as_f64().unwrap() - 16.0 / 19.0).abs() < 1e-12);

    // single run: report only
    let o = run(&["evaluate", "--run", &p(d, "runs/auto"), "--out", &p(d, "single")]);
    assert_eq!(code(&o), 0);
    assert!(d.join("single/auto.metrics.txt").exists());
    assert!(!d.join("single/comparison.md").exists());

    // a baseline run on a sample has a different dataset digest
    assert_eq!(code(&score(d, "baseline", "scripted", "runs/sample", &["--sample-fraction", "0.5"])), 0);
    let o = run(&["evaluate", "--run", &p(d, "runs/sample"), "--run", &p(d, "runs/auto"), "--out", &p(d, "mismatch")]);
    assert_eq!(code(&o), 3);
}

#[test]
fn validate_components_sampling() {
    let ws = workspace();
    let d = ws.path();
    assert_eq!(code(&score(d, "autoscore", "scripted", "runs/auto", &[])), 0);
    assert_eq!(code(&score(d, "baseline", "scripted", "runs/base", &[])), 0);
    let gold = p(d, "gold_components.jsonl");

    let o = run(&["validate-components", "--run", &p(d, "runs/auto"), "--gold", &gold, "--out", &p(d, "rel.json")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rel: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("rel.json")).unwrap()).unwrap();
    assert_eq!(rel["n"], 12);
    assert!((rel["count_fields"]["detail_count"]["exact_match_rate"].as_f64().unwrap() - 10.0 / 12.0).abs() < 1e-12);

    let o = run(&["validate-components", "--run", &p(d, "runs/auto"), "--gold", &gold, "--sample-fraction", "0.5", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("n=6"));

    let o = run(&["validate-components", "--run", &p(d, "runs/base"), "--gold", &gold]);
    assert_eq!(code(&o), 2);
}

#[test]
fn tradeoff_and_case() {
    let ws = workspace();
    let d = ws.path();
    assert_eq!(code(&score(d, "autoscore", "scripted", "runs/auto", &[])), 0);
    assert_eq!(code(&score(d, "baseline", "scripted", "runs/base", &[])), 0);

    let o = run(&["tradeoff", "--run", &p(d, "runs/base"), "--run", &p(d, "runs/auto"), "--out", &p(d, "tradeoff.csv")]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(d.join("tradeoff.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,variant,mean_ms,qwk");
    assert!(lines[1].starts_with("demo-model,baseline,90,"), "{csv}");
    assert!(lines[2].starts_with("demo-model,autoscore,200,"), "{csv}");
    assert_eq!(lines.len(), 3);

    // timing.csv is not needed: times come from the records
    fs::remove_file(d.join("runs/auto/timing.csv")).unwrap();
    let o = run(&["tradeoff", "--run", &p(d, "runs/auto")]);
    assert!(stdout(&o).contains("demo-model,autoscore,200,"));

    let o = run(&["tradeoff"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "model,variant,mean_ms,qwk\n");

    let o = run(&["case", "--run-autoscore", &p(d, "runs/auto"), "--run-baseline", &p(d, "runs/base"), "--id", "106", "--out", &p(d, "cases")]);
    assert_eq!(code(&o), 0);
    let md = fs::read_to_string(d.join("cases/case_106.md")).unwrap();
    assert!(md.contains("*Human score = 2, autoscore = 2, baseline = 1*"), "{md}");
    assert!(md.contains("  - detail 1"));
    assert!(md.contains("```json\n{\n  \"organization_method\""));

    let o = run(&["case", "--run-autoscore", &p(d, "runs/auto"), "--run-baseline", &p(d, "runs/base"), "--id", "nope"]);
    assert_eq!(code(&o), 3);
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares `--help` output with the stored file; `UPDATE_GOLDEN=1`
/// rewrites the files.
#[test]
fn help_matches_golden_files() {
    let cases: &[(&str, &[&str])] = &[
        ("help.txt", &["--help"]),
        ("score.txt", &["score", "--help"]),
        ("evaluate.txt", &["evaluate", "--help"]),
        ("validate-components.txt", &["validate-components", "--help"]),
        ("tradeoff.txt", &["tradeoff", "--help"]),
        ("case.txt", &["case", "--help"]),
    ];
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for (file, args) in cases {
        let o = run(args);
        assert_eq!(code(&o), 0);
        let path = golden_dir().join(file);
        if update {
            fs::create_dir_all(golden_dir()).unwrap();
            fs::write(&path, &o.stdout).unwrap();
        }
        let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
        assert_eq!(stdout(&o), expected, "{file} differs; rerun with UPDATE_GOLDEN=1 after reviewing");
    }
}

#[test]
fn help_lists_every_flag() {
    let score = stdout(&run(&["score", "--help"]));
    for flag in ["--config", "--item", "--mode", "--backend", "--parallelism", "--out", "--resume"] {
        assert!(score.contains(flag), "{flag}");
    }
    let validate = stdout(&run(&["validate-components", "--help"]));
    for flag in ["--run", "--gold", "--sample-fraction", "--seed"] {
        assert!(validate.contains(flag), "{flag}");
    }
}
