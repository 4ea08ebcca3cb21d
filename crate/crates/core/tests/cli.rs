use std::path::Path;

use interface_core::cli::run_with;

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Output {
    let argv = std::iter::once("interface").chain(args.iter().copied());
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(argv, &mut out, &mut err);
    Output { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn error_of(o: &Output) -> serde_json::Value {
    assert_eq!(o.stderr.lines().count(), 1, "one error line: {}", o.stderr);
    serde_json::from_str(o.stderr.trim()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.code, 0);
    assert!(o.stdout.contains("gradcheck"));
}

#[test]
fn unknown_subcommand_is_a_validation_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.code, 1);
    assert_eq!(error_of(&o)["error"], "UnknownSubcommand");
}

#[test]
fn missing_config_names_the_path() {
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.code, 1);
    assert!(error_of(&o)["message"].as_str().unwrap().contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "trainer.epochz = 3\n").unwrap();
    let o = run(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.code, 1);
    assert_eq!(error_of(&o)["error"], "ConfigInvalid");
}

#[test]
fn gradcheck_passes_at_suite_scale_and_fails_at_full_scale() {
    let ok = run(&["gradcheck", "--variant", "interface-did-dt", "--instances", "10"]);
    assert_eq!(ok.code, 0, "{}", ok.stderr);
    assert_eq!(ok.stdout.lines().count(), 3);

    let bad = run(&["gradcheck", "--variant", "aml", "--instances", "10", "--scale", "64"]);
    assert_eq!(bad.code, 2);
    assert_eq!(error_of(&bad)["error"], "VerificationFailed");

    let unknown = run(&["gradcheck", "--variant", "nope"]);
    assert_eq!(unknown.code, 1);
}

#[test]
fn single_value_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--param", "a", "--values", "0.2", "--out", p(dir.path())]);
    assert_eq!(o.code, 1);
    assert_eq!(error_of(&o)["error"], "ConfigInvalid");
}

#[test]
fn bad_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["boundary", "--theta-min", "1", "--theta-max", "0.5", "--out", p(dir.path())]);
    assert_eq!(o.code, 1);
    assert_eq!(error_of(&o)["error"], "BadGrid");
}

#[test]
fn eval_table_writes_board_count() {
    let dir = tempfile::tempdir().unwrap();
    let table = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/table3_cid_ct_alpha.csv");
    let o = run(&["eval", "--table", p(&table), "--out", p(dir.path())]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("board_count.json")).unwrap()).unwrap();
    assert_eq!(summary["best_label"], "alpha=0.10 a=0.2");
    let csv = std::fs::read_to_string(dir.path().join("board_count.csv")).unwrap();
    assert_eq!(csv.lines().nth(3).unwrap(), "alpha=0.10 a=0.2,3,5,1,5,3,17");
}

#[test]
fn generate_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    assert_eq!(run(&["generate", "--seed", "4", "--out", p(&gen)]).code, 0);
    let eval = dir.path().join("eval");
    let o = run(&[
        "eval",
        "--dataset", p(&gen.join("dataset.csv")),
        "--pairs", p(&gen.join("pairs.csv")),
        "--gallery", p(&gen.join("centers.csv")),
        "--out", p(&eval),
    ]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["pairs"], 600);
    let acc = m["accuracy"].as_f64().unwrap();
    assert!(acc > 0.5 && acc <= 1.0);
    assert_eq!(m["tar_at_far"].as_array().unwrap().len(), 3);
    assert!(m["rank1"].as_f64().unwrap() > 0.5);
}

#[test]
fn toy_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["toy", "--loss", "interface-cid-ct", "--seed", "1", "--out", p(dir.path())]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    for f in ["metrics.jsonl", "embeddings.csv", "centers.csv", "summary.json", "config.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let config = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(config.contains("loss.fixed_d_inter = 0.7853981633974483\n"));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 50);
    let embeddings = std::fs::read_to_string(dir.path().join("embeddings.csv")).unwrap();
    assert_eq!(embeddings.lines().next().unwrap(), "id,label,x,y");
    assert_eq!(embeddings.lines().count(), 801);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "trainer.epochs = 2\nloss.name = \"rarc\"\nloss.m_split_1 = 0.4\nloss.m_split_2 = 0.1\n").unwrap();
    assert_eq!(run(&["train", "--config", p(&cfg), "--out", p(&first)]).code, 0);
    let second = dir.path().join("second");
    assert_eq!(run(&["train", "--config", p(&first.join("config.toml")), "--out", p(&second)]).code, 0);
    for f in ["metrics.jsonl", "embeddings.csv", "summary.json", "config.toml"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}
