use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hybrid_serve::cost_model::{load_models, synthesize_profile, write_profile, CostModels};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrid-serve"))
        .args(args)
        .env_remove("HYBRID_SERVE_OUT")
        .output()
        .expect("spawn binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn digest_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("digest ").map(str::to_string))
        .expect("digest printed")
}

#[test]
fn test_fit_missing_profile_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["fit", "--profile", p(&dir.path().join("nope.csv")), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn test_fit_rank_deficient_profile_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("profile.csv");
    // Every prefill row has the same length, so the features are collinear.
    let mut body = String::from("phase,l_n,l_a,latency_us\n");
    for i in 0..6 {
        body.push_str(&format!("prefill,100,100,{}\n", 11_700 + i));
        body.push_str(&format!("decode,{},{},{}\n", i + 1, 100 * (i + 2), 13_000 + 100 * i));
    }
    fs::write(&csv, body).unwrap();
    let out = run(&["fit", "--profile", p(&csv), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn test_fit_noiseless_profile_recovers_models() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("profile.csv");
    let truth = CostModels::default();
    let samples = synthesize_profile(&truth, 2048, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
    write_profile(fs::File::create(&csv).unwrap(), &samples).unwrap();
    let json = dir.path().join("m.json");
    let out = run(&["fit", "--profile", p(&csv), "--out", p(&json)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for phase in ["prefill", "decode", "swap"] {
        let row = text.lines().find(|l| l.starts_with(phase)).expect("residual row");
        let max: f64 = row.split_whitespace().last().unwrap().parse().unwrap();
        assert!(max < 1e-9, "{row}");
    }
    let fitted = load_models(&json).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * b.abs();
    assert!(close(fitted.prefill.alpha1, truth.prefill.alpha1));
    assert!(close(fitted.decode.beta, truth.decode.beta));
    assert!(close(fitted.swap.per_block, truth.swap.per_block));
}

#[test]
fn test_gen_is_reproducible_and_prints_stats() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let first = run(&["gen", "--horizon-s", "20", "--seed", "7", "--out", p(&a)]);
    let second = run(&["gen", "--horizon-s", "20", "--seed", "7", "--out", p(&b)]);
    assert!(first.status.success() && second.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = stdout(&first);
    assert!(text.starts_with("type"));
    assert!(text.lines().any(|l| l.starts_with("rt ")));
    assert!(text.lines().any(|l| l.starts_with("be ")));
    let other = run(&["gen", "--horizon-s", "20", "--seed", "8", "--out", p(&b)]);
    assert!(other.status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn test_simulate_digest_is_stable_and_replay_matches() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec![
            "simulate".to_string(),
            "--horizon-s".into(),
            "10".into(),
            "--rate".into(),
            "6".into(),
            "--out-dir".into(),
            out.to_string(),
        ]
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let a_args = args(p(&out_a));
    let b_args = args(p(&out_b));
    let a = run(&a_args.iter().map(String::as_str).collect::<Vec<_>>());
    let b = run(&b_args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(digest_line(&a), digest_line(&b));
    let cell = out_a.join("packing_rate6");
    for f in ["events.jsonl", "digest.txt", "metrics.json", "metrics.csv"] {
        assert!(cell.join(f).is_file(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(cell.join("digest.txt")).unwrap().trim(), digest_line(&a));

    // Replaying the generated trace reproduces the run.
    let trace = dir.path().join("trace.csv");
    assert!(run(&["gen", "--horizon-s", "10", "--rate", "6", "--out", p(&trace)]).status.success());
    let replay = run(&["simulate", "--horizon-s", "10", "--rate", "6", "--trace", p(&trace), "--out-dir", p(&dir.path().join("c"))]);
    assert!(replay.status.success());
    assert_eq!(digest_line(&replay), digest_line(&a));

    let report = run(&["report", "--metrics", p(&cell.join("metrics.json"))]);
    assert!(report.status.success());
    assert!(stdout(&report).contains("ttft attainment"));
}

#[test]
fn test_compare_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["compare", "--horizon-s", "5", "--out-dir", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("comparison.txt")).unwrap();
    assert_eq!(table.lines().count(), 1 + 9);
    assert_eq!(fs::read_to_string(dir.path().join("digests.tsv")).unwrap().lines().count(), 9);
    let subset = run(&["compare", "--horizon-s", "5", "--rate", "2", "--schedulers", "packing,fcfs", "--out-dir", p(&dir.path().join("s"))]);
    assert!(subset.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("s/comparison.txt")).unwrap().lines().count(), 1 + 2);
}

#[test]
fn test_bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 1\nunknown_key = 3\n").unwrap();
    let out = run(&["gen", "--config", p(&cfg), "--out", p(&dir.path().join("t.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}
