use std::fs;
use std::path::Path;
use std::process::Command;

use clspool_cli::experiment::read_record;
use clspool_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

const SMALL: &[&str] = &[
    "--task", "pattern", "--train-size", "48", "--eval-size", "24", "--seq-len", "8",
    "--epochs", "1", "--layers", "2", "--batch-size", "16", "--lr", "1e-3", "--k", "2",
];

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn clspool(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("clspool").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn with_small<'a>(cmd: &'a str, extra: &[&'a str], out: &'a Path) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v.push("--out");
    v.push(out.to_str().unwrap());
    v
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(clspool(&[]).code, EXIT_USAGE);
    assert_eq!(clspool(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(clspool(&["--help"]).code, EXIT_OK);

    let r = clspool(&["train", "--head", "baseline"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("--task"), "{}", r.stderr);

    let r = clspool(&["train", "--task", "pattern", "--head", "maxpool9000"]);
    assert_eq!(r.code, EXIT_USAGE);
    for kind in ["baseline", "maxcls", "mha", "maxseq+mha", "meanseq+mha", "normseq+mha"] {
        assert!(r.stderr.contains(kind), "{kind} missing from: {}", r.stderr);
    }

    let r = clspool(&["ablate-k", "--task", "pattern", "--k", "12"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("k=12"), "{}", r.stderr);

    let r = clspool(&["lowres", "--task", "pattern", "--sizes", "0"]);
    assert_eq!(r.code, EXIT_USAGE);
    let r = clspool(&["lowres", "--task", "pattern", "--sizes", "5000"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("exceeds"), "{}", r.stderr);

    let r = clspool(&["compare", "--task", "pattern", "--head", "baseline"]);
    assert_eq!(r.code, EXIT_USAGE);
    let r = clspool(&["train", "--task", "pattern", "--lr", "0"]);
    assert_eq!(r.code, EXIT_USAGE);
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mpbt");
    let r = clspool(&["eval", "--checkpoint", missing.to_str().unwrap(), "--task", "pattern"]);
    assert_eq!(r.code, EXIT_RUNTIME);
    let junk = dir.path().join("junk.mpbt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let r = clspool(&["eval", "--checkpoint", junk.to_str().unwrap(), "--task", "pattern"]);
    assert_eq!(r.code, EXIT_RUNTIME);
    assert!(r.stderr.contains("magic"), "{}", r.stderr);
}

#[test]
fn train_writes_metrics_and_checkpoint_that_eval_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = with_small("train", &["--head", "maxseq+mha:k=2,h=2", "--seed", "1"], &out);
    let r = clspool(&args);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rec = read_record(&out.join("metrics.json")).unwrap();
    assert_eq!(rec.head, "maxseq+mha:k=2,h=2");
    assert_eq!((rec.seed, rec.train_examples, rec.eval_examples), (1, 48, 24));
    assert!(rec.eval.contains_key("accuracy") && rec.eval.contains_key("mcc"));

    let ckpt = out.join("model.mpbt");
    let report = dir.path().join("eval.json");
    let mut eval_args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", report.to_str().unwrap()];
    eval_args.extend_from_slice(&SMALL[..8]);
    let r = clspool(&eval_args);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for (k, v) in &rec.eval {
        assert_eq!(json["eval"][k].as_f64().unwrap(), *v, "{k}");
    }
}

#[test]
fn config_file_sets_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# toy\nepochs=3\nbatch_size=8\nhead=mha:h=2\nwarmup_ratio=0.2\n").unwrap();
    let out = dir.path().join("o");
    let args = with_small("train", &["--config", cfg.to_str().unwrap(), "--seed", "2"], &out);
    // SMALL passes --epochs 1 and --batch-size 16; those win over the file.
    let r = clspool(&args);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rec = read_record(&out.join("metrics.json")).unwrap();
    assert_eq!(rec.head, "mha:h=2");
    assert_eq!(rec.config["epochs"], "1");
    assert_eq!(rec.config["batch_size"], "16");
    assert_eq!(rec.config["warmup_ratio"], "0.2");

    fs::write(&cfg, "epochs\n").unwrap();
    let r = clspool(&with_small("train", &["--config", cfg.to_str().unwrap()], &out));
    assert_eq!(r.code, EXIT_USAGE);
}

#[test]
fn compare_is_reproducible_and_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let heads = ["--head", "baseline", "--head", "maxcls", "--head", "mha:h=2", "--seed", "1,2"];
    let mut texts = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "3")] {
        let out = dir.path().join(name);
        let mut extra = heads.to_vec();
        extra.extend(["--jobs", jobs]);
        let r = clspool(&with_small("compare", &extra, &out));
        assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
        assert!(r.stdout.contains("Δ"));
        assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 6);
        texts.push((
            fs::read_to_string(out.join("compare.csv")).unwrap(),
            fs::read_to_string(out.join("compare.txt")).unwrap(),
        ));
    }
    assert_eq!(texts[0], texts[1]);
    assert!(texts[0].1.contains("population std"));
}

#[test]
fn compare_without_baseline_omits_delta() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = clspool(&with_small("compare", &["--head", "maxcls", "--head", "mha:h=2", "--seed", "1"], &out));
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(!r.stdout.lines().any(|l| l.starts_with("Δ")));
    assert!(r.stdout.contains("Δ row omitted"), "{}", r.stdout);
}

#[test]
fn lowres_writes_delta_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = clspool(&with_small(
        "lowres",
        &["--sizes", "16,full", "--head", "baseline", "--head", "maxseq+mha:h=2", "--seed", "1,2"],
        &out,
    ));
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let csv = fs::read_to_string(out.join("lowres.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("size,head,metric_mean,metric_std,delta"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("16,baseline,") && rows[0].ends_with(",0"));
    assert!(rows[3].starts_with("48,\"maxseq+mha:k=2,h=2\","));
}

#[test]
fn ablate_k_rejects_depths_beyond_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let r = clspool(&with_small("ablate-k", &["--k", "3"], dir.path()));
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("k=3 outside [1, 2]"), "{}", r.stderr);
}

#[test]
fn gradcheck_fault_fails_only_max_heads_and_32_bit_warns() {
    let r = clspool(&["gradcheck", "--fault", "flip-max-sign"]);
    assert_eq!(r.code, EXIT_RUNTIME);
    let lines: Vec<&str> = r.stdout.lines().collect();
    assert_eq!(lines.len(), 6, "{}", r.stdout);
    for l in lines {
        let max_based = l.starts_with("maxcls") || l.starts_with("maxseq");
        assert_eq!(l.ends_with("FAIL"), max_based, "{l}");
    }

    let r = clspool(&["gradcheck", "--bits", "32"]);
    assert!(r.stderr.contains("warning") && r.stderr.contains("1e-2"), "{}", r.stderr);
    assert_eq!(r.code, EXIT_OK, "{}", r.stdout);
}

#[test]
fn binary_honours_exit_codes_and_seed_env() {
    let bin = env!("CARGO_BIN_EXE_clspool");
    let st = Command::new(bin).arg("train").output().unwrap();
    assert_eq!(st.status.code(), Some(EXIT_USAGE));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let args = with_small("train", &["--head", "baseline"], &out);
    let st = Command::new(bin).args(&args).env("CLSPOOL_SEED", "17").output().unwrap();
    assert_eq!(st.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&st.stderr));
    assert_eq!(read_record(&out.join("metrics.json")).unwrap().seed, 17);
}
