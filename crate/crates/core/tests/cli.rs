mod common;

use std::fs;

use common::{mapl, mapl_ok, quick_fixtures, s};
use mapl::config::RunManifest;

const QUICK_TRAIN: &str = "train.max_steps = 20\ntrain.eval_every = 10\ntrain.batch_size = 8\ntrain.warmup_steps = 5\n";

#[test]
fn count_params_presets() {
    assert_eq!(mapl_ok(&["count-params"]).trim(), "3432192");
    assert_eq!(mapl_ok(&["count-params", "--size", "large"]).trim(), "19465728");
    assert_eq!(mapl_ok(&["count-params", "--variant", "linear"]).trim(), "4198400");
    assert_eq!(mapl_ok(&["count-params", "--variant", "mlp"]).trim(), "135398400");
    assert!(!mapl(&["count-params", "--size", "huge"]).status.success());
}

#[test]
fn make_fixtures_enforces_qualification() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fx");
    let args = [
        "make-fixtures", "--out", s(&out), "--n-train", "40", "--n-eval", "5", "--pretrain-steps", "2",
    ];
    let run = mapl(&args);
    assert_eq!(run.status.code(), Some(1), "an untrained LM must not qualify");
    assert!(String::from_utf8_lossy(&run.stdout).contains("below threshold"));
    for f in ["vision.ckpt", "lm.ckpt", "vocab.txt", "dataset.jsonl", "manifest.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = RunManifest::load(out.join("manifest.txt")).unwrap();
    assert_eq!(m.command, "make-fixtures");
    assert!(m.argv.windows(2).any(|w| w == ["--seed", "0"]));

    let mut relaxed = args.to_vec();
    relaxed.extend(["--min-qualification", "0"]);
    assert!(mapl(&relaxed).status.success());
}

#[test]
fn train_eval_filter_pipeline() {
    let fx = quick_fixtures();
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("quick.conf");
    fs::write(&conf, QUICK_TRAIN).unwrap();
    let run = dir.path().join("run");
    mapl_ok(&["train", "--fixtures", s(fx), "--config", s(&conf), "--out", s(&run), "--seed", "3"]);
    for f in ["checkpoint.bin", "curve.csv", "manifest.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert!(curve.starts_with("step,lr,train_loss,minival_loss\n"));
    assert_eq!(curve.lines().count(), 22);
    let m = RunManifest::load(run.join("manifest.txt")).unwrap();
    assert_eq!(m.seeds, [("train".to_string(), 3)]);
    assert!(m.config.contains(&("train.max_steps".into(), "20".into())));

    let ckpt = run.join("checkpoint.bin");
    let eval = dir.path().join("eval");
    let stdout = mapl_ok(&[
        "eval", "--task", "caption", "--checkpoint", s(&ckpt), "--fixtures", s(fx), "--out", s(&eval),
        "--limit", "3",
    ]);
    assert!(stdout.contains("\"metric\":\"bleu4\""));
    let results = fs::read_to_string(eval.join("results.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = results.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[3]["metric"], "bleu4");
    assert_eq!(lines[4]["metric"], "exact_match");
    assert_eq!(lines[4]["n"], 3);

    let vqa = dir.path().join("vqa");
    mapl_ok(&[
        "eval", "--task", "vqa", "--shots", "2", "--checkpoint", s(&ckpt), "--fixtures", s(fx), "--out",
        s(&vqa), "--limit", "4", "--seed", "1",
    ]);
    let results = fs::read_to_string(vqa.join("results.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(results.lines().last().unwrap()).unwrap();
    assert_eq!(last["metric"], "vqa_accuracy");
    assert_eq!(last["seed"], 1);
    let first: serde_json::Value = serde_json::from_str(results.lines().next().unwrap()).unwrap();
    assert_eq!(first["n_shots"], 2);

    let tsv = dir.path().join("pairs.tsv");
    fs::write(&tsv, "a\t0.9\tone\nb\t0.1\ttwo\nc\t0.5\tthree\n").unwrap();
    let filtered = dir.path().join("filtered");
    assert_eq!(
        mapl_ok(&["filter", "--input", s(&tsv), "--out", s(&filtered), "--threshold", "0.4"]).trim(),
        "kept 2 of 3"
    );
    assert_eq!(
        fs::read_to_string(filtered.join("filtered.tsv")).unwrap(),
        "# kept=2 of=3 rule=threshold param=0.4\na\t0.9\tone\nc\t0.5\tthree\n"
    );
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "train.lr_peak = 0.001\ntrain.lr_peak = 0.002\n").unwrap();
    let out = mapl(&["train", "--fixtures", s(quick_fixtures()), "--config", s(&conf), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.conf:2"), "{err}");

    let out = mapl(&["eval", "--task", "caption", "--checkpoint", "/nonexistent", "--fixtures", "/nonexistent", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let out = mapl(&["filter", "--input", "x", "--out", "y", "--top-k", "1", "--threshold", "0.5"]);
    assert!(!out.status.success());
}

#[test]
fn seed_falls_back_to_the_environment() {
    let fx = quick_fixtures();
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("quick.conf");
    fs::write(&conf, QUICK_TRAIN).unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_mapl"))
        .args(["train", "--fixtures", s(fx), "--config", s(&conf), "--out", s(dir.path())])
        .env("MAPL_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = RunManifest::load(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(m.seeds, [("train".to_string(), 7)]);
    assert!(m.argv.windows(2).any(|w| w == ["--seed", "7"]));
}

#[test]
fn grad_check_command() {
    let out = mapl_ok(&["grad-check", "--samples", "4"]);
    assert!(out.trim_end().ends_with("PASS"), "{out}");
    let out = mapl(&["grad-check", "--samples", "4", "--corrupt"]);
    assert_eq!(out.status.code(), Some(1));
}
