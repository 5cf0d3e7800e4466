use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/boundary")
}

fn xvoice(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xvoice"))
        .args(args)
        .current_dir(dir)
        .env_remove("XVOICE_TOY_HOME")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xvoice(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn filter_report_matches_golden() {
    let fx = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let manifest = fx.join("training.jsonl");
    let policy = fx.join("lang_policy.json");
    let stdout = ok(
        dir.path(),
        &[
            "filter",
            "--manifest",
            manifest.to_str().unwrap(),
            "--lang-policy",
            policy.to_str().unwrap(),
            "--accepted",
            "kept/train.jsonl",
        ],
    );
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report, json_file(&fx.join("golden_filter.json")));
    let kept = std::fs::read_to_string(dir.path().join("kept/train.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), 3 + 20 + 7);
}

#[test]
fn curate_report_matches_golden() {
    let fx = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let manifest = fx.join("benchmark.jsonl");
    ok(
        dir.path(),
        &[
            "curate",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            "curate.json",
            "--accepted",
            "ok/bench.jsonl",
        ],
    );
    assert_eq!(
        json_file(&dir.path().join("curate.json")),
        json_file(&fx.join("golden_curate.json"))
    );
    let rows = std::fs::read_to_string(dir.path().join("ok/bench.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 1);
    // feature paths are rewritten relative to the new manifest
    let row: Value = serde_json::from_str(rows.lines().next().unwrap()).unwrap();
    let feat = row["prompt"]["features"].as_str().unwrap();
    assert!(dir.path().join("ok").join(feat).exists(), "{feat}");
}

#[test]
fn filter_benchmark_flag_routes_to_curation() {
    let fx = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let manifest = fx.join("benchmark.jsonl");
    let stdout = ok(
        dir.path(),
        &[
            "filter",
            "--benchmark",
            "--manifest",
            manifest.to_str().unwrap(),
        ],
    );
    assert_eq!(
        serde_json::from_str::<Value>(&stdout).unwrap(),
        json_file(&fx.join("golden_curate.json"))
    );
}

#[test]
fn schedule_dump_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(dir.path(), &["schedule-dump"]);
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(csv.lines().next().unwrap(), "t,w_acoustic,w_linguistic");
    assert_eq!(rows.len(), 16);
    assert_eq!(rows[0], vec![0.0, 2.5, 0.0]);
    // the ramp is still rising on the second step and has reached the plateau by the third
    assert!(rows[1][2] > 0.0 && rows[1][2] < 4.0);
    assert_eq!(rows[2][2], 4.0);
    assert!(rows.windows(2).all(|w| w[0][0] < w[1][0]));
    assert!(rows.iter().all(|r| r[1] <= 2.5));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"guidance": {"w_l_start": 1.0, "w_a_start": 0.5}}"#,
    )
    .unwrap();
    let plateau = |csv: &str| -> (f64, f64) {
        let r: Vec<f64> = csv
            .lines()
            .nth(4)
            .unwrap()
            .split(',')
            .map(|x| x.parse().unwrap())
            .collect();
        (r[1], r[2])
    };
    assert_eq!(plateau(&ok(dir.path(), &["schedule-dump"])), (2.5, 4.0));
    assert_eq!(
        plateau(&ok(dir.path(), &["--config", "c.json", "schedule-dump"])),
        (0.5, 1.0)
    );
    assert_eq!(
        plateau(&ok(
            dir.path(),
            &["--config", "c.json", "schedule-dump", "--w-l", "3"]
        )),
        (0.5, 3.0)
    );
}

#[test]
fn failures_print_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"guidance": {"w_L_start": 1.0}}"#,
    )
    .unwrap();
    for args in [
        &["filter", "--manifest", "missing.jsonl"][..],
        &["--config", "bad.json", "schedule-dump"],
        &["schedule-dump", "--t-warm", "0.7"],
    ] {
        let out = xvoice(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["nope"][..], &["schedule-dump", "--bogus"], &[]] {
        assert_eq!(xvoice(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn sample_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let steps = ["--steps", "20", "--warmup-steps", "2", "--batch-size", "4"];
    ok(
        d,
        &[
            "gen-toy",
            "--out",
            "toy",
            "--utterances-per-lang",
            "6",
            "--text-pool-size",
            "5",
            "--seed",
            "3",
        ],
    );
    ok(
        d,
        &[
            &[
                "train-stage1",
                "--manifest",
                "toy/train.jsonl",
                "--out",
                "s1.ckpt",
                "--seed",
                "3",
            ][..],
            &steps,
        ]
        .concat(),
    );
    let prompt = "toy/features/toyA-held00-00.xvft";
    let held = std::fs::read_to_string(d.join("toy/heldout.jsonl")).unwrap();
    let row: Value = held
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .find(|r| r["id"] == "toyA-held00-00")
        .unwrap();
    let transcript = row["transcript"].as_str().unwrap();
    let args = [
        "sample",
        "--ckpt",
        "s1.ckpt",
        "--world",
        "toy/world.json",
        "--prompt",
        prompt,
        "--prompt-text",
        transcript,
        "--text",
        "tea sip",
        "--lang",
        "toyA",
    ];
    for (out, seed) in [("a.json", "7"), ("b.json", "7"), ("c.json", "8")] {
        ok(d, &[&args[..], &["--out", out, "--seed", seed]].concat());
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
}

#[test]
fn toy_home_is_the_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_xvoice"))
        .args([
            "gen-toy",
            "--utterances-per-lang",
            "3",
            "--text-pool-size",
            "2",
        ])
        .current_dir(dir.path())
        .env("XVOICE_TOY_HOME", "home")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in [
        "world.json",
        "train.jsonl",
        "heldout.jsonl",
        "text_pool.json",
        "lang_policy.json",
    ] {
        assert!(dir.path().join("home").join(f).exists(), "{f}");
    }
}
