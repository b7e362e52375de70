//! The command-line pipeline on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.count=8",
    "data.held_out=2",
    "net.base_filters=2",
    "net.feature_layers=2",
    "net.matching_layers=3",
    "net.extra_skips=",
    "search.epochs=2",
    "search.warmup_epochs=1",
    "train.epochs=2",
];

fn stereonas(args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stereonas"));
    cmd.args(args);
    for kv in extra {
        cmd.arg("--set").arg(kv);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str], extra: &[&str]) -> String {
    let out = stereonas(args, extra);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the stderr line of a failing command.
fn fails(args: &[&str], extra: &[&str]) -> (i32, String) {
    let out = stereonas(args, extra);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with("error: "), "{err:?}");
    (out.status.code().unwrap(), lines[0].to_string())
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}:")))
        .unwrap_or_else(|| panic!("no `{key}` in {text:?}"))
        .trim()
        .to_string()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn pipeline(out: &Path, flags: &[&str]) {
    let o = out.to_str().unwrap();
    let with = |cmd: &'static str| {
        let mut a = vec![cmd, "--out", o];
        a.extend(flags);
        a
    };
    ok(&with("gen-data"), TINY);
    ok(&with("search"), TINY);
    ok(&with("decode"), TINY);
    ok(&with("train"), TINY);
    ok(&with("eval"), TINY);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    pipeline(&run, &[]);
    for f in [
        "data/manifest.txt",
        "data/left/000000.pfm",
        "data/mask/000007.pfm",
        "search/ledger.jsonl",
        "search/arch.json",
        "search/genotype.txt",
        "genotype.txt",
        "train/checkpoint.json",
        "train/ledger.jsonl",
        "eval/report.txt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    for dir in ["data", "search", "train", "eval"] {
        let meta = read(run.join(dir).join("run.txt"));
        assert!(meta.contains("seed = 1\n") && meta.contains("threads = 1\n"), "{meta}");
        assert!(read(run.join(dir).join("config.txt")).contains("data.count = 8\n"));
    }
    // The final decode reproduces the genotype the search wrote.
    assert_eq!(read(run.join("genotype.txt")), read(run.join("search/genotype.txt")));
    let search_meta = read(run.join("search/run.txt"));
    assert!(search_meta.contains("supernet_params = "));
    let report = read(run.join("eval/report.txt"));
    let epe: f64 = field(&report, "epe").parse().unwrap();
    assert!(epe.is_finite() && epe >= 0.0);
    assert_eq!(field(&report, "samples"), "2");
    let ledger = read(run.join("train/ledger.jsonl"));
    assert_eq!(ledger.lines().count(), 12);
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let straight = tmp.path().join("a");
    pipeline(&straight, &[]);

    let resumed = tmp.path().join("b");
    let o = resumed.to_str().unwrap();
    ok(&["gen-data", "--out", o], TINY);
    ok(&["search", "--out", o], TINY);
    ok(&["decode", "--out", o], TINY);
    let first = ok(&["train", "--out", o, "--stop-after", "1"], TINY);
    assert_eq!(field(&first, "epoch"), "1");
    ok(&["train", "--out", o, "--resume"], TINY);

    for f in ["train/ledger.jsonl", "train/checkpoint.json", "search/ledger.jsonl"] {
        assert_eq!(read(straight.join(f)), read(resumed.join(f)), "{f} differs");
    }
    let (code, msg) = fails(&["train", "--out", o, "--resume"], TINY);
    assert_eq!(code, 1);
    assert!(msg.contains("nothing to do"), "{msg}");
}

#[test]
fn separate_search_splits_the_architecture_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = run.to_str().unwrap();
    let mut extra = TINY.to_vec();
    extra.push("search.epochs=3");
    ok(&["gen-data", "--out", o], &extra);
    let printed = ok(&["search", "--out", o, "--search-mode", "separate", "--cell", "direct"], &extra);
    let feature = read(run.join("search/ledger_feature.jsonl"));
    let matching = read(run.join("search/ledger_matching.jsonl"));
    assert!(!feature.is_empty() && feature.lines().all(|l| l.contains("\"arch_feature\"")));
    assert!(!matching.is_empty() && matching.lines().all(|l| l.contains("\"arch_matching\"")));
    let config = read(run.join("search/config.txt"));
    assert!(config.contains("search.mode = separate\n") && config.contains("net.cell = direct\n"));
    let supernet: usize = field(&printed, "supernet_params").parse().unwrap();
    let decoded: usize = field(&printed, "decoded_params").parse().unwrap();
    assert!(decoded < supernet);
}

#[test]
fn decode_picks_a_snapshot_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = run.to_str().unwrap();
    ok(&["gen-data", "--out", o], TINY);
    ok(&["search", "--out", o], TINY);
    let early = ok(&["decode", "--out", o, "--epoch", "0"], TINY);
    assert_eq!(field(&early, "snapshot_epoch"), "0");
    assert!(early.starts_with("genotype-v1\n"));
    let (code, msg) = fails(&["decode", "--out", o, "--epoch", "7"], TINY);
    assert_eq!(code, 1);
    assert!(msg.contains("epoch 7"), "{msg}");
}

#[test]
fn shipped_genotype_trains_at_toy_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = run.to_str().unwrap();
    let genotype = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../examples/leastereo.genotype");
    let extra = ["data.count=6", "data.held_out=2", "train.epochs=2"];
    ok(&["gen-data", "--out", o], &extra);
    let printed = ok(&["train", "--out", o, "--genotype", genotype.to_str().unwrap()], &extra);
    assert!(field(&printed, "params").parse::<usize>().unwrap() > 0);
    let losses: Vec<f64> = read(run.join("train/ledger.jsonl"))
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["loss"].as_f64().unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 8);
    assert!(losses.iter().all(|l| l.is_finite()));
    ok(&["eval", "--out", o], &extra);
}

#[test]
fn failures_print_one_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("run");
    let o = o.to_str().unwrap();
    let (code, msg) = fails(&["gen-data", "--out", o], &["data.bogus=1"]);
    assert_eq!(code, 1);
    assert!(msg.contains("data.bogus"), "{msg}");
    let (code, _) = fails(&["gen-data", "--out", o], &["data.held_out=300"]);
    assert_eq!(code, 1);
    let (code, msg) = fails(&["search", "--out", o], &[]);
    assert_eq!(code, 1);
    assert!(msg.contains("gen-data"), "{msg}");
    let (code, _) = fails(&["search", "--search-mode", "sideways"], &[]);
    assert_eq!(code, 2);
    let (code, _) = fails(&["frobnicate"], &[]);
    assert_eq!(code, 2);
    let cfg = tmp.path().join("bad.conf");
    std::fs::write(&cfg, "# comment\nseed = 3\nseed = 4\n").unwrap();
    let (code, msg) = fails(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", o], &[]);
    assert_eq!(code, 1);
    assert!(msg.contains("line 3"), "{msg}");
}

#[test]
fn help_and_version_exit_cleanly() {
    let out = stereonas(&["--help"], &[]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
    let out = stereonas(&["--version"], &[]);
    assert!(out.status.success());
}
