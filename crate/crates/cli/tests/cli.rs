use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "data.size=32",
    "--set",
    "data.train_per_domain=4",
    "--set",
    "data.test_per_domain=2",
    "--set",
    "train.batch_size=2",
];

fn ssmdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmdg")).args(args).output().expect("binary runs")
}

fn small(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ssmdg(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn echoed(dir: &Path) -> toml::Table {
    std::fs::read_to_string(dir.join("config.toml")).unwrap().parse().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(ssmdg(&["--help"]).status.code(), Some(0));
    assert_eq!(ssmdg(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(ssmdg(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(ssmdg(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(ssmdg(&["frobnicate"]).status.code(), Some(1));
    let r = ssmdg(&["train", "--out", o, "--set", "train.no_such_key=1"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr(&r).contains("train.no_such_key"), "{}", stderr(&r));
    assert_eq!(ssmdg(&["train", "--out", o, "--set", "lsa.p=1.5"]).status.code(), Some(1));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbogus = 3\n").unwrap();
    let r = ssmdg(&["train", "--out", o, "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.join("metrics.jsonl").exists());
}

#[test]
fn runtime_errors_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let r = ssmdg(&["eval", "--checkpoint", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(stderr(&r).trim_end().lines().count(), 1, "{}", stderr(&r));
}

#[test]
fn train_logs_every_iteration_and_eval_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let r = small("train", &run, &["--set", "train.iterations=50"]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));

    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 50);
    for (i, rec) in records.iter().enumerate() {
        assert_eq!(rec["iteration"], i);
        for key in ["lr", "ce_o", "dice_o", "ce_e", "dice_e", "consist", "total"] {
            assert!(rec[key].as_f64().is_some_and(f64::is_finite), "{key} in {rec}");
        }
    }
    for f in ["checkpoints/final.bin", "checkpoints/best.bin", "report_final.txt", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let cfg = echoed(&run);
    assert_eq!(cfg["train"]["iterations"].as_integer(), Some(50));
    assert_eq!(cfg["data"]["size"].as_integer(), Some(32));

    let ev = dir.path().join("eval");
    let ckpt = run.join("checkpoints").join("final.bin");
    let r = ssmdg(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--all-domains", "--out", ev.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    // four domains, two classes each
    assert_eq!(report["rows"].as_array().unwrap().len(), 8);
    assert_eq!(echoed(&ev)["data"]["size"].as_integer(), Some(32));

    let r = ssmdg(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", ev.to_str().unwrap(), "--set", "network.dims=[8,16]"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn config_echo_shows_defaults_and_selectable_threshold() {
    let dir = tempfile::tempdir().unwrap();
    for (tau, extra) in [(0.4, vec![]), (0.03, vec!["--set", "gva.tau=0.03"])] {
        let run = dir.path().join(format!("tau{tau}"));
        let mut args = vec!["--set", "train.iterations=1"];
        args.extend(extra);
        let r = small("train", &run, &args);
        assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
        let cfg = echoed(&run);
        assert_eq!(cfg["lsa"]["p"].as_float(), Some(0.75));
        assert_eq!(cfg["train"]["lambda_consist"].as_float(), Some(0.1));
        assert_eq!(cfg["train"]["base_lr"].as_float(), Some(3e-4));
        assert_eq!(cfg["gva"]["tau"].as_float(), Some(tau));
    }
}

#[test]
fn self_test_passes_and_names_injected_fault() {
    let r = ssmdg(&["self-test"]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let r = ssmdg(&["self-test", "--inject-fault", "mask-cardinality"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("mask cardinality"), "{}", stderr(&r));
    assert_eq!(ssmdg(&["self-test", "--inject-fault", "nonsense"]).status.code(), Some(1));
}

#[test]
fn preview_writes_pairs_and_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("preview");
    let r = small("preview-aug", &out, &["--per-domain", "2"]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let tsv = std::fs::read_to_string(out.join("annotations.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    let entries: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("annotations.json")).unwrap()).unwrap();
    for e in entries.as_array().unwrap() {
        for key in ["original", "augmented"] {
            assert!(out.join(e[key].as_str().unwrap()).exists());
        }
        assert!(e["ssim"].as_f64().is_some());
    }
}

#[test]
fn generated_folders_train_in_folder_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let r = small("gen-data", &data, &[]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    for split in ["train", "test"] {
        assert!(data.join("domain2").join(split).join("images").is_dir());
        assert!(data.join("domain2").join(split).join("masks").is_dir());
    }
    let root = format!("data.folder_root={}", data.display());
    let run = dir.path().join("run");
    let r = small(
        "train",
        &run,
        &[
            "--set",
            "data.source=folder",
            "--set",
            &root,
            "--set",
            r#"data.folder_domains=["domain0","domain1","domain2"]"#,
            "--set",
            "data.held_out=2",
            "--set",
            "train.iterations=3",
        ],
    );
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 3);
}
