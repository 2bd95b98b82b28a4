use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use pds::harness::FeatureFile;

fn pds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pds"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--out", dir.to_str().unwrap()];
    full.extend_from_slice(args);
    let o = pds(&full);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn encode_prints_stage_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["encode", "--preset", "pds-base-16"]);
    assert_eq!(stdout(&o).trim(), "500,250,125,63");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("encode.json")).unwrap()).unwrap();
    assert_eq!(report["output_shape"], serde_json::json!([1, 63, 256]));
}

#[test]
fn ctc_check_reports_invalid_case() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        &[
            "ctc-check",
            "--preset",
            "pds-base-32",
            "--input-len",
            "3000",
            "--label-len",
            "100",
        ],
    );
    assert!(stdout(&o).contains("invalid: final length 94"));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ctc.json")).unwrap()).unwrap();
    assert_eq!(v["verdict"], "invalid");
    assert_eq!(v["final_len"], 94);
}

#[test]
fn gradcheck_micro_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        &["gradcheck", "--preset", "pds-base-8", "--micro"],
    );
    let text = stdout(&o);
    assert!(text.contains("pds-base-8/transformer: pass"), "{text}");
    assert!(text.contains("pds-base-8/conformer: pass"), "{text}");
}

#[test]
fn fixed_seed_outputs_are_byte_identical() {
    let commands: [&[&str]; 7] = [
        &[
            "gen",
            "--items",
            "4",
            "--min-frames",
            "50",
            "--max-frames",
            "400",
            "--file",
            "f.pdsf",
        ],
        &["encode", "--preset", "pds-base-32", "--frames", "123,77"],
        &[
            "similarity",
            "--items",
            "3",
            "--max-frames",
            "300",
            "--points",
            "after-layer",
        ],
        &[
            "attn-dist",
            "--items",
            "3",
            "--max-frames",
            "300",
            "--decoder-layers",
            "2",
            "--vocab",
            "50",
        ],
        &["ctc-check", "--input-len", "999", "--label-len", "40"],
        &["train-toy", "--steps", "15"],
        &[
            "gradcheck",
            "--preset",
            "stack-4",
            "--micro",
            "--block",
            "transformer",
        ],
    ];
    for args in commands {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut with_seed = vec!["--seed", "7"];
        with_seed.extend_from_slice(args);
        let oa = run_in(a.path(), &with_seed);
        let ob = run_in(b.path(), &with_seed);
        let norm = |o: &Output, d: &Path| stdout(o).replace(d.to_str().unwrap(), "OUT");
        assert_eq!(norm(&oa, a.path()), norm(&ob, b.path()), "{args:?}");
        let (fa, fb) = (files(a.path()), files(b.path()));
        assert!(!fa.is_empty(), "{args:?} wrote nothing");
        assert_eq!(fa, fb, "{args:?}");
    }
}

#[test]
fn bench_records_input_hash_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "bench",
        "--frames",
        "48",
        "--batch",
        "2",
        "--configs",
        "stack-4,pds-base-16",
    ];
    run_in(dir.path(), &args);
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("config,median_ms,speedup,final_len"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(
        (rows[0][0], rows[0][2], rows[0][3]),
        ("stack-4", "1.0", "12")
    );
    assert_eq!((rows[1][0], rows[1][3]), ("pds-base-16", "3"));

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    let hash = report["input_sha256"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    let again = tempfile::tempdir().unwrap();
    run_in(again.path(), &args);
    let report2: serde_json::Value =
        serde_json::from_slice(&std::fs::read(again.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(report2["input_sha256"].as_str().unwrap(), hash);
}

#[test]
fn generated_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    run_in(dir.path(), &["gen", "--items", "5", "--file", "g.pdsf"]);
    let path = dir.path().join("g.pdsf");
    let bytes = std::fs::read(&path).unwrap();
    let file = FeatureFile::load(&path).unwrap();
    assert_eq!(file.len(), 5);
    assert_eq!(file.to_bytes().unwrap(), bytes);

    // the encoder consumes the file directly
    let o = run_in(
        dir.path(),
        &[
            "encode",
            "--preset",
            "stack-4",
            "--input",
            path.to_str().unwrap(),
        ],
    );
    assert_eq!(stdout(&o).lines().count(), 5);
}

#[test]
fn config_file_selects_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "preset = \"pds-base-8\"\nblock_type = \"conformer\"\nhidden_dim = 64\nheads = 2\nffn_dim = 128\n").unwrap();
    let o = run_in(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "encode",
            "--frames",
            "100",
        ],
    );
    assert_eq!(stdout(&o).trim(), "50,25,25,13");

    std::fs::write(&cfg, "preset = \"pds-base-8\"\nwidth = 3\n").unwrap();
    let o = pds(&[
        "--out",
        dir.path().to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "encode",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(pds(&["--help"]).status.code(), Some(0));
    assert_eq!(pds(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        pds(&["--out", out, "--preset", "pds-base-64", "encode"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(pds(&["--out", out, "gradcheck"]).status.code(), Some(1));
    assert_eq!(
        pds(&["--out", out, "encode", "--frames", "0"])
            .status
            .code(),
        Some(1)
    );
    let diverged = pds(&["--out", out, "train-toy", "--steps", "5", "--lr", "1e300"]);
    assert_eq!(diverged.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&diverged.stderr).contains("diverged"));
}
