//! End-to-end checks of the `pglab` binary: the run-directory layout,
//! exit-code contract, dataset conversion round trip, sampling, and the
//! evaluation report schema.

use std::path::Path;
use std::process::{Command, Output};

use pglab::data::pgm::{load_manifest_dataset, write_pgm};
use pglab::tensor::Tensor;

fn pglab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pglab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn pglab")
}

fn assert_exit(out: &Output, code: i32, why: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{why}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

/// Small, fast training configuration shared by the tests below.
const TINY_TRAIN: &[&str] = &[
    "train",
    "--phantom",
    "--phantom-count",
    "8",
    "--final-res",
    "16",
    "--iters",
    "12",
    "--batch",
    "4",
    "--latent-dim",
    "8",
    "--fmap-cap",
    "8",
    "--seed",
    "3",
    "--out-dir",
    "run",
];

#[test]
fn train_writes_run_layout_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pglab(TINY_TRAIN, tmp.path());
    assert_exit(&out, 0, "tiny train should succeed");

    let summary: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("summary is JSON on stdout");
    assert_eq!(summary["iterations_run"], 12);
    assert_eq!(summary["final_resolution"], 16);

    let run = tmp.path().join("run");
    assert!(run.join("checkpoints/ckpt_0000012.pglb").is_file());
    assert!(run.join("samples/grid_0000012.pgm").is_file());
    assert!(run.join("logs/train.jsonl").is_file());
    assert!(run.join("reports").is_dir());

    let log = std::fs::read_to_string(run.join("logs/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("JSON log line");
        for key in ["iter", "resolution", "phase", "alpha", "d_loss", "g_loss"] {
            assert!(v.get(key).is_some(), "log line missing {key}: {line}");
        }
    }
}

#[test]
fn exit_codes_distinguish_config_data_and_io_errors() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown model name → configuration error.
    let out = pglab(&["train", "--model", "mystery", "--phantom"], tmp.path());
    assert_exit(&out, 2, "unknown model is a config error");

    // Unknown config-file field → configuration error.
    std::fs::write(tmp.path().join("bad.conf"), "warp_factor = 9\n").unwrap();
    let out = pglab(&["train", "--config", "bad.conf", "--phantom"], tmp.path());
    assert_exit(&out, 2, "unknown config field is a config error");

    // Bad precision → configuration error.
    let out = pglab(
        &["train", "--phantom", "--precision", "f16"],
        tmp.path(),
    );
    assert_exit(&out, 2, "unsupported precision is a config error");

    // No data source at all → configuration error.
    let out = pglab(&["train", "--iters", "4"], tmp.path());
    assert_exit(&out, 2, "missing data source is a config error");

    // Malformed image file → data error.
    let raw = tmp.path().join("raw");
    std::fs::create_dir(&raw).unwrap();
    std::fs::write(raw.join("broken.pgm"), b"P5 not a real header").unwrap();
    let out = pglab(
        &["convert", "--in-dir", "raw", "--out-dir", "conv"],
        tmp.path(),
    );
    assert_exit(&out, 3, "malformed PGM is a data error");

    // Missing directory → I/O error.
    let out = pglab(
        &["train", "--data-dir", "does-not-exist", "--iters", "4"],
        tmp.path(),
    );
    assert_exit(&out, 5, "missing dataset directory is an I/O error");
}

#[test]
fn convert_pads_and_round_trips_to_a_loadable_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    std::fs::create_dir(&raw).unwrap();

    // Two non-square images below the target extent.
    for (name, h, w) in [("scan-a", 12usize, 9usize), ("scan-b", 7, 16)] {
        let n = h * w;
        let vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64) / (n as f64)).collect();
        let img = Tensor::from_vec(&[1, h, w], vals).unwrap();
        write_pgm(&raw.join(format!("{name}.pgm")), &img).unwrap();
    }

    let out = pglab(
        &[
            "convert",
            "--in-dir",
            "raw",
            "--out-dir",
            "conv",
            "--slice-index",
            "5",
            "--pad",
            "16",
        ],
        tmp.path(),
    );
    assert_exit(&out, 0, "convert should succeed");
    let manifest_path = String::from_utf8_lossy(&out.stdout).trim().to_string();
    assert!(manifest_path.ends_with("manifest.tsv"));

    let records = load_manifest_dataset::<f64>(&tmp.path().join("conv"), None).unwrap();
    assert_eq!(records.len(), 2);
    for rec in &records {
        assert_eq!(rec.pixels.shape(), &[1, 16, 16], "padded to the target extent");
        assert_eq!(rec.slice_index, 5);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in rec.pixels.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!(lo >= -1.0 - 1e-12 && hi <= 1.0 + 1e-12, "normalized range");
    }
    let ids: Vec<&str> = records.iter().map(|r| r.source_id.as_str()).collect();
    assert_eq!(ids, ["scan-a", "scan-b"], "manifest preserves sorted order");
}

#[test]
fn generate_writes_the_requested_number_of_images() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pglab(TINY_TRAIN, tmp.path());
    assert_exit(&out, 0, "training for generate test");

    let out = pglab(
        &[
            "generate",
            "--checkpoint",
            "run/checkpoints/ckpt_0000012.pglb",
            "--count",
            "5",
            "--seed",
            "11",
            "--out-dir",
            "gen",
        ],
        tmp.path(),
    );
    assert_exit(&out, 0, "generate should succeed");

    for k in 0..5 {
        let path = tmp.path().join(format!("gen/{k:05}.pgm"));
        let bytes = std::fs::read(&path).expect("sample file exists");
        assert!(bytes.starts_with(b"P5"), "binary PGM header");
    }
    assert!(!tmp.path().join("gen/00005.pgm").exists(), "exactly the requested count");

    // The same seed reproduces the same bytes.
    let out = pglab(
        &[
            "generate",
            "--checkpoint",
            "run/checkpoints/ckpt_0000012.pglb",
            "--count",
            "5",
            "--seed",
            "11",
            "--out-dir",
            "gen2",
        ],
        tmp.path(),
    );
    assert_exit(&out, 0, "second generate should succeed");
    for k in 0..5 {
        let a = std::fs::read(tmp.path().join(format!("gen/{k:05}.pgm"))).unwrap();
        let b = std::fs::read(tmp.path().join(format!("gen2/{k:05}.pgm"))).unwrap();
        assert_eq!(a, b, "seeded sampling is reproducible");
    }
}

#[test]
fn evaluate_writes_a_complete_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pglab(TINY_TRAIN, tmp.path());
    assert_exit(&out, 0, "training for evaluate test");

    let out = pglab(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoints/ckpt_0000012.pglb",
            "--phantom",
            "--phantom-count",
            "12",
            "--fid-samples",
            "24",
            "--msssim-pairs",
            "6",
            "--seed",
            "9",
        ],
        tmp.path(),
    );
    assert_exit(&out, 0, "evaluate should succeed");

    let stdout_report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("report is JSON on stdout");
    let file_report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("run/reports/metrics_seed9.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(stdout_report, file_report, "stdout and file report agree");

    assert_eq!(stdout_report["pair_count_fid"], 24);
    assert_eq!(stdout_report["pair_count_msssim"], 6);
    assert_eq!(stdout_report["provider_id"], "pixel-downsample");
    assert_eq!(stdout_report["model_id"], "pggan");
    assert_eq!(stdout_report["seed"], 9);
    assert!(stdout_report["fid"].as_f64().unwrap().is_finite());
    let ms = stdout_report["ms_ssim"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ms), "MS-SSIM in [0,1], got {ms}");
}

#[test]
fn resume_refuses_a_mismatched_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pglab(TINY_TRAIN, tmp.path());
    assert_exit(&out, 0, "training for resume test");

    // Same configuration resumes fine (a no-op run: already at 8 of 8).
    let mut resumed: Vec<&str> = TINY_TRAIN.to_vec();
    resumed.extend_from_slice(&["--resume", "run/checkpoints/ckpt_0000012.pglb"]);
    let out = pglab(&resumed, tmp.path());
    assert_exit(&out, 0, "resume with identical config succeeds");

    // Any hash-bearing difference (here the seed) is refused.
    let mut mismatched = resumed.clone();
    let seed_pos = mismatched.iter().position(|a| *a == "--seed").unwrap();
    mismatched[seed_pos + 1] = "4";
    let out = pglab(&mismatched, tmp.path());
    assert_exit(&out, 2, "resume with a different config is a config error");
    let msg = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(msg.contains("different configuration"), "stderr: {msg}");
}
