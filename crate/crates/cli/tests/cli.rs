//! End-to-end runs of the qtmt binary on a tiny synthetic corpus.

use std::path::Path;
use std::process::{Command, Output};

fn qtmt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qtmt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn enumerate_prints_partition_constants() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&qtmt(&["enumerate"], dir.path()));
    assert!(out.contains("distinct_blocks: 5781"), "{out}");
    assert!(out.contains("search_states: 14613"), "{out}");

    let out = stdout(&qtmt(
        &[
            "enumerate",
            "--ctu-size",
            "64",
            "--min-qt-leaf",
            "8",
            "--max-mt-depth",
            "0",
            "--no-forced-root",
        ],
        dir.path(),
    ));
    assert!(out.contains("distinct_blocks: 85"), "{out}");

    let out = stdout(&qtmt(&["enumerate", "--preset", "quad-only-64"], dir.path()));
    assert!(out.contains("distinct_blocks: 85"), "{out}");
    let out = stdout(&qtmt(&["enumerate", "--preset", "default"], dir.path()));
    assert!(out.contains("distinct_blocks: 5781"), "{out}");

    // A preset and an explicit rule flag contradict each other.
    let out = qtmt(&["enumerate", "--preset", "default", "--ctu-size", "64"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = stdout(&qtmt(
        &[
            "gen-dataset",
            "--synth",
            "3",
            "--synth-size",
            "128",
            "--qps",
            "32,37",
            "--seed",
            "5",
            "--out",
            "db",
        ],
        d,
    ));
    assert!(out.contains("samples:"), "{out}");
    assert!(d.join("db/summary.csv").exists());
    assert!(d.join("db/images/manifest.txt").exists());

    let out = stdout(&qtmt(&["stats", "--data", "db"], d));
    assert!(out.starts_with("split,shape,qp,count"), "{out}");
    assert!(out.contains("total:"), "{out}");

    let out = stdout(&qtmt(
        &[
            "train",
            "--data",
            "db",
            "--out",
            "model.bin",
            "--iterations",
            "20",
            "--batch-size",
            "8",
            "--trace",
            "trace.csv",
        ],
        d,
    ));
    assert!(out.contains("model: model.bin"), "{out}");
    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,shape,lr,ce,rd,total"), "{trace}");

    let out = stdout(&qtmt(
        &[
            "encode",
            "--input",
            "db/images/manifest.txt",
            "--mode",
            "anchor",
            "--qp",
            "32,37",
            "--out",
            "anchor.csv",
        ],
        d,
    ));
    assert!(out.contains("report: anchor.csv"), "{out}");

    // Tight uniform thresholds keep the untrained predictor's walk small.
    let out = stdout(&qtmt(
        &[
            "encode",
            "--input",
            "db/images/manifest.txt",
            "--mode",
            "fast",
            "--model",
            "model.bin",
            "--taus",
            "1,1,1,1,1",
            "--qp",
            "32,37",
            "--out",
            "fast.csv",
        ],
        d,
    ));
    assert!(out.contains("report: fast.csv"), "{out}");

    let out = stdout(&qtmt(&["bd", "--anchor", "anchor.csv", "--test", "fast.csv"], d));
    assert!(out.contains("bd_rate_pct:"), "{out}");
    assert!(out.contains("bd_psnr_db:"), "{out}");
    assert!(out.contains("delta_t_pct:"), "{out}");
}

#[test]
fn encode_accepts_a_bare_image() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout(&qtmt(
        &["synth", "--out", "imgs", "--count", "1", "--width", "128", "--height", "128"],
        d,
    ));
    let out = stdout(&qtmt(
        &[
            "encode",
            "--input",
            "imgs/img_0000.pgm",
            "--mode",
            "anchor",
            "--qp",
            "37",
            "--out",
            "r.csv",
        ],
        d,
    ));
    assert!(out.contains("qp 37:"), "{out}");
}

#[test]
fn invalid_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // fast mode without a model
    std::fs::write(d.join("m.txt"), "x.pgm 128 128 1 train\n").unwrap();
    let out = qtmt(
        &["encode", "--input", "m.txt", "--mode", "fast", "--qp", "32", "--out", "r.csv"],
        d,
    );
    assert!(!out.status.success());

    // gen-dataset needs a source
    let out = qtmt(&["gen-dataset", "--out", "db"], d);
    assert!(!out.status.success());

    // bd on missing files
    let out = qtmt(&["bd", "--anchor", "no.csv", "--test", "no.csv"], d);
    assert!(!out.status.success());

    // train on an empty database
    std::fs::create_dir_all(d.join("empty/train")).unwrap();
    let out = qtmt(&["train", "--data", "empty", "--out", "m.bin", "--iterations", "1"], d);
    assert!(!out.status.success());

    // unknown preset
    let out = qtmt(
        &[
            "encode", "--input", "m.txt", "--mode", "fast", "--model", "x.bin", "--preset",
            "turbo", "--qp", "32", "--out", "r.csv",
        ],
        d,
    );
    assert!(!out.status.success());
}
