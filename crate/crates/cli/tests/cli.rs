//! Black-box checks of the `satr` binary: exit codes, help, and the
//! corpus/features/score subcommand surface.

use std::fs;
use std::process::Command;

fn satr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_satr"))
}

#[test]
fn help_covers_every_subcommand() {
    let out = satr().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["corpus", "features", "embed", "train", "decode", "score", "report", "run"] {
        assert!(text.contains(sub), "--help missing {sub}");
    }
}

#[test]
fn corpus_generate_and_bucket() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{
            "n_speakers": 2,
            "utterances_per_speaker": 3,
            "duration_distribution": [["less_5", 1.0]],
            "seed": 5
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("corpus");
    let out = satr()
        .args(["corpus", "generate", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("manifest.tsv").exists());

    let out = satr()
        .args(["corpus", "bucket", "--edges", "5,15", "--manifest"])
        .arg(out_dir.join("manifest.tsv"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("less_5"));
    assert!(text.contains("5_15"));
    assert!(text.contains("15_above"));
}

#[test]
fn invalid_adapt_mode_is_usage_error_listing_modes() {
    let dir = tempfile::tempdir().unwrap();
    let out = satr()
        .args(["train", "--adapt", "bogus", "--train-manifest"])
        .arg(dir.path().join("absent.tsv"))
        .args(["--feats", "f", "--cmvn", "c", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "usage errors exit 2");
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(
        text.contains("none") && text.contains("add") && text.contains("cat"),
        "diagnostic should list valid modes: {text}"
    );
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = satr()
        .args(["corpus", "bucket", "--manifest"])
        .arg(dir.path().join("absent.tsv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "data errors exit 3");
    assert!(!out.stderr.is_empty());
}

#[test]
fn score_produces_three_buckets_for_default_edges() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{
            "n_speakers": 2,
            "utterances_per_speaker": 2,
            "duration_distribution": [["less_5", 0.5], ["5_15", 0.5]],
            "seed": 8
        }"#,
    )
    .unwrap();
    let corpus = dir.path().join("corpus");
    assert!(satr()
        .args(["corpus", "generate", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&corpus)
        .status()
        .unwrap()
        .success());
    // Perfect hypotheses straight from the manifest.
    let manifest = fs::read_to_string(corpus.join("manifest.tsv")).unwrap();
    let mut hyps = String::new();
    for line in manifest.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        hyps.push_str(&format!("{}\t0.0\t{}\n", f[0], f[4]));
    }
    let hyp_path = dir.path().join("hyps.tsv");
    fs::write(&hyp_path, hyps).unwrap();
    let out_dir = dir.path().join("scores");
    let out = satr()
        .args(["score", "--edges", "5,15", "--system", "perfect", "--manifest"])
        .arg(corpus.join("manifest.tsv"))
        .arg("--hyps")
        .arg(&hyp_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    for bucket in ["less_5", "5_15", "15_above"] {
        assert!(table.contains(bucket), "missing bucket {bucket}");
    }
    assert!(table.contains("0.00"), "perfect hypotheses score 0");
    let csv = fs::read_to_string(out_dir.join("perfect.report.csv")).unwrap();
    assert!(csv.lines().count() >= 4, "overall + three buckets");
}
