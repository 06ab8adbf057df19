//! End-to-end pipeline checks: rerun determinism, stage resumability,
//! the comparison-table shape, and the config echo.

use std::fs;

use satr_core::adapt::{AdaptConfig, AdaptMode, NormAxis};
use satr_core::corpus::{CorpusSpec, DurationBucket, Grammar};
use satr_core::decode::BeamConfig;
use satr_core::embed::{EmbedderConfig, EmbedderFlavor};
use satr_core::experiment::{parse_system, run_experiment, RunConfig};
use satr_core::frontend::{FrontendConfig, PitchMode};
use satr_core::model::ModelConfig;
use satr_core::specaug::SpecAugPolicy;
use satr_core::trainer::TrainConfig;

fn tiny_run_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        corpus: CorpusSpec {
            n_speakers: 3,
            utterances_per_speaker: 4,
            duration_distribution: vec![(DurationBucket::Less5, 1.0)],
            grammar: Grammar::default(),
            speaker_colors: None,
            speaker_template_shift_hz: 150.0,
            sample_rate: 16000,
            seed,
        },
        frontend: FrontendConfig {
            n_mels: 80,
            pitch: PitchMode::Auto,
        },
        embedder: EmbedderConfig {
            flavor: EmbedderFlavor::Ff,
            hidden: 16,
            heads: 2,
            epochs: 3,
            lr: 2e-3,
            crop_frames: 120,
            input_dim: 83,
            seed,
        },
        model: ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 32,
            heads: 2,
            ffn_dim: 64,
            input_dim: 83,
            conv_channels: 4,
            dropout: 0.1,
            label_smoothing: 0.1,
        },
        train: TrainConfig {
            epochs: 2,
            warmup_steps: 50,
            lr_factor: 1.0,
            batch_size: 4,
            batch_bins: None,
            accum_grad: 1,
            ctc_weight: 0.3,
            grad_clip: 5.0,
            average_k: 2,
            seed,
            adapt: AdaptConfig {
                mode: AdaptMode::None,
                norm_axis: NormAxis::T,
                specaug_joint: true,
                epsilon: 1e-8,
                specaug: SpecAugPolicy::default(),
                normalize_after_specaug: false,
            },
        },
        beam: BeamConfig {
            beam: 2,
            ctc_weight: 0.3,
            max_len_ratio: 0.4,
        },
        edges: vec![5.0, 15.0],
        systems: vec!["baseline".into(), "x_cat".into()],
        dev_per_speaker: 1,
        test_per_speaker: 1,
    }
}

#[test]
fn rerun_with_same_seed_gives_identical_report_bytes() {
    let cfg = tiny_run_config(31);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run_experiment(&cfg, d1.path()).unwrap();
    run_experiment(&cfg, d2.path()).unwrap();
    for name in [
        "report/comparison_dev.txt",
        "report/comparison_dev.csv",
        "report/comparison_test.txt",
        "report/comparison_test.csv",
    ] {
        let a = fs::read(d1.path().join(name)).unwrap();
        let b = fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // The two-system matrix gives a 2-row table with overall + 3 buckets.
    let table = fs::read_to_string(d1.path().join("report/comparison_dev.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "comment + header + 2 system rows");
    assert!(lines[1].contains("overall"));
    assert!(lines[1].contains("less_5"));
    assert!(lines[1].contains("5_15"));
    assert!(lines[1].contains("15_above"));
    assert!(lines[2].starts_with("baseline"));
    assert!(lines[3].starts_with("x_cat"));
}

#[test]
fn resume_reuses_stamped_stages() {
    let cfg = tiny_run_config(32);
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    let report_before = fs::read(dir.path().join("report/comparison_test.txt")).unwrap();
    let log_path = dir.path().join("systems/baseline/train_log.csv");
    let log_before = fs::read(&log_path).unwrap();
    // Poison the training log; a resumed run must not retrain.
    fs::write(&log_path, "poisoned").unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(
        fs::read(&log_path).unwrap(),
        b"poisoned",
        "stamped system stage was re-run"
    );
    fs::write(&log_path, log_before).unwrap();
    let report_after = fs::read(dir.path().join("report/comparison_test.txt")).unwrap();
    assert_eq!(report_before, report_after);
}

#[test]
fn stored_config_replays_the_run() {
    let cfg = tiny_run_config(33);
    let d1 = tempfile::tempdir().unwrap();
    run_experiment(&cfg, d1.path()).unwrap();
    // The run directory holds the exact config; replaying it into a
    // fresh directory reproduces the reports byte-for-byte.
    let stored: RunConfig = serde_json::from_str(
        &fs::read_to_string(d1.path().join("config.json")).unwrap(),
    )
    .unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run_experiment(&stored, d2.path()).unwrap();
    for name in ["report/comparison_dev.csv", "report/comparison_test.csv"] {
        assert_eq!(
            fs::read(d1.path().join(name)).unwrap(),
            fs::read(d2.path().join(name)).unwrap(),
            "{name} differs after config replay"
        );
    }
}

#[test]
fn invalid_system_name_is_a_usage_error() {
    let err = parse_system("bogus").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("baseline"), "message should list valid systems: {msg}");
    assert_eq!(err.exit_code(), 2);
}
