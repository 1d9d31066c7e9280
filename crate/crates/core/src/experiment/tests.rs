use std::path::Path;

use tempfile::tempdir;

use crate::data::synth::{BlockSpec, GeneratorSpec};
use crate::experiment::*;
use crate::federation::FusionMode;
use crate::loss::LossMode;
use crate::model::{load_checkpoint, ModelConfig, ModelParams};
use crate::numerics::OptimConfig;

fn tiny_generator() -> GeneratorSpec {
    GeneratorSpec {
        blocks: (0..2)
            .map(|i| BlockSpec {
                id: format!("B{}", i + 1),
                wells: 2,
                records_per_well: 120,
                class_weights: vec![0.1, 0.2, 0.4, 0.2, 0.1],
                feature_shift: vec![0.5 * i as f64; 5],
            })
            .collect(),
        class_feature_means: (0..5)
            .map(|c| (0..5).map(|j| if j == c { 2.0 } else { 0.0 }).collect())
            .collect(),
        noise_std: 0.4,
        run_length: 4,
        ..GeneratorSpec::default()
    }
}

fn tiny_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.data = DataSource::Generator {
        spec: tiny_generator(),
    };
    config.schema.features = ["SP", "CAL", "AC", "RA25", "GR"]
        .map(String::from)
        .to_vec();
    config.model = ModelConfig {
        layers: 1,
        width: 8,
        heads: 1,
        ffn_width: 8,
        feat_dim: 5,
        window: 5,
        classes: 5,
        seed: 0,
    };
    config.train.epochs = 1;
    config.train.batch_size = 32;
    config.train.optim = OptimConfig::sgd(0.05);
    config.server.rounds = 2;
    config.server.workers = 2;
    config.finetune_rounds = 2;
    config.seed = 42;
    config
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn config_round_trips_through_json() {
    let config = tiny_config();
    let json = serde_json::to_string_pretty(&config).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string_pretty(&back).unwrap(), json);
}

#[test]
fn config_validation_catches_shape_mismatches() {
    let mut config = tiny_config();
    config.model.feat_dim = 4;
    assert!(config.validate().is_err());
    let mut config = tiny_config();
    config.model.classes = 3;
    assert!(config.validate().is_err());
    assert!(tiny_config().validate().is_ok());
}

#[test]
fn synth_is_deterministic_and_manifest_counts_match() {
    let config = tiny_config();
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let manifest = run_synth(&config, a.path()).unwrap();
    run_synth(&config, b.path()).unwrap();
    assert_eq!(dir_snapshot(a.path()), dir_snapshot(b.path()));
    assert_eq!(manifest.files.len(), 4, "2 blocks x 2 wells");
    let recount = recount_directory(a.path(), &config.schema).unwrap();
    assert_eq!(recount, manifest.class_counts);
    assert_eq!(recount.iter().sum::<u64>(), 2 * 2 * 120);
}

#[test]
fn synth_rejects_directory_sources() {
    let mut config = tiny_config();
    config.data = DataSource::Dir {
        path: "/nonexistent".into(),
    };
    assert!(run_synth(&config, tempdir().unwrap().path()).is_err());
}

#[test]
fn train_federated_writes_deterministic_artifacts() {
    let config = tiny_config();
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let summary = run_train_federated(&config, a.path()).unwrap();
    run_train_federated(&config, b.path()).unwrap();

    assert_eq!(summary.rounds, 2);
    assert!((0.0..=1.0).contains(&summary.final_probe_acc));
    assert!((0.0..=1.0).contains(&summary.final_probe_macro_f1));

    let history_a = std::fs::read(a.path().join("round_history.jsonl")).unwrap();
    let history_b = std::fs::read(b.path().join("round_history.jsonl")).unwrap();
    assert_eq!(history_a, history_b, "round history must be byte-identical");
    assert_eq!(
        String::from_utf8(history_a).unwrap().lines().count(),
        config.server.rounds
    );

    let restored: ModelParams<f64> = load_checkpoint(&a.path().join("final.ckpt")).unwrap();
    assert_eq!(restored.config.width, config.model.width);
    assert!(a.path().join("config.json").exists());
    assert!(a.path().join("summary.json").exists());
}

#[test]
fn finetune_eval_emits_one_curve_per_test_well_with_rounds_plus_one_points() {
    let config = tiny_config();
    let train_out = tempdir().unwrap();
    run_train_federated(&config, train_out.path()).unwrap();
    let ckpt = train_out.path().join("final.ckpt");

    let out = tempdir().unwrap();
    let report = run_finetune_eval(&config, &ckpt, "B1", out.path()).unwrap();
    assert_eq!(report.target_block, "B1");
    // 2 wells in the block: 1 fine-tunes, 1 evaluates
    assert_eq!(report.curves.len(), 1);
    for (well, points) in &report.curves {
        assert_ne!(*well, report.finetune_well);
        assert_eq!(points.len(), config.finetune_rounds + 1);
        assert_eq!(points[0].round, 0);
        let csv = std::fs::read_to_string(out.path().join(format!("finetune_{well}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), config.finetune_rounds + 2, "header + points");
    }

    // zero rounds: only the pre-finetune point
    let mut zero = config.clone();
    zero.finetune_rounds = 0;
    let out0 = tempdir().unwrap();
    let report0 = run_finetune_eval(&zero, &ckpt, "B1", out0.path()).unwrap();
    assert!(report0.curves.values().all(|p| p.len() == 1));
}

#[test]
fn finetune_eval_rejects_unknown_blocks() {
    let config = tiny_config();
    let train_out = tempdir().unwrap();
    run_train_federated(&config, train_out.path()).unwrap();
    let out = tempdir().unwrap();
    let res = run_finetune_eval(
        &config,
        &train_out.path().join("final.ckpt"),
        "NOPE",
        out.path(),
    );
    assert!(res.is_err());
}

#[test]
fn ablate_grid_has_one_row_per_cell_and_seed() {
    let mut config = tiny_config();
    config.ablate.loss_modes = vec![LossMode::Ce];
    config.ablate.fusion_modes = vec![FusionMode::PlainAverage, FusionMode::FilteredDynamic];
    config.ablate.masks = vec![true];
    config.ablate.seeds = vec![7];
    let out = tempdir().unwrap();
    let rows = run_ablate(&config, out.path()).unwrap();
    assert_eq!(rows.len(), 2);
    let csv = std::fs::read_to_string(out.path().join("ablate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header + 2 rows");
    assert!(csv.contains("plain-average") && csv.contains("filtered-dynamic"));
}

#[test]
fn gradcheck_suite_passes_and_lists_every_function() {
    let reports = gradcheck_suite().unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    for expected in [
        "tape::matmul",
        "tape::masked_softmax_rows",
        "tape::layer_norm",
        "model::backward",
        "loss::ce",
        "loss::cb-ce",
        "loss::cb-f",
    ] {
        assert!(names.contains(&expected), "missing {expected}");
    }
    for r in &reports {
        assert!(r.draws >= 100);
        assert!(
            r.passed(),
            "{}: max rel err {} exceeds {GRADCHECK_TOLERANCE}",
            r.name,
            r.max_err
        );
    }
    assert!(suite_passes(&reports));
}

#[test]
fn corrupted_gradient_fails_the_harness() {
    // sanity: the oracle actually detects wrong gradients
    let bad = CheckReport {
        name: "fixture".into(),
        draws: 100,
        max_err: 1.0,
    };
    assert!(!bad.passed());
    assert!(!suite_passes(&[bad]));
    let mut f = |x: &[f64]| crate::error::Result::Ok(x[0] * x[0]);
    let err = crate::numerics::grad_check(&mut f, &[3.0], &[5.0], 1e-4).unwrap();
    assert!(err > GRADCHECK_TOLERANCE);
}
