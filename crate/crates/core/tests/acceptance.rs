//! Acceptance gate: one test per criterion, each printing a PASS line.
//!
//! Criteria 7 and 8 share a cached benchmark grid (4 long-tailed
//! synthetic blocks, small model, 15 rounds, 5 seeds) so the directional
//! comparisons run the expensive federated training only once.

use std::collections::BTreeMap;
use std::time::Instant;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use fedowl::data::{make_windows, WellLogRecord, WellLogSeries};
use fedowl::experiment::{
    gradcheck_suite, reference_benchmark, run_train_federated, suite_passes, train_federated,
    ExperimentConfig,
};
use fedowl::federation::{
    aggregate, client_round, fusion_weights, ClientReport, ClientState, FusionMode,
    RoundHistory, ServerConfig, TrainConfig,
};
use fedowl::loss::{cb_weight, f_loss, LossMode};
use fedowl::model::{init_model, masked_attention, ModelConfig, ModelParams};
use fedowl::numerics::{OptimConfig, Tensor2};

fn pass(criterion: usize, detail: impl std::fmt::Display) {
    println!("PASS criterion {criterion}: {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gradient_fidelity() {
    let start = Instant::now();
    let reports = gradcheck_suite().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .map(|r| r.max_err)
        .fold(0.0f64, f64::max);
    for r in &reports {
        assert!(r.draws >= 100, "{}: only {} draws", r.name, r.draws);
        assert!(r.passed(), "{}: max rel err {}", r.name, r.max_err);
    }
    assert!(suite_passes(&reports));
    assert!(elapsed <= 60.0, "gradcheck took {elapsed:.1}s, budget 60s");
    pass(
        1,
        format!(
            "gradcheck: {} functions, worst rel err {worst:.2e} <= 1e-4, {elapsed:.1}s <= 60s",
            reports.len()
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_loss_spot_checks() {
    let y = Tensor2::from_vec(1, 1, vec![1.0f64]).unwrap();
    let p = Tensor2::from_vec(1, 1, vec![0.5f64]).unwrap();
    let (loss, _) = f_loss(&y, &p, &[0.5]).unwrap();
    assert!((loss - 0.5199).abs() <= 1e-4, "f_loss = {loss}");

    let w0: f64 = cb_weight(0, 0.9999).unwrap();
    assert_eq!(w0, 1.0, "cb_weight(0) must be exactly 1");

    let mut prev = f64::INFINITY;
    for s in 0..=10_000u64 {
        let w: f64 = cb_weight(s, 0.9999).unwrap();
        assert!(w < prev, "cb_weight not strictly decreasing at s={s}");
        prev = w;
    }
    pass(
        2,
        format!("f_loss(1, 0.5, 0.5) = {loss:.4}; cb_weight(0) = 1 exactly, strictly decreasing over s = 0..10^4"),
    );
}

// ---------------------------------------------------------------- 3

fn report(id: &str, accuracy: f64, f1: f64, size: usize) -> ClientReport<f64> {
    ClientReport {
        client_id: id.into(),
        accuracy,
        f1,
        size,
        uploaded: true,
        params: None,
    }
}

#[test]
fn criterion_03_fusion_correctness() {
    let a = report("a", 0.9, 0.8, 100);
    let b = report("b", 0.6, 0.4, 50);
    let c = report("c", 0.6, 0.4, 50);
    let w = fusion_weights(&[&a, &b, &c]).unwrap();
    let expected = [0.3825, 0.3087, 0.3087];
    for (got, want) in w.weights.iter().zip(expected) {
        assert!((got - want).abs() <= 1e-3, "{got} vs {want}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let reports: Vec<ClientReport<f64>> = (0..rng.gen_range(1..8))
            .map(|i| {
                report(
                    &format!("c{i}"),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(1..1000),
                )
            })
            .collect();
        let refs: Vec<&ClientReport<f64>> = reports.iter().collect();
        let w = fusion_weights(&refs).unwrap();
        assert!(w.weights.iter().all(|&v| v > 0.0));
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let argmax_w = (0..w.weights.len())
            .max_by(|&i, &j| w.weights[i].partial_cmp(&w.weights[j]).unwrap())
            .unwrap();
        let argmax_c = (0..w.scores.len())
            .max_by(|&i, &j| w.scores[i].partial_cmp(&w.scores[j]).unwrap())
            .unwrap();
        assert_eq!(w.weights[argmax_w], w.weights[argmax_c]);
    }
    pass(
        3,
        "worked 3-client weights (0.3825, 0.3087, 0.3087) +- 1e-3; 200 random sets positive, sum 1 +- 1e-9, argmax preserved",
    );
}

// ---------------------------------------------------------------- 4

fn toy_window(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    label: usize,
) -> fedowl::data::WindowSample<f64> {
    let shift = label as f64 - 1.0;
    let data: Vec<f64> = (0..cfg.window * cfg.feat_dim)
        .map(|_| shift + rng.gen_range(-0.4..0.4))
        .collect();
    fedowl::data::WindowSample {
        matrix: Tensor2::from_vec(cfg.window, cfg.feat_dim, data).unwrap(),
        label,
        mask: vec![false; cfg.window],
        well: "W1".into(),
        center_depth: 1000.0,
    }
}

fn toy_client(cfg: &ModelConfig, init: &ModelParams<f64>, id: &str, seed: u64) -> ClientState<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in 0..cfg.classes {
        for _ in 0..6 {
            train.push(toy_window(&mut rng, cfg, label));
        }
        for _ in 0..2 {
            test.push(toy_window(&mut rng, cfg, label));
        }
    }
    let class_counts = fedowl::data::class_histogram(&train, cfg.classes);
    let split = fedowl::data::DataSplit {
        train,
        test,
        class_counts,
        num_classes: cfg.classes,
        test_well: "W2".into(),
    };
    ClientState::new(id, split, init.clone(), OptimConfig::sgd(0.02), seed)
}

#[test]
fn criterion_04_filtering_semantics() {
    let cfg = ModelConfig {
        layers: 1,
        width: 8,
        heads: 1,
        ffn_width: 8,
        feat_dim: 3,
        window: 5,
        classes: 3,
        seed: 4,
    };
    let init: ModelParams<f64> = init_model(&cfg).unwrap();
    let train = TrainConfig {
        epochs: 1,
        batch_size: 16,
        optim: OptimConfig::sgd(0.02),
        use_mask: false,
        ..TrainConfig::default()
    };
    let mut clients: Vec<ClientState<f64>> =
        (0..3).map(|i| toy_client(&cfg, &init, &format!("B{i}"), 40 + i)).collect();

    // manual 30-round loop so per-round uploaded F1 values are observable
    let mut global = init.clone();
    let mut uploaded_f1: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut zero_upload_rounds = 0;
    for _round in 0..30 {
        let before = global.flatten();
        let mut reports = Vec::new();
        for c in clients.iter_mut() {
            reports.push(client_round(c, &global, &train, true).unwrap());
        }
        let uploaded: Vec<&ClientReport<f64>> = reports.iter().filter(|r| r.uploaded).collect();
        for r in &uploaded {
            uploaded_f1.entry(r.client_id.clone()).or_default().push(r.f1);
        }
        if uploaded.is_empty() {
            zero_upload_rounds += 1;
            assert_eq!(global.flatten(), before, "skipped round must not move θ");
            continue;
        }
        let w = fusion_weights(&uploaded).unwrap();
        let models: Vec<&ModelParams<f64>> =
            uploaded.iter().map(|r| r.params.as_ref().unwrap()).collect();
        global = aggregate(&models, &w.weights).unwrap();
    }
    let mut total_uploads = 0;
    for (id, f1s) in &uploaded_f1 {
        total_uploads += f1s.len();
        for pair in f1s.windows(2) {
            assert!(pair[1] > pair[0], "client {id}: uploaded F1 not strictly increasing: {f1s:?}");
        }
    }

    // an explicitly forced zero-upload run: no training => F1 frozen at
    // the round-1 value, so rounds 2+ never pass the strict filter
    let mut frozen = vec![toy_client(&cfg, &init, "B0", 40)];
    let no_train = TrainConfig { epochs: 0, ..train.clone() };
    let server = ServerConfig { rounds: 3, fusion: FusionMode::FilteredDynamic, workers: 1 };
    let (_, history): (_, RoundHistory) =
        fedowl::federation::run_federation(&mut frozen, init, &server, &no_train, None).unwrap();
    assert!(history.rounds[1].uploaded.is_empty());
    assert!(history.rounds[2].uploaded.is_empty());

    pass(
        4,
        format!(
            "30 rounds, 3 clients: {total_uploads} uploads all strictly F1-increasing, {zero_upload_rounds} zero-upload round(s) left θ bit-identical"
        ),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_mask_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (k, d) = (rng.gen_range(3..12), rng.gen_range(2..6));
        let rand = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor2::<f64>::from_vec(r, c, data).unwrap()
        };
        let q = rand(&mut rng, k, d);
        let key = rand(&mut rng, k, d);
        let v = rand(&mut rng, k, d);
        let mut mask: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.4)).collect();
        mask[rng.gen_range(0..k)] = false;
        let (out, weights) = masked_attention(&q, &key, &v, &mask, d).unwrap();
        for (j, &masked) in mask.iter().enumerate() {
            if masked {
                for i in 0..k {
                    assert_eq!(weights.get(i, j), 0.0, "masked key {j} leaked into query {i}");
                }
            }
        }
        // perturbing V at masked positions must not change a single bit
        let mut v2 = v.clone();
        for (j, &masked) in mask.iter().enumerate() {
            if masked {
                for c in 0..d {
                    v2.set(j, c, v2.get(j, c) + rng.gen_range(1.0..10.0));
                }
            }
        }
        let (out2, _) = masked_attention(&q, &key, &v2, &mask, d).unwrap();
        assert_eq!(out.data(), out2.data(), "masked V rows affected the output");
    }
    pass(5, "100 draws: masked keys have exactly-zero weight; V at masked rows is bit-irrelevant");
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_windowing() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let len = rng.gen_range(49..400);
        let k = 2 * rng.gen_range(0..=24) + 1; // odd, <= 49 <= len
        let records: Vec<WellLogRecord<f64>> = (0..len)
            .map(|i| WellLogRecord {
                depth: 1000.0 + 0.125 * i as f64,
                features: vec![rng.gen_range(-1.0..1.0); 3],
                label: rng.gen_range(0..5),
            })
            .collect();
        let series = WellLogSeries {
            block: "B1".into(),
            well: "W1".into(),
            spacing: 0.125,
            records,
        };
        let windows = make_windows(&series, k, 1).unwrap();
        assert_eq!(windows.len(), len - k + 1);
        let half = k / 2;
        for (i, w) in windows.iter().enumerate() {
            assert_eq!(w.label, series.records[i + half].label, "center label mismatch");
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed <= 10.0, "windowing property test took {elapsed:.1}s");
    pass(
        6,
        format!("1000 random (len, k): count = len - k + 1 and center labels match, {elapsed:.1}s <= 10s"),
    );
}

// ------------------------------------------------------------- 7 & 8

struct BenchmarkGrid {
    /// (cell label, seed) -> (macro F1, round history).
    results: BTreeMap<(String, u64), (f64, RoundHistory)>,
    wall_time_s: f64,
    num_clients: usize,
}

const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

fn bench_config(seed: u64, loss: LossMode, fusion: FusionMode) -> ExperimentConfig {
    let mut config = reference_benchmark(seed);
    config.train.loss_mode = loss;
    config.server.fusion = fusion;
    config
}

static GRID: Lazy<BenchmarkGrid> = Lazy::new(|| {
    let start = Instant::now();
    let cells: [(&str, LossMode, FusionMode); 4] = [
        ("ce", LossMode::Ce, FusionMode::FilteredDynamic),
        ("cb-ce", LossMode::CbCe, FusionMode::FilteredDynamic),
        ("cb-f", LossMode::CbF, FusionMode::FilteredDynamic),
        ("fedavg", LossMode::CbF, FusionMode::PlainAverage),
    ];
    let mut results = BTreeMap::new();
    let mut num_clients = 0;
    for (label, loss, fusion) in cells {
        for seed in SEEDS {
            let config = bench_config(seed, loss, fusion);
            let (_, history, summary) = train_federated(&config).unwrap();
            num_clients = match &config.data {
                fedowl::experiment::DataSource::Generator { spec } => spec.blocks.len(),
                _ => unreachable!(),
            };
            results.insert(
                (label.to_string(), seed),
                (summary.final_probe_macro_f1, history),
            );
        }
    }
    BenchmarkGrid {
        results,
        wall_time_s: start.elapsed().as_secs_f64(),
        num_clients,
    }
});

fn cell_f1s(grid: &BenchmarkGrid, label: &str) -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&s| grid.results[&(label.to_string(), s)].0)
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn criterion_07_loss_trend() {
    let grid = &*GRID;
    let (ce, cb_ce, cb_f) = (
        cell_f1s(grid, "ce"),
        cell_f1s(grid, "cb-ce"),
        cell_f1s(grid, "cb-f"),
    );
    let (m_ce, m_cb_ce, m_cb_f) = (median(&ce), median(&cb_ce), median(&cb_f));
    assert!(
        m_cb_f >= m_cb_ce && m_cb_ce >= m_ce,
        "median macro F1 trend violated: CB-F {m_cb_f:.4}, CB-CE {m_cb_ce:.4}, CE {m_ce:.4}"
    );
    let wins = cb_f.iter().zip(&ce).filter(|(a, b)| a > b).count();
    assert!(wins >= 4, "CB-F beat CE in only {wins}/5 seeds: {cb_f:?} vs {ce:?}");
    assert!(
        grid.wall_time_s <= 900.0,
        "benchmark grid took {:.0}s, budget 900s",
        grid.wall_time_s
    );
    pass(
        7,
        format!(
            "median macro F1 CB-F {m_cb_f:.4} >= CB-CE {m_cb_ce:.4} >= CE {m_ce:.4}; CB-F > CE in {wins}/5 seeds; grid {:.0}s <= 900s",
            grid.wall_time_s
        ),
    );
}

#[test]
fn criterion_08_fusion_trend() {
    let grid = &*GRID;
    let filtered = cell_f1s(grid, "cb-f");
    let fedavg = cell_f1s(grid, "fedavg");
    let wins = filtered.iter().zip(&fedavg).filter(|(a, b)| a >= b).count();
    assert!(
        wins >= 4,
        "Filter >= FedAvg in only {wins}/5 seeds: {filtered:?} vs {fedavg:?}"
    );
    // filtering never trains more than FedAvg per round: uploads <= clients
    for seed in SEEDS {
        let history = &grid.results[&("cb-f".to_string(), seed)].1;
        for round in &history.rounds {
            assert!(round.uploaded.len() <= grid.num_clients);
        }
    }
    pass(
        8,
        format!(
            "Filter(Acc+F1+Size) >= FedAvg macro F1 in {wins}/5 seeds; uploads per round <= {} clients",
            grid.num_clients
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_data_isolation() {
    // interface check: the server-side operations accept only reports /
    // parameter sets, so a data-bearing type cannot cross the boundary
    // without failing to compile
    let _fusion: fn(&[&ClientReport<f64>]) -> fedowl::Result<fedowl::federation::FusionWeights> =
        fusion_weights::<f64>;
    let _agg: fn(&[&ModelParams<f64>], &[f64]) -> fedowl::Result<ModelParams<f64>> =
        aggregate::<f64>;

    // runtime check: a serialized report carries only the scalar metrics
    let cfg = ModelConfig {
        layers: 1,
        width: 8,
        heads: 1,
        ffn_width: 8,
        feat_dim: 3,
        window: 5,
        classes: 3,
        seed: 9,
    };
    let mut r = report("B1", 0.5, 0.5, 10);
    r.params = Some(init_model(&cfg).unwrap());
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, ["accuracy", "client_id", "f1", "size", "uploaded"]);
    assert!(fedowl::federation::report_is_data_free(&r));
    pass(
        9,
        "server API is typed over reports/params only; serialized report fields are scalars + id",
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_determinism() {
    let mut config = reference_benchmark(99);
    config.server.rounds = 5; // determinism needs identity, not scale
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    run_train_federated(&config, a.path()).unwrap();
    run_train_federated(&config, b.path()).unwrap();
    let ha = std::fs::read(a.path().join("round_history.jsonl")).unwrap();
    let hb = std::fs::read(b.path().join("round_history.jsonl")).unwrap();
    assert!(!ha.is_empty());
    assert_eq!(ha, hb, "round histories differ between identical runs");
    pass(
        10,
        format!("two identical runs: round history byte-identical ({} bytes)", ha.len()),
    );
}
