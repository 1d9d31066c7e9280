//! Experiment orchestration: configuration files, dataset preparation,
//! and the synth / train-federated / finetune-eval / ablate runs behind
//! the command-line interface.
//!
//! Every run is determined by (config, seed): all randomness flows from
//! the root seed, split per component, and each run echoes its effective
//! config into the output directory so it can be replayed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::synth::{synth_blocks, BlockSpec, GeneratorSpec};
use crate::data::{
    load_directory, make_windows, save_well_log, split_by_well,
    standardize_split, FeatureStats, LogSchema, WellLogSeries, WindowSample,
};
use crate::error::{Error, Result};
use crate::federation::{
    finetune_with, run_federation, ClientState, FusionMode, RoundHistory, ServerConfig,
    TrainConfig,
};
use crate::loss::LossMode;
use crate::metrics::evaluate;
use crate::model::{
    init_model, load_checkpoint, predict, save_checkpoint, ModelConfig, ModelParams,
};

mod gradcheck_suite;
pub use gradcheck_suite::{gradcheck_suite, suite_passes, CheckReport, GRADCHECK_TOLERANCE};

#[cfg(test)]
mod tests;

/// Where the experiment's well logs come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// A directory of `<block>__<well>.csv` files.
    Dir { path: PathBuf },
    /// The synthetic long-tailed generator.
    Generator { spec: GeneratorSpec },
}

/// Grid of the ablation run; seeds are shared across every cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub loss_modes: Vec<LossMode>,
    pub fusion_modes: Vec<FusionMode>,
    pub masks: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            loss_modes: vec![LossMode::Ce, LossMode::CbCe, LossMode::CbF],
            fusion_modes: vec![FusionMode::PlainAverage, FusionMode::FilteredDynamic],
            masks: vec![true],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Everything a run needs; fully serializable, echoed verbatim into the
/// output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub schema: LogSchema,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub server: ServerConfig,
    pub ablate: AblateConfig,
    /// Fine-tune rounds (one epoch over the fine-tune well each).
    pub finetune_rounds: usize,
    /// Z-score features against per-client train statistics.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Generator {
                spec: reference_generator(),
            },
            schema: LogSchema::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            server: ServerConfig::default(),
            ablate: AblateConfig::default(),
            finetune_rounds: 20,
            standardize: true,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: ExperimentConfig = serde_json::from_reader(file)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.feat_dim != self.schema.feature_dim() {
            return Err(Error::Config(format!(
                "model feat_dim {} but schema has {} feature columns",
                self.model.feat_dim,
                self.schema.feature_dim()
            )));
        }
        if self.model.classes != self.schema.num_classes {
            return Err(Error::Config(format!(
                "model classes {} but schema num_classes {}",
                self.model.classes, self.schema.num_classes
            )));
        }
        Ok(())
    }

    fn echo(&self, out: &Path) -> Result<()> {
        write_json(&out.join("config.json"), self)
    }
}

/// The small long-tailed 4-block benchmark: ~100:1 head:tail imbalance,
/// 2-layer width-16 model over 9-sample windows, 20 server rounds.
pub fn reference_generator() -> GeneratorSpec {
    let weights = vec![0.007, 0.20, 0.70, 0.063, 0.03];
    let blocks = (0..4)
        .map(|i| BlockSpec {
            id: format!("B{}", i + 1),
            wells: 3,
            records_per_well: 600,
            class_weights: weights.clone(),
            feature_shift: vec![0.3 * i as f64; 5],
        })
        .collect();
    // class means on a line one noise-unit apart: adjacent classes
    // overlap, so the class priors matter at the decision boundary and
    // rebalancing the loss has something to correct
    let class_feature_means = (0..5)
        .map(|c| (0..5).map(|j| if j == 0 { c as f64 } else { 0.0 }).collect())
        .collect();
    GeneratorSpec {
        blocks,
        class_feature_means,
        noise_std: 1.0,
        run_length: 6,
        spacing: 0.125,
        start_depth: 1000.0,
        depth_feature: None,
    }
}

/// [`ExperimentConfig`] for the reference benchmark.
pub fn reference_benchmark(seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.schema.features = vec!["SP", "CAL", "AC", "RA25", "GR"]
        .into_iter()
        .map(String::from)
        .collect();
    config.model = ModelConfig {
        layers: 2,
        width: 16,
        heads: 1,
        ffn_width: 32,
        feat_dim: 5,
        window: 9,
        classes: 5,
        seed: 0,
    };
    config.server.rounds = 20;
    config.train.epochs = 3;
    config.train.batch_size = 32;
    config.train.optim.learning_rate = 2e-3;
    config.seed = seed;
    config
}

/// splitmix64, used to derive independent component seeds from the root.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(root: u64, tag: u64, index: u64) -> u64 {
    splitmix64(root ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.rotate_left(32))
}

const TAG_DATA: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_CLIENT: u64 = 4;
const TAG_FINETUNE: u64 = 5;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load or generate the per-block well series.
fn load_blocks(config: &ExperimentConfig) -> Result<BTreeMap<String, Vec<WellLogSeries<f64>>>> {
    match &config.data {
        DataSource::Dir { path } => load_directory(path, &config.schema),
        DataSource::Generator { spec } => {
            let series = synth_blocks::<f64>(spec, mix(config.seed, TAG_DATA, 0))?;
            let mut blocks: BTreeMap<String, Vec<WellLogSeries<f64>>> = BTreeMap::new();
            for s in series {
                blocks.entry(s.block.clone()).or_default().push(s);
            }
            Ok(blocks)
        }
    }
}

/// Build one federated client per block plus the harness-side probe set
/// (the concatenation of every client's held-out test windows).
pub fn prepare_clients(
    config: &ExperimentConfig,
) -> Result<(Vec<ClientState<f64>>, Vec<WindowSample<f64>>)> {
    config.validate()?;
    let blocks = load_blocks(config)?;
    let mut model_config = config.model.clone();
    model_config.seed = mix(config.seed, TAG_INIT, 0);
    let init: ModelParams<f64> = init_model(&model_config)?;
    let mut clients = Vec::new();
    let mut probe = Vec::new();
    for (i, (block, wells)) in blocks.iter().enumerate() {
        if wells.len() < 2 {
            return Err(Error::Argument(format!(
                "block {block} has {} well(s); need at least 2",
                wells.len()
            )));
        }
        let mut split = split_by_well(
            wells,
            config.model.window,
            config.schema.mask_class,
            config.schema.num_classes,
            mix(config.seed, TAG_SPLIT, i as u64),
        )?;
        if config.standardize {
            standardize_split(&mut split)?;
        }
        probe.extend(split.test.iter().cloned());
        clients.push(ClientState::new(
            block.clone(),
            split,
            init.clone(),
            config.train.optim,
            mix(config.seed, TAG_CLIENT, i as u64),
        ));
    }
    Ok((clients, probe))
}

/// Synthetic data manifest, written next to the emitted CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub files: Vec<String>,
    /// Per-class record counts over all emitted files.
    pub class_counts: Vec<u64>,
}

/// Generate the configured synthetic dataset as per-well CSVs plus a
/// manifest.
pub fn run_synth(config: &ExperimentConfig, out: &Path) -> Result<SynthManifest> {
    let spec = match &config.data {
        DataSource::Generator { spec } => spec,
        DataSource::Dir { .. } => {
            return Err(Error::Config(
                "synth needs a generator data source, got a directory".into(),
            ))
        }
    };
    ensure_dir(out)?;
    config.echo(out)?;
    let seed = mix(config.seed, TAG_DATA, 0);
    let series = synth_blocks::<f64>(spec, seed)?;
    let mut files = Vec::new();
    let mut class_counts = vec![0u64; spec.num_classes()];
    for s in &series {
        let name = format!("{}__{}.csv", s.block, s.well);
        save_well_log(s, &out.join(&name), &config.schema)?;
        for rec in &s.records {
            class_counts[rec.label] += 1;
        }
        files.push(name);
    }
    let manifest = SynthManifest {
        seed,
        files,
        class_counts,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Machine-readable result of a federated training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub rounds: usize,
    pub final_probe_acc: f64,
    pub final_probe_macro_f1: f64,
    pub wall_time_s: f64,
}

fn write_history(path: &Path, history: &RoundHistory) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for record in &history.rounds {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// In-memory federated run: clients from config, probe-tracked rounds.
pub fn train_federated(
    config: &ExperimentConfig,
) -> Result<(ModelParams<f64>, RoundHistory, TrainSummary)> {
    let (mut clients, probe) = prepare_clients(config)?;
    let start = Instant::now();
    let init = clients[0].params.clone();
    let (global, history) = run_federation(
        &mut clients,
        init,
        &config.server,
        &config.train,
        Some(&probe),
    )?;
    let last = history.rounds.last().ok_or_else(|| {
        Error::Argument("federation configured with zero rounds".into())
    })?;
    let summary = TrainSummary {
        rounds: history.rounds.len(),
        final_probe_acc: last.probe_acc.unwrap_or(f64::NAN),
        final_probe_macro_f1: last.probe_macro_f1.unwrap_or(f64::NAN),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((global, history, summary))
}

/// Full train-federated run with artifacts: `config.json`,
/// `round_history.jsonl`, `final.ckpt`, `summary.json`.
pub fn run_train_federated(config: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    ensure_dir(out)?;
    config.echo(out)?;
    let (global, history, summary) = train_federated(config)?;
    write_history(&out.join("round_history.jsonl"), &history)?;
    save_checkpoint(&global, &out.join("final.ckpt"))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One (round, metric) point of a fine-tune curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Per-test-well fine-tune curves; `rounds + 1` points each, point 0
/// being the pre-finetune model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub target_block: String,
    pub finetune_well: String,
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
}

fn eval_windows(
    params: &ModelParams<f64>,
    windows: &[WindowSample<f64>],
    classes: usize,
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let refs: Vec<&WindowSample<f64>> = windows.iter().collect();
    let preds = predict(params, &refs)?;
    let labels: Vec<usize> = windows.iter().map(|s| s.label).collect();
    let eval = evaluate(&preds, &labels, classes, config.absent_rule)?;
    Ok((eval.accuracy, eval.macro_f1))
}

/// Fine-tune a checkpoint on one well of the target block and trace
/// accuracy / macro F1 on each remaining well after every round. Writes
/// one `finetune_<well>.csv` curve per test well.
pub fn run_finetune_eval(
    config: &ExperimentConfig,
    checkpoint: &Path,
    target_block: &str,
    out: &Path,
) -> Result<FinetuneReport> {
    ensure_dir(out)?;
    config.echo(out)?;
    let params: ModelParams<f64> = load_checkpoint(checkpoint)?;
    let blocks = load_blocks(config)?;
    let wells = blocks.get(target_block).ok_or_else(|| {
        Error::Argument(format!(
            "target block {target_block} not in {:?}",
            blocks.keys().collect::<Vec<_>>()
        ))
    })?;
    if wells.len() < 2 {
        return Err(Error::Argument(format!(
            "target block {target_block} has {} well(s); need at least 2",
            wells.len()
        )));
    }
    // deterministic choice: the lexicographically first well fine-tunes,
    // the rest evaluate
    let mut sorted: Vec<&WellLogSeries<f64>> = wells.iter().collect();
    sorted.sort_by(|a, b| a.well.cmp(&b.well));
    let (ft_well, test_wells) = sorted.split_first().unwrap();
    let classes = config.schema.num_classes;
    let mut ft_windows = make_windows(ft_well, config.model.window, config.schema.mask_class)?;
    let mut test_windows: Vec<(String, Vec<WindowSample<f64>>)> = test_wells
        .iter()
        .map(|w| {
            make_windows(w, config.model.window, config.schema.mask_class)
                .map(|ws| (w.well.clone(), ws))
        })
        .collect::<Result<_>>()?;
    if config.standardize {
        let stats = FeatureStats::fit(&ft_windows)?;
        stats.apply(&mut ft_windows);
        for (_, ws) in &mut test_windows {
            stats.apply(ws);
        }
    }
    let mut curves: BTreeMap<String, Vec<CurvePoint>> = BTreeMap::new();
    for (well, ws) in &test_windows {
        let (accuracy, macro_f1) = eval_windows(&params, ws, classes, &config.train)?;
        curves.insert(
            well.clone(),
            vec![CurvePoint {
                round: 0,
                accuracy,
                macro_f1,
            }],
        );
    }
    if config.finetune_rounds > 0 {
        finetune_with(
            &params,
            &ft_windows,
            config.finetune_rounds,
            &config.train,
            mix(config.seed, TAG_FINETUNE, 0),
            |round, tuned| {
                for (well, ws) in &test_windows {
                    let (accuracy, macro_f1) = eval_windows(tuned, ws, classes, &config.train)?;
                    curves.get_mut(well).unwrap().push(CurvePoint {
                        round,
                        accuracy,
                        macro_f1,
                    });
                }
                Ok(())
            },
        )?;
    }
    for (well, points) in &curves {
        let path = out.join(format!("finetune_{well}.csv"));
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_record(["round", "accuracy", "macro_f1"])?;
        for p in points {
            w.write_record([
                p.round.to_string(),
                format!("{:.6}", p.accuracy),
                format!("{:.6}", p.macro_f1),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    let report = FinetuneReport {
        target_block: target_block.to_string(),
        finetune_well: ft_well.well.clone(),
        curves,
    };
    write_json(&out.join("finetune_report.json"), &report)?;
    Ok(report)
}

/// One grid cell's result under one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub loss_mode: LossMode,
    pub fusion: FusionMode,
    pub mask: bool,
    pub seed: u64,
    pub probe_acc: f64,
    pub probe_macro_f1: f64,
    pub wall_time_s: f64,
}

/// Run the {loss mode} × {fusion mode} × {mask} grid with shared seeds.
pub fn run_ablate(config: &ExperimentConfig, out: &Path) -> Result<Vec<AblateRow>> {
    ensure_dir(out)?;
    config.echo(out)?;
    let mut rows = Vec::new();
    for &loss_mode in &config.ablate.loss_modes {
        for &fusion in &config.ablate.fusion_modes {
            for &mask in &config.ablate.masks {
                for &seed in &config.ablate.seeds {
                    let mut cell = config.clone();
                    cell.train.loss_mode = loss_mode;
                    cell.train.use_mask = mask;
                    cell.server.fusion = fusion;
                    cell.seed = seed;
                    let (_, _, summary) = train_federated(&cell)?;
                    log::info!(
                        "ablate {loss_mode}/{fusion}/mask={mask}/seed={seed}: \
                         macro F1 {:.4}",
                        summary.final_probe_macro_f1
                    );
                    rows.push(AblateRow {
                        loss_mode,
                        fusion,
                        mask,
                        seed,
                        probe_acc: summary.final_probe_acc,
                        probe_macro_f1: summary.final_probe_macro_f1,
                        wall_time_s: summary.wall_time_s,
                    });
                }
            }
        }
    }
    let path = out.join("ablate.csv");
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record([
        "loss_mode",
        "fusion",
        "mask",
        "seed",
        "probe_acc",
        "probe_macro_f1",
        "wall_time_s",
    ])?;
    for r in &rows {
        w.write_record([
            r.loss_mode.to_string(),
            r.fusion.to_string(),
            r.mask.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.probe_acc),
            format!("{:.6}", r.probe_macro_f1),
            format!("{:.3}", r.wall_time_s),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(rows)
}

/// Recount helper used by manifest verification: per-class record counts
/// of a CSV directory.
pub fn recount_directory(dir: &Path, schema: &LogSchema) -> Result<Vec<u64>> {
    let blocks = load_directory::<f64>(dir, schema)?;
    let mut counts = vec![0u64; schema.num_classes];
    for wells in blocks.values() {
        for well in wells {
            for rec in &well.records {
                counts[rec.label] += 1;
            }
        }
    }
    Ok(counts)
}
