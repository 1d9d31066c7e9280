//! Well-log ingestion, sliding-window sample construction, class
//! statistics, and train/test splitting by well.

pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::scalar::Real;

pub use synth::{synth_blocks, BlockSpec, GeneratorSpec};

/// Tolerance on depth spacing, in meters.
pub const SPACING_TOLERANCE: f64 = 1e-6;

/// Column layout and label space of a well-log CSV file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LogSchema {
    /// Name of the depth column.
    pub depth: String,
    /// Feature columns in model input order. The depth column may appear
    /// here as well, making depth an input feature.
    pub features: Vec<String>,
    /// Name of the integer class column.
    pub class: String,
    /// Expected depth spacing in meters.
    pub spacing: f64,
    pub num_classes: usize,
    /// Class id masked as non-reservoir in attention (dry layer).
    pub mask_class: usize,
}

impl Default for LogSchema {
    fn default() -> Self {
        LogSchema {
            depth: "DEPTH".into(),
            features: vec![
                "SP".into(),
                "CAL".into(),
                "AC".into(),
                "RA25".into(),
                "DEPTH".into(),
            ],
            class: "CLASS".into(),
            spacing: 0.125,
            num_classes: 5,
            mask_class: 1,
        }
    }
}

impl LogSchema {
    pub fn feature_dim(&self) -> usize {
        self.features.len()
    }
}

/// One depth sample of a well: feature vector plus class label.
#[derive(Debug, Clone, PartialEq)]
pub struct WellLogRecord<F> {
    pub depth: f64,
    pub features: Vec<F>,
    pub label: usize,
}

/// Depth-ordered log of one well.
#[derive(Debug, Clone, PartialEq)]
pub struct WellLogSeries<F> {
    pub well: String,
    pub block: String,
    pub spacing: f64,
    pub records: Vec<WellLogRecord<F>>,
}

impl<F: Real> WellLogSeries<F> {
    /// Checks strictly increasing depth with uniform spacing and finite
    /// features.
    pub fn validate(&self) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            if rec.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "well {}: non-finite feature in row {i}",
                    self.well
                )));
            }
            if i > 0 {
                let delta = rec.depth - self.records[i - 1].depth;
                if delta <= 0.0 {
                    return Err(Error::Format(format!(
                        "well {}: depth not strictly increasing at {:.4} m",
                        self.well, rec.depth
                    )));
                }
                if (delta - self.spacing).abs() > SPACING_TOLERANCE {
                    return Err(Error::Format(format!(
                        "well {}: spacing {delta:.6} m at {:.4} m, expected {:.6}",
                        self.well, rec.depth, self.spacing
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One training sample: a `k × d` window of features, the center record's
/// label, and the per-position non-reservoir mask.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample<F> {
    /// Row `i` holds the features of window position `i` (k rows, d cols).
    pub matrix: Tensor2<F>,
    pub label: usize,
    /// `true` marks a non-reservoir position to be masked in attention.
    pub mask: Vec<bool>,
    pub well: String,
    pub center_depth: f64,
}

/// Train/test windows of one client plus per-class train counts.
#[derive(Debug, Clone)]
pub struct DataSplit<F> {
    pub train: Vec<WindowSample<F>>,
    pub test: Vec<WindowSample<F>>,
    pub class_counts: Vec<u64>,
    pub num_classes: usize,
    pub test_well: String,
}

/// Parse the `<block>__<well>.csv` filename convention.
pub fn ids_from_filename(path: &Path) -> Result<(String, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format(format!("bad filename {}", path.display())))?;
    let (block, well) = stem.split_once("__").ok_or_else(|| {
        Error::Format(format!(
            "filename {stem} does not match <block>__<well>.csv"
        ))
    })?;
    Ok((block.to_string(), well.to_string()))
}

/// Load one well's log from CSV, validating header, depth order, and
/// spacing.
pub fn load_well_log<F: Real>(path: &Path, schema: &LogSchema) -> Result<WellLogSeries<F>> {
    let (block, well) = ids_from_filename(path)?;
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column {name}", path.display())))
    };
    let depth_idx = col(&schema.depth)?;
    let feature_idx: Vec<usize> = schema
        .features
        .iter()
        .map(|f| col(f))
        .collect::<Result<_>>()?;
    let class_idx = col(&schema.class)?;

    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |idx: usize| -> Result<f64> {
            rec.get(idx)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::Format(format!(
                        "row {row}, column {}: unparseable cell",
                        headers.get(idx).unwrap_or("?")
                    ))
                })
        };
        let depth = parse(depth_idx)?;
        let mut features = Vec::with_capacity(feature_idx.len());
        for (&idx, name) in feature_idx.iter().zip(&schema.features) {
            let v = parse(idx)?;
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "row {row}, column {name}: non-finite feature"
                )));
            }
            features.push(F::from_f64_lossy(v));
        }
        let label = rec
            .get(class_idx)
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("row {row}: bad class cell")))?;
        if label >= schema.num_classes {
            return Err(Error::Format(format!(
                "row {row}: class {label} out of {} classes",
                schema.num_classes
            )));
        }
        records.push(WellLogRecord {
            depth,
            features,
            label,
        });
    }
    // duplicated depths surface as a monotonicity failure
    for pair in records.windows(2) {
        if pair[1].depth == pair[0].depth {
            return Err(Error::Format(format!(
                "duplicated depth {:.4} m",
                pair[1].depth
            )));
        }
    }
    let series = WellLogSeries {
        well,
        block,
        spacing: schema.spacing,
        records,
    };
    series.validate()?;
    Ok(series)
}

/// Write one well's log as CSV in the schema's column order
/// (depth, features, class; duplicate depth feature omitted).
pub fn save_well_log<F: Real>(
    series: &WellLogSeries<F>,
    path: &Path,
    schema: &LogSchema,
) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut header = vec![schema.depth.clone()];
    let written_features: Vec<(usize, &String)> = schema
        .features
        .iter()
        .enumerate()
        .filter(|(_, name)| **name != schema.depth)
        .collect();
    header.extend(written_features.iter().map(|(_, n)| (*n).clone()));
    header.push(schema.class.clone());
    writer.write_record(&header)?;
    for rec in &series.records {
        let mut row = vec![format!("{:.3}", rec.depth)];
        for (idx, _) in &written_features {
            row.push(format!("{}", rec.features[*idx].to_f64_lossy()));
        }
        row.push(rec.label.to_string());
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Load every `<block>__<well>.csv` under a directory, grouped by block id.
pub fn load_directory<F: Real>(
    dir: &Path,
    schema: &LogSchema,
) -> Result<BTreeMap<String, Vec<WellLogSeries<F>>>> {
    let mut blocks: BTreeMap<String, Vec<WellLogSeries<F>>> = BTreeMap::new();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    for path in paths {
        let series = load_well_log(&path, schema)?;
        blocks.entry(series.block.clone()).or_default().push(series);
    }
    if blocks.is_empty() {
        return Err(Error::Argument(format!(
            "no <block>__<well>.csv files under {}",
            dir.display()
        )));
    }
    Ok(blocks)
}

/// Dense sliding windows of odd width `k`, stride 1, labeled by the
/// center record. Edge positions without a full window are dropped.
pub fn make_windows<F: Real>(
    series: &WellLogSeries<F>,
    k: usize,
    mask_class: usize,
) -> Result<Vec<WindowSample<F>>> {
    if k % 2 == 0 {
        return Err(Error::Argument(format!("window size {k} must be odd")));
    }
    if k > series.len() {
        return Err(Error::Argument(format!(
            "window size {k} exceeds series length {}",
            series.len()
        )));
    }
    let half = k / 2;
    let d = series.records.first().map_or(0, |r| r.features.len());
    let mut out = Vec::with_capacity(series.len() - k + 1);
    for center in half..series.len() - half {
        let window = &series.records[center - half..center + half + 1];
        let mut matrix = Tensor2::zeros(k, d);
        let mut mask = Vec::with_capacity(k);
        for (i, rec) in window.iter().enumerate() {
            matrix.row_mut(i).copy_from_slice(&rec.features);
            mask.push(rec.label == mask_class);
        }
        out.push(WindowSample {
            matrix,
            label: series.records[center].label,
            mask,
            well: series.well.clone(),
            center_depth: series.records[center].depth,
        });
    }
    Ok(out)
}

/// Per-class label counts; zero-count classes included.
pub fn class_histogram<F>(samples: &[WindowSample<F>], num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

/// Pick one well of a block as the test set, window everything, and
/// compute train class counts.
pub fn split_by_well<F: Real>(
    wells: &[WellLogSeries<F>],
    k: usize,
    mask_class: usize,
    num_classes: usize,
    seed: u64,
) -> Result<DataSplit<F>> {
    if wells.len() < 2 {
        return Err(Error::Argument(format!(
            "block needs at least 2 wells, got {}",
            wells.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..wells.len()).collect();
    order.shuffle(&mut rng);
    let test_idx = order[0];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, well) in wells.iter().enumerate() {
        let windows = make_windows(well, k, mask_class)?;
        if i == test_idx {
            test.extend(windows);
        } else {
            train.extend(windows);
        }
    }
    let class_counts = class_histogram(&train, num_classes);
    Ok(DataSplit {
        train,
        test,
        class_counts,
        num_classes,
        test_well: wells[test_idx].well.clone(),
    })
}

/// Per-feature mean and standard deviation, fitted on train windows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit<F: Real>(samples: &[WindowSample<F>]) -> Result<Self> {
        let d = samples
            .first()
            .map(|s| s.matrix.cols())
            .ok_or_else(|| Error::Argument("no samples to fit statistics on".into()))?;
        let mut sum = vec![0.0f64; d];
        let mut sumsq = vec![0.0f64; d];
        let mut n = 0usize;
        for s in samples {
            for i in 0..s.matrix.rows() {
                for (j, &v) in s.matrix.row(i).iter().enumerate() {
                    let v = v.to_f64_lossy();
                    sum[j] += v;
                    sumsq[j] += v * v;
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n as f64 - m * m).max(0.0);
                // guard constant features
                var.sqrt().max(1e-9)
            })
            .collect();
        Ok(FeatureStats { mean, std })
    }

    pub fn apply<F: Real>(&self, samples: &mut [WindowSample<F>]) {
        for s in samples {
            for i in 0..s.matrix.rows() {
                for j in 0..s.matrix.cols() {
                    let v = s.matrix.get(i, j).to_f64_lossy();
                    let z = (v - self.mean[j]) / self.std[j];
                    s.matrix.set(i, j, F::from_f64_lossy(z));
                }
            }
        }
    }
}

/// Z-score the split's features with train-fitted statistics; test
/// receives the train transform.
pub fn standardize_split<F: Real>(split: &mut DataSplit<F>) -> Result<FeatureStats> {
    let stats = FeatureStats::fit(&split.train)?;
    stats.apply(&mut split.train);
    stats.apply(&mut split.test);
    Ok(stats)
}
