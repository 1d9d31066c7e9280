//! The federated round loop: per-client local training, F1-gated model
//! filtering, dynamic metric-weighted fusion at the server, dispatch,
//! and fine-tuning on a held-out block.
//!
//! Only model parameters and scalar metrics cross the client→server
//! boundary: the server-side operations ([`fusion_weights`],
//! [`aggregate`]) accept [`ClientReport`]s and nothing else, and
//! [`ClientReport`] carries no window or series data.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSplit, WindowSample};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossConfig, LossMode};
use crate::metrics::{evaluate, AbsentClassRule};
use crate::model::{
    backward_from_probs, forward, predict, ModelParams,
};
use crate::numerics::{OptimConfig, OptimState, Tensor2};
use crate::scalar::Real;

/// Server-side fusion strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// F1-gated uploads fused with metric-derived weights.
    #[default]
    FilteredDynamic,
    /// Every client uploads every round; uniform weights.
    PlainAverage,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::FilteredDynamic => "filtered-dynamic",
            FusionMode::PlainAverage => "plain-average",
        })
    }
}

/// Local-training hyperparameters shared by every client.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Local epochs per federation round.
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub loss_mode: LossMode,
    pub beta: f64,
    /// Apply the non-reservoir attention mask during training.
    pub use_mask: bool,
    pub absent_rule: AbsentClassRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            optim: OptimConfig::default(),
            loss_mode: LossMode::CbF,
            beta: 0.9999,
            use_mask: true,
            absent_rule: AbsentClassRule::CountAsZero,
        }
    }
}

/// Server round loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub rounds: usize,
    pub fusion: FusionMode,
    /// Worker threads for client training; 0 means one per client.
    pub workers: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            rounds: 30,
            fusion: FusionMode::FilteredDynamic,
            workers: 0,
        }
    }
}

/// One client (block): its local split, current parameters, best
/// uploaded F1, and optimizer state.
pub struct ClientState<F> {
    pub id: String,
    pub split: DataSplit<F>,
    pub params: ModelParams<F>,
    /// Best F1 uploaded so far; non-decreasing across rounds.
    pub f_last: f64,
    optim: OptimState<F>,
    rng: ChaCha8Rng,
}

impl<F: Real> ClientState<F> {
    pub fn new(
        id: impl Into<String>,
        split: DataSplit<F>,
        params: ModelParams<F>,
        optim_config: OptimConfig,
        seed: u64,
    ) -> Self {
        let optim = OptimState::new(&params.tensors(), optim_config);
        ClientState {
            id: id.into(),
            split,
            params,
            f_last: 0.0,
            optim,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// One client's per-round upload decision with metric metadata. The
/// parameters are the only non-scalar payload; serialization carries
/// metadata only.
#[derive(Debug, Clone, Serialize)]
pub struct ClientReport<F> {
    pub client_id: String,
    pub accuracy: f64,
    pub f1: f64,
    /// Train-split window count.
    pub size: usize,
    pub uploaded: bool,
    #[serde(skip)]
    pub params: Option<ModelParams<F>>,
}

/// Per-uploaded-client fusion weights; positive, summing to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionWeights {
    pub client_ids: Vec<String>,
    pub weights: Vec<f64>,
    /// The pre-softmax combined scores, kept for diagnostics.
    pub scores: Vec<f64>,
}

/// One completed server round.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub uploaded: Vec<String>,
    pub weights: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_macro_f1: Option<f64>,
}

/// Append-only per-round log of the federation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundHistory {
    pub rounds: Vec<RoundRecord>,
}

fn one_hot<F: Real>(batch: &[&WindowSample<F>], classes: usize) -> Tensor2<F> {
    let mut t = Tensor2::zeros(batch.len(), classes);
    for (i, s) in batch.iter().enumerate() {
        t.set(i, s.label, F::one());
    }
    t
}

/// Train for one epoch of shuffled mini-batches, in place.
fn train_epoch<F: Real>(
    params: &mut ModelParams<F>,
    optim: &mut OptimState<F>,
    samples: &[&WindowSample<F>],
    loss_config: &LossConfig,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let classes = params.config.classes;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    for chunk in order.chunks(config.batch_size.max(1)) {
        let batch: Vec<&WindowSample<F>> = chunk.iter().map(|&i| samples[i]).collect();
        let targets = one_hot(&batch, classes);
        let (_, probs, mut cache) = forward(params, &batch, config.use_mask)?;
        let (_, dprobs) = combined_loss(&targets, &probs, loss_config)?;
        let grads = backward_from_probs(&mut cache, params, &dprobs)?;
        let grad_tensors = grads.tensors();
        let mut param_tensors = params.tensors_mut();
        optim.step(&mut param_tensors, &grad_tensors)?;
        params.bump_stamp();
    }
    Ok(())
}

/// Windows trainable under the current mask setting; fully-masked
/// windows cannot go through attention and are skipped with a log line.
fn trainable<'a, F: Real>(
    split: &'a DataSplit<F>,
    use_mask: bool,
    client: &str,
) -> Vec<&'a WindowSample<F>> {
    if !use_mask {
        return split.train.iter().collect();
    }
    let (usable, skipped): (Vec<_>, Vec<_>) = split
        .train
        .iter()
        .partition(|s| !s.mask.iter().all(|&m| m));
    if !skipped.is_empty() {
        log::warn!(
            "client {client}: skipping {} fully-masked windows",
            skipped.len()
        );
    }
    usable
}

/// Evaluate current parameters on the client's held-out well.
fn local_eval<F: Real>(
    state: &ClientState<F>,
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let refs: Vec<&WindowSample<F>> = state.split.test.iter().collect();
    let preds = predict(&state.params, &refs)?;
    let labels: Vec<usize> = state.split.test.iter().map(|s| s.label).collect();
    let eval = evaluate(&preds, &labels, state.split.num_classes, config.absent_rule)?;
    Ok((eval.accuracy, eval.macro_f1))
}

/// One client round: adopt the dispatched global parameters, train
/// locally, evaluate on the held-out well, and decide the upload.
///
/// With `filter_uploads` the model is uploaded only when its F1 strictly
/// exceeds the best previously uploaded value.
pub fn client_round<F: Real>(
    state: &mut ClientState<F>,
    global: &ModelParams<F>,
    config: &TrainConfig,
    filter_uploads: bool,
) -> Result<ClientReport<F>> {
    if state.split.train.is_empty() {
        return Err(Error::Argument(format!(
            "client {}: empty train split",
            state.id
        )));
    }
    state.params = global.clone();
    state.params.bump_stamp();
    let samples = trainable(&state.split, config.use_mask, &state.id);
    if samples.is_empty() {
        return Err(Error::Argument(format!(
            "client {}: every train window is fully masked",
            state.id
        )));
    }
    let loss_config = LossConfig::new(
        config.loss_mode,
        config.beta,
        state.split.class_counts.clone(),
    )?;
    for _ in 0..config.epochs {
        train_epoch(
            &mut state.params,
            &mut state.optim,
            &samples,
            &loss_config,
            config,
            &mut state.rng,
        )?;
    }
    let (accuracy, f1) = local_eval(state, config)?;
    let uploaded = if filter_uploads { f1 > state.f_last } else { true };
    if uploaded {
        state.f_last = state.f_last.max(f1);
    }
    Ok(ClientReport {
        client_id: state.id.clone(),
        accuracy,
        f1,
        size: state.split.train.len(),
        uploaded,
        params: uploaded.then(|| state.params.clone()),
    })
}

fn normalized_or_uniform(values: &[f64], metric: &str) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        log::warn!("fusion: zero total {metric}, substituting uniform term");
        return vec![1.0 / values.len() as f64; values.len()];
    }
    values.iter().map(|v| v / total).collect()
}

/// Metric-weighted fusion weights over the uploaded reports: normalize
/// accuracy, F1, and size per client, average the three terms, and
/// softmax across clients.
pub fn fusion_weights<F: Real>(reports: &[&ClientReport<F>]) -> Result<FusionWeights> {
    if reports.is_empty() {
        return Err(Error::Argument("no uploaded reports to fuse".into()));
    }
    if reports.iter().any(|r| !r.uploaded) {
        return Err(Error::Argument(
            "fusion over a report that was not uploaded".into(),
        ));
    }
    let acc = normalized_or_uniform(
        &reports.iter().map(|r| r.accuracy).collect::<Vec<_>>(),
        "accuracy",
    );
    let f1 = normalized_or_uniform(&reports.iter().map(|r| r.f1).collect::<Vec<_>>(), "f1");
    let size = normalized_or_uniform(
        &reports.iter().map(|r| r.size as f64).collect::<Vec<_>>(),
        "size",
    );
    let scores: Vec<f64> = (0..reports.len())
        .map(|i| (acc[i] + f1[i] + size[i]) / 3.0)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(FusionWeights {
        client_ids: reports.iter().map(|r| r.client_id.clone()).collect(),
        weights: exp.iter().map(|e| e / total).collect(),
        scores,
    })
}

/// Parameter-wise convex combination `Σ wᵢ θᵢ`, summed in the given
/// (client-id) order.
pub fn aggregate<F: Real>(models: &[&ModelParams<F>], weights: &[f64]) -> Result<ModelParams<F>> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} models for {} weights",
            models.len(),
            weights.len()
        )));
    }
    let mut fused = models[0].zeros_like();
    for (model, &w) in models.iter().zip(weights) {
        if model.num_scalars() != fused.num_scalars() {
            return Err(Error::Dimension(
                "aggregation over incongruent parameter sets".into(),
            ));
        }
        let wf = F::from_f64_lossy(w);
        for (acc, src) in fused.tensors_mut().into_iter().zip(model.tensors()) {
            acc.add_scaled(src, wf)?;
        }
    }
    fused.bump_stamp();
    Ok(fused)
}

/// Type-level boundary check: the only things a report carries to the
/// server are scalars and model parameters. Exercised as a runtime
/// assertion by [`run_federation`].
pub fn report_is_data_free<F: Real>(report: &ClientReport<F>) -> bool {
    match &report.params {
        // a parameter payload holds exactly the model's scalars
        Some(p) => p.num_scalars() == p.tensors().iter().map(|t| t.len()).sum::<usize>(),
        None => true,
    }
}

fn run_clients_parallel<F: Real>(
    clients: &mut [ClientState<F>],
    global: &ModelParams<F>,
    config: &TrainConfig,
    filter_uploads: bool,
    workers: usize,
) -> Result<Vec<ClientReport<F>>> {
    let n = clients.len();
    let workers = if workers == 0 { n } else { workers.min(n) };
    let chunk_size = n.div_ceil(workers);
    let mut results: Vec<Result<Vec<ClientReport<F>>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .chunks_mut(chunk_size)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter_mut()
                        .map(|c| client_round(c, global, config, filter_uploads))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        for h in handles {
            results.push(h.join().expect("client worker panicked"));
        }
    });
    let mut reports = Vec::with_capacity(n);
    for r in results {
        reports.extend(r?);
    }
    Ok(reports)
}

/// Run the full federation: N synchronous rounds of dispatch, local
/// training, gated upload, fusion, and aggregation. A round with zero
/// uploads leaves the global parameters untouched.
///
/// `probe` is harness-side instrumentation: an optional fixed window set
/// the global model is evaluated on after every round. It never reaches
/// any client or the fusion step.
pub fn run_federation<F: Real>(
    clients: &mut [ClientState<F>],
    global_init: ModelParams<F>,
    server: &ServerConfig,
    train: &TrainConfig,
    probe: Option<&[WindowSample<F>]>,
) -> Result<(ModelParams<F>, RoundHistory)> {
    if clients.is_empty() {
        return Err(Error::Argument("no clients".into()));
    }
    let filter = server.fusion == FusionMode::FilteredDynamic;
    let mut global = global_init;
    let mut history = RoundHistory::default();
    for round in 1..=server.rounds {
        let reports =
            run_clients_parallel(clients, &global, train, filter, server.workers)?;
        debug_assert!(reports.iter().all(report_is_data_free));
        let uploaded: Vec<&ClientReport<F>> =
            reports.iter().filter(|r| r.uploaded).collect();
        let mut weights_map = BTreeMap::new();
        if uploaded.is_empty() {
            log::info!("round {round}: no uploads, global model unchanged");
        } else {
            let fusion = match server.fusion {
                FusionMode::FilteredDynamic => fusion_weights(&uploaded)?,
                FusionMode::PlainAverage => FusionWeights {
                    client_ids: uploaded.iter().map(|r| r.client_id.clone()).collect(),
                    weights: vec![1.0 / uploaded.len() as f64; uploaded.len()],
                    scores: vec![0.0; uploaded.len()],
                },
            };
            let models: Vec<&ModelParams<F>> = uploaded
                .iter()
                .map(|r| r.params.as_ref().expect("uploaded report has params"))
                .collect();
            global = aggregate(&models, &fusion.weights)?;
            for (id, w) in fusion.client_ids.iter().zip(&fusion.weights) {
                weights_map.insert(id.clone(), *w);
            }
        }
        let (probe_acc, probe_macro_f1) = match probe {
            Some(samples) if !samples.is_empty() => {
                let refs: Vec<&WindowSample<F>> = samples.iter().collect();
                let preds = predict(&global, &refs)?;
                let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
                let eval = evaluate(
                    &preds,
                    &labels,
                    global.config.classes,
                    train.absent_rule,
                )?;
                (Some(eval.accuracy), Some(eval.macro_f1))
            }
            _ => (None, None),
        };
        history.rounds.push(RoundRecord {
            round,
            uploaded: uploaded.iter().map(|r| r.client_id.clone()).collect(),
            weights: weights_map,
            probe_acc,
            probe_macro_f1,
        });
    }
    Ok((global, history))
}

/// Continue training the fused model on one well's windows. The input
/// parameters are untouched; `on_round` observes the model after every
/// fine-tune round (round = one epoch over the well).
pub fn finetune_with<F: Real>(
    global: &ModelParams<F>,
    samples: &[WindowSample<F>],
    rounds: usize,
    config: &TrainConfig,
    seed: u64,
    mut on_round: impl FnMut(usize, &ModelParams<F>) -> Result<()>,
) -> Result<ModelParams<F>> {
    if samples.is_empty() {
        return Err(Error::Argument("empty fine-tune data".into()));
    }
    let mut params = global.clone();
    params.bump_stamp();
    let mut optim = OptimState::new(&params.tensors(), config.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = crate::data::class_histogram(samples, params.config.classes);
    let loss_config = LossConfig::new(config.loss_mode, config.beta, counts)?;
    let usable: Vec<&WindowSample<F>> = if config.use_mask {
        samples.iter().filter(|s| !s.mask.iter().all(|&m| m)).collect()
    } else {
        samples.iter().collect()
    };
    if usable.is_empty() {
        return Err(Error::Argument("every fine-tune window is fully masked".into()));
    }
    for round in 1..=rounds {
        train_epoch(&mut params, &mut optim, &usable, &loss_config, config, &mut rng)?;
        on_round(round, &params)?;
    }
    Ok(params)
}

/// [`finetune_with`] without the per-round observer.
pub fn finetune<F: Real>(
    global: &ModelParams<F>,
    samples: &[WindowSample<F>],
    rounds: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<ModelParams<F>> {
    finetune_with(global, samples, rounds, config, seed, |_, _| Ok(()))
}
