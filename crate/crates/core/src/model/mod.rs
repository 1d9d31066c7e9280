//! The client model: input projection, N encoder layers with mask
//! attention, feed-forward sublayers with skip connections and layer
//! normalization, mean pooling, and a fully connected softmax head.
//!
//! Masked positions are excluded as attention keys only: they still act
//! as queries and stay in the residual stream, so non-reservoir samples
//! inform the window without being attended to.

mod checkpoint;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::numerics::{masked_softmax_rows, softmax_rows, NodeId, Tape, Tensor2};
use crate::scalar::Real;

pub use checkpoint::{load_checkpoint, save_checkpoint};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of encoder layers N.
    pub layers: usize,
    /// Representation width.
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Features per depth sample (d).
    pub feat_dim: usize,
    /// Window length (k).
    pub window: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 5,
            width: 32,
            heads: 1,
            ffn_width: 64,
            feat_dim: 5,
            window: 49,
            classes: 5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.classes < 2 {
            return Err(Error::Argument(format!(
                "need layers >= 1 and classes >= 2, got {} and {}",
                self.layers, self.classes
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Argument(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.width == 0 || self.ffn_width == 0 || self.feat_dim == 0 || self.window == 0 {
            return Err(Error::Argument("zero-sized model dimension".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Weights of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Tensor2<F>,
    pub wk: Tensor2<F>,
    pub wv: Tensor2<F>,
    pub wo: Tensor2<F>,
    pub ln1_gain: Tensor2<F>,
    pub ln1_bias: Tensor2<F>,
    pub ffn_w1: Tensor2<F>,
    pub ffn_b1: Tensor2<F>,
    pub ffn_w2: Tensor2<F>,
    pub ffn_b2: Tensor2<F>,
    pub ln2_gain: Tensor2<F>,
    pub ln2_bias: Tensor2<F>,
}

/// Complete parameter set of the encoder and head.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub input_w: Tensor2<F>,
    pub input_b: Tensor2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub head_w: Tensor2<F>,
    pub head_b: Tensor2<F>,
    stamp: u64,
}

impl<F: Real> ModelParams<F> {
    /// Identity of this parameter snapshot; changes on every update.
    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Mark the parameters as a new snapshot (after in-place updates).
    pub fn bump_stamp(&mut self) {
        self.stamp = fresh_stamp();
    }

    /// All tensors in the fixed serialization order.
    pub fn tensors(&self) -> Vec<&Tensor2<F>> {
        let mut out = vec![&self.input_w, &self.input_b];
        for l in &self.layers {
            out.extend([
                &l.wq, &l.wk, &l.wv, &l.wo, &l.ln1_gain, &l.ln1_bias, &l.ffn_w1, &l.ffn_b1,
                &l.ffn_w2, &l.ffn_b2, &l.ln2_gain, &l.ln2_bias,
            ]);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2<F>> {
        let mut out: Vec<&mut Tensor2<F>> = vec![&mut self.input_w, &mut self.input_b];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ffn_w1,
                &mut l.ffn_b1,
                &mut l.ffn_w2,
                &mut l.ffn_b2,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Same shapes, all zeros. Used as a gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            for v in t.data_mut() {
                *v = F::zero();
            }
        }
        z.bump_stamp();
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<F> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_from_flat(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Dimension(format!(
                "{} scalars for a {}-parameter model",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.bump_stamp();
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

fn xavier<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<F> = (0..rows * cols)
        .map(|_| F::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("xavier shape")
}

/// Scaled-uniform initialization with bound √(6/(fan_in+fan_out));
/// layer-norm gains start at 1, biases at 0. Deterministic per seed.
pub fn init_model<F: Real>(config: &ModelConfig) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let w = config.width;
    let ones = |cols: usize| {
        Tensor2::from_vec(1, cols, vec![F::one(); cols]).expect("ones shape")
    };
    let layers = (0..config.layers)
        .map(|_| LayerParams {
            wq: xavier(&mut rng, w, w),
            wk: xavier(&mut rng, w, w),
            wv: xavier(&mut rng, w, w),
            wo: xavier(&mut rng, w, w),
            ln1_gain: ones(w),
            ln1_bias: Tensor2::zeros(1, w),
            ffn_w1: xavier(&mut rng, w, config.ffn_width),
            ffn_b1: Tensor2::zeros(1, config.ffn_width),
            ffn_w2: xavier(&mut rng, config.ffn_width, w),
            ffn_b2: Tensor2::zeros(1, w),
            ln2_gain: ones(w),
            ln2_bias: Tensor2::zeros(1, w),
        })
        .collect();
    Ok(ModelParams {
        input_w: xavier(&mut rng, config.feat_dim, w),
        input_b: Tensor2::zeros(1, w),
        layers,
        head_w: xavier(&mut rng, w, config.classes),
        head_b: Tensor2::zeros(1, config.classes),
        config: config.clone(),
        stamp: fresh_stamp(),
    })
}

/// Scaled dot-product attention with key masking, outside the tape.
///
/// `scores = QKᵀ/√d_k`; masked key columns receive exactly zero weight.
pub fn masked_attention<F: Real>(
    q: &Tensor2<F>,
    k: &Tensor2<F>,
    v: &Tensor2<F>,
    mask: &[bool],
    d_k: usize,
) -> Result<(Tensor2<F>, Tensor2<F>)> {
    if q.rows() != k.rows() || k.rows() != v.rows() || mask.len() != k.rows() {
        return Err(Error::Dimension(format!(
            "attention rows q={} k={} v={} mask={}",
            q.rows(),
            k.rows(),
            v.rows(),
            mask.len()
        )));
    }
    let scale = F::from_f64_lossy(1.0 / (d_k as f64).sqrt());
    let scores = q.matmul_nt(k)?.scale(scale);
    let weights = masked_softmax_rows(&scores, mask)?;
    let output = weights.matmul(v)?;
    Ok((output, weights))
}

/// Saved forward state: the tape, per-sample output nodes, attention
/// weights per layer, parameter leaves, and the masks used.
pub struct ForwardCache<F> {
    tape: Tape<F>,
    config: ModelConfig,
    param_ids: Vec<NodeId>,
    logits_ids: Vec<NodeId>,
    /// `attention[sample][layer][head]`, each `k × k`.
    pub attention: Vec<Vec<Vec<Tensor2<F>>>>,
    /// Mask rows actually applied (all-false when masking is off).
    pub masks: Vec<Vec<bool>>,
    params_stamp: u64,
    consumed: bool,
}

/// Run the encoder over a batch of windows.
///
/// `use_mask` selects whether each sample's non-reservoir mask is applied;
/// inference runs unmasked because labels are unknown there.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    batch: &[&WindowSample<F>],
    use_mask: bool,
) -> Result<(Tensor2<F>, Tensor2<F>, ForwardCache<F>)> {
    let cfg = &params.config;
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    for s in batch {
        if s.matrix.shape() != (cfg.window, cfg.feat_dim) {
            return Err(Error::Argument(format!(
                "window {:?} does not match configured {}x{}",
                s.matrix.shape(),
                cfg.window,
                cfg.feat_dim
            )));
        }
    }
    let mut tape = Tape::new();
    let param_ids: Vec<NodeId> = params
        .tensors()
        .into_iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    // leaf order mirrors ModelParams::tensors()
    let mut it = param_ids.iter().copied();
    let input_w = it.next().unwrap();
    let input_b = it.next().unwrap();
    let mut layer_ids = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let ids: Vec<NodeId> = (&mut it).take(12).collect();
        layer_ids.push(ids);
    }
    let head_w = it.next().unwrap();
    let head_b = it.next().unwrap();

    let head_dim = cfg.head_dim();
    let scale = F::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
    let mut logits_ids = Vec::with_capacity(batch.len());
    let mut attention = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    let mut logits = Tensor2::zeros(batch.len(), cfg.classes);
    let mut probs = Tensor2::zeros(batch.len(), cfg.classes);

    for (bi, sample) in batch.iter().enumerate() {
        let mask: Vec<bool> = if use_mask {
            sample.mask.clone()
        } else {
            vec![false; cfg.window]
        };
        let x = tape.leaf(sample.matrix.clone());
        let proj = tape.matmul(x, input_w)?;
        let mut h = tape.add_row(proj, input_b)?;
        let mut sample_attention = Vec::with_capacity(cfg.layers);
        for ids in &layer_ids {
            let [wq, wk, wv, wo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b]: [NodeId; 12] =
                ids.as_slice().try_into().expect("12 tensors per layer");
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut head_weights = Vec::with_capacity(cfg.heads);
            for hi in 0..cfg.heads {
                let start = hi * head_dim;
                let qh = tape.slice_cols(q, start, head_dim)?;
                let kh = tape.slice_cols(k, start, head_dim)?;
                let vh = tape.slice_cols(v, start, head_dim)?;
                let raw = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(raw, scale);
                let att = if mask.iter().any(|&m| m) {
                    tape.masked_softmax_rows(scores, &mask)?
                } else {
                    tape.softmax_rows(scores)
                };
                head_weights.push(tape.value(att).clone());
                heads.push(tape.matmul(att, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn_out = tape.matmul(merged, wo)?;
            let res1 = tape.add(h, attn_out)?;
            h = tape.layer_norm(res1, ln1_g, ln1_b)?;
            let f1 = tape.matmul(h, w1)?;
            let f1b = tape.add_row(f1, b1)?;
            let act = tape.relu(f1b);
            let f2 = tape.matmul(act, w2)?;
            let f2b = tape.add_row(f2, b2)?;
            let res2 = tape.add(h, f2b)?;
            h = tape.layer_norm(res2, ln2_g, ln2_b)?;
            sample_attention.push(head_weights);
        }
        let pooled = tape.mean_rows(h);
        let raw_logits = tape.matmul(pooled, head_w)?;
        let logit_id = tape.add_row(raw_logits, head_b)?;
        let prob_id = tape.softmax_rows(logit_id);
        logits.row_mut(bi).copy_from_slice(tape.value(logit_id).row(0));
        probs.row_mut(bi).copy_from_slice(tape.value(prob_id).row(0));
        logits_ids.push(logit_id);
        attention.push(sample_attention);
        masks.push(mask);
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits in forward pass".into()));
    }
    let cache = ForwardCache {
        tape,
        config: cfg.clone(),
        param_ids,
        logits_ids,
        attention,
        masks,
        params_stamp: params.stamp,
        consumed: false,
    };
    Ok((logits, probs, cache))
}

impl<F: Real> ForwardCache<F> {
    /// Stamp of the parameters this cache was built from.
    pub fn params_stamp(&self) -> u64 {
        self.params_stamp
    }

    fn take(&mut self, params_stamp: u64) -> Result<()> {
        if self.consumed {
            return Err(Error::State("forward cache already consumed".into()));
        }
        if self.params_stamp != params_stamp {
            return Err(Error::State(
                "forward cache is stale: parameters changed since forward".into(),
            ));
        }
        self.consumed = true;
        Ok(())
    }
}

fn collect_grads<F: Real>(
    cache: &ForwardCache<F>,
    template: &ModelParams<F>,
) -> ModelParams<F> {
    let mut grads = template.zeros_like();
    for (t, id) in grads.tensors_mut().into_iter().zip(&cache.param_ids) {
        *t = cache.tape.grad(*id);
    }
    grads
}

/// Exact reverse-mode gradients of `Σ logits ⊙ dlogits` with respect to
/// every parameter. Consumes the cache.
pub fn backward<F: Real>(
    cache: &mut ForwardCache<F>,
    params: &ModelParams<F>,
    dlogits: &Tensor2<F>,
) -> Result<ModelParams<F>> {
    cache.take(params.stamp)?;
    if dlogits.shape() != (cache.logits_ids.len(), cache.config.classes) {
        return Err(Error::Dimension(format!(
            "dlogits {:?} for {} samples x {} classes",
            dlogits.shape(),
            cache.logits_ids.len(),
            cache.config.classes
        )));
    }
    let seeds: Vec<(NodeId, Tensor2<F>)> = cache
        .logits_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, Tensor2::row_vector(dlogits.row(i))))
        .collect();
    cache.tape.backward(&seeds)?;
    Ok(collect_grads(cache, params))
}

/// Like [`backward`] but seeded at the probability outputs with `dL/dp`;
/// the softmax Jacobian is applied by the tape.
pub fn backward_from_probs<F: Real>(
    cache: &mut ForwardCache<F>,
    params: &ModelParams<F>,
    dprobs: &Tensor2<F>,
) -> Result<ModelParams<F>> {
    cache.take(params.stamp)?;
    if dprobs.shape() != (cache.logits_ids.len(), cache.config.classes) {
        return Err(Error::Dimension(format!(
            "dprobs {:?} for {} samples x {} classes",
            dprobs.shape(),
            cache.logits_ids.len(),
            cache.config.classes
        )));
    }
    // prob nodes sit right after their logit nodes; recompute them from
    // the logits to keep the cache layout simple
    let seeds: Vec<(NodeId, Tensor2<F>)> = cache
        .logits_ids
        .iter()
        .enumerate()
        .map(|(i, &logit_id)| {
            let p = softmax_rows(cache.tape.value(logit_id));
            let drow = Tensor2::row_vector(dprobs.row(i));
            // chain through softmax: dlogit = p ⊙ (dp − ⟨dp, p⟩)
            let dot: F = drow
                .data()
                .iter()
                .zip(p.data())
                .map(|(&d, &pv)| d * pv)
                .sum();
            let dlogit = Tensor2::row_vector(
                &p.data()
                    .iter()
                    .zip(drow.data())
                    .map(|(&pv, &d)| pv * (d - dot))
                    .collect::<Vec<F>>(),
            );
            (logit_id, dlogit)
        })
        .collect();
    cache.tape.backward(&seeds)?;
    Ok(collect_grads(cache, params))
}

/// Argmax class per sample; ties break toward the smaller class id.
pub fn predict<F: Real>(params: &ModelParams<F>, batch: &[&WindowSample<F>]) -> Result<Vec<usize>> {
    let (_, probs, _) = forward(params, batch, false)?;
    Ok(argmax_rows(&probs))
}

/// Row-wise argmax with smaller-index tie-breaking.
pub fn argmax_rows<F: Real>(probs: &Tensor2<F>) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
