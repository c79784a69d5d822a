//! Hard-example-weighted training of the cache keys and both projection nets.
//!
//! Each step: forward the batch (training shots act as queries against the
//! cache), weight every sample by the mean sigmoid of its image/text affinity
//! gap, take the weighted softmax cross-entropy, backpropagate analytically
//! and apply Adam with a per-epoch cosine learning rate.
//!
//! The hard-example weights are constants in the backward pass.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, ForwardTrace, HyperParams, PhiOrder};
use crate::cache::{build_cache, CacheModel, ProjectionNet};
use crate::dataset::{rng_for, stream, EmbeddingBundle, FewShotSplit};
use crate::error::{Error, Result};
use crate::linalg::{self, cosine_rows_backward, log_softmax_rows, matmul_nt, sigmoid, softmax_rows, Matrix};

/// Parameters beyond this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// γ stays this far inside (0, 1) when reparameterized as a logit.
const GAMMA_CLAMP: f64 = 1e-6;

/// Trainable tensors. Gradients and Adam moments reuse this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `[NK × C]` trainable copy of the cache keys.
    pub cache_keys: Matrix,
    pub meta_net: ProjectionNet,
    pub img2txt: ProjectionNet,
    /// Present only when γ is learned.
    pub gamma_logit: Option<f64>,
}

/// Gradient of the loss, laid out like [`AdapterParams`].
pub type Gradients = AdapterParams;

impl AdapterParams {
    /// Cache keys copied from `cache`, nets drawn from `N(0, init_std²)` with
    /// zero bias, γ-logit at `logit(hyper.gamma)` when learned.
    pub fn init(bundle: &EmbeddingBundle, cache: &CacheModel, hyper: &HyperParams, hidden: Option<usize>, init_std: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::INIT);
        let c = bundle.feature_dim;
        let meta_net = ProjectionNet::random(c, hyper.d, hidden, init_std, &mut rng);
        let img2txt = ProjectionNet::random(c, hyper.d, hidden, init_std, &mut rng);
        let gamma_logit = hyper.learn_gamma.then(|| {
            let g = hyper.gamma.clamp(GAMMA_CLAMP, 1.0 - GAMMA_CLAMP);
            libm::log(g / (1.0 - g))
        });
        Self {
            cache_keys: cache.image_keys.clone(),
            meta_net,
            img2txt,
            gamma_logit,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cache_keys: Matrix::zeros(self.cache_keys.rows(), self.cache_keys.cols()),
            meta_net: self.meta_net.zeros_like(),
            img2txt: self.img2txt.zeros_like(),
            gamma_logit: self.gamma_logit.map(|_| 0.0),
        }
    }

    /// γ in effect: `sigmoid(g)` when learned, else the fixed hyperparameter.
    pub fn gamma(&self, hyper: &HyperParams) -> f64 {
        self.gamma_logit.map_or(hyper.gamma, sigmoid)
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.cache_keys.data()];
        out.extend(self.meta_net.slices());
        out.extend(self.img2txt.slices());
        if let Some(g) = &self.gamma_logit {
            out.push(core::slice::from_ref(g));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.cache_keys.data_mut()];
        out.extend(self.meta_net.slices_mut());
        out.extend(self.img2txt.slices_mut());
        if let Some(g) = &mut self.gamma_logit {
            out.push(core::slice::from_mut(g));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&x| x == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Zero each training sample's affinity to its own cache entry.
    pub mask_self: bool,
    /// Multiply the cross-entropy by `1/num_classes`.
    pub ce_class_scale: bool,
    /// Take `-ln` of the raw blended logits instead of a softmax.
    pub raw_log_ce: bool,
    /// Width of an optional tanh hidden layer in both nets.
    pub hidden_dim: Option<usize>,
    pub init_std: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            seed: 1,
            mask_self: false,
            ce_class_scale: false,
            raw_log_ce: false,
            hidden_dim: None,
            init_std: 0.02,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.init_std > 0.0) || !self.init_std.is_finite() {
            return Err(Error::InvalidConfig("init_std must be positive".into()));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::InvalidConfig("hidden layer width must be at least 1".into()));
        }
        Ok(())
    }

    fn loss(&self) -> LossOptions {
        LossOptions {
            ce_class_scale: self.ce_class_scale,
            raw_log_ce: self.raw_log_ce,
        }
    }
}

/// How the per-sample cross-entropy is formed from blended logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossOptions {
    pub ce_class_scale: bool,
    pub raw_log_ce: bool,
}

/// Per-sample weight: mean over cache columns of `sigmoid(|A_img − A_txt|)`.
pub fn hard_example_weights(a_image: &Matrix, a_text: &Matrix) -> Result<Vec<f64>> {
    let diff = linalg::abs_diff(a_image, a_text)?;
    let nk = diff.cols() as f64;
    Ok((0..diff.rows())
        .map(|b| diff.row(b).iter().map(|&d| sigmoid(d)).sum::<f64>() / nk)
        .collect())
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    for (index, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                num_classes: logits.cols(),
            });
        }
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok(())
}

/// Cross-entropy of each row against its label.
pub fn per_sample_ce(logits: &Matrix, labels: &[usize], opts: LossOptions) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    let scale = if opts.ce_class_scale { 1.0 / logits.cols() as f64 } else { 1.0 };
    let ce: Vec<f64> = if opts.raw_log_ce {
        labels
            .iter()
            .enumerate()
            .map(|(b, &y)| -scale * libm::log(logits.get(b, y)))
            .collect()
    } else {
        let logp = log_softmax_rows(logits);
        labels.iter().enumerate().map(|(b, &y)| -scale * logp.get(b, y)).collect()
    };
    Ok(ce)
}

/// `(1/B) Σ_b CE_b · w_b`.
pub fn weighted_ce_loss(logits: &Matrix, labels: &[usize], weights: &[f64], opts: LossOptions) -> Result<f64> {
    if weights.len() != labels.len() {
        return Err(Error::Shape {
            op: "weighted_ce_loss",
            left: (weights.len(), 1),
            right: (labels.len(), 1),
        });
    }
    let ce = per_sample_ce(logits, labels, opts)?;
    if ce.is_empty() {
        return Err(Error::EmptyInput { what: "batch" });
    }
    Ok(ce.iter().zip(weights).map(|(c, w)| c * w).sum::<f64>() / ce.len() as f64)
}

/// Loss statistics and gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub mean_ce: f64,
    pub mean_weight: f64,
    pub correct: usize,
    pub weights: Vec<f64>,
    pub grads: Gradients,
}

/// Queries, labels and self-mask columns for cache entries `batch`.
fn batch_inputs(bundle: &EmbeddingBundle, cache: &CacheModel, batch: &[usize]) -> Result<(Matrix, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput { what: "batch" });
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= cache.len()) {
        return Err(Error::Shape {
            op: "batch",
            left: (bad, 1),
            right: (cache.len(), 1),
        });
    }
    let rows: Vec<usize> = batch.iter().map(|&i| cache.source_indices[i]).collect();
    let queries = bundle.train_features.gather_rows(&rows)?;
    let labels = batch.iter().map(|&i| cache.entry_labels[i]).collect();
    Ok((queries, labels))
}

/// Weighted loss of a batch of cache entries with the hard-example weights
/// supplied (`None` computes them from the current parameters).
pub fn batch_loss(
    bundle: &EmbeddingBundle,
    cache: &CacheModel,
    params: &AdapterParams,
    hyper: &HyperParams,
    opts: &TrainOptions,
    batch: &[usize],
    weights: Option<&[f64]>,
) -> Result<f64> {
    let (queries, labels) = batch_inputs(bundle, cache, batch)?;
    let mask = opts.mask_self.then_some(batch);
    let trace = adapter::forward(bundle, cache, params, hyper, &queries, mask)?;
    let computed;
    let w = match weights {
        Some(w) => w,
        None => {
            computed = hard_example_weights(&trace.affinity.image_affinity, &trace.affinity.text_affinity)?;
            &computed
        }
    };
    weighted_ce_loss(&trace.logits.blended, &labels, w, opts.loss())
}

/// Forward plus analytic backward for the batch of cache entries `batch`.
pub fn backward(
    bundle: &EmbeddingBundle,
    cache: &CacheModel,
    params: &AdapterParams,
    hyper: &HyperParams,
    opts: &TrainOptions,
    batch: &[usize],
) -> Result<BatchOutcome> {
    let (queries, labels) = batch_inputs(bundle, cache, batch)?;
    let mask = opts.mask_self.then_some(batch);
    let trace = adapter::forward(bundle, cache, params, hyper, &queries, mask)?;
    let weights = hard_example_weights(&trace.affinity.image_affinity, &trace.affinity.text_affinity)?;
    let lopts = opts.loss();
    let ce = per_sample_ce(&trace.logits.blended, &labels, lopts)?;
    let bsz = labels.len() as f64;
    let loss = ce.iter().zip(&weights).map(|(c, w)| c * w).sum::<f64>() / bsz;
    let mean_ce = ce.iter().sum::<f64>() / bsz;
    let mean_weight = weights.iter().sum::<f64>() / bsz;
    let correct = adapter::argmax_rows(&trace.logits.blended)
        .iter()
        .zip(&labels)
        .filter(|(p, y)| p == y)
        .count();

    let g_logits = logits_grad(&trace.logits.blended, &labels, &weights, lopts)?;
    let grads = backprop(bundle, cache, params, hyper, &trace, &g_logits, mask)?;
    Ok(BatchOutcome {
        loss,
        mean_ce,
        mean_weight,
        correct,
        weights,
        grads,
    })
}

/// `∂L/∂logits` with the weights held constant.
fn logits_grad(logits: &Matrix, labels: &[usize], weights: &[f64], opts: LossOptions) -> Result<Matrix> {
    let bsz = labels.len() as f64;
    let scale = if opts.ce_class_scale { 1.0 / logits.cols() as f64 } else { 1.0 };
    if opts.raw_log_ce {
        let mut g = Matrix::zeros(logits.rows(), logits.cols());
        for (b, &y) in labels.iter().enumerate() {
            g.set(b, y, -scale * weights[b] / (bsz * logits.get(b, y)));
        }
        Ok(g)
    } else {
        let mut g = softmax_rows(logits);
        for (b, &y) in labels.iter().enumerate() {
            let f = scale * weights[b] / bsz;
            let row = g.row_mut(b);
            row[y] -= 1.0;
            row.iter_mut().for_each(|x| *x *= f);
        }
        Ok(g)
    }
}

fn backprop(
    bundle: &EmbeddingBundle,
    cache: &CacheModel,
    params: &AdapterParams,
    hyper: &HyperParams,
    trace: &ForwardTrace,
    g_logits: &Matrix,
    mask: Option<&[usize]>,
) -> Result<Gradients> {
    let g_cache = linalg::scale(g_logits, hyper.alpha);
    let mut g_fused = match hyper.phi_order {
        PhiOrder::PostAggregate => {
            // d exp(-β(1-s))/ds = β·exp(..)
            let g_s = linalg::hadamard(&linalg::scale(&trace.logits.cache_logits, hyper.beta), &g_cache)?;
            matmul_nt(&g_s, &cache.values)?
        }
        PhiOrder::PreAggregate => {
            let g_phi = matmul_nt(&g_cache, &cache.values)?;
            linalg::hadamard(&linalg::scale(&trace.sharpen_input, hyper.beta), &g_phi)?
        }
    };
    if let Some(mask) = mask {
        for (b, &col) in mask.iter().enumerate() {
            g_fused.set(b, col, 0.0);
        }
    }

    let gamma = trace.gamma;
    let AffinityRefs { img, txt } = AffinityRefs::of(trace);
    let gamma_logit = params.gamma_logit.map(|_| {
        let gap = linalg::sub(img, txt).expect("affinities share a shape");
        g_fused.dot(&gap).expect("same shape") * gamma * (1.0 - gamma)
    });

    let g_img = linalg::scale(&g_fused, gamma);
    let g_txt = linalg::scale(&g_fused, 1.0 - gamma);

    let (_, g_keys) = cosine_rows_backward(&trace.normalized_queries, &params.cache_keys, &g_img)?;
    let (g_query_text, g_entry_keys) = cosine_rows_backward(&trace.query_text, &trace.entry_text_keys, &g_txt)?;

    let mut g_class_text = Matrix::zeros(bundle.num_classes, trace.class_text.cols());
    for (i, &label) in cache.entry_labels.iter().enumerate() {
        for (o, g) in g_class_text.row_mut(label).iter_mut().zip(g_entry_keys.row(i)) {
            *o += g;
        }
    }
    Ok(Gradients {
        cache_keys: g_keys,
        meta_net: params.meta_net.backward(&trace.meta_trace, &g_class_text)?,
        img2txt: params.img2txt.backward(&trace.query_trace, &g_query_text)?,
        gamma_logit,
    })
}

struct AffinityRefs<'a> {
    img: &'a Matrix,
    txt: &'a Matrix,
}

impl<'a> AffinityRefs<'a> {
    fn of(trace: &'a ForwardTrace) -> Self {
        Self {
            img: &trace.affinity.image_affinity,
            txt: &trace.affinity.text_affinity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: AdapterParams,
    pub second_moment: AdapterParams,
    pub step: u64,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &AdapterParams, base_lr: f64, total_epochs: usize) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            base_lr,
            total_epochs,
            config: AdamConfig::default(),
        }
    }

    /// Learning rate for `epoch` under the cosine schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(self.base_lr, epoch, self.total_epochs)
    }
}

/// `base · ½(1 + cos(π·t/T))`.
pub fn cosine_lr(base_lr: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t as f64 / total as f64))
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(params: &mut AdapterParams, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(beta1, t as f64);
    let c2 = 1.0 - libm::pow(beta2, t as f64);
    let g = grads.slices();
    let mut p = params.slices_mut();
    let mut m = state.first_moment.slices_mut();
    let mut v = state.second_moment.slices_mut();
    if g.len() != p.len() || m.len() != p.len() || g.iter().zip(&p).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape {
            op: "adam_step",
            left: (p.len(), p.iter().map(|s| s.len()).sum()),
            right: (g.len(), g.iter().map(|s| s.len()).sum()),
        });
    }
    for (((p, g), m), v) in p.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
        for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_weighted_loss: f64,
    pub mean_ce: f64,
    pub train_accuracy: f64,
    pub mean_hard_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_test_accuracy: f64,
    pub hyper: HyperParams,
    pub options: TrainOptions,
    pub shots: usize,
    pub split_seed: u64,
    pub seed: u64,
    pub final_gamma: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AdapterParams,
    pub cache: CacheModel,
    pub report: TrainReport,
}

/// Trains from a fresh initialization. Deterministic in `opts.seed`.
pub fn train(bundle: &EmbeddingBundle, split: &FewShotSplit, hyper: &HyperParams, opts: &TrainOptions) -> Result<TrainOutcome> {
    hyper.validate()?;
    opts.validate()?;
    let cache = build_cache(bundle, split)?;
    let mut params = AdapterParams::init(bundle, &cache, hyper, opts.hidden_dim, opts.init_std, opts.seed);
    let mut state = OptimizerState::new(&params, opts.lr, opts.epochs);
    let mut rng = rng_for(opts.seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..cache.len()).collect();
    let mut records = Vec::with_capacity(opts.epochs);
    let mut step = 0usize;

    for epoch in 0..opts.epochs {
        let lr = state.lr_at(epoch);
        shuffle(&mut order, &mut rng);
        let (mut loss_sum, mut ce_sum, mut w_sum, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(opts.batch_size) {
            let out = backward(bundle, &cache, &params, hyper, opts, batch)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: "non-finite loss",
                });
            }
            if !out.grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: "non-finite gradient",
                });
            }
            adam_step(&mut params, &out.grads, &mut state, lr)?;
            if !params.is_finite() || params.max_abs() > DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: "parameter magnitude exceeded limit",
                });
            }
            let n = batch.len() as f64;
            loss_sum += out.loss * n;
            ce_sum += out.mean_ce * n;
            w_sum += out.mean_weight * n;
            correct += out.correct;
            step += 1;
        }
        let total = cache.len() as f64;
        records.push(EpochRecord {
            epoch,
            lr,
            mean_weighted_loss: loss_sum / total,
            mean_ce: ce_sum / total,
            train_accuracy: correct as f64 / total,
            mean_hard_weight: w_sum / total,
        });
    }

    let final_test_accuracy = crate::eval::evaluate(bundle, &cache, &params, hyper, crate::eval::EvalSplit::Test)?;
    let report = TrainReport {
        epochs: records,
        final_test_accuracy,
        hyper: *hyper,
        options: *opts,
        shots: split.shots,
        split_seed: split.seed,
        seed: opts.seed,
        final_gamma: params.gamma(hyper),
    };
    Ok(TrainOutcome { params, cache, report })
}

/// Fisher-Yates driven by the training RNG.
fn shuffle<R: rand::Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
