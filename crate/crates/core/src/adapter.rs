//! Forward pass: image and text affinities against the cache, γ-fusion,
//! cache logits and the residual blend with the zero-shot classifier.
//!
//! Queries are L2-normalized once and the normalized rows feed the image
//! cache, Img2TxtNet and the zero-shot product.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheModel, ProjectionNet, ProjectionTrace};
use crate::dataset::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::linalg::{self, cosine_rows, l2_normalize_rows, matmul, Matrix};
use crate::training::AdapterParams;

/// Where the `exp(-β(1 - ·))` sharpening is applied relative to the
/// aggregation with the one-hot values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiOrder {
    /// `exp(-β(1 - A·L))`
    #[default]
    PostAggregate,
    /// `exp(-β(1 - A))·L`
    PreAggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Image/text affinity mix, `A = γ·A_img + (1-γ)·A_txt`.
    pub gamma: f64,
    /// Residual ratio on the cache logits.
    pub alpha: f64,
    /// Sharpness of the cache logits.
    pub beta: f64,
    /// Width of the shared text space.
    pub d: usize,
    /// Train γ through `γ = sigmoid(g)`.
    pub learn_gamma: bool,
    pub phi_order: PhiOrder,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            alpha: 1.2,
            beta: 3.5,
            d: 256,
            learn_gamma: false,
            phi_order: PhiOrder::PostAggregate,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("d must be at least 1".into()));
        }
        Ok(())
    }
}

/// Image, text and fused affinities, each `[B × NK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityPair {
    pub image_affinity: Matrix,
    pub text_affinity: Matrix,
    pub fused: Matrix,
}

/// Cache, zero-shot and blended logits, each `[B × N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub cache_logits: Matrix,
    pub zeroshot_logits: Matrix,
    pub blended: Matrix,
}

/// Cosine of every query against every cache key.
pub fn image_affinity(query_features: &Matrix, keys: &Matrix) -> Result<Matrix> {
    cosine_rows(query_features, keys)
}

/// `cos(Img2TxtNet(q), MetaNet(text[label_i]))` for every query and entry.
pub fn text_affinity(
    meta_net: &ProjectionNet,
    img2txt: &ProjectionNet,
    bundle: &EmbeddingBundle,
    cache: &CacheModel,
    query_features: &Matrix,
) -> Result<Matrix> {
    check_nets(meta_net, img2txt, bundle.feature_dim)?;
    let q = crate::cache::project_queries(img2txt, &l2_normalize_rows(query_features)?)?;
    let keys = crate::cache::text_entry_keys(meta_net, bundle, cache)?;
    cosine_rows(&q, &keys)
}

fn check_nets(meta_net: &ProjectionNet, img2txt: &ProjectionNet, c: usize) -> Result<()> {
    if meta_net.input_dim() != c
        || img2txt.input_dim() != c
        || meta_net.output_dim() != img2txt.output_dim()
    {
        return Err(Error::Shape {
            op: "projection_nets",
            left: (meta_net.input_dim(), meta_net.output_dim()),
            right: (img2txt.input_dim(), img2txt.output_dim()),
        });
    }
    Ok(())
}

/// `γ·a_image + (1-γ)·a_text`.
pub fn fuse(a_image: &Matrix, a_text: &Matrix, gamma: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if a_image.shape() != a_text.shape() {
        return Err(Error::Shape {
            op: "fuse",
            left: a_image.shape(),
            right: a_text.shape(),
        });
    }
    let mut out = a_image.clone();
    for (o, &t) in out.data_mut().iter_mut().zip(a_text.data()) {
        *o = gamma * *o + (1.0 - gamma) * t;
    }
    Ok(out)
}

#[inline]
fn sharpen(x: f64, beta: f64) -> f64 {
    libm::exp(-beta * (1.0 - x))
}

/// Cache logits from fused affinities `a` and one-hot `values`.
pub fn cache_logits(a: &Matrix, values: &Matrix, beta: f64, order: PhiOrder) -> Result<Matrix> {
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("beta must be > 0, got {beta}")));
    }
    match order {
        PhiOrder::PostAggregate => Ok(matmul(a, values)?.map(|s| sharpen(s, beta))),
        PhiOrder::PreAggregate => matmul(&a.map(|x| sharpen(x, beta)), values),
    }
}

/// `α·cache_logits + normalize(queries)·W_c`.
pub fn blend(cache_logits: &Matrix, query_features: &Matrix, zeroshot_weights: &Matrix, alpha: f64) -> Result<Matrix> {
    let zs = matmul(&l2_normalize_rows(query_features)?, zeroshot_weights)?;
    blend_with_zeroshot(cache_logits, &zs, alpha)
}

fn blend_with_zeroshot(cache_logits: &Matrix, zeroshot_logits: &Matrix, alpha: f64) -> Result<Matrix> {
    let mut out = zeroshot_logits.clone();
    out.axpy(alpha, cache_logits)?;
    Ok(out)
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub normalized_queries: Matrix,
    pub class_text: Matrix,
    pub(crate) meta_trace: ProjectionTrace,
    pub entry_text_keys: Matrix,
    pub query_text: Matrix,
    pub(crate) query_trace: ProjectionTrace,
    pub affinity: AffinityPair,
    /// γ actually used (after the sigmoid when γ is learned).
    pub gamma: f64,
    /// `A·L` (post-aggregate) or `exp(-β(1-A))` (pre-aggregate).
    pub sharpen_input: Matrix,
    pub logits: Logits,
}

/// Full forward pass. `self_mask[b]`, when given, is the cache column of the
/// batch row's own entry; its fused affinity is zeroed.
pub fn forward(
    bundle: &EmbeddingBundle,
    cache: &CacheModel,
    params: &AdapterParams,
    hyper: &HyperParams,
    query_features: &Matrix,
    self_mask: Option<&[usize]>,
) -> Result<ForwardTrace> {
    hyper.validate()?;
    check_nets(&params.meta_net, &params.img2txt, bundle.feature_dim)?;
    if params.cache_keys.shape() != (cache.len(), bundle.feature_dim) || cache.num_classes() != bundle.num_classes {
        return Err(Error::Shape {
            op: "forward_cache",
            left: params.cache_keys.shape(),
            right: (cache.len(), bundle.feature_dim),
        });
    }
    let xn = l2_normalize_rows(query_features)?;
    let a_img = image_affinity(&xn, &params.cache_keys)?;

    let (class_text, meta_trace) = params.meta_net.forward_traced(&bundle.text_features)?;
    let entry_text_keys = class_text.gather_rows(&cache.entry_labels)?;
    let (query_text, query_trace) = params.img2txt.forward_traced(&xn)?;
    let a_txt = cosine_rows(&query_text, &entry_text_keys)?;

    let gamma = params.gamma(hyper);
    let mut fused = fuse(&a_img, &a_txt, gamma)?;
    if let Some(mask) = self_mask {
        if mask.len() != fused.rows() {
            return Err(Error::Shape {
                op: "self_mask",
                left: fused.shape(),
                right: (mask.len(), 1),
            });
        }
        for (b, &col) in mask.iter().enumerate() {
            fused.set(b, col, 0.0);
        }
    }

    let (sharpen_input, cache_l) = match hyper.phi_order {
        PhiOrder::PostAggregate => {
            let s = matmul(&fused, &cache.values)?;
            let c = s.map(|x| sharpen(x, hyper.beta));
            (s, c)
        }
        PhiOrder::PreAggregate => {
            let phi = fused.map(|x| sharpen(x, hyper.beta));
            let c = matmul(&phi, &cache.values)?;
            (phi, c)
        }
    };
    let zeroshot_logits = matmul(&xn, &bundle.zeroshot_weights)?;
    let blended = blend_with_zeroshot(&cache_l, &zeroshot_logits, hyper.alpha)?;

    Ok(ForwardTrace {
        normalized_queries: xn,
        class_text,
        meta_trace,
        entry_text_keys,
        query_text,
        query_trace,
        affinity: AffinityPair {
            image_affinity: a_img,
            text_affinity: a_txt,
            fused,
        },
        gamma,
        sharpen_input,
        logits: Logits {
            cache_logits: cache_l,
            zeroshot_logits,
            blended,
        },
    })
}

pub fn logits(
    bundle: &EmbeddingBundle,
    cache: &CacheModel,
    params: &AdapterParams,
    hyper: &HyperParams,
    query_features: &Matrix,
) -> Result<Logits> {
    forward(bundle, cache, params, hyper, query_features, None).map(|t| t.logits)
}

/// Argmax class per query over the blended logits (ties to the lowest id).
pub fn predict(
    bundle: &EmbeddingBundle,
    cache: &CacheModel,
    params: &AdapterParams,
    hyper: &HyperParams,
    query_features: &Matrix,
) -> Result<Vec<usize>> {
    let l = logits(bundle, cache, params, hyper, query_features)?;
    if !l.blended.is_finite() {
        return Err(Error::NonFinite { op: "predict" });
    }
    Ok(argmax_rows(&l.blended))
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows()).map(|i| linalg::argmax(m.row(i))).collect()
}
