//! Accuracy, hyperparameter sweeps, cross-domain evaluation and parameter /
//! multiply-add accounting.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, HyperParams};
use crate::cache::CacheModel;
use crate::dataset::{EmbeddingBundle, FewShotSplit};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::training::{self, AdapterParams, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Test,
    /// The few-shot rows stored in the cache.
    Train,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput { what: "evaluation set" });
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "accuracy",
            left: (predictions.len(), 1),
            right: (labels.len(), 1),
        });
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy on arbitrary query rows.
pub fn evaluate_queries(
    bundle: &EmbeddingBundle,
    cache: &CacheModel,
    params: &AdapterParams,
    hyper: &HyperParams,
    features: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput { what: "evaluation set" });
    }
    let pred = adapter::predict(bundle, cache, params, hyper, features)?;
    accuracy(&pred, labels)
}

pub fn evaluate(
    bundle: &EmbeddingBundle,
    cache: &CacheModel,
    params: &AdapterParams,
    hyper: &HyperParams,
    split: EvalSplit,
) -> Result<f64> {
    match split {
        EvalSplit::Test => evaluate_queries(bundle, cache, params, hyper, &bundle.test_features, &bundle.test_labels),
        EvalSplit::Train => {
            let feats = bundle.train_features.gather_rows(&cache.source_indices)?;
            evaluate_queries(bundle, cache, params, hyper, &feats, &cache.entry_labels)
        }
    }
}

/// Zero-shot accuracy on the bundle's test set.
pub fn zeroshot_accuracy(bundle: &EmbeddingBundle) -> Result<f64> {
    let pred = crate::dataset::zeroshot_predictions(bundle, &bundle.test_features)?;
    accuracy(&pred, &bundle.test_labels)
}

/// One grid point: coordinate per axis and the measured accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub coords: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axes: Vec<String>,
    /// Values swept per axis.
    pub grid: Vec<Vec<f64>>,
    pub cells: Vec<SweepCell>,
    /// Index into `cells` of the highest accuracy; ties go to the
    /// lexicographically smallest coordinates.
    pub best: usize,
    /// Hyperparameters held fixed while sweeping.
    pub held: Vec<(String, f64)>,
    pub retrain_per_cell: bool,
}

impl SweepTable {
    pub fn new(axes: Vec<String>, grid: Vec<Vec<f64>>, cells: Vec<SweepCell>, held: Vec<(String, f64)>, retrain_per_cell: bool) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::EmptyInput { what: "sweep grid" });
        }
        let best = best_cell(&cells);
        Ok(Self {
            axes,
            grid,
            cells,
            best,
            held,
            retrain_per_cell,
        })
    }

    pub fn best_cell(&self) -> &SweepCell {
        &self.cells[self.best]
    }
}

fn cmp_coords(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn best_cell(cells: &[SweepCell]) -> usize {
    let mut best = 0;
    for (i, c) in cells.iter().enumerate().skip(1) {
        let b = &cells[best];
        if c.accuracy > b.accuracy || (c.accuracy == b.accuracy && cmp_coords(&c.coords, &b.coords) == Ordering::Less) {
            best = i;
        }
    }
    best
}

/// Shared inputs of every sweep cell.
#[derive(Debug, Clone, Copy)]
pub struct SweepContext<'a> {
    pub bundle: &'a EmbeddingBundle,
    pub split: &'a FewShotSplit,
    pub base: HyperParams,
    pub options: TrainOptions,
    pub retrain_per_cell: bool,
}

/// Trained once at the base hyperparameters; reused by cells that do not retrain.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub cache: CacheModel,
    pub params: AdapterParams,
}

impl<'a> SweepContext<'a> {
    pub fn base_model(&self) -> Result<BaseModel> {
        let out = training::train(self.bundle, self.split, &self.base, &self.options)?;
        Ok(BaseModel {
            cache: out.cache,
            params: out.params,
        })
    }

    /// Test accuracy at `hyper`, retraining when `retrain` is set, otherwise
    /// evaluating `base`.
    pub fn cell(&self, hyper: &HyperParams, retrain: bool, base: Option<&BaseModel>) -> Result<f64> {
        if retrain {
            Ok(training::train(self.bundle, self.split, hyper, &self.options)?.report.final_test_accuracy)
        } else {
            let base = base.ok_or(Error::InvalidConfig("sweep cell needs a base model".into()))?;
            evaluate(self.bundle, &base.cache, &base.params, hyper, EvalSplit::Test)
        }
    }

    pub fn gamma_hyper(&self, gamma: f64) -> HyperParams {
        HyperParams { gamma, ..self.base }
    }

    pub fn alpha_beta_hyper(&self, alpha: f64, beta: f64) -> HyperParams {
        HyperParams { alpha, beta, ..self.base }
    }
}

/// Grid points of an α/β sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaBetaLayout {
    /// Full cross product.
    Cross,
    /// An α slice at the base β followed by a β slice at the base α.
    Slices,
}

pub fn alpha_beta_points(base: &HyperParams, alpha_grid: &[f64], beta_grid: &[f64], layout: AlphaBetaLayout) -> Vec<(f64, f64)> {
    match layout {
        AlphaBetaLayout::Cross => alpha_grid
            .iter()
            .flat_map(|&a| beta_grid.iter().map(move |&b| (a, b)))
            .collect(),
        AlphaBetaLayout::Slices => alpha_grid
            .iter()
            .map(|&a| (a, base.beta))
            .chain(beta_grid.iter().map(|&b| (base.alpha, b)))
            .collect(),
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyInput { what: "sweep grid" });
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig("sweep grid values must be finite".into()));
    }
    Ok(())
}

pub fn gamma_table(ctx: &SweepContext<'_>, grid: &[f64], accuracies: Vec<f64>) -> Result<SweepTable> {
    let cells = grid
        .iter()
        .zip(accuracies)
        .map(|(&g, accuracy)| SweepCell {
            coords: alloc::vec![g],
            accuracy,
        })
        .collect();
    SweepTable::new(
        alloc::vec!["gamma".to_string()],
        alloc::vec![grid.to_vec()],
        cells,
        alloc::vec![("alpha".to_string(), ctx.base.alpha), ("beta".to_string(), ctx.base.beta)],
        ctx.retrain_per_cell,
    )
}

pub fn alpha_beta_table(ctx: &SweepContext<'_>, alpha_grid: &[f64], beta_grid: &[f64], points: &[(f64, f64)], accuracies: Vec<f64>) -> Result<SweepTable> {
    let cells = points
        .iter()
        .zip(accuracies)
        .map(|(&(a, b), accuracy)| SweepCell {
            coords: alloc::vec![a, b],
            accuracy,
        })
        .collect();
    SweepTable::new(
        alloc::vec!["alpha".to_string(), "beta".to_string()],
        alloc::vec![alpha_grid.to_vec(), beta_grid.to_vec()],
        cells,
        alloc::vec![("gamma".to_string(), ctx.base.gamma)],
        ctx.retrain_per_cell,
    )
}

/// γ sweep, one cell per grid value, evaluated in order.
pub fn sweep_gamma(ctx: &SweepContext<'_>, grid: &[f64]) -> Result<SweepTable> {
    validate_grid(grid)?;
    let base = if ctx.retrain_per_cell { None } else { Some(ctx.base_model()?) };
    let acc = grid
        .iter()
        .map(|&g| ctx.cell(&ctx.gamma_hyper(g), ctx.retrain_per_cell, base.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    gamma_table(ctx, grid, acc)
}

/// α/β sweep evaluated in order.
pub fn sweep_alpha_beta(ctx: &SweepContext<'_>, alpha_grid: &[f64], beta_grid: &[f64], layout: AlphaBetaLayout) -> Result<SweepTable> {
    validate_grid(alpha_grid)?;
    validate_grid(beta_grid)?;
    let points = alpha_beta_points(&ctx.base, alpha_grid, beta_grid, layout);
    let base = if ctx.retrain_per_cell { None } else { Some(ctx.base_model()?) };
    let acc = points
        .iter()
        .map(|&(a, b)| ctx.cell(&ctx.alpha_beta_hyper(a, b), ctx.retrain_per_cell, base.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    alpha_beta_table(ctx, alpha_grid, beta_grid, &points, acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub per_target: Vec<f64>,
    pub mean: f64,
}

/// Frozen source model evaluated on each target's test set.
pub fn cross_domain_eval(
    source: &EmbeddingBundle,
    cache: &CacheModel,
    params: &AdapterParams,
    hyper: &HyperParams,
    targets: &[EmbeddingBundle],
) -> Result<CrossDomainReport> {
    if targets.is_empty() {
        return Err(Error::EmptyInput { what: "target bundles" });
    }
    let mut per_target = Vec::with_capacity(targets.len());
    for t in targets {
        if t.num_classes != source.num_classes {
            return Err(Error::ClassCountMismatch {
                expected: source.num_classes,
                found: t.num_classes,
            });
        }
        if t.feature_dim != source.feature_dim {
            return Err(Error::Shape {
                op: "cross_domain_eval",
                left: (t.num_test(), t.feature_dim),
                right: (source.num_test(), source.feature_dim),
            });
        }
        per_target.push(evaluate_queries(source, cache, params, hyper, &t.test_features, &t.test_labels)?);
    }
    let mean = per_target.iter().sum::<f64>() / per_target.len() as f64;
    Ok(CrossDomainReport { per_target, mean })
}

/// Shapes that determine the parameter and multiply-add counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub feature_dim: usize,
    pub d: usize,
    pub num_classes: usize,
    pub cache_entries: usize,
    pub hidden_dim: Option<usize>,
    pub learn_gamma: bool,
}

impl ModelShape {
    pub fn of(params: &AdapterParams, num_classes: usize) -> Self {
        Self {
            feature_dim: params.cache_keys.cols(),
            d: params.img2txt.output_dim(),
            num_classes,
            cache_entries: params.cache_keys.rows(),
            hidden_dim: params.img2txt.hidden_dim(),
            learn_gamma: params.gamma_logit.is_some(),
        }
    }

    pub fn cache_params(&self) -> usize {
        self.cache_entries * self.feature_dim
    }

    /// One projection net, `C → D` or `C → H → D`.
    pub fn projection_params(&self) -> usize {
        let (c, d) = (self.feature_dim, self.d);
        match self.hidden_dim {
            None => c * d + d,
            Some(h) => c * h + h + h * d + d,
        }
    }

    pub fn tunable_params(&self) -> usize {
        self.cache_params() + 2 * self.projection_params() + usize::from(self.learn_gamma)
    }

    /// Matrix-product multiply-adds to classify one query: image affinity,
    /// both projections, text affinity, aggregation and zero-shot product.
    pub fn forward_macs_per_query(&self) -> u64 {
        let (c, d, n, nk) = (
            self.feature_dim as u64,
            self.d as u64,
            self.num_classes as u64,
            self.cache_entries as u64,
        );
        let proj = |rows: u64| match self.hidden_dim {
            None => rows * c * d,
            Some(h) => rows * (c * h as u64 + h as u64 * d),
        };
        nk * c + proj(n) + proj(1) + nk * d + nk * n + c * n
    }
}

/// Analytic counts plus optional measured timings (filled by the caller).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub shape: ModelShape,
    pub cache_params: usize,
    pub projection_params: usize,
    pub tunable_params: usize,
    pub forward_macs_per_query: u64,
    pub seconds_per_epoch: Option<f64>,
    pub seconds_per_1k_queries: Option<f64>,
}

pub fn efficiency_report(shape: ModelShape) -> EfficiencyReport {
    EfficiencyReport {
        shape,
        cache_params: shape.cache_params(),
        projection_params: 2 * shape.projection_params(),
        tunable_params: shape.tunable_params(),
        forward_macs_per_query: shape.forward_macs_per_query(),
        seconds_per_epoch: None,
        seconds_per_1k_queries: None,
    }
}
