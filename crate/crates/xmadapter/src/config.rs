//! Run configuration: an optional JSON file overlaid by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xmadapter_core::{HyperParams, PhiOrder, TrainOptions};

use crate::checkpoint::Precision;
use crate::error::{Error, Result};

pub const DEFAULT_SHOTS: usize = 16;
pub const DEFAULT_SEED: u64 = 1;

/// Every field is optional so a file and the flags can be merged; unset
/// fields fall back to the training defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub bundle: Option<PathBuf>,
    pub targets: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub shots: Option<usize>,
    /// Seeds both the few-shot split and training.
    pub seed: Option<u64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub dim_d: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub phi_order: Option<PhiOrder>,
    pub learn_gamma: Option<bool>,
    pub mask_self: Option<bool>,
    pub retrain_per_cell: Option<bool>,
    pub ce_class_scale: Option<bool>,
    pub raw_log_ce: Option<bool>,
    pub hidden_dim: Option<usize>,
    pub init_std: Option<f64>,
    pub precision: Option<Precision>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => {
                RunConfig {
                    targets: if over.targets.is_empty() { self.targets } else { over.targets },
                    $($f: over.$f.or(self.$f),)*
                }
            };
        }
        pick!(
            bundle, checkpoint, shots, seed, gamma, alpha, beta, dim_d, epochs, batch_size, lr, out, jobs, phi_order,
            learn_gamma, mask_self, retrain_per_cell, ce_class_scale, raw_log_ce, hidden_dim, init_std, precision
        )
    }

    pub fn shots(&self) -> usize {
        self.shots.unwrap_or(DEFAULT_SHOTS)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn hyper(&self) -> Result<HyperParams> {
        let d = HyperParams::default();
        let h = HyperParams {
            gamma: self.gamma.unwrap_or(d.gamma),
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            d: self.dim_d.unwrap_or(d.d),
            learn_gamma: self.learn_gamma.unwrap_or(d.learn_gamma),
            phi_order: self.phi_order.unwrap_or(d.phi_order),
        };
        h.validate()?;
        Ok(h)
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        let d = TrainOptions::default();
        let o = TrainOptions {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            seed: self.seed(),
            mask_self: self.mask_self.unwrap_or(d.mask_self),
            ce_class_scale: self.ce_class_scale.unwrap_or(d.ce_class_scale),
            raw_log_ce: self.raw_log_ce.unwrap_or(d.raw_log_ce),
            hidden_dim: self.hidden_dim.or(d.hidden_dim),
            init_std: self.init_std.unwrap_or(d.init_std),
        };
        o.validate()?;
        Ok(o)
    }

    pub fn require_bundle(&self) -> Result<&Path> {
        let p = self.bundle.as_deref().ok_or_else(|| Error::Config("--bundle is required".into()))?;
        require_file(p)?;
        Ok(p)
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
    }
}

pub fn require_file(p: &Path) -> Result<()> {
    match fs::metadata(p) {
        Ok(m) if m.is_file() => Ok(()),
        Ok(_) => Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a regular file"))),
        Err(e) => Err(Error::io(p, e)),
    }
}
