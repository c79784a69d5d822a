//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use xmadapter_core::eval::{self, AlphaBetaLayout, EvalSplit, ModelShape, SweepContext};
use xmadapter_core::{sample_few_shot, train, PhiOrder, SyntheticConfig};

use crate::bundle::{self, Provenance};
use crate::checkpoint::{self, Checkpoint, Precision};
use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::{sweep, table};

pub const GAMMA_GRID: [f64; 7] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
pub const ALPHA_GRID: [f64; 7] = [0.0, 0.5, 1.0, 1.2, 2.0, 3.0, 4.0];
pub const BETA_GRID: [f64; 7] = [0.5, 1.5, 3.5, 5.5, 7.5, 9.5, 11.5];

#[derive(Debug, Parser)]
#[command(name = "xmadapter", version, about = "Cross-modal cache adapter for few-shot classification on precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic XMAB bundle.
    GenSynthetic(GenArgs),
    /// Train on a bundle; writes a checkpoint and a JSON report.
    Train(RunArgs),
    /// Accuracy of a checkpoint on its bundle or on target bundles.
    Eval(EvalArgs),
    /// Gamma or alpha/beta grid sweep; writes CSV, JSON and gnuplot tables.
    Sweep(SweepArgs),
    /// Summarise a bundle or checkpoint file.
    Inspect(InspectArgs),
    /// Tunable parameter and multiply-add counts for a model shape.
    ParamCount(ParamCountArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhiOrderArg {
    PostAggregate,
    PreAggregate,
}

impl From<PhiOrderArg> for PhiOrder {
    fn from(v: PhiOrderArg) -> Self {
        match v {
            PhiOrderArg::PostAggregate => PhiOrder::PostAggregate,
            PhiOrderArg::PreAggregate => PhiOrder::PreAggregate,
        }
    }
}

/// Shared run flags. Boolean flags accept an optional `true`/`false` value so
/// they can switch off a setting from the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Shots per class.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Seeds the few-shot split and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Shared text-space dimension.
    #[arg(long = "dim-d")]
    pub dim_d: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output directory (file for gen-synthetic).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sweep workers, capped by XMADAPTER_THREADS.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long = "phi-order", value_enum)]
    pub phi_order: Option<PhiOrderArg>,
    #[arg(long = "learn-gamma", num_args = 0..=1, default_missing_value = "true")]
    pub learn_gamma: Option<bool>,
    #[arg(long = "mask-self", num_args = 0..=1, default_missing_value = "true")]
    pub mask_self: Option<bool>,
    #[arg(long = "retrain-per-cell", num_args = 0..=1, default_missing_value = "true")]
    pub retrain_per_cell: Option<bool>,
    #[arg(long = "ce-class-scale", num_args = 0..=1, default_missing_value = "true")]
    pub ce_class_scale: Option<bool>,
    #[arg(long = "raw-log-ce", num_args = 0..=1, default_missing_value = "true")]
    pub raw_log_ce: Option<bool>,
    /// Adds a tanh hidden layer of this width to both projection nets.
    #[arg(long = "hidden-dim")]
    pub hidden_dim: Option<usize>,
    #[arg(long = "init-std")]
    pub init_std: Option<f64>,
    /// Tensor storage of written checkpoints.
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

impl RunArgs {
    fn flags(&self) -> RunConfig {
        RunConfig {
            bundle: self.bundle.clone(),
            targets: Vec::new(),
            checkpoint: None,
            shots: self.shots,
            seed: self.seed,
            gamma: self.gamma,
            alpha: self.alpha,
            beta: self.beta,
            dim_d: self.dim_d,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            out: self.out.clone(),
            jobs: self.jobs,
            phi_order: self.phi_order.map(Into::into),
            learn_gamma: self.learn_gamma,
            mask_self: self.mask_self,
            retrain_per_cell: self.retrain_per_cell,
            ce_class_scale: self.ce_class_scale,
            raw_log_ce: self.raw_log_ce,
            hidden_dim: self.hidden_dim,
            init_std: self.init_std,
            precision: self.precision,
        }
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        Ok(base.overlay(self.flags()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    /// Training-pool rows per class.
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long = "test-per-class", default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    #[arg(long = "modality-noise", default_value_t = 0.0)]
    pub modality_noise: f64,
    #[arg(long, default_value_t = 1)]
    pub modes: usize,
    #[arg(long = "nuisance-noise", default_value_t = 0.0)]
    pub nuisance_noise: f64,
    #[arg(long = "nuisance-fraction", default_value_t = 0.5)]
    pub nuisance_fraction: f64,
    /// Rotate test features by this angle (radians) to make a shifted domain.
    #[arg(long = "rotate-test")]
    pub rotate_test: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Target bundle for cross-domain evaluation; repeatable.
    #[arg(long = "target")]
    pub targets: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Gamma,
    AlphaBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Cross,
    Slices,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "gamma")]
    pub axis: Axis,
    /// Gamma values (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long = "alpha-grid", value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    #[arg(long = "beta-grid", value_delimiter = ',')]
    pub beta_grid: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "cross")]
    pub layout: LayoutArg,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ParamCountArgs {
    /// Read the shape from a checkpoint instead of the flags.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "feature-dim", default_value_t = 1024)]
    pub feature_dim: usize,
    #[arg(long = "dim-d", default_value_t = 256)]
    pub dim_d: usize,
    /// Cache entries (shots × classes).
    #[arg(long, default_value_t = 16_000)]
    pub entries: usize,
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    #[arg(long = "hidden-dim")]
    pub hidden_dim: Option<usize>,
    #[arg(long = "learn-gamma")]
    pub learn_gamma: bool,
    #[arg(long)]
    pub json: bool,
}

fn print_json(out: &mut dyn Write, v: &serde_json::Value) -> Result<()> {
    writeln!(out, "{v}").map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SyntheticConfig {
        num_classes: a.classes,
        shots: a.shots,
        feature_dim: a.dim,
        test_per_class: a.test_per_class,
        class_separation: a.separation,
        modality_noise: a.modality_noise,
        seed: a.seed,
        modes_per_class: a.modes,
        nuisance_noise: a.nuisance_noise,
        nuisance_fraction: a.nuisance_fraction,
    };
    let mut b = xmadapter_core::generate_synthetic(&cfg)?;
    if let Some(angle) = a.rotate_test {
        b = b.with_rotated_test(angle);
    }
    bundle::save_bundle(&b, &a.out)?;
    let prov = Provenance {
        encoder: None,
        dataset: Some(match a.rotate_test {
            Some(angle) => format!("synthetic (test rotated by {angle} rad)"),
            None => "synthetic".into(),
        }),
        synthetic: Some(cfg),
    };
    bundle::save_provenance(&a.out, &prov)?;
    print_json(
        out,
        &json!({"bundle": a.out, "num_train": b.num_train(), "num_test": b.num_test(), "zeroshot_accuracy": eval::zeroshot_accuracy(&b)?}),
    )
}

fn cmd_train(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.resolve()?;
    let bundle_path = cfg.require_bundle()?;
    let out_dir = cfg.require_out()?;
    let hyper = cfg.hyper()?;
    let opts = cfg.train_options()?;
    create_dir(out_dir)?;

    let b = bundle::load_bundle(bundle_path)?;
    let split = sample_few_shot(&b, cfg.shots(), cfg.seed())?;
    let result = train(&b, &split, &hyper, &opts)?;
    let ckpt = Checkpoint {
        hyper,
        options: opts,
        shots: split.shots,
        split_seed: split.seed,
        num_classes: b.num_classes,
        cache: result.cache,
        params: result.params,
    };
    let ckpt_path = out_dir.join("checkpoint.xmck");
    let report_path = out_dir.join("report.json");
    checkpoint::save_checkpoint(&ckpt, cfg.precision.unwrap_or_default(), &ckpt_path)?;
    let mut report = serde_json::to_vec_pretty(&result.report)?;
    report.push(b'\n');
    crate::write_atomic(&report_path, &report)?;
    print_json(
        out,
        &json!({"test_accuracy": result.report.final_test_accuracy, "checkpoint": ckpt_path, "report": report_path}),
    )
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint.clone();
    }
    if !a.targets.is_empty() {
        cfg.targets = a.targets.clone();
    }
    let bundle_path = cfg.require_bundle()?.to_path_buf();
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    config::require_file(&ckpt_path)?;
    for t in &cfg.targets {
        config::require_file(t)?;
    }

    let b = bundle::load_bundle(&bundle_path)?;
    let ckpt = checkpoint::load_checkpoint(&ckpt_path)?;
    // Inference-time coefficients may be overridden; the rest come from the checkpoint.
    let mut hyper = ckpt.hyper;
    hyper.alpha = cfg.alpha.unwrap_or(hyper.alpha);
    hyper.beta = cfg.beta.unwrap_or(hyper.beta);
    hyper.gamma = cfg.gamma.unwrap_or(hyper.gamma);
    hyper.phi_order = cfg.phi_order.unwrap_or(hyper.phi_order);
    hyper.validate()?;

    let result = if cfg.targets.is_empty() {
        let split = match a.split {
            SplitArg::Test => EvalSplit::Test,
            SplitArg::Train => EvalSplit::Train,
        };
        let acc = eval::evaluate(&b, &ckpt.cache, &ckpt.params, &hyper, split)?;
        json!({"split": split, "accuracy": acc, "zeroshot_accuracy": eval::zeroshot_accuracy(&b)?})
    } else {
        let targets = cfg.targets.iter().map(bundle::load_bundle).collect::<Result<Vec<_>>>()?;
        let r = eval::cross_domain_eval(&b, &ckpt.cache, &ckpt.params, &hyper, &targets)?;
        json!({"targets": cfg.targets, "per_target": r.per_target, "mean": r.mean})
    };
    if let Some(dir) = &cfg.out {
        create_dir(dir)?;
        let mut bytes = serde_json::to_vec_pretty(&result)?;
        bytes.push(b'\n');
        crate::write_atomic(&dir.join("eval.json"), &bytes)?;
    }
    print_json(out, &result)
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.run.resolve()?;
    let bundle_path = cfg.require_bundle()?;
    let out_dir = cfg.require_out()?;
    let hyper = cfg.hyper()?;
    let opts = cfg.train_options()?;
    create_dir(out_dir)?;

    let b = bundle::load_bundle(bundle_path)?;
    let split = sample_few_shot(&b, cfg.shots(), cfg.seed())?;
    let jobs = sweep::effective_jobs(cfg.jobs);
    let (table, stem) = match a.axis {
        Axis::Gamma => {
            let ctx = SweepContext {
                bundle: &b,
                split: &split,
                base: hyper,
                options: opts,
                retrain_per_cell: cfg.retrain_per_cell.unwrap_or(true),
            };
            let grid = a.grid.clone().unwrap_or_else(|| GAMMA_GRID.to_vec());
            (sweep::sweep_gamma(&ctx, &grid, jobs)?, "sweep_gamma")
        }
        Axis::AlphaBeta => {
            let ctx = SweepContext {
                bundle: &b,
                split: &split,
                base: hyper,
                options: opts,
                retrain_per_cell: cfg.retrain_per_cell.unwrap_or(false),
            };
            let ag = a.alpha_grid.clone().unwrap_or_else(|| ALPHA_GRID.to_vec());
            let bg = a.beta_grid.clone().unwrap_or_else(|| BETA_GRID.to_vec());
            let layout = match a.layout {
                LayoutArg::Cross => AlphaBetaLayout::Cross,
                LayoutArg::Slices => AlphaBetaLayout::Slices,
            };
            (sweep::sweep_alpha_beta(&ctx, &ag, &bg, layout, jobs)?, "sweep_alpha_beta")
        }
    };
    let paths = table::write_all(&table, out_dir, stem)?;
    let best = table.best_cell();
    print_json(
        out,
        &json!({"axes": table.axes, "best": best.coords, "best_accuracy": best.accuracy, "cells": table.cells.len(), "outputs": paths}),
    )
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    config::require_file(&a.path)?;
    let bytes = fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    let io = |e| Error::io("<stdout>", e);
    match bytes.get(..4) {
        Some(m) if m == bundle::MAGIC => {
            let b = bundle::decode_bundle(&bytes)?;
            writeln!(out, "XMAB bundle {}", a.path.display()).map_err(io)?;
            writeln!(out, "  feature_dim  {}", b.feature_dim).map_err(io)?;
            writeln!(out, "  classes      {}", b.num_classes).map_err(io)?;
            writeln!(out, "  train rows   {}", b.num_train()).map_err(io)?;
            writeln!(out, "  test rows    {}", b.num_test()).map_err(io)?;
            let per_class: Vec<usize> = b.train_indices_by_class().iter().map(Vec::len).collect();
            let (lo, hi) = (per_class.iter().min().unwrap(), per_class.iter().max().unwrap());
            writeln!(out, "  train/class  {lo}..{hi}").map_err(io)?;
            let names: Vec<&str> = b.class_names.iter().take(5).map(String::as_str).collect();
            let more = if b.num_classes > 5 { ", ..." } else { "" };
            writeln!(out, "  class names  {}{more}", names.join(", ")).map_err(io)?;
            writeln!(out, "  zero-shot    {:.4}", eval::zeroshot_accuracy(&b)?).map_err(io)?;
            if let Some(p) = bundle::load_provenance(&a.path)? {
                writeln!(out, "  provenance   {}", serde_json::to_string(&p)?).map_err(io)?;
            }
        }
        Some(m) if m == checkpoint::MAGIC => {
            let c = checkpoint::decode_checkpoint(&bytes)?;
            let shape = ModelShape::of(&c.params, c.num_classes);
            writeln!(out, "XMCK checkpoint {}", a.path.display()).map_err(io)?;
            writeln!(out, "  hyper        {}", serde_json::to_string(&c.hyper)?).map_err(io)?;
            writeln!(out, "  options      {}", serde_json::to_string(&c.options)?).map_err(io)?;
            writeln!(out, "  split        {} shots, seed {}", c.shots, c.split_seed).map_err(io)?;
            writeln!(out, "  cache        {} entries x {}", shape.cache_entries, shape.feature_dim).map_err(io)?;
            writeln!(out, "  gamma        {}", c.params.gamma(&c.hyper)).map_err(io)?;
            writeln!(out, "  tunable      {}", shape.tunable_params()).map_err(io)?;
        }
        _ => {
            let mut found = [0u8; 4];
            let n = bytes.len().min(4);
            found[..n].copy_from_slice(&bytes[..n]);
            return Err(Error::BadMagic {
                expected: bundle::MAGIC,
                found,
            });
        }
    }
    Ok(())
}

fn millions(n: usize) -> String {
    format!("{:.3}M", n as f64 / 1e6)
}

fn cmd_param_count(a: &ParamCountArgs, out: &mut dyn Write) -> Result<()> {
    let shape = match &a.checkpoint {
        Some(p) => {
            let c = checkpoint::load_checkpoint(p)?;
            ModelShape::of(&c.params, c.num_classes)
        }
        None => ModelShape {
            feature_dim: a.feature_dim,
            d: a.dim_d,
            num_classes: a.classes,
            cache_entries: a.entries,
            hidden_dim: a.hidden_dim,
            learn_gamma: a.learn_gamma,
        },
    };
    let r = eval::efficiency_report(shape);
    if a.json {
        return print_json(out, &serde_json::to_value(&r)?);
    }
    let io = |e| Error::io("<stdout>", e);
    writeln!(
        out,
        "shape C={} D={} N={} NK={} hidden={} learn_gamma={}",
        shape.feature_dim,
        shape.d,
        shape.num_classes,
        shape.cache_entries,
        shape.hidden_dim.map_or("none".to_string(), |h| h.to_string()),
        shape.learn_gamma
    )
    .map_err(io)?;
    writeln!(out, "cache={} ({})", millions(r.cache_params), r.cache_params).map_err(io)?;
    writeln!(out, "projections={} ({})", millions(r.projection_params), r.projection_params).map_err(io)?;
    writeln!(out, "total={} ({})", millions(r.tunable_params), r.tunable_params).map_err(io)?;
    writeln!(out, "forward_macs_per_query={}", r.forward_macs_per_query).map_err(io)?;
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic(a) => cmd_gen(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
        Command::ParamCount(a) => cmd_param_count(a, out),
    }
}

/// One-line JSON error for stderr.
pub fn error_line(kind: &str, code: i32, message: &str) -> String {
    json!({"error": kind, "code": code, "message": message}).to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", 2, first));
            return 2;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", error_line(e.kind(), code, &e.to_string()));
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn bare_boolean_flag_means_true() {
        let cli = Cli::try_parse_from(["xmadapter", "train", "--mask-self", "--learn-gamma", "false"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.mask_self, Some(true));
        assert_eq!(a.learn_gamma, Some(false));
    }

    #[test]
    fn grids_are_comma_separated() {
        let cli = Cli::try_parse_from(["xmadapter", "sweep", "--grid", "0,0.5,1"]).unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert_eq!(a.grid, Some(vec![0.0, 0.5, 1.0]));
    }
}
