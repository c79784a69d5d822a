//! Parallel versions of the core sweeps. Cells are computed independently
//! and collected in grid order, so tables match the sequential ones exactly.

use rayon::prelude::*;
use xmadapter_core::eval::{self, AlphaBetaLayout, SweepContext, SweepTable};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "XMADAPTER_THREADS";

/// Worker count: `requested` (or the machine's parallelism) capped by
/// `XMADAPTER_THREADS` when set.
pub fn effective_jobs(requested: Option<usize>) -> usize {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    let jobs = requested.unwrap_or(default).max(1);
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => jobs.min(cap),
        _ => jobs,
    }
}

fn run<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(f)
}

pub fn sweep_gamma(ctx: &SweepContext<'_>, grid: &[f64], jobs: usize) -> Result<SweepTable> {
    eval::validate_grid(grid)?;
    run(jobs, || {
        let base = if ctx.retrain_per_cell { None } else { Some(ctx.base_model()?) };
        let acc = grid
            .par_iter()
            .map(|&g| ctx.cell(&ctx.gamma_hyper(g), ctx.retrain_per_cell, base.as_ref()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(eval::gamma_table(ctx, grid, acc)?)
    })
}

pub fn sweep_alpha_beta(
    ctx: &SweepContext<'_>,
    alpha_grid: &[f64],
    beta_grid: &[f64],
    layout: AlphaBetaLayout,
    jobs: usize,
) -> Result<SweepTable> {
    eval::validate_grid(alpha_grid)?;
    eval::validate_grid(beta_grid)?;
    let points = eval::alpha_beta_points(&ctx.base, alpha_grid, beta_grid, layout);
    run(jobs, || {
        let base = if ctx.retrain_per_cell { None } else { Some(ctx.base_model()?) };
        let acc = points
            .par_iter()
            .map(|&(a, b)| ctx.cell(&ctx.alpha_beta_hyper(a, b), ctx.retrain_per_cell, base.as_ref()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(eval::alpha_beta_table(ctx, alpha_grid, beta_grid, &points, acc)?)
    })
}
