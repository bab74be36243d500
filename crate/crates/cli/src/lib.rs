//! Command-line front end for the volfit engine.
//!
//! The binary is a thin wrapper; commands live here so that tests can run
//! them in-process with a chosen worker count.

pub mod commands;
pub mod config;

use anyhow::Context;

pub use commands::{CliError, CmdResult, RunManifest};
pub use config::RunConfig;

pub const THREADS_ENV: &str = "VOLFIT_THREADS";

/// Worker count: explicit value, then `VOLFIT_THREADS`, then all cores.
pub fn resolve_threads(explicit: Option<usize>) -> anyhow::Result<usize> {
    if let Some(n) = explicit {
        return Ok(n.max(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV}={v} is not a worker count"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_workers<T: Send>(
    threads: usize,
    f: impl FnOnce() -> CmdResult<T> + Send,
) -> CmdResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Input(anyhow::anyhow!("thread pool: {e}")))?;
    pool.install(f)
}
