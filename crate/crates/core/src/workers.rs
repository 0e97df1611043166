//! Worker pool sizing. `GEOUNIFY_THREADS` caps the pool; results never depend
//! on the worker count because work items are always collected in order.

use rayon::ThreadPool;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "GEOUNIFY_THREADS";

pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn pool() -> Result<ThreadPool> {
    let n = thread_count()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))
}
