//! Replication-level parallelism.
//!
//! With the `parallel` feature the map runs on the rayon pool; without it,
//! or with [`Backend::Sequential`], items are processed in order on the
//! calling thread. Results come back in input order either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Parallel,
    Sequential,
}

pub fn map<T, R, F>(backend: Backend, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match backend {
        #[cfg(feature = "parallel")]
        Backend::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Number of workers the parallel backend will use.
pub fn workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Sizes the global pool. Only the first call takes effect.
pub fn init_workers(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("worker count must be ≥ 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("worker pool already initialized: {e}");
        }
    }
    Ok(())
}
