//! Serial or pooled execution of independent index-keyed work items.
//!
//! Work is always split by index and results are collected in index order, so
//! any reduction performed by the caller sees the same operands in the same
//! order regardless of the number of threads.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Default)]
pub enum Executor {
    #[default]
    Serial,
    Pool(Arc<rayon::ThreadPool>),
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Executor::Serial => write!(f, "Executor::Serial"),
            Executor::Pool(p) => write!(f, "Executor::Pool({})", p.current_num_threads()),
        }
    }
}

impl Executor {
    /// `threads <= 1` gives the serial executor.
    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Executor::Serial);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Executor::Pool(Arc::new(pool)))
    }

    pub fn threads(&self) -> usize {
        match self {
            Executor::Serial => 1,
            Executor::Pool(p) => p.current_num_threads(),
        }
    }

    pub fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Executor::Serial => (0..count).map(f).collect(),
            Executor::Pool(pool) => pool.install(|| (0..count).into_par_iter().map(f).collect()),
        }
    }

    /// Runs `f(chunk_index, chunk)` over disjoint mutable chunks.
    pub fn for_chunks<T, F>(&self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            Executor::Serial => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
            Executor::Pool(pool) => pool.install(|| data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c))),
        }
    }
}
