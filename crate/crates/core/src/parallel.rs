//! Execution policy for data-parallel loops.
//!
//! Every parallel loop in the crate goes through [`Exec::map`], which returns
//! results in index order. Callers reduce those results sequentially, so the
//! floating-point summation order never depends on the worker count.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Exec {
    /// Run every loop on the calling thread.
    Sequential,
    /// Run on a rayon pool with the given number of workers (0 = rayon's
    /// default). Falls back to sequential when built without `parallel`.
    Parallel { threads: usize },
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel { threads: 0 }
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn threads(n: usize) -> Self {
        Exec::Parallel { threads: n }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && matches!(self, Exec::Parallel { .. })
    }

    /// Evaluate `f(0..n)` and collect the results in index order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Send + Sync,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            Exec::Parallel { threads } => par_map(*threads, n, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(threads: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    if n <= 1 {
        return (0..n).map(f).collect();
    }
    let run = || (0..n).into_par_iter().map(&f).collect::<Vec<T>>();
    if threads == 0 {
        run()
    } else {
        pool(threads).install(run)
    }
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(_threads: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
fn pool(threads: usize) -> std::sync::Arc<rayon::ThreadPool> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};

    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS
        .get_or_init(|| Mutex::new(HashMap::new()))
        .lock()
        .expect("thread pool registry poisoned");
    pools
        .entry(threads)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("failed to build rayon pool"),
            )
        })
        .clone()
}
