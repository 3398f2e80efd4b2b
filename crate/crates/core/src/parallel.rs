//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work fans out over the rayon pool;
//! without it every helper runs sequentially. Results always come back in
//! input order, so reductions done by the caller are deterministic
//! regardless of the thread count.

use std::sync::Once;

/// Execution strategy for batch-level loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    /// `Parallel` degrades to `Sequential` when the crate is built without
    /// the `parallel` feature.
    pub fn effective(self) -> Exec {
        if cfg!(feature = "parallel") {
            self
        } else {
            Exec::Sequential
        }
    }
}

static POOL_INIT: Once = Once::new();

/// Cap the global worker pool from `ACMNET_THREADS`, if set. Idempotent.
pub fn init_thread_pool() {
    POOL_INIT.call_once(|| {
        #[cfg(feature = "parallel")]
        if let Some(n) = std::env::var("ACMNET_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size thread pool to {n}: {e}");
            }
        }
    });
}

/// Number of workers a parallel map will use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Ordered map over a slice.
pub fn map<I, O, F>(exec: Exec, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
        }
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

/// Ordered map over `0..n`.
pub fn map_range<O, F>(exec: Exec, n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    match exec.effective() {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_strategies_preserve_order() {
        let xs: Vec<u32> = (0..100).collect();
        let a = map(Exec::Parallel, &xs, |i, x| (i as u32) * 1000 + x);
        let b = map(Exec::Sequential, &xs, |i, x| (i as u32) * 1000 + x);
        assert_eq!(a, b);
        assert_eq!(map_range(Exec::Parallel, 5, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }
}
