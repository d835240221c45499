//! Parallel-map helper used by the CTU-level loops.
//!
//! Results are always collected in input order, so callers see identical
//! output whatever the thread count. `Parallelism::Sequential` forces the
//! plain loop at runtime (timing runs rely on this); without the `parallel`
//! feature the rayon path is compiled out entirely.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    /// Plain in-order loop on the calling thread.
    Sequential,
    /// Work-stealing pool when the `parallel` feature is enabled,
    /// otherwise identical to `Sequential`.
    Auto,
}

impl Default for Parallelism {
    fn default() -> Self {
        Parallelism::Auto
    }
}

#[cfg(feature = "parallel")]
pub fn map_indexed<T, U, F>(par: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    match par {
        Parallelism::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        Parallelism::Auto => items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, U, F>(_par: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Maps `0..n` to values, in order.
pub fn map_range<U, F>(par: Parallelism, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map_indexed(par, &idx, |_, &i| f(i))
}
