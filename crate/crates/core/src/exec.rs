//! Execution strategy for per-image work.
//!
//! Per-image forward/backward evaluation is independent, so it is mapped in
//! parallel when the `parallel` feature is on. Reductions differ by mode:
//!
//! * [`ExecMode::Sequential`] maps and folds in index order on one thread.
//! * [`ExecMode::Deterministic`] maps in parallel but folds in index order,
//!   so its results are bit-identical to `Sequential`.
//! * [`ExecMode::Parallel`] uses a rayon tree reduction. Floating-point sums may
//!   differ from the other two modes in the last bits.
//!
//! Without the `parallel` feature every mode runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    #[default]
    Deterministic,
    Parallel,
}

impl ExecMode {
    /// True when results are independent of thread scheduling.
    pub fn is_strict(self) -> bool {
        !matches!(self, ExecMode::Parallel)
    }
}

/// Applies `map` to every index in `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, mode: ExecMode, map: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(map).collect(),
        #[cfg(feature = "parallel")]
        _ => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(map).collect()
        }
        #[cfg(not(feature = "parallel"))]
        _ => (0..n).map(map).collect(),
    }
}

/// Maps every index in `0..n` and combines the results.
///
/// `combine` must be associative for `Parallel` to be meaningful; it is
/// always applied left to right in the other modes.
pub fn map_reduce<T, F, I, C>(n: usize, mode: ExecMode, map: F, identity: I, combine: C) -> T
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
    I: Fn() -> T + Sync + Send,
    C: Fn(T, T) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(map).fold(identity(), combine),
        #[cfg(feature = "parallel")]
        ExecMode::Deterministic => map_indexed(n, mode, map).into_iter().fold(identity(), combine),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(map).reduce(identity, combine)
        }
        #[cfg(not(feature = "parallel"))]
        _ => (0..n).map(map).fold(identity(), combine),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_matches_sequential_bitwise() {
        let map = |i: usize| ((i as f64) * 0.1).sin() / 3.0;
        let seq = map_reduce(10_000, ExecMode::Sequential, map, || 0.0, |a, b| a + b);
        let det = map_reduce(10_000, ExecMode::Deterministic, map, || 0.0, |a, b| a + b);
        assert_eq!(seq.to_bits(), det.to_bits());
        let par = map_reduce(10_000, ExecMode::Parallel, map, || 0.0, |a, b| a + b);
        assert!((par - seq).abs() < 1e-9);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, ExecMode::Parallel, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
