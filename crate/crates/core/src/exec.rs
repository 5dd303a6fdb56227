//! Execution strategy for data-parallel loops.
//!
//! With the `parallel` feature (default) per-observation and per-replication
//! maps run on the rayon pool; without it everything is sequential. The mode
//! can also be forced per scope, which the benches use to compare both paths
//! inside one binary. Results are collected in index order and reduced with
//! [`pairwise_sum`], so output never depends on the mode or thread count.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

thread_local! {
    static MODE: Cell<Option<Execution>> = const { Cell::new(None) };
}

impl Execution {
    pub fn current() -> Execution {
        MODE.with(|m| m.get()).unwrap_or(Execution::default_mode())
    }

    fn default_mode() -> Execution {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Runs `f` with the given execution mode on the current thread.
pub fn scoped<R>(mode: Execution, f: impl FnOnce() -> R) -> R {
    let prev = MODE.with(|m| m.replace(Some(mode)));
    let out = f();
    MODE.with(|m| m.set(prev));
    out
}

pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match Execution::current() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            let mode = Execution::Parallel;
            (0..n).into_par_iter().map(|i| scoped(mode, || f(i))).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Pairwise (cascade) sum with a fixed tree shape.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Column sums of a row-major `n × k` buffer, each via [`pairwise_sum`].
pub fn column_sums(buf: &[f64], k: usize) -> Vec<f64> {
    if k == 0 {
        return Vec::new();
    }
    let n = buf.len() / k;
    let mut col = vec![0.0; n];
    (0..k)
        .map(|j| {
            for i in 0..n {
                col[i] = buf[i * k + j];
            }
            pairwise_sum(&col)
        })
        .collect()
}
