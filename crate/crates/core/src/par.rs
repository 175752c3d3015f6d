//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel loop in the crate goes through [`map_indexed`], which
//! preserves input order in its output. Reductions are always performed
//! sequentially over that ordered output, so results are bit-identical
//! between [`Execution::Serial`] and [`Execution::Parallel`], and between
//! builds with and without the `parallel` feature.

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Plain sequential iteration.
    Serial,
    /// Rayon work-stealing when the `parallel` feature is enabled,
    /// sequential otherwise.
    #[default]
    Parallel,
}

impl Execution {
    /// True when this mode will actually use worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if exec == Execution::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<S, T, F>(exec: Execution, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indexed(exec, items.len(), |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let serial = map_indexed(Execution::Serial, 1000, |i| i * i);
        let parallel = map_indexed(Execution::Parallel, 1000, |i| i * i);
        assert_eq!(serial, parallel);
        assert_eq!(serial[31], 961);
    }

    #[test]
    fn slice_map() {
        let v = vec![1.0_f64, 2.0, 3.0];
        let out = map_slice(Execution::Parallel, &v, |x| x * 2.0);
        assert_eq!(out, vec![2.0, 4.0, 6.0]);
    }
}
