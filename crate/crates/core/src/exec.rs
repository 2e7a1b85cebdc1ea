//! Execution policy for the data-parallel kernels.
//!
//! Every hot loop in this crate is written as an indexed map whose results are
//! collected in input order, so parallel and sequential execution produce
//! bit-identical output. Floating-point reductions are always folded
//! sequentially over the collected partial results.

#[cfg(feature = "rayon")]
use rayon::prelude::*;

/// How a kernel distributes independent work items.
///
/// `Parallel` uses the rayon global pool when the `rayon` feature is enabled and
/// silently degrades to `Sequential` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "rayon") && self == Exec::Parallel
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "rayon")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over a slice, returning results in input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "rayon")]
        if self == Exec::Parallel {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Runs `f(chunk_index, chunk)` over disjoint mutable chunks of `data`.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "rayon")]
        if self == Exec::Parallel {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let a = Exec::Parallel.map_range(1000, |i| (i as f64).sqrt());
        let b = Exec::Sequential.map_range(1000, |i| (i as f64).sqrt());
        assert_eq!(a, b);

        let mut x = vec![0u32; 103];
        let mut y = x.clone();
        Exec::Parallel.for_each_chunk_mut(&mut x, 10, |i, c| c.iter_mut().for_each(|v| *v = i as u32));
        Exec::Sequential.for_each_chunk_mut(&mut y, 10, |i, c| c.iter_mut().for_each(|v| *v = i as u32));
        assert_eq!(x, y);
        assert_eq!(x[102], 10);
    }
}
