//! Execution strategy for data-parallel loops.
//!
//! All parallel paths produce output in input order, and reductions are done
//! over fixed-size chunks folded left to right, so results do not depend on the
//! thread count. With the `parallel` feature disabled every strategy runs
//! sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Ordered map over `0..n`.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Ordered map over a slice.
    pub fn map_slice<I, T, F>(self, items: &[I], f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&I) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    /// Maps fixed-size chunks (each folded sequentially by `f`) and returns
    /// the per-chunk results in order.
    pub fn map_chunks<I, T, F>(self, items: &[I], chunk: usize, f: F) -> Vec<T>
    where
        I: Sync,
        T: Send,
        F: Fn(&[I]) -> T + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_chunks(chunk).map(f).collect(),
            _ => items.chunks(chunk).map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let sum = |e: Execution| -> f64 {
            e.map_chunks(&xs, 16, |c| c.iter().sum::<f64>())
                .into_iter()
                .fold(0.0, |a, b| a + b)
        };
        assert_eq!(
            sum(Execution::Sequential).to_bits(),
            sum(Execution::Parallel).to_bits()
        );
        assert_eq!(
            Execution::Sequential.map(10, |i| i * i),
            Execution::Parallel.map(10, |i| i * i)
        );
    }
}
