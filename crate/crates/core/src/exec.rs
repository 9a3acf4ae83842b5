//! Trial-level execution strategy.
//!
//! With the `parallel` feature (default) work items run on the rayon pool;
//! without it, `Execution::Parallel` silently degrades to a sequential loop.
//! Every work item is a pure function of its index, so results never depend
//! on the strategy or on the number of workers.

use crate::error::Result;

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
    /// `f(0), …, f(n-1)` in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Like [`Execution::map`], failing with the lowest-index error.
    pub fn try_map<T, F>(self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn strategies_agree() {
        let f = |i: usize| (i * i) as u64 ^ 0xABCD;
        assert_eq!(
            Execution::Sequential.map(1000, f),
            Execution::Parallel.map(1000, f)
        );
    }

    #[test]
    fn first_error_wins() {
        let r = Execution::Parallel.try_map(100, |i| {
            if i % 10 == 7 {
                Err(Error::InvalidConfig(format!("item {i}")))
            } else {
                Ok(i)
            }
        });
        match r {
            Err(Error::InvalidConfig(m)) => assert_eq!(m, "item 7"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
