//! Data-parallel map with a sequential fallback.
//!
//! Results always come back in input order, so reductions over them are
//! deterministic regardless of thread count. Without the `parallel` feature
//! [`Parallelism::Rayon`] silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Rayon,
}

impl Parallelism {
    pub fn is_available(self) -> bool {
        match self {
            Parallelism::Sequential => true,
            Parallelism::Rayon => cfg!(feature = "parallel"),
        }
    }
}

pub fn map_ordered<I, O, F>(mode: Parallelism, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}
