//! Data-parallel helpers with a sequential fallback.
//!
//! Everything routed through here maps independent work items (usually
//! image rows) to owned results and reassembles them in index order, so
//! output is bit-identical for any worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` to owned results, in parallel when the `parallel` feature is on.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
