//! Data-parallel helpers. With the `parallel` feature these dispatch to
//! rayon whenever the current pool has more than one thread; otherwise the
//! plain sequential loop runs. Both paths visit items in the same per-item
//! order, so results are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum work items before a loop is handed to rayon.
#[cfg(feature = "parallel")]
const MIN_PAR_LEN: usize = 64;

#[inline]
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Runs `f(row_index, row)` over every `cols`-wide chunk of `data`.
pub fn for_each_row_mut<F>(data: &mut [f32], cols: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() / cols >= MIN_PAR_LEN {
        data.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
        return;
    }
    data.chunks_mut(cols).enumerate().for_each(|(r, row)| f(r, row));
}

/// Maps `0..n` through `f`, collecting results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Like [`map_indices`] but only parallel for long ranges of cheap items.
pub fn map_indices_fine<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n >= MIN_PAR_LEN {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
