//! Maybe-parallel loop helpers.
//!
//! With the `parallel` feature (default) the helpers fan work out over rayon;
//! without it they run plain sequential loops. Every helper writes disjoint
//! output slots and never reduces across threads, so results are bit-identical
//! in both modes.
//!
//! [`sequential_scope`] additionally forces sequential execution at runtime on
//! the current thread; the timing harness uses it so benchmark numbers are
//! single-threaded regardless of the feature set.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// True when the calling thread is inside a [`sequential_scope`].
pub fn in_sequential_scope() -> bool {
    FORCE_SEQUENTIAL.with(|f| f.get())
}

/// True when a parallel dispatch would actually fan out.
pub fn parallelism_active() -> bool {
    cfg!(feature = "parallel") && !in_sequential_scope()
}

/// Runs `f` with all maybe-parallel helpers pinned to the calling thread.
pub fn sequential_scope<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|flag| flag.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|flag| flag.set(prev));
    out
}

/// True when called from inside a rayon worker thread.
pub fn on_worker_thread() -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::current_thread_index().is_some()
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Splits `out` into `chunk` rows worth of slices and applies
/// `f(first_index, chunk_slice)` to each, in parallel when active.
pub fn for_each_chunk_mut<T: Send>(
    out: &mut [T],
    chunk: usize,
    f: impl Fn(usize, &mut [T]) + Sync,
) {
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        if parallelism_active() {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, slice)| f(i * chunk, slice));
            return;
        }
    }
    for (i, slice) in out.chunks_mut(chunk).enumerate() {
        f(i * chunk, slice);
    }
}

/// `(0..len).map(f).collect()`, fanned out when parallelism is active.
pub fn map_indexed<T: Send>(len: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        if parallelism_active() {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    (0..len).map(f).collect()
}

/// Sums a slice with a fixed pairwise tree reduction. The association order
/// depends only on `len`, never on thread count.
pub fn pairwise_sum<T: crate::precision::Real>(xs: &[T]) -> T {
    if xs.len() <= 8 {
        let mut acc = T::zero();
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
