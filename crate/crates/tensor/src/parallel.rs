//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon; without it, or
//! after [`set_parallel(false)`](set_parallel), they run the same closures in
//! index order. Callers only hand out disjoint output slots, and reductions
//! are always folded in index order afterwards, so results are bitwise
//! identical in both modes and for any thread count.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Runtime switch; has no effect when the crate is built without `parallel`.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled, Ordering::SeqCst);
}

/// True when work is actually dispatched to the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Evaluates `f(i)` for `i in 0..n` and collects the results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && data.len() > chunk {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Sums equally sized buffers element-wise in index order.
pub fn ordered_sum<T: crate::Scalar>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut iter = parts.into_iter();
    let mut acc = match iter.next() {
        Some(first) => first,
        None => return Vec::new(),
    };
    for part in iter {
        debug_assert_eq!(part.len(), acc.len());
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn chunked_writes_cover_everything() {
        let mut data = vec![0usize; 103];
        for_each_chunk_mut(&mut data, 10, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 10 + j;
            }
        });
        assert_eq!(data, (0..103).collect::<Vec<_>>());
    }
}
