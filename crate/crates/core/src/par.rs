//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these dispatch to rayon; without it (or when a
//! caller asks for sequential execution) they run plain loops. Every helper
//! returns results in index order, so outputs never depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluate `f(i)` for `i in 0..n`, collected in order.
pub fn map_range<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Fill `out` row by row: `f(row, row_slice)` for each chunk of `width`.
pub fn for_each_row<T, F>(out: &mut [T], width: usize, parallel: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
        return;
    }
    let _ = parallel;
    out.chunks_mut(width).enumerate().for_each(|(r, row)| f(r, row));
}

/// Deterministic sum of `f(i)` over `0..n`: per-block partial sums are
/// computed (possibly in parallel) and then added in block order.
pub fn sum_range<F>(n: usize, parallel: bool, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    const BLOCK: usize = 256;
    let blocks = n.div_ceil(BLOCK);
    let partials = map_range(blocks, parallel, |b| {
        let start = b * BLOCK;
        let end = (start + BLOCK).min(n);
        (start..end).map(&f).sum::<f64>()
    });
    partials.into_iter().sum()
}

/// True when this build can actually run work in parallel.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_independent_of_execution_mode() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (i as f64 + 1.0);
        let a = sum_range(10_000, true, f);
        let b = sum_range(10_000, false, f);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn rows_visit_in_order() {
        let mut buf = vec![0usize; 12];
        for_each_row(&mut buf, 4, true, |r, row| row.iter_mut().for_each(|v| *v = r));
        assert_eq!(buf, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }
}
