//! Data-parallel building blocks with a sequential fallback.
//!
//! With the `parallel` feature (default) the mappers fan out over rayon's
//! ambient thread pool; without it they run serially. Either way the output
//! vector is in input order and all floating-point reductions downstream are
//! performed by an ordered fold, so results are bit-identical for any worker
//! count. Callers that need a same-binary baseline (the criterion benches)
//! use [`seq_map`] directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over a slice, possibly in parallel. Output order matches input order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Map over indices `0..n`, possibly in parallel. Output order is `0..n`.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Always-sequential map, kept callable alongside the parallel path so the
/// benches can compare both in one binary.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Run `f` inside a rayon pool with `threads` workers. With the `parallel`
/// feature disabled, or `threads == 0` (meaning "use the default pool"),
/// `f` runs in the current thread's context.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            f()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("failed to build thread pool");
            pool.install(f)
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let out = map(&xs, |x| x * 3);
        assert_eq!(out, xs.iter().map(|x| x * 3).collect::<Vec<_>>());
    }

    #[test]
    fn map_matches_seq_map_bitwise() {
        let xs: Vec<f64> = (0..512).map(|i| (i as f64).sin()).collect();
        let par = map(&xs, |x| x.exp() / (1.0 + x.exp()));
        let seq = seq_map(&xs, |x| x.exp() / (1.0 + x.exp()));
        assert!(par.iter().zip(&seq).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let xs: Vec<f64> = (0..256).map(|i| i as f64 * 0.37).collect();
        let one = with_threads(1, || map(&xs, |x| x.sqrt()));
        let four = with_threads(4, || map(&xs, |x| x.sqrt()));
        assert!(one.iter().zip(&four).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
