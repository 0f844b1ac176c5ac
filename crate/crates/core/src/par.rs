//! Data-parallel helpers. With the `parallel` feature enabled these run on the
//! current rayon pool; without it they fall back to plain iterators. Results
//! always come back in input order, so callers can reduce sequentially and stay
//! bit-identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Runs `f` with at most `threads` workers. `0` keeps the default pool.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R>(_threads: usize, f: impl FnOnce() -> R) -> R {
    f()
}

/// Reads `TIG_THREADS`; unset, empty or unparsable means 0 (implementation default).
pub fn threads_from_env() -> usize {
    std::env::var("TIG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let ys = with_threads(4, || map(&xs, |i, x| (i as u64) * 2 + x));
        assert!(ys.iter().enumerate().all(|(i, y)| *y == 3 * i as u64));
        assert_eq!(map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
