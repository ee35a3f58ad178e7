//! Data-parallel map helpers. With the `parallel` feature these run on the
//! current rayon pool; without it they are plain sequential iterators. Output
//! order always follows input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
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

/// Like [`map`] but short-circuits on the first error in input order.
#[cfg(feature = "parallel")]
pub fn try_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    F: Fn(&T) -> Result<R>,
{
    items.iter().map(f).collect()
}

/// Runs `f` with at most `workers` threads. Zero means the rayon default.
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a {workers}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R: Send>(_workers: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Like [`map_range`] but short-circuits on the first error in index order.
#[cfg(feature = "parallel")]
pub fn try_map_range<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map_range<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    F: Fn(usize) -> Result<R>,
{
    (0..n).map(f).collect()
}
