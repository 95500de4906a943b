//! Data-parallel map over independent work items.
//!
//! Backed by rayon with the `parallel` feature; otherwise a plain
//! sequential iterator. Output order always matches input order.

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "GNGAN_THREADS";

/// Thread cap from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Like [`map`], but runs on a dedicated pool of at most `threads` workers.
#[cfg(feature = "parallel")]
pub fn map_capped<T, R, F>(items: Vec<T>, threads: Option<usize>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| map(items, f)),
            Err(_) => map(items, f),
        },
        None => map(items, f),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_capped<T, R, F>(items: Vec<T>, _threads: Option<usize>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    map(items, f)
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
