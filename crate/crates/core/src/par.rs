//! Data-parallel helpers. With the `parallel` feature these run on rayon;
//! without it they are plain sequential loops with the same results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many items a scan is not worth splitting across threads.
#[cfg(feature = "parallel")]
const MIN_SPLIT: usize = 512;

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is preserved.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().with_min_len(MIN_SPLIT).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// `items.iter().map(f).collect()` for coarse work items (one task each).
pub fn map_items<T, R, F>(items: &[T], f: F) -> Vec<R>
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

/// Runs `f` with at most `jobs` worker threads (`None` = library default).
/// A no-op wrapper when built without the `parallel` feature.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match jobs {
            Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
                Ok(pool) => pool.install(f),
                Err(_) => f(),
            },
            None => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        f()
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v = map_range(5000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * 2));
        let w = with_jobs(Some(1), || map_items(&[3, 1, 2], |x| x + 1));
        assert_eq!(w, vec![4, 2, 3]);
    }
}
