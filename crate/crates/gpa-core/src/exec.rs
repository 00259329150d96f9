//! Parallel-or-sequential execution of independent work items.
//!
//! The `parallel` feature (on by default) dispatches to rayon; without it
//! every entry point below degrades to the sequential implementation.
//! All functions preserve input order in their output, so results are
//! identical whichever path runs.

/// Map a fallible closure over `0..n`, preserving index order.
pub fn try_map_indexed<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        try_map_indexed_seq(n, f)
    }
}

/// Sequential counterpart of [`try_map_indexed`], always available.
pub fn try_map_indexed_seq<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    F: Fn(usize) -> Result<R, E>,
{
    (0..n).map(f).collect()
}

/// Map an infallible closure over `0..n`, preserving index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

/// Sequential counterpart of [`map_indexed`], always available.
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let f = |i: usize| i * i + 1;
        assert_eq!(map_indexed(100, f), map_indexed_seq(100, f));
    }

    #[test]
    fn errors_propagate() {
        let r: Result<Vec<usize>, String> =
            try_map_indexed(10, |i| if i == 7 { Err("boom".to_string()) } else { Ok(i) });
        assert!(r.is_err());
    }
}
