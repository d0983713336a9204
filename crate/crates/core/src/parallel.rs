//! Order-preserving parallel map over trial indices.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Evaluates `f(0..count)` on a pool of `threads` workers and returns the
/// results in index order. `threads == 0` uses the rayon default.
pub fn map_indexed<T, F>(threads: usize, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if threads == 1 {
        return Ok((0..count).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..count).into_par_iter().map(f).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let serial = map_indexed(1, 100, |i| i * i).unwrap();
        let par = map_indexed(4, 100, |i| i * i).unwrap();
        assert_eq!(serial, par);
        assert_eq!(par[7], 49);
    }
}
