use rayon::prelude::*;

use crate::error::Result;

/// Order-preserving map over `items` using at most `jobs` worker threads.
///
/// `jobs <= 1` runs on the calling thread. Each item is processed
/// independently, so the output does not depend on `jobs`.
pub fn map_ordered<I, O, F>(jobs: usize, items: &[I], f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    if jobs <= 1 || items.len() <= 1 {
        return Ok(items.iter().enumerate().map(|(i, x)| f(i, x)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    Ok(pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..100).collect();
        let a = map_ordered(1, &items, |i, x| x * 2 + i as u64).unwrap();
        let b = map_ordered(4, &items, |i, x| x * 2 + i as u64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[10], 30);
    }
}
