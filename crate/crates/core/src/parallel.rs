//! Order-preserving parallel map over independent items.

use crate::error::Result;

/// Apply `f(index, item)` to every item on up to `workers` scoped threads.
/// Results come back in input order, so output is independent of `workers`.
pub fn map_ordered<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(k, part)| {
                s.spawn(move || part.iter().enumerate().map(|(j, x)| f(k * chunk + j, x)).collect::<Result<Vec<R>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_kept() {
        let xs: Vec<u64> = (0..37).collect();
        let one = map_ordered(&xs, 1, |i, x| Ok(i as u64 * 100 + x)).unwrap();
        let four = map_ordered(&xs, 4, |i, x| Ok(i as u64 * 100 + x)).unwrap();
        assert_eq!(one, four);
        let e = map_ordered(&xs, 3, |i, _| if i == 20 { Err(crate::error::Error::State("x".into())) } else { Ok(i) });
        assert!(e.is_err());
    }
}
