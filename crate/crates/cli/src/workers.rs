use crate::error::{CliError, Result};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "SAILR_WORKERS";

/// Reads the worker count from the environment, defaulting to the number of
/// available cores.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "{WORKERS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Maps `f` over `items` on up to `workers` threads. Results come back in
/// input order; the first error by index wins.
pub fn run_indexed<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let mut slots: Vec<Option<Result<R>>> = items.iter().map(|_| None).collect();
    let chunk = items.len().div_ceil(workers.max(1)).max(1);
    std::thread::scope(|scope| {
        let f = &f;
        for (inputs, outs) in items.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (x, slot) in inputs.iter().zip(outs) {
                    *slot = Some(f(x));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot is filled")).collect()
}
