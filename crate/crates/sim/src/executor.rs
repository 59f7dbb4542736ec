use pfin_core::federation::Executor;
use rayon::prelude::*;

/// Trains the clients of a round concurrently on the global rayon pool.
///
/// Results come back in client order, and every client owns its RNG
/// stream, so outputs match [`pfin_core::federation::Sequential`] bit for bit.
#[derive(Clone, Copy, Debug, Default)]
pub struct Parallel;

impl Executor for Parallel {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        items.par_iter().map(|x| f(x)).collect()
    }
}
