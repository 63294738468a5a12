use pflsim_core::federation::{Executor, Sequential};
use rayon::prelude::*;

/// Runs clients on a fixed-size thread pool. Output order is input order,
/// and each client owns its rng, so results match [`Sequential`] bit for bit.
pub struct Threaded {
    pool: Option<rayon::ThreadPool>,
}

impl Threaded {
    /// One thread means no pool at all.
    pub fn new(threads: usize) -> Self {
        let pool = (threads > 1).then(|| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool creation failed")
        });
        Self { pool }
    }
}

impl Executor for Threaded {
    fn map_mut<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync,
    {
        match &self.pool {
            Some(pool) => pool.install(|| items.par_iter_mut().map(&f).collect()),
            None => Sequential.map_mut(items, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_input_order() {
        let mut v: Vec<u64> = (0..64).collect();
        let out = Threaded::new(4).map_mut(&mut v, |x| {
            *x += 1;
            *x * 2
        });
        assert_eq!(out, (1..=64).map(|x| x * 2).collect::<Vec<u64>>());
        assert_eq!(v[0], 1);
    }
}
