//! Data-parallel helpers with a sequential fallback.
//!
//! Work items are independent and results are collected in index order,
//! so both modes produce identical output. Without the `parallel`
//! feature, [`Parallelism::Parallel`] runs sequentially.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

/// `(0..n).map(f)` collected in order, possibly across threads.
pub fn map_indexed<T, F>(n: usize, mode: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Generator for work item `index`: stream `index` of the ChaCha8 generator
/// seeded with `seed`. Independent of the order in which items run.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Configures the global worker pool. `0` keeps the default (one worker
/// per core). Returns the effective worker count.
pub fn init_threads(threads: usize) -> usize {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            // A second initialization is a no-op; the first pool stays.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        1
    }
}
