//! Data-parallel sweep over independent simulation trials.
//!
//! Monte Carlo validation (first-passage statistics, collision-time
//! distributions, sampling oracles) runs many short independent trials.
//! Each trial gets its own random stream derived from (master seed, index),
//! so the result vector is identical whether the sweep runs on the rayon
//! pool (`parallel` feature, default) or sequentially.

use crate::rng::SimRng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `trials` independent jobs and collect their results in index order.
pub fn map_trials<T, F>(trials: usize, master_seed: u64, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, SimRng) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..trials)
            .into_par_iter()
            .map(|i| job(i, SimRng::for_trial(master_seed, i as u64)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_trials_seq(trials, master_seed, job)
    }
}

/// Sequential reference path (bench baseline; also the fallback when the
/// `parallel` feature is off).
pub fn map_trials_seq<T, F>(trials: usize, master_seed: u64, job: F) -> Vec<T>
where
    F: Fn(usize, SimRng) -> T,
{
    (0..trials)
        .map(|i| job(i, SimRng::for_trial(master_seed, i as u64)))
        .collect()
}
