//! Scenarios, workloads, failure injection and metrics.
//!
//! [`run_scenario`] executes one seeded run; [`sweep`] runs several seeds
//! in parallel and returns them in seed order.

pub mod audit;
pub mod config;
pub mod logs;
pub mod metrics;
pub mod workload;
pub mod world;

use rayon::prelude::*;

pub use config::{ConfigError, Mode, ScenarioConfig};
pub use world::{RunOutput, World};

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    cfg.validate()?;
    Ok(World::new(cfg).run())
}

/// One run per seed, each fully isolated; results in the order of `seeds`.
pub fn sweep(cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<RunOutput>, ConfigError> {
    cfg.validate()?;
    Ok(seeds
        .par_iter()
        .map(|s| {
            let mut c = cfg.clone();
            c.seed = *s;
            World::new(&c).run()
        })
        .collect())
}
