use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, Algorithm};
use crate::discretizer::BinBoundaries;
use crate::env::PhysicsParams;
use crate::error::{Error, Result};
use crate::timewarp::RewindPolicy;

/// Environment variable holding a comma-separated seed list that replaces
/// the configured seeds.
pub const SEED_OVERRIDE_VAR: &str = "REWIND_SEED";

pub const DEFAULT_BUDGETS: [u64; 12] =
    [100, 200, 500, 1_000, 2_000, 5_000, 10_000, 20_000, 30_000, 40_000, 50_000, 100_000];

pub const DEFAULT_BENCHMARK_CAP: u64 = 500_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub timewarp_enabled: bool,
    pub rewind_policy: RewindPolicy,
    pub agent: AgentConfig,
    pub physics: PhysicsParams,
    pub bounds: BinBoundaries,
    pub budgets: Vec<u64>,
    pub seeds: Vec<u64>,
    pub benchmark_cap: u64,
    pub snapshot_capacity: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::QLearning,
            timewarp_enabled: true,
            rewind_policy: RewindPolicy::default(),
            agent: AgentConfig::default(),
            physics: PhysicsParams::default(),
            bounds: BinBoundaries::default(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            seeds: (1..=10).collect(),
            benchmark_cap: DEFAULT_BENCHMARK_CAP,
            snapshot_capacity: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.physics.validate()?;
        self.bounds.validate()?;
        self.rewind_policy.validate()?;
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("budgets must be strictly increasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.benchmark_cap == 0 {
            return Err(Error::InvalidConfig("benchmark_cap must be positive".into()));
        }
        if self.snapshot_capacity == 1 {
            return Err(Error::InvalidConfig("snapshot_capacity must be 0 or at least 2".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        if let Ok(raw) = std::env::var(SEED_OVERRIDE_VAR) {
            config.seeds = parse_seed_list(&raw)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn parse_seed_list(raw: &str) -> Result<Vec<u64>> {
    let seeds = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_OVERRIDE_VAR}: bad seed {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(format!("{SEED_OVERRIDE_VAR} is empty")));
    }
    Ok(seeds)
}
