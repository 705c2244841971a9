//! The configuration file: one TOML document whose tables mirror the library
//! modules. Every key is optional and unknown keys are rejected.
//!
//! ```toml
//! [workload]
//! duration_days = 90
//! seed = 7
//!
//! [network]
//! wan_bandwidth_bytes_per_s = 12.5e6
//!
//! [prefetch]
//! score_floor = 0.5
//!
//! [prefetch.scorer]
//! hidden = [16]
//!
//! [experiment]
//! cache_fractions = [0.00125, 0.005, 0.01, 0.025, 0.05]
//! repetitions = 10
//! ```

use std::path::Path;

use medgate::cache::CacheConfig;
use medgate::patterns::PatternConfig;
use medgate::prefetch::PrefetchConfig;
use medgate::sensors::SensorConfig;
use medgate::sim::{NetworkModel, SimConfig};
use medgate::trace::WorkloadConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Cache capacities as fractions of the repository size.
    pub cache_fractions: Vec<f64>,
    pub repetitions: u32,
    pub seed: u64,
    /// When false only configuration 1 is simulated.
    pub prefetch_enabled: bool,
    pub passive_population: bool,
    pub per_image_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cache_fractions: vec![0.00125, 0.005, 0.01, 0.025, 0.05],
            repetitions: 10,
            seed: 1,
            prefetch_enabled: true,
            passive_population: true,
            per_image_time: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub workload: WorkloadConfig,
    pub network: NetworkModel,
    pub cache: CacheConfig,
    pub sensors: SensorConfig,
    pub prefetch: PrefetchConfig,
    pub patterns: PatternConfig,
    pub experiment: ExperimentConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub cache_fractions: Option<Vec<f64>>,
    pub repetitions: Option<u32>,
    pub no_prefetch: bool,
}

impl CliConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let cfg: CliConfig = toml::from_str(text)
            .map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text, p)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |section: &str, msg: String| Err(CliError::Config(format!("[{section}] {msg}")));
        if let Err(e) = self.workload.validate() {
            return bad("workload", e.to_string());
        }
        if let Err(e) = self.network.validate() {
            return bad("network", e);
        }
        if let Err(e) = self.cache.validate() {
            return bad("cache", e.to_string());
        }
        let window = self.sensors.utilization_window_s;
        if !window.is_finite() || window <= 0.0 {
            return bad("sensors", "utilization_window_s must be positive".into());
        }
        if let Err(e) = self.prefetch.validate() {
            return bad("prefetch", e);
        }
        if self.patterns.window_seconds <= 0 {
            return bad("patterns", "window_seconds must be positive".into());
        }
        let exp = &self.experiment;
        if exp.cache_fractions.is_empty() {
            return bad("experiment", "cache_fractions must not be empty".into());
        }
        if let Some(f) = exp
            .cache_fractions
            .iter()
            .find(|f| !(f.is_finite() && **f >= 0.0))
        {
            return bad(
                "experiment",
                format!("cache fraction {f} is not a non-negative number"),
            );
        }
        if exp.repetitions == 0 {
            return bad("experiment", "repetitions must be at least 1".into());
        }
        Ok(())
    }

    /// Applies flag values for `generate`, where `--seed` seeds the workload.
    pub fn for_generate(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(s) = o.seed {
            self.workload.seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    /// Applies flag values for `simulate`, where `--seed` seeds the models.
    pub fn for_simulate(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(s) = o.seed {
            self.experiment.seed = s;
        }
        if let Some(f) = &o.cache_fractions {
            self.experiment.cache_fractions = f.clone();
        }
        if let Some(r) = o.repetitions {
            self.experiment.repetitions = r;
        }
        if o.no_prefetch {
            self.experiment.prefetch_enabled = false;
        }
        self.validate()?;
        Ok(self)
    }

    /// Base simulation settings; capacity is filled in per sweep cell.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            cache_capacity_bytes: 0,
            prefetch_enabled: self.experiment.prefetch_enabled,
            passive_population: self.experiment.passive_population,
            per_image_time: self.experiment.per_image_time,
            seed: self.experiment.seed,
            network: self.network.clone(),
            cache: self.cache.clone(),
            sensors: self.sensors.clone(),
            prefetch: self.prefetch.clone(),
            patterns: self.patterns.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self)
            .map_err(|e| CliError::Config(format!("cannot serialize configuration: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(
            CliConfig::parse("", Path::new("c.toml")).unwrap(),
            CliConfig::default()
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = CliConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(CliConfig::parse(&text, Path::new("c.toml")).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let text = "[workload]\nseed = 3\n\n[prefetch]\nscore_flor = 0.4\n";
        let err = CliConfig::parse(text, Path::new("bad.toml"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("score_flor"), "{err}");
        assert!(err.contains("line 5"), "{err}");
        assert!(err.contains("bad.toml"), "{err}");
    }

    #[test]
    fn flags_win_over_file() {
        let cfg = CliConfig::parse(
            "[experiment]\nrepetitions = 4\nseed = 9\n",
            Path::new("c.toml"),
        )
        .unwrap();
        let o = Overrides {
            seed: Some(2),
            repetitions: Some(1),
            no_prefetch: true,
            ..Default::default()
        };
        let sim = cfg.clone().for_simulate(&o).unwrap();
        assert_eq!(sim.experiment.repetitions, 1);
        assert_eq!(sim.experiment.seed, 2);
        assert!(!sim.experiment.prefetch_enabled);
        let gen = cfg.for_generate(&o).unwrap();
        assert_eq!(gen.workload.seed, 2);
        assert_eq!(gen.experiment.seed, 9);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(CliConfig::parse("[experiment]\nrepetitions = 0\n", Path::new("c.toml")).is_err());
        assert!(CliConfig::parse("[cache]\nlow_watermark = 0.99\n", Path::new("c.toml")).is_err());
        assert!(CliConfig::parse("[network]\nwan_rtt_s = -1.0\n", Path::new("c.toml")).is_err());
    }
}
