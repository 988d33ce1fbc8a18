//! Run configuration shared by the library drivers and the CLI.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, EvalConfig};
use crate::error::{Error, Result};
use crate::palette::PaletteConfig;

/// Environment variable consulted when no data directory is configured.
pub const DATA_DIR_ENV: &str = "AUTOPALETTE_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub train_per_class: usize,
    /// Balanced across classes.
    pub test_total: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train_per_class: 500,
            test_total: 1000,
        }
    }
}

impl DataConfig {
    /// Configured directory, else the environment fallback.
    pub fn resolve_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.dir {
            return Ok(d.clone());
        }
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub distill: DistillConfig,
    pub palette: PaletteConfig,
    pub eval: EvalConfig,
    pub repro: ReproConfig,
}

/// Color counts swept by the reproduction suites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproConfig {
    pub sweep_colors: Vec<usize>,
    pub compare_colors: Vec<usize>,
}

impl Default for ReproConfig {
    fn default() -> Self {
        Self {
            sweep_colors: vec![2, 4, 8, 16, 32, 64, 256],
            compare_colors: vec![2, 4, 8, 16, 32, 64],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train_per_class == 0 || self.data.test_total == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        let colors = self.repro.sweep_colors.iter().chain(&self.repro.compare_colors);
        if let Some(k) = colors.copied().find(|&k| k == 0 || k > crate::quantize::MAX_COLORS) {
            return Err(Error::Config(format!("repro color count {k} not in 1..=256")));
        }
        self.distill.validate()?;
        self.palette.validate()?;
        self.eval.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("[palette]\nk = 8\n[distill]\niterations = 5\n").unwrap();
        assert_eq!(cfg.palette.k, 8);
        assert_eq!(cfg.distill.iterations, 5);
        assert_eq!(cfg.palette.gamma, 3.0);
    }

    #[test]
    fn shipped_config_matches_defaults() {
        let cfg = RunConfig::from_toml(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[palette]\nkk = 8\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[nope]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[palette]\nk = 0\n").is_err());
        assert!(RunConfig::from_toml("[distill]\nimage_lr = -1.0\n").is_err());
    }
}
