//! Run configuration, read from TOML.
//!
//! Precedence: command-line flags, then the config file, then built-in defaults.
//!
//! ```toml
//! seed = 42
//!
//! [data]
//! dir = "data"          # omit to simulate from [data.synth]
//!
//! [grid]
//! delta_s_km = [1.0, 3.0, 5.0]
//!
//! [time]
//! delta_t_min = [5, 20, 30]
//! t_prime_min = 30
//! window_policy = "ceil"
//!
//! [labels]
//! alpha_min = 60.0
//! beta_min = 60.0
//! delta_km = 3.6
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bf::{BfCalibration, BfConfig};
use crate::cnn::{ConvActivation, TrainConfig, DEFAULT_FILTERS, FULL_FILTERS};
use crate::data::{parse_time, BoundingBox, Timestamp};
use crate::error::{Error, Result};
use crate::labels::MatchRule;
use crate::mopt::ObjectiveConfig;
use crate::synth::ScenarioConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding reports.csv, incidents.csv and optional covariates.
    pub dir: Option<PathBuf>,
    pub synth: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Study region; defaults to the data's region.json or the synthetic region.
    pub region: Option<BoundingBox>,
    pub delta_s_km: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { region: None, delta_s_km: vec![1.0, 3.0, 5.0] }
    }
}

/// What to do when T′ is not a multiple of Δt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowPolicy {
    /// Reject the configuration.
    Strict,
    /// Use `ceil(T′/Δt)` frames, so the window covers at least T′.
    #[default]
    Ceil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSection {
    pub delta_t_min: Vec<u32>,
    pub t_prime_min: u32,
    pub window_policy: WindowPolicy,
    /// Origin of the time bins (ISO-8601); defaults to the start of the data.
    pub epoch: Option<String>,
}

impl Default for TimeSection {
    fn default() -> Self {
        TimeSection { delta_t_min: vec![5, 20, 30], t_prime_min: 30, window_policy: WindowPolicy::Ceil, epoch: None }
    }
}

impl TimeSection {
    /// Frames per window for step `dt`.
    pub fn frames(&self, dt: u32) -> Result<usize> {
        if dt == 0 || self.t_prime_min == 0 {
            return Err(Error::config("time", "delta_t_min and t_prime_min must be positive"));
        }
        match self.window_policy {
            WindowPolicy::Strict => crate::features::window_len(dt, self.t_prime_min),
            WindowPolicy::Ceil => Ok(self.t_prime_min.div_ceil(dt) as usize),
        }
    }

    /// Window length in minutes actually used for step `dt`.
    pub fn window_minutes(&self, dt: u32) -> Result<u32> {
        Ok(self.frames(dt)? as u32 * dt)
    }

    pub fn epoch_time(&self) -> Result<Option<Timestamp>> {
        self.epoch
            .as_deref()
            .map(|s| parse_time(s).map_err(|e| Error::config("time", format!("epoch: {e}"))))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSection {
    pub filters: usize,
    /// Use the full-size filter count regardless of `filters`.
    pub paper_arch: bool,
    pub conv_activation: ConvActivation,
    /// Training windows sampled per rotation; 0 uses every window.
    pub max_train_windows: usize,
    pub train: TrainConfig,
}

impl Default for CnnSection {
    fn default() -> Self {
        CnnSection {
            filters: DEFAULT_FILTERS,
            paper_arch: false,
            conv_activation: ConvActivation::Linear,
            max_train_windows: 1000,
            train: TrainConfig::default(),
        }
    }
}

impl CnnSection {
    pub fn effective_filters(&self) -> usize {
        if self.paper_arch {
            FULL_FILTERS
        } else {
            self.filters
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BfSection {
    pub base: BfConfig,
    pub calibration: BfCalibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("run") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub grid: GridSection,
    pub time: TimeSection,
    pub labels: MatchRule,
    pub cnn: CnnSection,
    pub bf: BfSection,
    pub objectives: ObjectiveConfig,
    pub output: OutputSection,
}

/// Label radius for sweeps: a 5 km cell's centre is within this distance of
/// any point inside the cell.
pub const DEFAULT_SWEEP_DELTA_KM: f64 = 3.6;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: DataSection::default(),
            grid: GridSection::default(),
            time: TimeSection::default(),
            labels: MatchRule { delta_km: DEFAULT_SWEEP_DELTA_KM, ..MatchRule::default() },
            cnn: CnnSection::default(),
            bf: BfSection::default(),
            objectives: ObjectiveConfig::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let section = e.span().and_then(|s| section_at(text, s.start)).unwrap_or_else(|| "config".to_string());
            Error::config(section, e.message().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Relative data paths are resolved against the config file.
        if let (Some(dir), Some(base)) = (cfg.data.dir.as_ref(), path.parent()) {
            if dir.is_relative() {
                cfg.data.dir = Some(base.join(dir));
            }
        }
        Ok(cfg)
    }

    /// Applies the global seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.synth.seed = seed;
        self.cnn.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.dir.is_none() {
            self.data.synth.validate()?;
        }
        if let Some(r) = &self.grid.region {
            r.validate().map_err(|e| Error::config("grid", e.to_string()))?;
        }
        if self.grid.delta_s_km.is_empty() || self.grid.delta_s_km.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::config("grid", "delta_s_km must be a non-empty list of positive values"));
        }
        if self.time.delta_t_min.is_empty() {
            return Err(Error::config("time", "delta_t_min must be non-empty"));
        }
        for dt in &self.time.delta_t_min {
            self.time.frames(*dt)?;
            if 1440 % dt != 0 {
                return Err(Error::config("time", format!("delta_t_min {dt} must divide a day")));
            }
        }
        self.time.epoch_time()?;
        self.labels.validate()?;
        if self.cnn.effective_filters() == 0 {
            return Err(Error::config("cnn", "filters must be positive"));
        }
        self.cnn.train.validate()?;
        self.bf.base.validate()?;
        self.bf.calibration.validate()?;
        self.objectives.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serialisable")
    }
}

// Name of the `[section]` enclosing byte offset `at`.
fn section_at(text: &str, at: usize) -> Option<String> {
    text[..at.min(text.len())]
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            (l.starts_with('[') && l.ends_with(']')).then(|| l.trim_matches(|c| c == '[' || c == ']').to_string())
        })
        .map(|s| s.split('.').next().unwrap_or_default().to_string())
        .or_else(|| Some("config".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7\n[grid]\ndelta_s_km = [2.0]\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grid.delta_s_km, vec![2.0]);
        assert_eq!(cfg.time.t_prime_min, 30);
    }

    #[test]
    fn errors_name_the_section() {
        let err = RunConfig::from_toml_str("[labels]\nalpha_min = \"x\"\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref section, .. } if section == "labels"), "{err}");
        let err = RunConfig::from_toml_str("[time]\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref section, .. } if section == "time"), "{err}");
        let mut cfg = RunConfig::default();
        cfg.labels.delta_km = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { ref section, .. }) if section == "labels"));
    }

    #[test]
    fn window_policy() {
        let mut t = TimeSection::default();
        assert_eq!(t.frames(20).unwrap(), 2);
        assert_eq!(t.frames(5).unwrap(), 6);
        t.window_policy = WindowPolicy::Strict;
        assert!(matches!(t.frames(20), Err(Error::Config { ref section, .. }) if section == "time"));
        assert_eq!(t.frames(30).unwrap(), 1);
    }
}
