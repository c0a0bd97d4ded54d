//! The run configuration: every tracker setting plus IO settings, in one
//! flat JSON object. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use oatrack_core::{Ablation, TrackerConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{io_err, Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "OATRACK_OUT";
pub const DEFAULT_OUT_ROOT: &str = "oatrack-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSettings {
    /// OTB sequence directories to track, in addition to command-line ones.
    pub sequences: Vec<PathBuf>,
    /// Embedding weight file; the bundled weights are used when absent.
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Sequences tracked concurrently.
    pub workers: usize,
    /// Generated GAN patches written per sequence after tracking.
    pub dump_gan_samples: usize,
}

impl Default for IoSettings {
    fn default() -> Self {
        Self { sequences: Vec::new(), weights: None, out: None, workers: 1, dump_gan_samples: 0 }
    }
}

const IO_KEYS: &[&str] = &["sequences", "weights", "out", "workers", "dump_gan_samples"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub io: IoSettings,
    pub tracker: TrackerConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(all) = value else {
            return Err(Error::Config("expected a JSON object".into()));
        };
        let (io, tracker): (Map<String, Value>, Map<String, Value>) =
            all.into_iter().partition(|(k, _)| IO_KEYS.contains(&k.as_str()));
        let io: IoSettings = serde_json::from_value(Value::Object(io)).map_err(|e| Error::Config(e.to_string()))?;
        let tracker: TrackerConfig =
            serde_json::from_value(Value::Object(tracker)).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = Self { io, tracker };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.tracker).expect("serializable") {
            Value::Object(m) => m,
            _ => unreachable!("tracker config is a struct"),
        };
        if let Value::Object(io) = serde_json::to_value(&self.io).expect("serializable") {
            map.extend(io);
        }
        Value::Object(map)
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        if self.io.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies command-line overrides; flags win over the file.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>, workers: Option<usize>, ablations: &[Ablation], dump: Option<usize>) {
        if let Some(s) = seed {
            self.tracker.seed = s;
        }
        if let Some(o) = out {
            self.io.out = Some(o);
        }
        if let Some(w) = workers {
            self.io.workers = w;
        }
        if !ablations.is_empty() {
            self.tracker.ablations = ablations.to_vec();
        }
        if let Some(d) = dump {
            self.io.dump_gan_samples = d;
        }
    }

    /// Output directory: the configured one, else `$OATRACK_OUT`, else a default.
    pub fn out_dir(&self) -> PathBuf {
        self.io.out.clone().unwrap_or_else(default_out_root)
    }
}

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn flat_keys_reach_both_halves() {
        let c = RunConfig::from_json(r#"{"n_proposals": 8, "workers": 3, "lstm": {"units": 4}, "ablations": ["gan-off"]}"#).unwrap();
        assert_eq!(c.tracker.n_proposals, 8);
        assert_eq!(c.tracker.lstm.units, 4);
        assert_eq!(c.tracker.ablations, vec![Ablation::GanOff]);
        assert_eq!(c.io.workers, 3);
    }

    #[test]
    fn typos_are_rejected() {
        assert!(RunConfig::from_json(r#"{"n_propsals": 8}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lstm": {"unit": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"update_threshold": 1.5}"#).is_err());
    }

    #[test]
    fn serialized_form_parses_back() {
        let mut c = RunConfig::default();
        c.tracker.seed = 5;
        c.io.weights = Some("w.oatw".into());
        let text = serde_json::to_string(&c.to_value()).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn flags_win() {
        let mut c = RunConfig::from_json(r#"{"seed": 1, "ablations": ["gan-off"]}"#).unwrap();
        c.apply_overrides(Some(9), None, Some(2), &[Ablation::LstmOff], None);
        assert_eq!(c.tracker.seed, 9);
        assert_eq!(c.io.workers, 2);
        assert_eq!(c.tracker.ablations, vec![Ablation::LstmOff]);
    }
}
