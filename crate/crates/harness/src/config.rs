//! Harness configuration: a TOML file with per-field command-line overrides.

use std::path::Path;

use mtml_core::meta::InnerScope;
use mtml_core::tasks::{SplitSizes, WorldConfig};
use mtml_core::train::{FinetuneMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub grid: String,
    pub seeds: Vec<u64>,
    pub world_seed: u64,
    pub out: String,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    pub world: WorldConfig,
    pub splits: SplitSizes,
    pub train: TrainConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            grid: "default".into(),
            seeds: vec![0, 1, 2],
            world_seed: 0,
            out: "results".into(),
            jobs: 0,
            world: WorldConfig::default(),
            splits: SplitSizes::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Values given on the command line take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub grid: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<String>,
    pub world_seed: Option<u64>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub inner_scope: Option<InnerScope>,
    pub finetune_mode: Option<FinetuneMode>,
    pub jobs: Option<usize>,
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn apply(mut self, o: Overrides) -> Result<Self> {
        if let Some(v) = o.grid {
            self.grid = v;
        }
        if let Some(v) = o.seeds {
            self.seeds = v;
        }
        if let Some(v) = o.out {
            self.out = v;
        }
        if let Some(v) = o.world_seed {
            self.world_seed = v;
        }
        if let Some(v) = o.inner_lr {
            self.train.inner_lr = v;
        }
        if let Some(v) = o.outer_lr {
            self.train.lr = v;
        }
        if let Some(v) = o.inner_scope {
            self.train.inner_scope = v;
        }
        if let Some(v) = o.finetune_mode {
            self.train.finetune_mode = v;
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Parses `0,1,2` or a range `0..5` (end exclusive).
pub fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
        if a >= b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = HarnessConfig::default();
        assert_eq!(HarnessConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = HarnessConfig::from_toml(
            "seeds = [4]\n[train]\nlr = 0.01\ninner_scope = \"heads_only\"\n[world]\nnoise = 0.1\n",
        )
        .unwrap();
        assert_eq!(c.seeds, vec![4]);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.inner_scope, InnerScope::HeadsOnly);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.world.noise, 0.1);
        assert_eq!(c.world.d_in, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(HarnessConfig::from_toml("sedes = [1]").is_err());
    }

    #[test]
    fn overrides_win() {
        let c = HarnessConfig::default()
            .apply(Overrides {
                outer_lr: Some(0.02),
                inner_lr: Some(0.2),
                finetune_mode: Some(FinetuneMode::HeadsOnly),
                seeds: Some(vec![9]),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!(c.train.lr, 0.02);
        assert_eq!(c.train.inner_lr, 0.2);
        assert_eq!(c.train.finetune_mode, FinetuneMode::HeadsOnly);
        assert_eq!(c.seeds, vec![9]);
        let bad = HarnessConfig::default().apply(Overrides {
            outer_lr: Some(-1.0),
            ..Overrides::default()
        });
        assert!(bad.is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0,1, 2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("3..6").unwrap(), vec![3, 4, 5]);
        assert!(parse_seeds("5..5").is_err());
        assert!(parse_seeds("a").is_err());
    }
}
