//! TOML run configuration with `[model]`, `[train]` and `[data]` sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Mode, RuleSet, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::train::TrainConfig;

/// `[data]` section: synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub images: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub canvas: u32,
    pub binary_pairs_per_image: Option<usize>,
    /// Predicate rule set; `None` picks the mode's default.
    pub rules: Option<RuleSet>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::new(Mode::DoubletVrd, 600, 0);
        Self {
            images: s.images,
            seed: s.seed,
            test_fraction: s.test_fraction,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            canvas: s.canvas,
            binary_pairs_per_image: s.binary_pairs_per_image,
            rules: None,
        }
    }
}

impl DataConfig {
    pub fn synth(&self, mode: Mode) -> SynthConfig {
        let mut s = SynthConfig::new(mode, self.images, self.seed);
        s.test_fraction = self.test_fraction;
        s.min_objects = self.min_objects;
        s.max_objects = self.max_objects;
        s.canvas = self.canvas;
        s.binary_pairs_per_image = self.binary_pairs_per_image;
        if let Some(r) = self.rules {
            s.rules = r;
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelDims,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`; a missing path yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
