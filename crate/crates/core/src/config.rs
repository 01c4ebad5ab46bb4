//! JSON experiment configuration. A file names a scale profile and overrides
//! any subset of its fields; objects merge key by key, everything else replaces.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analytical::{EstimatorOpts, OptimizerOpts};
use crate::error::{Error, Result};
use crate::io::{read_bytes, SplitSpec};
use crate::learned::TrainConfig;
use crate::optics::{LaserSpec, MarkerSpec, OpticalParams};
use crate::scene::SweepSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::Config(format!("unknown scale {s:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub seed: u64,
    pub optics: OpticalParams,
    pub laser: LaserSpec,
    pub marker: MarkerSpec,
    pub sweep: SweepSpec,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub estimator: EstimatorOpts,
    pub calibration: OptimizerOpts,
}

impl ExperimentConfig {
    pub fn defaults(scale: Scale) -> Self {
        let (optics, laser, sweep) = match scale {
            Scale::Desk => (OpticalParams::desk(), LaserSpec::desk(), SweepSpec::desk()),
            Scale::Paper => (OpticalParams::paper(), LaserSpec::paper(), SweepSpec::paper()),
        };
        Self {
            scale,
            seed: 0,
            optics,
            laser,
            marker: MarkerSpec::default(),
            sweep,
            split: SplitSpec {
                ratios: (0.8, 0.1, 0.1),
                seed: 0,
            },
            train: TrainConfig::default(),
            estimator: EstimatorOpts::default(),
            calibration: OptimizerOpts::default(),
        }
    }

    /// Parses `text` over the defaults of its scale, or of `scale` when given.
    pub fn from_json(text: &str, scale: Option<Scale>) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        let Value::Object(ref fields) = user else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let scale = match (scale, fields.get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("scale: {e}")))?,
            (None, None) => Scale::Desk,
        };
        let mut merged = serde_json::to_value(Self::defaults(scale))?;
        merge(&mut merged, user);
        merged["scale"] = serde_json::to_value(scale)?;
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, scale: Option<Scale>) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text, scale)
    }

    pub fn validate(&self) -> Result<()> {
        self.optics.validate()?;
        self.laser.validate()?;
        self.sweep.validate().map_err(as_config)?;
        self.train.validate()?;
        let (a, b, c) = self.split.ratios;
        if [a, b, c].iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must be non-negative and sum to 1, got {:?}", self.split.ratios)));
        }
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Input(m) => Error::Config(m),
        e => e,
    }
}

/// Recursive object merge. A tagged object whose `kind` changes is replaced whole.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if b.get("kind").is_none() || o.get("kind").is_none_or(|k| Some(k) == b.get("kind")) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
