//! Detector hyper-parameter grid and backbone architecture space.

mod hpo;
mod nas;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use hpo::{
    encode_hpo_onehot, enumerate_hpo, HpoConfig, HPO_CARDINALITIES, HPO_ONEHOT_LEN, IOU_THRESHOLDS,
    LEARNING_RATES, LOC_LOSS_WEIGHTS, MIN_CROP_RATIOS, NEGPOS_RATIOS, OPTIMIZERS,
};
pub use nas::{
    arch_to_graph, estimate_flops, nas_space_size, sample_nas, Block, Graph, NasArch, StageSpec,
    EXPAND_CHOICES, KERNEL_CHOICES, MAX_REJECTIONS, NAS_STAGES, NODE_FEATURES, RES_360P,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Hpo,
    Nas,
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpaceKind::Hpo => "hpo",
            SpaceKind::Nas => "nas",
        })
    }
}

impl FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hpo" => Ok(SpaceKind::Hpo),
            "nas" => Ok(SpaceKind::Nas),
            _ => Err(Error::InvalidConfig(format!("unknown space `{s}`"))),
        }
    }
}

/// A point of either search space.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Config {
    Hpo(HpoConfig),
    Nas(NasArch),
}

impl Config {
    pub fn space(&self) -> SpaceKind {
        match self {
            Config::Hpo(_) => SpaceKind::Hpo,
            Config::Nas(_) => SpaceKind::Nas,
        }
    }

    pub fn id(&self) -> ConfigId {
        ConfigId {
            space: self.space(),
            text: self.to_string(),
        }
    }

    pub fn parse(space: SpaceKind, text: &str) -> Result<Self> {
        Ok(match space {
            SpaceKind::Hpo => Config::Hpo(text.parse()?),
            SpaceKind::Nas => Config::Nas(text.parse()?),
        })
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Config::Hpo(c) => c.fmt(f),
            Config::Nas(a) => a.fmt(f),
        }
    }
}

/// Canonical serialization plus the space it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConfigId {
    pub space: SpaceKind,
    pub text: String,
}

impl ConfigId {
    pub fn parse(&self) -> Result<Config> {
        Config::parse(self.space, &self.text)
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}
