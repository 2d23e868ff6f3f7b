use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Training targets for the hard-case stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetEncoding {
    OneHot,
    Variability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HcLoss {
    CrossEntropy,
    Ugf,
    /// Focal term plus feature decoupling.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HcObjective {
    pub targets: TargetEncoding,
    pub loss: HcLoss,
}

/// Cumulative strategy levels of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationLevel {
    /// Plain cross-entropy on majority one-hot targets.
    M1,
    /// M1 with vote-distribution targets.
    M2,
    /// M2 with the uncertainty-guided focal loss.
    M3,
    /// M3 plus feature decoupling.
    M4,
}

impl AblationLevel {
    pub const ALL: [AblationLevel; 4] = [Self::M1, Self::M2, Self::M3, Self::M4];

    pub fn name(self) -> &'static str {
        match self {
            Self::M1 => "m1",
            Self::M2 => "m2",
            Self::M3 => "m3",
            Self::M4 => "m4",
        }
    }

    pub fn objective(self) -> HcObjective {
        let (targets, loss) = match self {
            Self::M1 => (TargetEncoding::OneHot, HcLoss::CrossEntropy),
            Self::M2 => (TargetEncoding::Variability, HcLoss::CrossEntropy),
            Self::M3 => (TargetEncoding::Variability, HcLoss::Ugf),
            Self::M4 => (TargetEncoding::Variability, HcLoss::Joint),
        };
        HcObjective { targets, loss }
    }
}

pub fn ablation_variant(level: AblationLevel) -> HcObjective {
    level.objective()
}

impl fmt::Display for AblationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name().to_uppercase())
    }
}

impl FromStr for AblationLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Self::M1),
            "m2" => Ok(Self::M2),
            "m3" => Ok(Self::M3),
            "m4" => Ok(Self::M4),
            _ => Err(Error::InvalidArgument(format!("unknown ablation level `{s}`"))),
        }
    }
}
