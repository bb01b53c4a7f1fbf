//! Dataset manifest, preprocessing, augmentation, rebalancing and batching.

mod augment;
mod batch;
mod manifest;
mod preprocess;
mod rebalance;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentParams};
pub use batch::{Batch, BatchStream, Dataset, EpochPlan, Example};
pub use manifest::{Manifest, ManifestRow};
pub use preprocess::{
    apply_mask, assemble_input, normalize, resize_bilinear, select_slice, slice_areas,
    NORMALIZE_STD_FLOOR,
};
pub use rebalance::{rebalance, PlanEntry};
pub use synth::{dataset_checksum, synth_dataset, SynthOptions, INSTITUTIONS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

/// Image channels fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "PET")]
    Pet,
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "MASKED_CT")]
    MaskedCt,
    #[serde(rename = "PET_CT")]
    PetCt,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::PetCt => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Pet => "PET",
            Modality::Ct => "CT",
            Modality::MaskedCt => "MASKED_CT",
            Modality::PetCt => "PET_CT",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "PET" => Ok(Modality::Pet),
            "CT" => Ok(Modality::Ct),
            "MASKED_CT" => Ok(Modality::MaskedCt),
            "PET_CT" => Ok(Modality::PetCt),
            _ => Err(Error::Config(format!(
                "unknown modality `{s}` (expected PET, CT, MASKED_CT or PET_CT)"
            ))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One patient after slice selection. Images are `[1, H, W]`; PET may be
/// smaller than CT.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    pub institution: String,
    pub ct: Tensor,
    pub pet: Tensor,
    pub mask: Tensor,
    /// 0 survival, 1 death.
    pub label: usize,
    pub split: Split,
}

pub(crate) fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Rank {
            op,
            expected: 3,
            shape: t.shape().to_vec(),
        }),
    }
}
