use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::models::{LayerId, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    /// Transferred layers are frozen.
    Fixed,
    /// Transferred layers keep training.
    FineTune,
}

impl FromStr for TransferMode {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(TransferMode::Fixed),
            "finetune" | "fine-tune" | "fine_tune" => Ok(TransferMode::FineTune),
            _ => Err(TrainError::Config(format!("unknown transfer mode {s:?}, expected fixed or finetune"))),
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::Fixed => "fixed",
            TransferMode::FineTune => "finetune",
        })
    }
}

/// An entry of a plan's layer set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelector {
    All,
    L1,
    L2,
    L3,
}

impl FromStr for LayerSelector {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(LayerSelector::All),
            "l1" => Ok(LayerSelector::L1),
            "l2" => Ok(LayerSelector::L2),
            "l3" => Ok(LayerSelector::L3),
            _ => Err(TrainError::Config(format!("unknown layer {s:?}, expected l1, l2, l3 or all"))),
        }
    }
}

/// Which source layers a target model receives, and whether they stay frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub layers: Vec<LayerSelector>,
    pub mode: TransferMode,
}

impl Default for TransferPlan {
    fn default() -> Self {
        Self {
            layers: vec![LayerSelector::L1],
            mode: TransferMode::FineTune,
        }
    }
}

impl TransferPlan {
    pub fn new(layers: Vec<LayerSelector>, mode: TransferMode) -> Result<Self, TrainError> {
        let p = Self { layers, mode };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.layers.is_empty() {
            return Err(TrainError::Config("transfer plan needs at least one layer".into()));
        }
        if self.layers.contains(&LayerSelector::All) && self.layers.len() > 1 {
            return Err(TrainError::Config("\"all\" cannot be combined with individual layers".into()));
        }
        Ok(())
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids: Vec<LayerId> = self
            .layers
            .iter()
            .flat_map(|s| match s {
                LayerSelector::All => LayerId::ALL.to_vec(),
                LayerSelector::L1 => vec![LayerId(0)],
                LayerSelector::L2 => vec![LayerId(1)],
                LayerSelector::L3 => vec![LayerId(2)],
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Short tag such as `l1+l2/finetune` or `all/fixed`.
    pub fn tag(&self) -> String {
        let names: Vec<&str> = self
            .layers
            .iter()
            .map(|s| match s {
                LayerSelector::All => "all",
                LayerSelector::L1 => "l1",
                LayerSelector::L2 => "l2",
                LayerSelector::L3 => "l3",
            })
            .collect();
        format!("{}/{}", names.join("+"), self.mode)
    }
}

/// Tag for runs without transfer.
pub const NO_TRANSFER: &str = "none";

pub fn plan_tag(plan: Option<&TransferPlan>) -> String {
    plan.map_or_else(|| NO_TRANSFER.to_string(), TransferPlan::tag)
}

/// Copies the planned layers' `W`, `V`, `b`, `c` from `source` into `target`
/// and freezes them under [`TransferMode::Fixed`].
///
/// The source's input standardization comes along, since transferred filters
/// expect inputs scaled the way they were trained on. Everything else in the
/// target keeps its fresh initialization.
pub fn apply_transfer(source: &Model, target: &mut Model, plan: &TransferPlan) -> Result<(), TrainError> {
    plan.validate()?;
    for layer in plan.layer_ids() {
        for name in layer.conv_params() {
            let src = source
                .params
                .get(&name)
                .map_err(|_| TrainError::Transfer(format!("source lacks {name}")))?;
            let dst = target
                .params
                .get_mut(&name)
                .map_err(|_| TrainError::Transfer(format!("target lacks {name}")))?;
            if src.value.shape() != dst.value.shape() {
                return Err(TrainError::Transfer(format!(
                    "{layer} shape mismatch on {name}: source {:?}, target {:?}",
                    src.value.shape(),
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
            dst.frozen = plan.mode == TransferMode::Fixed;
        }
    }
    for name in ["input.mean", "input.std"] {
        let v = source.params.value(name).map_err(|e| TrainError::Transfer(e.to_string()))?.clone();
        target
            .params
            .set_value(name, v)
            .map_err(|e| TrainError::Transfer(e.to_string()))?;
    }
    Ok(())
}
