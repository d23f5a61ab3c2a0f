use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::retrieval_reuse::AnchorSet;
use crate::sparse_attention::AttnSparsityConfig;
use crate::sparse_moe::{RatioNumerator, SkipRule, ThresholdMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPlan {
    pub config: AttnSparsityConfig,
    /// `None` makes every layer retrieve for itself.
    pub anchors: Option<AnchorSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeSkipPlan {
    pub map: ThresholdMap,
    /// Most experts a token may skip.
    pub budget: usize,
    #[serde(default)]
    pub rule: SkipRule,
    #[serde(default)]
    pub numerator: RatioNumerator,
    #[serde(default)]
    pub renormalize: bool,
}

/// Sparsity applied to one verification pass. The default plan is dense.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub attention: Option<AttentionPlan>,
    pub ffn_threshold: Option<f32>,
    pub moe_skip: Option<MoeSkipPlan>,
}

impl SparsityPlan {
    pub fn dense() -> Self {
        Self::default()
    }

    pub fn attention_only(config: AttnSparsityConfig, anchors: Option<AnchorSet>) -> Self {
        Self {
            attention: Some(AttentionPlan { config, anchors }),
            ..Self::default()
        }
    }

    pub fn is_dense(&self) -> bool {
        self.attention.is_none() && self.ffn_threshold.is_none() && self.moe_skip.is_none()
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if let Some(att) = &self.attention {
            att.config.validate()?;
            if att.config.block_size != model.block_size {
                return Err(Error::config(format!(
                    "attention block_size {} differs from the cache block size {}",
                    att.config.block_size, model.block_size
                )));
            }
            if let Some(a) = &att.anchors {
                a.validate()?;
                if a.num_layers != model.num_layers {
                    return Err(Error::config(format!(
                        "anchor set covers {} layers, model has {}",
                        a.num_layers, model.num_layers
                    )));
                }
            }
        }
        if let Some(tau) = self.ffn_threshold {
            if !(tau >= 0.0) {
                return Err(Error::config(format!("ffn threshold {tau} must be non-negative")));
            }
        }
        if let Some(moe) = &self.moe_skip {
            let k = model.active_experts;
            if moe.map.k != k {
                return Err(Error::config(format!(
                    "threshold map calibrated for k={}, model routes k={k}",
                    moe.map.k
                )));
            }
            if moe.budget >= k {
                return Err(Error::config(format!("skip budget {} must be below k={k}", moe.budget)));
            }
            for layer in model.moe_layers() {
                let betas = moe
                    .map
                    .betas(layer)
                    .ok_or_else(|| Error::config(format!("threshold map lacks MoE layer {layer}")))?;
                if betas.len() < moe.budget {
                    return Err(Error::config(format!(
                        "threshold map for layer {layer} has {} levels, budget is {}",
                        betas.len(),
                        moe.budget
                    )));
                }
            }
        }
        Ok(())
    }
}
