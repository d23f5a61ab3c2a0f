//! Toy transformer with grouped KV heads, rotary positions, dense or MoE
//! feed-forward layers and a position-blocked KV cache.

mod cache;
mod plan;
mod session;
mod weights;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::{KvBlock, KvCache};
pub use plan::{AttentionPlan, MoeSkipPlan, SparsityPlan};
pub use session::{FfnRecord, MoeRecord, PassShape, PassTrace, Session, SessionOptions, SparsityLog, VerifyOutput};
pub use weights::{tensor_directory, FeedForwardWeights, GatedFfnWeights, LayerWeights, Weights};

use crate::error::{Error, Result};
use crate::kernels::{self, FlopCategory, FlopCounter};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub vocab: usize,
    /// Explicit per-layer kinds. `None` alternates dense and MoE, starting
    /// with a dense layer.
    pub layer_kinds: Option<Vec<LayerKind>>,
    pub num_experts: usize,
    pub active_experts: usize,
    pub expert_hidden: usize,
    pub block_size: usize,
    pub rope_base: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            ffn_hidden: 256,
            num_query_heads: 4,
            num_kv_heads: 2,
            vocab: 256,
            layer_kinds: None,
            num_experts: 4,
            active_experts: 2,
            expert_hidden: 128,
            block_size: 16,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    /// Small all-dense model sharing `vocab` with a target.
    pub fn draft_default(vocab: usize) -> Self {
        Self {
            num_layers: 2,
            hidden: 32,
            ffn_hidden: 64,
            num_query_heads: 2,
            num_kv_heads: 1,
            vocab,
            layer_kinds: Some(vec![LayerKind::Dense; 2]),
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_query_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim()
    }

    /// Query heads served by each KV head.
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        match &self.layer_kinds {
            Some(kinds) => kinds[layer],
            None if layer % 2 == 1 => LayerKind::Moe,
            None => LayerKind::Dense,
        }
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.num_layers)
            .filter(|&l| self.layer_kind(l) == LayerKind::Moe)
            .collect()
    }

    pub fn dense_layers(&self) -> Vec<usize> {
        (0..self.num_layers)
            .filter(|&l| self.layer_kind(l) == LayerKind::Dense)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.num_layers == 0 || self.hidden == 0 || self.vocab == 0 || self.ffn_hidden == 0 {
            return fail("num_layers, hidden, ffn_hidden and vocab must be positive".into());
        }
        if self.num_query_heads == 0 || self.num_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return fail(format!(
                "num_kv_heads {} must divide num_query_heads {}",
                self.num_kv_heads, self.num_query_heads
            ));
        }
        if self.hidden % self.num_query_heads != 0 {
            return fail(format!(
                "hidden {} must be a multiple of num_query_heads {}",
                self.hidden, self.num_query_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary encoding", self.head_dim()));
        }
        if self.block_size == 0 {
            return fail("block_size must be at least 1".into());
        }
        if !(self.rope_base > 1.0) {
            return fail(format!("rope_base {} must exceed 1", self.rope_base));
        }
        if let Some(kinds) = &self.layer_kinds {
            if kinds.len() != self.num_layers {
                return fail(format!(
                    "layer_kinds lists {} layers, num_layers is {}",
                    kinds.len(),
                    self.num_layers
                ));
            }
        }
        if !self.moe_layers().is_empty() {
            if self.active_experts == 0 || self.active_experts > self.num_experts {
                return fail(format!(
                    "active_experts {} must lie in [1, num_experts={}]",
                    self.active_experts, self.num_experts
                ));
            }
            if self.expert_hidden == 0 {
                return fail("expert_hidden must be positive".into());
            }
        }
        Ok(())
    }
}

/// Immutable model: configuration plus weights. Share across sessions via
/// `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    /// Seeded uniform initialization in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::seeded(&config, seed);
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn session(self: &Arc<Self>) -> Session {
        Session::new(Arc::clone(self))
    }

    /// Router softmax and top-k for one token at an MoE layer.
    ///
    /// Returns `(expert ids, weights)` with weights ascending. Among equal
    /// probabilities the lower expert id ranks higher.
    pub fn route_topk(&self, x: &[f32], layer: usize, counter: &mut FlopCounter) -> Result<(Vec<usize>, Vec<f32>)> {
        let router = match &self.weights.layers[layer].ffn {
            FeedForwardWeights::Moe { router, .. } => router,
            FeedForwardWeights::Dense(_) => {
                return Err(Error::config(format!("layer {layer} is not an MoE layer")));
            }
        };
        let logits = kernels::matvec(router, x, counter, FlopCategory::MoeRouter);
        let probs = kernels::softmax(&logits)?;
        Ok(top_k_ascending(&probs, self.config.active_experts))
    }
}

/// Top-`k` entries of `probs`, reported in ascending probability order.
pub(crate) fn top_k_ascending(probs: &[f32], k: usize) -> (Vec<usize>, Vec<f32>) {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.reverse();
    let weights = order.iter().map(|&e| probs[e]).collect();
    (order, weights)
}
