//! Importance-based block retrieval over the KV cache.
//!
//! During one verification pass the query of the first pass token scores
//! every cached block of every KV head; the highest-scoring blocks, plus a
//! few sink blocks at the start and local blocks at the end, form a
//! [`BlockMask`] that every token of the pass attends through. Draft-token
//! keys are never part of the cache and therefore never scored.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{dot, FlopCategory, FlopCounter};
use crate::model::KvCache;

/// How the query heads sharing one KV head are folded into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryAggregation {
    /// Score with the mean of the group's query vectors.
    #[default]
    Mean,
    /// Score with each query head and keep the maximum.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnSparsityConfig {
    /// No eviction while the cache holds at most this many tokens.
    pub base_length: usize,
    /// Fraction of the tokens beyond `base_length` that stay retained.
    pub rho: f64,
    #[serde(default = "one")]
    pub sink_blocks: usize,
    #[serde(default = "one")]
    pub local_blocks: usize,
    pub block_size: usize,
    #[serde(default)]
    pub aggregation: QueryAggregation,
}

fn one() -> usize {
    1
}

impl AttnSparsityConfig {
    pub fn new(base_length: usize, rho: f64, block_size: usize) -> Self {
        Self {
            base_length,
            rho,
            sink_blocks: 1,
            local_blocks: 1,
            block_size,
            aggregation: QueryAggregation::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config(format!("rho {} must lie in (0, 1)", self.rho)));
        }
        if self.block_size == 0 {
            return Err(Error::config("block_size must be at least 1"));
        }
        let mandatory = (self.sink_blocks + self.local_blocks) * self.block_size;
        if self.base_length < mandatory {
            return Err(Error::config(format!(
                "base_length {} is below the sink+local span of {mandatory} tokens",
                self.base_length
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    /// Every block is retained.
    Full,
    /// Total retained blocks summed over KV heads.
    Blocks(usize),
}

/// Piecewise retention budget.
///
/// Up to `base_length` tokens nothing is evicted. Beyond it the aggregate
/// budget is `floor(((L - L0) * rho + L0) * H / B)`, clamped between the
/// sink+local minimum and the total number of blocks. A token budget that
/// covers the whole cache keeps every block, partial last block included.
pub fn compute_budget(seq_len: usize, cfg: &AttnSparsityConfig, num_kv_heads: usize) -> Budget {
    if seq_len <= cfg.base_length {
        return Budget::Full;
    }
    let extra = (seq_len - cfg.base_length) as f64;
    let kept_tokens = extra * cfg.rho + cfg.base_length as f64;
    if kept_tokens >= seq_len as f64 {
        return Budget::Full;
    }
    let raw = (kept_tokens * num_kv_heads as f64) / cfg.block_size as f64;
    let total = num_kv_heads * seq_len.div_ceil(cfg.block_size);
    let floor = num_kv_heads * (cfg.sink_blocks + cfg.local_blocks);
    let n = (raw.floor() as usize).clamp(floor.min(total), total);
    if n >= total {
        Budget::Full
    } else {
        Budget::Blocks(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    Retrieved,
    /// Copied from an anchor layer (0-based layer index).
    Reused {
        anchor_layer: usize,
    },
}

/// Retained block indices of one layer, per KV head, sorted ascending.
///
/// The index lists live behind an `Arc`; masks reused across tokens or layers
/// share the same allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    heads: Arc<Vec<Vec<usize>>>,
    provenance: MaskProvenance,
}

impl BlockMask {
    pub fn new(mut heads: Vec<Vec<usize>>) -> Self {
        for h in &mut heads {
            h.sort_unstable();
            h.dedup();
        }
        Self {
            heads: Arc::new(heads),
            provenance: MaskProvenance::Retrieved,
        }
    }

    pub fn full(num_heads: usize, num_blocks: usize) -> Self {
        Self::new(vec![(0..num_blocks).collect(); num_heads])
    }

    pub fn heads(&self) -> &[Vec<usize>] {
        &self.heads
    }

    pub fn head(&self, h: usize) -> &[usize] {
        &self.heads[h]
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    pub fn retained(&self) -> usize {
        self.heads.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, head: usize, block: usize) -> bool {
        self.heads[head].binary_search(&block).is_ok()
    }

    /// Same block lists, marked as reused from `anchor_layer`.
    pub fn reused_from(&self, anchor_layer: usize) -> Self {
        Self {
            heads: Arc::clone(&self.heads),
            provenance: MaskProvenance::Reused { anchor_layer },
        }
    }

    /// True when both masks share one block-list allocation.
    pub fn shares_storage(&self, other: &BlockMask) -> bool {
        Arc::ptr_eq(&self.heads, &other.heads)
    }

    /// Set of `(head, block)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.heads
            .iter()
            .enumerate()
            .flat_map(|(h, blocks)| blocks.iter().map(move |&b| (h, b)))
    }

    /// Cached keys retained for `head` given the cache's block occupancy.
    pub fn retained_keys(&self, cache: &KvCache, layer: usize, head: usize) -> usize {
        let blocks = cache.blocks(layer, head);
        self.heads[head].iter().map(|&b| blocks[b].len()).sum()
    }
}

/// Block importance `s[h][b] = mean over keys k in block b of q̃_h · k`.
///
/// `queries` holds all query heads of the first pass token, rotated to its
/// position. The partial final block averages over its occupied slots.
/// Scoring work is charged to `other`.
pub fn score_blocks(
    cache: &KvCache,
    layer: usize,
    queries: &[f32],
    group_size: usize,
    aggregation: QueryAggregation,
    counter: &mut FlopCounter,
) -> Vec<Vec<f64>> {
    let hd = cache.head_dim();
    let mut out = Vec::with_capacity(cache.num_kv_heads());
    for h in 0..cache.num_kv_heads() {
        let group: Vec<&[f32]> = (0..group_size)
            .map(|g| {
                let qh = h * group_size + g;
                &queries[qh * hd..(qh + 1) * hd]
            })
            .collect();
        let probes: Vec<Vec<f32>> = match aggregation {
            QueryAggregation::Mean => {
                let mean = (0..hd)
                    .map(|j| (group.iter().map(|q| q[j] as f64).sum::<f64>() / group_size as f64) as f32)
                    .collect();
                vec![mean]
            }
            QueryAggregation::Max => group.iter().map(|q| q.to_vec()).collect(),
        };
        let mut scores = Vec::with_capacity(cache.num_blocks(layer));
        for block in cache.blocks(layer, h) {
            let mut best = f64::NEG_INFINITY;
            for probe in &probes {
                let sum: f64 = (0..block.len()).map(|s| dot(probe, block.key(s, hd))).sum();
                best = best.max(sum / block.len() as f64);
            }
            scores.push(best);
            counter.add(FlopCategory::Other, (2 * hd * block.len() * probes.len()) as u64);
        }
        out.push(scores);
    }
    out
}

/// Per-head quotas for an aggregate `budget`: `budget / H` each, with the
/// remainder handed to the lowest-index heads one block apiece.
pub fn head_quotas(budget: usize, num_heads: usize) -> Vec<usize> {
    let base = budget / num_heads;
    let extra = budget % num_heads;
    (0..num_heads).map(|h| base + usize::from(h < extra)).collect()
}

/// Keeps sink and local blocks, then fills each head's quota with the
/// highest-scoring remaining blocks. Equal scores favour lower indices.
pub fn select_blocks(scores: &[Vec<f64>], budget: usize, cfg: &AttnSparsityConfig) -> Result<BlockMask> {
    let num_heads = scores.len();
    let num_blocks = scores.first().map_or(0, Vec::len);
    let total = num_heads * num_blocks;
    if budget >= total {
        return Ok(BlockMask::full(num_heads, num_blocks));
    }
    let mandatory = num_heads * (cfg.sink_blocks + cfg.local_blocks);
    if budget < mandatory {
        return Err(Error::config(format!(
            "budget {budget} blocks is below the {mandatory} sink+local blocks"
        )));
    }
    let quotas = head_quotas(budget, num_heads);
    let heads = scores
        .iter()
        .zip(quotas)
        .map(|(head_scores, quota)| {
            let mut keep: Vec<bool> = (0..num_blocks)
                .map(|b| b < cfg.sink_blocks || b + cfg.local_blocks >= num_blocks)
                .collect();
            let already = keep.iter().filter(|&&k| k).count();
            let mut rest: Vec<usize> = (0..num_blocks).filter(|&b| !keep[b]).collect();
            rest.sort_by(|&a, &b| head_scores[b].total_cmp(&head_scores[a]).then(a.cmp(&b)));
            for &b in rest.iter().take(quota.saturating_sub(already)) {
                keep[b] = true;
            }
            (0..num_blocks).filter(|&b| keep[b]).collect()
        })
        .collect();
    Ok(BlockMask::new(heads))
}

/// Retrieval for one layer: `None` when the budget keeps every block.
pub fn retrieve(
    cache: &KvCache,
    layer: usize,
    queries: &[f32],
    group_size: usize,
    cfg: &AttnSparsityConfig,
    counter: &mut FlopCounter,
) -> Result<Option<BlockMask>> {
    match compute_budget(cache.layer_len(layer), cfg, cache.num_kv_heads()) {
        Budget::Full => Ok(None),
        Budget::Blocks(n) => {
            let scores = score_blocks(cache, layer, queries, group_size, cfg.aggregation, counter);
            select_blocks(&scores, n, cfg).map(Some)
        }
    }
}

/// Micro-averaged overlap `Σ_h |a_h ∩ b_h| / N` of two masks drawn with the
/// same aggregate budget `N`.
pub fn overlap_ratio(a: &BlockMask, b: &BlockMask) -> Result<f64> {
    if a.heads.len() != b.heads.len() {
        return Err(Error::input("masks cover different numbers of heads"));
    }
    let n = a.retained();
    if n != b.retained() {
        return Err(Error::input(format!(
            "masks drawn with different budgets ({n} vs {})",
            b.retained()
        )));
    }
    if n == 0 {
        return Ok(1.0);
    }
    let shared: usize = a
        .heads
        .iter()
        .zip(b.heads.iter())
        .map(|(x, y)| x.iter().filter(|blk| y.binary_search(blk).is_ok()).count())
        .sum();
    Ok(shared as f64 / n as f64)
}

/// JSON form: layer → head → sorted block indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskDump(pub BTreeMap<String, BTreeMap<String, Vec<usize>>>);

impl MaskDump {
    pub fn from_layers(masks: &[Option<BlockMask>]) -> Self {
        let mut out = BTreeMap::new();
        for (l, m) in masks.iter().enumerate() {
            if let Some(m) = m {
                let heads = m
                    .heads()
                    .iter()
                    .enumerate()
                    .map(|(h, b)| (h.to_string(), b.clone()))
                    .collect();
                out.insert(l.to_string(), heads);
            }
        }
        MaskDump(out)
    }
}
