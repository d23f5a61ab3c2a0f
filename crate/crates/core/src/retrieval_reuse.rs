//! Inter-layer reuse of block retrieval.
//!
//! Calibration records each layer's retrieval mask per sample, measures the
//! Jaccard similarity between adjacent layers and picks as anchors the
//! layers least similar to their predecessor. At inference only anchors
//! retrieve; every other layer copies the mask of the nearest preceding
//! anchor. Layer numbers in this module are 1-based.

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, SparsityPlan, TokenId};
use crate::sparse_attention::{AttnSparsityConfig, BlockMask, MaskDump};
use crate::specdec::DraftTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub num_layers: usize,
    pub anchors: Vec<usize>,
    /// Calibration statistic the anchors were chosen from, when known.
    #[serde(default)]
    pub mean_adjacent_jaccard: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// The layer is an anchor and retrieves for itself.
    SelfRetrieval,
    /// Reuse the mask of this (1-based) anchor layer.
    Anchor(usize),
}

impl AnchorSet {
    pub fn new(num_layers: usize, mut anchors: Vec<usize>) -> Result<Self> {
        anchors.sort_unstable();
        anchors.dedup();
        let set = Self {
            num_layers,
            anchors,
            mean_adjacent_jaccard: Vec::new(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Every layer is an anchor: reuse disabled.
    pub fn all(num_layers: usize) -> Self {
        Self {
            num_layers,
            anchors: (1..=num_layers).collect(),
            mean_adjacent_jaccard: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.first() != Some(&1) {
            return Err(Error::config("anchor set must contain layer 1"));
        }
        if self.anchors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("anchor layers must be strictly ascending"));
        }
        if self.anchors.last().is_some_and(|&l| l > self.num_layers) {
            return Err(Error::config(format!(
                "anchor layer beyond num_layers {}",
                self.num_layers
            )));
        }
        Ok(())
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.anchors.binary_search(&layer).is_ok()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// `a(l) = max{i ∈ A : i < l}`, or self-retrieval when `l ∈ A`.
pub fn nearest_anchor(layer: usize, anchors: &AnchorSet) -> MaskSource {
    if anchors.contains(layer) {
        return MaskSource::SelfRetrieval;
    }
    anchors
        .anchors
        .iter()
        .rev()
        .find(|&&a| a < layer)
        .map_or(MaskSource::SelfRetrieval, |&a| MaskSource::Anchor(a))
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets count as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Jaccard over `(head, block)` pairs of two layer masks.
pub fn mask_jaccard(a: &BlockMask, b: &BlockMask) -> f64 {
    let sa: BTreeSet<(usize, usize)> = a.pairs().collect();
    let sb: BTreeSet<(usize, usize)> = b.pairs().collect();
    jaccard(&sa, &sb)
}

/// The `k` layers with the largest `1 - J`; ties go to the lower layer.
///
/// `similarities[i]` is layer `i+1`'s similarity to its predecessor, with
/// `similarities[0] = 0` by definition, so layer 1 always ranks first.
pub fn select_anchors(similarities: &[f64], k: usize) -> Result<AnchorSet> {
    let n = similarities.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("anchor count {k} outside [1, {n}]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let da = if a == 0 { 1.0 } else { 1.0 - similarities[a] };
        let db = if b == 0 { 1.0 } else { 1.0 - similarities[b] };
        db.total_cmp(&da).then(a.cmp(&b))
    });
    let anchors: Vec<usize> = order[..k].iter().map(|&i| i + 1).collect();
    let mut set = AnchorSet::new(n, anchors)?;
    set.mean_adjacent_jaccard = similarities.to_vec();
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub seq_len: usize,
    /// `J(M_l, M_{l-1})` per layer; entry 0 is fixed at 0.
    pub adjacent_jaccard: Vec<f64>,
    pub masks: MaskDump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseCalibReport {
    pub mean_adjacent_jaccard: Vec<f64>,
    pub anchors: AnchorSet,
    pub samples: Vec<SampleRecord>,
    /// Indices of calibration sequences too short to trigger eviction.
    pub skipped: Vec<usize>,
}

/// Per-layer retrieval masks for one sequence: prefill all but the last
/// token, then run a verification pass whose only token is the last one.
///
/// Returns `None` when the sequence does not exceed `base_length`.
pub fn record_masks(
    model: &Arc<Model>,
    sequence: &[TokenId],
    cfg: &AttnSparsityConfig,
) -> Result<Option<Vec<BlockMask>>> {
    if sequence.len() <= cfg.base_length {
        return Ok(None);
    }
    let mut session = model.session();
    let (last, prefix) = sequence.split_last().expect("non-empty");
    session.prefill(prefix)?;
    session.set_pending(*last)?;
    let plan = SparsityPlan::attention_only(cfg.clone(), None);
    let out = session.verify_forward(&DraftTree::empty(), &plan)?;
    out.masks
        .into_iter()
        .map(|m| m.ok_or_else(|| Error::logic("eviction active but a layer kept every block")))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Adjacent-layer Jaccard, with the first layer fixed at 0.
pub fn adjacent_similarities(masks: &[BlockMask]) -> Vec<f64> {
    let mut out = vec![0.0];
    out.extend(masks.windows(2).map(|w| mask_jaccard(&w[1], &w[0])));
    out
}

pub fn calibrate_anchors(
    model: &Arc<Model>,
    sequences: &[Vec<TokenId>],
    cfg: &AttnSparsityConfig,
    num_anchors: usize,
) -> Result<ReuseCalibReport> {
    cfg.validate()?;
    let num_layers = model.config().num_layers;
    if num_anchors == 0 || num_anchors > num_layers {
        return Err(Error::config(format!(
            "anchor count {num_anchors} outside [1, {num_layers}]"
        )));
    }
    let per_sample: Vec<Result<Option<Vec<BlockMask>>>> =
        sequences.par_iter().map(|seq| record_masks(model, seq, cfg)).collect();

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (i, rec) in per_sample.into_iter().enumerate() {
        match rec? {
            None => {
                log::warn!(
                    "calibration sequence {i} has {} tokens, not above base length {}; skipped",
                    sequences[i].len(),
                    cfg.base_length
                );
                skipped.push(i);
            }
            Some(masks) => {
                let masks_opt: Vec<Option<BlockMask>> = masks.iter().cloned().map(Some).collect();
                samples.push(SampleRecord {
                    sample: i,
                    seq_len: sequences[i].len(),
                    adjacent_jaccard: adjacent_similarities(&masks),
                    masks: MaskDump::from_layers(&masks_opt),
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::config("every calibration sequence was too short for eviction"));
    }
    let mut mean = vec![0.0; num_layers];
    for s in &samples {
        for (m, j) in mean.iter_mut().zip(&s.adjacent_jaccard) {
            *m += j;
        }
    }
    for m in &mut mean {
        *m /= samples.len() as f64;
    }
    let anchors = select_anchors(&mean, num_anchors)?;
    Ok(ReuseCalibReport {
        mean_adjacent_jaccard: mean,
        anchors,
        samples,
        skipped,
    })
}
