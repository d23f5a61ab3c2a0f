//! Calibrated expert skipping for top-k MoE routing.
//!
//! With routing weights sorted ascending `w_1 ≤ … ≤ w_k`, the ratio for
//! skip level `i` is `r_i = Σ_{j=1..k-i} w_j / Σ_{j=1..k} w_j`. Calibration
//! takes, per layer and level, the median of `r_i` over dense-routed tokens
//! as the threshold `β_i`. At inference a token skips the `i*` lowest-weight
//! experts, where `i*` is the largest level in `[1, m]` whose ratio falls
//! below its threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{FlopCategory, FlopCounter};
use crate::model::GatedFfnWeights;
use crate::sparse_ffn::{sparse_ffn_forward, ChannelSelection};

/// Which threshold a level is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipRule {
    /// `r_i < β_i` for each level.
    #[default]
    PerLevel,
    /// Every level compared against the budget's own `β_m`.
    Literal,
}

/// Numerator of the skip ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioNumerator {
    /// `Σ_{j=1..k-i} w_j`.
    #[default]
    Smallest,
    /// `Σ_{j=1..i} w_j`, the mass of the skipped experts.
    Skipped,
}

/// Skip ratio for level `level` over ascending weights.
pub fn skip_ratio(weights: &[f32], level: usize, numerator: RatioNumerator) -> Result<f64> {
    let k = weights.len();
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    if total <= 0.0 {
        return Err(Error::logic("routing weights sum to zero"));
    }
    let take = match numerator {
        RatioNumerator::Smallest => k - level,
        RatioNumerator::Skipped => level,
    };
    let part: f64 = weights[..take].iter().map(|&w| w as f64).sum();
    Ok(part / total)
}

/// `r_m` with the numerator as written.
pub fn calib_ratio(weights: &[f32], m: usize) -> Result<f64> {
    if m == 0 || m >= weights.len() {
        return Err(Error::logic(format!("skip level {m} outside [1, {})", weights.len())));
    }
    skip_ratio(weights, m, RatioNumerator::Smallest)
}

/// Median; an even count averages the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerThresholds {
    /// 0-based model layer index.
    pub layer: usize,
    /// `β_1 … β_{max level}`.
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub k: usize,
    pub layers: Vec<LayerThresholds>,
    pub calib_tokens: usize,
}

impl ThresholdMap {
    pub fn betas(&self, layer: usize) -> Option<&[f64]> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| l.beta.as_slice())
    }

    /// True when `β_1 ≥ β_2 ≥ …` for every layer.
    pub fn is_monotone(&self) -> bool {
        self.layers.iter().all(|l| l.beta.windows(2).all(|w| w[0] >= w[1]))
    }
}

/// Routing weights observed for one token at one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: usize,
    /// Ascending.
    pub weights: Vec<f32>,
}

/// Medians of the per-level ratios for each of `moe_layers`.
pub fn build_threshold_map(
    records: &[RoutingRecord],
    moe_layers: &[usize],
    k: usize,
    max_level: usize,
    numerator: RatioNumerator,
) -> Result<ThresholdMap> {
    if k < 2 {
        return Err(Error::config("expert skipping needs at least two active experts"));
    }
    if max_level == 0 || max_level >= k {
        return Err(Error::config(format!("max skip level {max_level} outside [1, {k})")));
    }
    let mut ratios: BTreeMap<usize, Vec<Vec<f64>>> =
        moe_layers.iter().map(|&l| (l, vec![Vec::new(); max_level])).collect();
    let mut tokens: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        let Some(levels) = ratios.get_mut(&r.layer) else {
            continue;
        };
        if r.weights.len() != k {
            return Err(Error::input(format!(
                "routing record at layer {} has {} weights, expected {k}",
                r.layer,
                r.weights.len()
            )));
        }
        for (m, bucket) in levels.iter_mut().enumerate() {
            bucket.push(skip_ratio(&r.weights, m + 1, numerator)?);
        }
        *tokens.entry(r.layer).or_default() += 1;
    }
    let mut layers = Vec::new();
    for (layer, levels) in ratios {
        let mut beta = Vec::with_capacity(max_level);
        for mut bucket in levels {
            beta.push(
                median(&mut bucket)
                    .ok_or_else(|| Error::config(format!("no calibration tokens reached MoE layer {layer}")))?,
            );
        }
        layers.push(LayerThresholds { layer, beta });
    }
    let calib_tokens = tokens.values().copied().max().unwrap_or(0);
    Ok(ThresholdMap {
        k,
        layers,
        calib_tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSelection {
    /// Routed expert ids, ascending by weight.
    pub experts: Vec<usize>,
    /// Routing weights, ascending.
    pub weights: Vec<f32>,
    /// Number of lowest-weight experts skipped.
    pub skipped: usize,
}

impl ExpertSelection {
    pub fn keep_all(experts: Vec<usize>, weights: Vec<f32>) -> Self {
        Self {
            experts,
            weights,
            skipped: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// `(expert id, weight)` of every computed expert, ascending by weight.
    pub fn kept(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.experts[self.skipped..]
            .iter()
            .copied()
            .zip(self.weights[self.skipped..].iter().copied())
    }

    /// `s_e` contribution of this token: `skipped / k`.
    pub fn sparsity(&self) -> f64 {
        self.skipped as f64 / self.k() as f64
    }
}

/// Largest skip level `i ≤ budget` whose ratio is below its threshold.
///
/// `betas[i-1]` is `β_i`. The budget is clamped to `k-1` so the top expert is
/// always kept.
pub fn decide_skip(
    experts: Vec<usize>,
    weights: Vec<f32>,
    betas: &[f64],
    budget: usize,
    rule: SkipRule,
    numerator: RatioNumerator,
) -> ExpertSelection {
    let k = weights.len();
    let budget = budget.min(k.saturating_sub(1)).min(betas.len());
    let mut skipped = 0;
    for level in (1..=budget).rev() {
        let beta = match rule {
            SkipRule::PerLevel => betas[level - 1],
            SkipRule::Literal => betas[budget - 1],
        };
        let r = skip_ratio(&weights, level, numerator).unwrap_or(f64::INFINITY);
        if r < beta {
            skipped = level;
            break;
        }
    }
    ExpertSelection {
        experts,
        weights,
        skipped,
    }
}

/// `y = Σ_{kept j} w_j · expert_j(x)` with the original routing weights, or
/// renormalized over the kept experts when `renormalize` is set. Experts run
/// in ascending-weight order. Only kept experts are charged to `moe_expert`.
pub fn sparse_moe_forward(
    x: &[f32],
    selection: &ExpertSelection,
    experts: &[GatedFfnWeights],
    tau: Option<f32>,
    renormalize: bool,
    counter: &mut FlopCounter,
) -> (Vec<f32>, Vec<(usize, ChannelSelection)>) {
    let scale = if renormalize {
        let kept: f64 = selection.kept().map(|(_, w)| w as f64).sum();
        let all: f64 = selection.weights.iter().map(|&w| w as f64).sum();
        all / kept
    } else {
        1.0
    };
    let mut acc = vec![0.0f64; x.len()];
    let mut channels = Vec::new();
    for (e, w) in selection.kept() {
        let (y, sel) = sparse_ffn_forward(x, &experts[e], tau, counter, FlopCategory::MoeExpert);
        let w = w as f64 * scale;
        for (a, v) in acc.iter_mut().zip(&y) {
            *a += w * *v as f64;
        }
        channels.push((e, sel));
    }
    (acc.into_iter().map(|v| v as f32).collect(), channels)
}
