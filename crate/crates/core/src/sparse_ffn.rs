//! Channel pruning for the gated FFN.
//!
//! The gate `h = σ(W_gate x + b_gate)` is always computed in full. Channels
//! with `|h_i| < τ` are dropped from the up and down projections; `x` stays
//! whole and the output bias `b_down` is applied once in full.

use serde::{Deserialize, Serialize};

use crate::kernels::{self, dot, FlopCategory, FlopCounter};
use crate::model::{GatedFfnWeights, Session};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelection {
    /// Pruned channel indices, ascending.
    pub pruned: Vec<usize>,
    pub width: usize,
}

impl ChannelSelection {
    pub fn none(width: usize) -> Self {
        Self {
            pruned: Vec::new(),
            width,
        }
    }

    pub fn active(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.width - self.pruned.len());
        let mut pruned = self.pruned.iter().peekable();
        for i in 0..self.width {
            if pruned.peek() == Some(&&i) {
                pruned.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    pub fn num_active(&self) -> usize {
        self.width - self.pruned.len()
    }

    /// `s_f = |S| / width`.
    pub fn sparsity(&self) -> f64 {
        self.pruned.len() as f64 / self.width as f64
    }
}

/// `S = {i : |h_i| < τ}`.
pub fn select_channels(h: &[f32], tau: f32) -> ChannelSelection {
    ChannelSelection {
        pruned: (0..h.len()).filter(|&i| h[i].abs() < tau).collect(),
        width: h.len(),
    }
}

/// Gated FFN with optional channel pruning. `tau = None` is the dense path;
/// so is `Some(0.0)`, bit for bit.
///
/// Charges `2·d·width` for the gate and `4·d·|active|` for up and down.
pub fn sparse_ffn_forward(
    x: &[f32],
    w: &GatedFfnWeights,
    tau: Option<f32>,
    counter: &mut FlopCounter,
    category: FlopCategory,
) -> (Vec<f32>, ChannelSelection) {
    let d = w.model_dim();
    let width = w.width();
    let pre = kernels::affine(&w.gate, x, &w.gate_bias, counter, category);
    let h: Vec<f32> = pre.into_iter().map(kernels::activation).collect();
    let selection = match tau {
        Some(t) => select_channels(&h, t),
        None => ChannelSelection::none(width),
    };

    let mut hidden = vec![0.0f32; width];
    let active = selection.active();
    for &i in &active {
        let up = (dot(w.up.row(i), x) + w.up_bias[i] as f64) as f32;
        hidden[i] = h[i] * up;
    }

    let y: Vec<f32> = if selection.pruned.is_empty() {
        (0..d)
            .map(|j| (dot(w.down.row(j), &hidden) + w.down_bias[j] as f64) as f32)
            .collect()
    } else {
        (0..d)
            .map(|j| {
                let row = w.down.row(j);
                let acc: f64 = active.iter().map(|&i| row[i] as f64 * hidden[i] as f64).sum();
                (acc + w.down_bias[j] as f64) as f32
            })
            .collect()
    };
    counter.add(category, (4 * d * active.len()) as u64);
    (y, selection)
}

/// Mean `|S| / width` over every FFN invocation logged by the session's
/// verification passes (dense layers and routed experts alike). `None`
/// before any invocation.
pub fn measure_ffn_sparsity(session: &Session) -> Option<f64> {
    let log = &session.log().ffn;
    if log.is_empty() {
        return None;
    }
    let sum: f64 = log.iter().map(|r| r.pruned as f64 / r.width as f64).sum();
    Some(sum / log.len() as f64)
}
