#![allow(dead_code)]

use std::sync::Arc;

use specverify::model::{Model, ModelConfig, TokenId};
use specverify::rng::Rng;

pub fn target() -> Arc<Model> {
    Arc::new(Model::seeded(ModelConfig::default(), 1).unwrap())
}

pub fn draft_for(target: &Model) -> Arc<Model> {
    Arc::new(Model::seeded(ModelConfig::draft_default(target.config().vocab), 2).unwrap())
}

pub fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (rng.next_u64() % vocab as u64) as TokenId).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
