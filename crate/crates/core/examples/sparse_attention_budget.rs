//! Retention budget by sequence length, and the block masks it produces.

use std::sync::Arc;

use specverify::model::{Model, ModelConfig};
use specverify::sparse_attention::{compute_budget, AttnSparsityConfig, Budget};
use specverify::{DraftTree, SparsityPlan};

fn main() -> specverify::Result<()> {
    let cfg = AttnSparsityConfig::new(64, 0.5, 16);
    for len in [32, 64, 65, 128, 256, 512] {
        let budget = match compute_budget(len, &cfg, 2) {
            Budget::Full => "all blocks".to_string(),
            Budget::Blocks(n) => format!("{n} of {} blocks", 2 * len.div_ceil(16)),
        };
        println!("L = {len:>3}: {budget}");
    }

    let model = Arc::new(Model::seeded(ModelConfig::default(), 1)?);
    let prompt: Vec<u32> = (0..200).map(|i| (i * 31 % 256) as u32).collect();
    let mut session = model.session();
    session.prefill(&prompt[..199])?;
    session.set_pending(prompt[199])?;
    let out = session.verify_forward(&DraftTree::empty(), &SparsityPlan::attention_only(cfg, None))?;
    for (layer, mask) in out.masks.iter().enumerate() {
        let mask = mask.as_ref().expect("eviction active at 200 tokens");
        println!("layer {layer}: {:?}", mask.heads());
    }
    println!("attention sparsity {:.3}", session.log().attention_sparsity());
    Ok(())
}
