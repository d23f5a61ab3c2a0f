//! Choose anchor layers from adjacent-layer mask similarity, then decode
//! with non-anchor layers reusing their anchor's mask.

use std::sync::Arc;

use specverify::model::{Model, ModelConfig};
use specverify::retrieval_reuse::calibrate_anchors;
use specverify::sparse_attention::AttnSparsityConfig;
use specverify::specdec::{decode, DecodeConfig, DraftMode, ModelDrafter};
use specverify::{Rng, SparsityPlan};

fn main() -> specverify::Result<()> {
    let target = Arc::new(Model::seeded(ModelConfig::default(), 1)?);
    let cfg = AttnSparsityConfig::new(64, 0.5, 16);
    let mut rng = Rng::new(3);
    let sequences: Vec<Vec<u32>> = (0..6)
        .map(|i| (0..100 + 20 * i).map(|_| (rng.next_u64() % 256) as u32).collect())
        .collect();

    let report = calibrate_anchors(&target, &sequences, &cfg, 2)?;
    for (l, j) in report.mean_adjacent_jaccard.iter().enumerate() {
        println!("layer {}: mean Jaccard with previous {j:.3}", l + 1);
    }
    println!("anchors {:?}", report.anchors.anchors);

    let draft = Arc::new(Model::seeded(ModelConfig::draft_default(256), 2)?);
    let plan = SparsityPlan::attention_only(cfg, Some(report.anchors));
    let config = DecodeConfig {
        mode: DraftMode::Chain { k: 3 },
        temperature: 1.0,
        max_tokens: 24,
    };
    let out = decode(target, ModelDrafter::new(draft, 1.0), &sequences[0], plan, config, 9)?;
    println!(
        "alpha {:.3}, s_a {:.3}",
        out.stats.mean_acceptance_length(),
        out.flops.s_a
    );
    Ok(())
}
