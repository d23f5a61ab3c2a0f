//! Calibrate per-level skip thresholds from routing statistics, inspect a
//! few decisions, then decode with a skip budget.

use std::sync::Arc;

use specverify::model::{Model, ModelConfig, MoeSkipPlan, Session, SessionOptions};
use specverify::sparse_moe::{build_threshold_map, decide_skip, RatioNumerator, SkipRule};
use specverify::specdec::{decode, DecodeConfig, DraftMode, ModelDrafter};
use specverify::{Rng, SparsityPlan};

fn main() -> specverify::Result<()> {
    let config = ModelConfig {
        num_experts: 8,
        active_experts: 4,
        ..ModelConfig::default()
    };
    let target = Arc::new(Model::seeded(config.clone(), 1)?);

    let mut rng = Rng::new(5);
    let mut records = Vec::new();
    for _ in 0..8 {
        let seq: Vec<u32> = (0..48).map(|_| (rng.next_u64() % 256) as u32).collect();
        let mut s = Session::with_options(
            Arc::clone(&target),
            SessionOptions {
                record_routing: true,
                ..SessionOptions::default()
            },
        );
        s.prefill(&seq)?;
        records.extend(s.log().routing.iter().cloned());
    }
    let map = build_threshold_map(&records, &config.moe_layers(), 4, 3, RatioNumerator::Smallest)?;
    for l in &map.layers {
        println!("layer {}: beta {:?}", l.layer, l.beta);
    }

    let betas = map.betas(config.moe_layers()[0]).expect("calibrated").to_vec();
    for w in [[0.05f32, 0.1, 0.25, 0.6], [0.2, 0.24, 0.26, 0.3]] {
        let sel = decide_skip(
            (0..4).collect(),
            w.to_vec(),
            &betas,
            2,
            SkipRule::PerLevel,
            RatioNumerator::Smallest,
        );
        println!("weights {w:?}: skip {}", sel.skipped);
    }

    let draft = Arc::new(Model::seeded(ModelConfig::draft_default(256), 2)?);
    let plan = SparsityPlan {
        moe_skip: Some(MoeSkipPlan {
            map,
            budget: 2,
            rule: SkipRule::PerLevel,
            numerator: RatioNumerator::Smallest,
            renormalize: false,
        }),
        ..SparsityPlan::dense()
    };
    let dc = DecodeConfig {
        mode: DraftMode::Chain { k: 3 },
        temperature: 1.0,
        max_tokens: 24,
    };
    let out = decode(target, ModelDrafter::new(draft, 1.0), &[1, 2, 3, 4], plan, dc, 3)?;
    println!(
        "alpha {:.3}, s_e {:.3}",
        out.stats.mean_acceptance_length(),
        out.flops.s_e
    );
    Ok(())
}
