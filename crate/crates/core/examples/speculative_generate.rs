//! Draft-then-verify decoding with a small draft model, dense verification.

use std::sync::Arc;

use specverify::model::{Model, ModelConfig};
use specverify::specdec::{decode, DecodeConfig, DraftMode, ModelDrafter};
use specverify::SparsityPlan;

fn main() -> specverify::Result<()> {
    let target = Arc::new(Model::seeded(ModelConfig::default(), 1)?);
    let draft = Arc::new(Model::seeded(ModelConfig::draft_default(256), 2)?);
    let config = DecodeConfig {
        mode: DraftMode::Chain { k: 4 },
        temperature: 0.8,
        max_tokens: 32,
    };
    let prompt = [17, 4, 99, 23, 8];
    let out = decode(
        target,
        ModelDrafter::new(draft, config.temperature),
        &prompt,
        SparsityPlan::dense(),
        config,
        42,
    )?;

    println!("tokens: {:?}", out.tokens);
    println!(
        "steps {} emitted {} alpha {:.3}",
        out.stats.steps,
        out.stats.emitted,
        out.stats.mean_acceptance_length()
    );
    for row in &out.flops.rows {
        println!("{:<11} {:>12}", row.component, row.instrumented);
    }
    Ok(())
}
