//! How much the retrieval masks of nearby draft tokens agree, by layer and
//! positional distance.

use specverify::harness::{self, ExperimentConfig, SparsitySettings};
use specverify::DraftMode;

fn main() -> specverify::Result<()> {
    let cfg = ExperimentConfig {
        mode: DraftMode::Chain { k: 5 },
        prompt: (0..150).map(|i| (i * 13 % 256) as u32).collect(),
        max_tokens: 30,
        sparsity: SparsitySettings {
            base_length: Some(64),
            ..SparsitySettings::default()
        },
        ..ExperimentConfig::default()
    };
    let (rows, traces) = harness::overlap(&cfg, 4)?;
    println!("{} verification passes", traces.len());
    print!("{}", harness::overlap_csv(&rows));
    Ok(())
}
