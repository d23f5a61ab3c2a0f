//! Analytical cost terms next to the instrumented counters of a sparse run.

use specverify::flops::{attention_flops, ffn_flops, moe_flops, FlopsParams};
use specverify::harness::{self, ExperimentConfig, SparsitySettings};
use specverify::ModelConfig;

fn main() -> specverify::Result<()> {
    let mut p = FlopsParams::from_config(&ModelConfig::default(), 4);
    p.s_a = 0.5;
    p.s_f = 0.3;
    p.s_e = 0.25;
    println!("per layer at T=4, dense / sparse");
    println!(
        "  attention {:>10} {:>10}",
        attention_flops(&p, false),
        attention_flops(&p, true)
    );
    println!("  ffn       {:>10} {:>10}", ffn_flops(&p, false), ffn_flops(&p, true));
    println!("  moe       {:>10} {:>10}", moe_flops(&p, false), moe_flops(&p, true));

    let cfg = ExperimentConfig {
        prompt: (0..80).map(|i| (i * 7 % 256) as u32).collect(),
        max_tokens: 16,
        sparsity: SparsitySettings {
            base_length: Some(32),
            ffn_threshold: Some(0.05),
            ..SparsitySettings::default()
        },
        ..ExperimentConfig::default()
    };
    let out = harness::generate(&cfg)?;
    let b = &out.flops;
    println!("\nmeasured s_a {:.3} s_f {:.3} s_e {:.3}", b.s_a, b.s_f, b.s_e);
    println!(
        "{:<11} {:>12} {:>12} {:>12}",
        "component", "printed", "corrected", "counter"
    );
    for r in &b.rows {
        println!(
            "{:<11} {:>12.0} {:>12.0} {:>12}  {}",
            r.component, r.printed, r.corrected, r.instrumented, r.note
        );
    }
    println!("other (readout and retrieval scoring) {}", b.other);
    Ok(())
}
