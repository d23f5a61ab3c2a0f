//! Empirical first-token distribution of single decoding steps against the
//! exact target distribution, honest and adversarial drafts.

use specverify::harness::{self, DraftSpec, ExperimentConfig, ModelSpec};
use specverify::ModelConfig;

fn main() -> specverify::Result<()> {
    let cfg = ExperimentConfig {
        target: ModelSpec {
            config: Some(ModelConfig {
                vocab: 32,
                ..ModelConfig::default()
            }),
            ..ModelSpec::default()
        },
        ..ExperimentConfig::default()
    };
    let trials = 50_000;
    let honest = harness::lossless(&cfg, trials, 0.02)?;
    println!("model draft:      TV {:.4} pass {}", honest.tv_distance, honest.pass);

    let adversarial = ExperimentConfig {
        draft: DraftSpec::PointMass { token: 0, mass: 0.95 },
        ..cfg
    };
    let adv = harness::lossless(&adversarial, trials, 0.02)?;
    println!("point-mass draft: TV {:.4} pass {}", adv.tv_distance, adv.pass);
    for t in 0..8 {
        println!("token {t}: exact {:.4} empirical {:.4}", adv.exact[t], adv.empirical[t]);
    }
    Ok(())
}
