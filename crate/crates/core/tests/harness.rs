mod common;

use specverify::harness::{self, BenchVariant, ExperimentConfig, SparsitySettings};
use specverify::specdec::DraftMode;

use common::tokens;

fn long_config() -> ExperimentConfig {
    ExperimentConfig {
        prompt: tokens(70, 256, 13),
        max_tokens: 20,
        sparsity: SparsitySettings {
            base_length: Some(32),
            ffn_threshold: Some(0.05),
            ..SparsitySettings::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn strict_bench_row_matches_dense_generate() {
    let cfg = long_config();
    let rows = harness::bench(&cfg, &harness::default_variants(&cfg)).unwrap();
    let dense = ExperimentConfig {
        sparsity: SparsitySettings::strict(),
        ..cfg.clone()
    };
    let g = harness::generate(&dense).unwrap();
    assert_eq!(rows[0].variant, "strict");
    assert_eq!(rows[0].tokens, g.tokens);
    assert_eq!(rows[0].alpha, g.record.alpha);
    assert_eq!((rows[0].s_a, rows[0].s_f, rows[0].s_e), (0.0, 0.0, 0.0));
    assert!(rows[1].s_a > 0.0 && rows[1].s_f > 0.0);
    assert_eq!(
        rows[1].s_a,
        1.0 - rows[1].retained_keys as f64 / rows[1].total_keys as f64
    );
}

#[test]
fn reconciled_rows_match_the_counters() {
    for mode in [
        DraftMode::Chain { k: 3 },
        DraftMode::Tree {
            template: vec![2, 2],
            max_nodes: 8,
        },
    ] {
        let cfg = ExperimentConfig { mode, ..long_config() };
        let out = harness::generate(&cfg).unwrap();
        for row in &out.flops.rows {
            assert!(
                row.deviation < 1e-9,
                "{}: {} vs {}",
                row.component,
                row.corrected,
                row.instrumented
            );
        }
        assert!(out.flops.row("attn_score").unwrap().printed > 0.0);
    }
}

#[test]
fn expert_skipping_reconciles_too() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = long_config();
    let seqs: Vec<Vec<u32>> = (0..4).map(|i| tokens(50, 256, 60 + i)).collect();
    let out = harness::calibrate(&cfg, harness::CalibrateMode::Moe, &seqs, 1, None, dir.path()).unwrap();
    cfg.sparsity.threshold_map_file = Some(out.thresholds.unwrap().0);
    cfg.sparsity.skip_budget = 1;
    let g = harness::generate(&cfg).unwrap();
    assert!(g.record.s_e > 0.0 && g.record.s_e <= 0.5);
    for row in &g.flops.rows {
        assert!(row.deviation < 1e-9, "{}", row.component);
    }

    let variants = vec![
        BenchVariant {
            name: "strict".into(),
            sparsity: SparsitySettings::strict(),
        },
        BenchVariant {
            name: "moe".into(),
            sparsity: SparsitySettings {
                threshold_map_file: cfg.sparsity.threshold_map_file.clone(),
                skip_budget: 1,
                ..SparsitySettings::strict()
            },
        },
    ];
    let rows = harness::bench(&cfg, &variants).unwrap();
    assert_eq!(rows[1].s_a, 0.0);
    assert!(rows[1].s_e > 0.0);
}
