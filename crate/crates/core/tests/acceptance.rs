//! Acceptance criteria 1 to 11. Each test prints one `PASS` or `FAIL` line to
//! stderr, outside the harness's output capture.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use specverify::flops::{attention_flops, ffn_flops, moe_flops, FlopsParams};
use specverify::harness::{self, io, CalibrateMode, DraftSpec, ExperimentConfig, ModelSpec, SparsitySettings};
use specverify::kernels::{activation, FlopCategory, FlopCounter};
use specverify::model::{
    AttentionPlan, FeedForwardWeights, GatedFfnWeights, Model, ModelConfig, MoeSkipPlan, SessionOptions, SparsityPlan,
    TokenId,
};
use specverify::retrieval_reuse::{select_anchors, AnchorSet};
use specverify::rng::Rng;
use specverify::sparse_attention::{
    compute_budget, overlap_ratio, AttnSparsityConfig, BlockMask, Budget, MaskProvenance,
};
use specverify::sparse_ffn::sparse_ffn_forward;
use specverify::sparse_moe::{
    build_threshold_map, decide_skip, LayerThresholds, RatioNumerator, RoutingRecord, SkipRule, ThresholdMap,
};
use specverify::specdec::{propose_chain, DecodeConfig, Decoder, DraftMode, DraftTree, ModelDrafter};

use common::{draft_for, max_abs_diff, target, tokens};

fn criterion(id: u32, name: &str, body: impl FnOnce()) {
    let result = panic::catch_unwind(AssertUnwindSafe(body));
    let status = if result.is_ok() { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} {status} {name}");
    if let Err(e) = result {
        panic::resume_unwind(e);
    }
}

fn decode_config(k: usize, max_tokens: usize) -> DecodeConfig {
    DecodeConfig {
        mode: DraftMode::Chain { k },
        temperature: 1.0,
        max_tokens,
    }
}

fn lossless_config() -> ExperimentConfig {
    ExperimentConfig {
        target: ModelSpec {
            config: Some(ModelConfig {
                vocab: 32,
                ..ModelConfig::default()
            }),
            ..ModelSpec::default()
        },
        mode: DraftMode::Chain { k: 3 },
        ..ExperimentConfig::default()
    }
}

#[test]
fn c01_lossless_first_token_distribution() {
    criterion(
        1,
        "lossless first-token distribution, TV < 0.01 over 200k trials",
        || {
            let cfg = lossless_config();
            let start = Instant::now();
            let report = harness::lossless(&cfg, 200_000, 0.01).unwrap();
            let honest = start.elapsed();
            assert_eq!(report.vocab, 32);
            assert!(report.pass, "model draft: TV {}", report.tv_distance);

            // the adversarial draft pins most of its mass on the target's least likely token
            let worst = (0..report.vocab)
                .min_by(|&a, &b| report.exact[a].total_cmp(&report.exact[b]))
                .unwrap();
            let adversarial = ExperimentConfig {
                draft: DraftSpec::PointMass {
                    token: worst as TokenId,
                    mass: 0.97,
                },
                ..cfg
            };
            let start = Instant::now();
            let adv = harness::lossless(&adversarial, 200_000, 0.01).unwrap();
            let hostile = start.elapsed();
            assert!(adv.pass, "adversarial draft: TV {}", adv.tv_distance);
            assert_eq!(adv.exact, report.exact);
            for t in [honest, hostile] {
                assert!(t < Duration::from_secs(300), "took {t:?}");
            }
        },
    );
}

#[test]
fn c02_self_draft_accepts_everything() {
    criterion(2, "self-draft chain K=3 gives alpha = 4 exactly", || {
        for seed in 0..3 {
            let cfg = ExperimentConfig {
                draft: DraftSpec::SelfDraft,
                mode: DraftMode::Chain { k: 3 },
                max_tokens: 40 + 8 * seed as usize,
                seed,
                ..ExperimentConfig::default()
            };
            let out = harness::generate(&cfg).unwrap();
            assert!(out.record.steps > 0);
            assert_eq!(out.record.emitted, 4 * out.record.steps);
            assert_eq!(out.record.alpha, 4.0);
        }
    });
}

fn zero_sparsity_plan(config: &ModelConfig) -> SparsityPlan {
    let map = ThresholdMap {
        k: config.active_experts,
        layers: config
            .moe_layers()
            .into_iter()
            .map(|layer| LayerThresholds {
                layer,
                beta: vec![0.45],
            })
            .collect(),
        calib_tokens: 0,
    };
    SparsityPlan {
        attention: Some(AttentionPlan {
            config: AttnSparsityConfig::new(128, 0.5, config.block_size),
            anchors: None,
        }),
        ffn_threshold: Some(0.0),
        moe_skip: Some(MoeSkipPlan {
            map,
            budget: 0,
            rule: SkipRule::PerLevel,
            numerator: RatioNumerator::Smallest,
            renormalize: false,
        }),
    }
}

#[test]
fn c03_zero_sparsity_equals_dense() {
    criterion(3, "zero-sparsity plan matches the dense path", || {
        let model = target();
        let plan = zero_sparsity_plan(model.config());
        assert!(!plan.is_dense());
        let prompt = tokens(40, model.config().vocab, 5);

        let mut base = model.session();
        base.prefill(&prompt[..prompt.len() - 1]).unwrap();
        base.set_pending(*prompt.last().unwrap()).unwrap();
        let mut drafter = ModelDrafter::new(draft_for(&model), 1.0);
        let mut rng = Rng::new(3);
        let tree = propose_chain(&mut drafter, &prompt, 4, &mut rng).unwrap();

        let dense = base.clone().verify_forward(&tree, &SparsityPlan::dense()).unwrap();
        let sparse = base.clone().verify_forward(&tree, &plan).unwrap();
        assert!(max_abs_diff(&dense.root_logits, &sparse.root_logits) <= 1e-6);
        for (a, b) in dense.node_logits.iter().zip(&sparse.node_logits) {
            assert!(max_abs_diff(a, b) <= 1e-6);
        }

        let run = |plan: SparsityPlan| {
            let drafter = ModelDrafter::new(draft_for(&model), 1.0);
            let mut dec = Decoder::new(Arc::clone(&model), drafter, &prompt, plan, decode_config(3, 32), 11).unwrap();
            let out = dec.run().unwrap();
            (out, dec.stats())
        };
        let (dense_tokens, dense_stats) = run(SparsityPlan::dense());
        let (sparse_tokens, sparse_stats) = run(plan);
        assert_eq!(dense_tokens, sparse_tokens);
        assert_eq!(dense_stats, sparse_stats);
    });
}

#[test]
fn c04_cost_table_identities() {
    criterion(4, "cost table identities and limits", || {
        let mut p = FlopsParams::from_config(&ModelConfig::default(), 2);
        p.batch = 1.0;
        p.hidden = 4.0;
        assert_eq!(attention_flops(&p, false), 256.0);
        assert_eq!(attention_flops(&p, true), 256.0);

        let mut rng = Rng::new(2024);
        let dim = |rng: &mut Rng| (1 + rng.next_u64() % 256) as f64;
        for _ in 0..100 {
            let mut p = FlopsParams {
                batch: dim(&mut rng),
                tokens: dim(&mut rng),
                hidden: dim(&mut rng),
                ffn_hidden: dim(&mut rng),
                expert_hidden: dim(&mut rng),
                experts: dim(&mut rng),
                active: dim(&mut rng),
                layers: dim(&mut rng),
                s_a: 0.0,
                s_f: 0.0,
                s_e: 0.0,
            };
            let (b, t, d) = (p.batch, p.tokens, p.hidden);
            assert_eq!(ffn_flops(&p, true), ffn_flops(&p, false));
            assert_eq!(ffn_flops(&p, false), 6.0 * b * t * d * p.ffn_hidden);
            assert_eq!(moe_flops(&p, true), moe_flops(&p, false));
            assert_eq!(
                moe_flops(&p, false),
                4.0 * b * t * p.active * d * p.expert_hidden + 2.0 * b * t * d * p.experts
            );
            assert_eq!(attention_flops(&p, true), attention_flops(&p, false));
            p.s_a = 1.0;
            p.s_f = 1.0;
            p.s_e = 1.0;
            assert_eq!(attention_flops(&p, true), 6.0 * b * t * d * d);
            assert_eq!(ffn_flops(&p, true), 2.0 * b * t * d * p.ffn_hidden);
            assert_eq!(moe_flops(&p, true), 2.0 * b * t * d * p.experts);
        }
    });
}

#[test]
fn c05_attention_counter_scales_with_retained_keys() {
    criterion(5, "attn_score counter equals r times the dense counter", || {
        let model = target();
        let c = model.config().clone();
        let prompt = tokens(301, c.vocab, 9);
        let mut base = model.session();
        base.prefill(&prompt[..300]).unwrap();
        base.set_pending(prompt[300]).unwrap();
        let cfg = AttnSparsityConfig::new(64, 0.5, c.block_size);
        let plan = SparsityPlan::attention_only(cfg, None);

        let mut drafter = ModelDrafter::new(draft_for(&model), 1.0);
        let chain = propose_chain(&mut drafter, &prompt, 3, &mut Rng::new(1)).unwrap();
        for tree in [DraftTree::empty(), chain] {
            let mut dense = base.clone();
            let mut sparse = base.clone();
            dense.verify_forward(&tree, &SparsityPlan::dense()).unwrap();
            let out = sparse.verify_forward(&tree, &plan).unwrap();
            let dense_c = dense.counter().since(base.counter()).get(FlopCategory::AttnScore) as f64;
            let sparse_c = sparse.counter().since(base.counter()).get(FlopCategory::AttnScore) as f64;

            // retained fraction of cached keys, from the masks alone
            let cache = sparse.cache();
            let (mut kept, mut total) = (0usize, 0usize);
            for (layer, mask) in out.masks.iter().enumerate() {
                for h in 0..c.num_kv_heads {
                    total += cache.layer_len(layer);
                    kept += match mask {
                        Some(m) => m.retained_keys(cache, layer, h),
                        None => cache.layer_len(layer),
                    };
                }
            }
            let r = kept as f64 / total as f64;
            assert!(r < 0.75, "eviction inactive, r = {r}");

            // keys from the tree itself are never masked
            let intra = sparse.log().passes[0].intra_pairs as f64;
            let intra_c = c.num_layers as f64 * 4.0 * c.hidden as f64 * intra;
            let tol = (c.num_layers * c.num_kv_heads * c.block_size * 4 * c.head_dim() * c.group_size()) as f64;
            let lhs = sparse_c - intra_c;
            let rhs = r * (dense_c - intra_c);
            assert!((lhs - rhs).abs() <= tol, "{lhs} vs {rhs}");
            let logged = sparse.log().attn_retained_keys as f64 / sparse.log().attn_total_keys as f64;
            assert!((logged - r).abs() < 1e-12);
        }
    });
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Dense gated FFN in plain f64 with the channels below `tau` zeroed.
fn ffn_oracle(x: &[f32], w: &GatedFfnWeights, tau: f32) -> (Vec<f64>, usize) {
    let (width, d) = (w.width(), w.model_dim());
    let mut hidden = vec![0.0f64; width];
    let mut pruned = 0;
    for i in 0..width {
        let pre: f64 = (0..d).map(|j| w.gate.get(i, j) as f64 * x[j] as f64).sum::<f64>() + w.gate_bias[i] as f64;
        let h = silu(pre);
        if (h as f32).abs() < tau {
            pruned += 1;
            continue;
        }
        let up: f64 = (0..d).map(|j| w.up.get(i, j) as f64 * x[j] as f64).sum::<f64>() + w.up_bias[i] as f64;
        hidden[i] = h * up;
    }
    let y = (0..d)
        .map(|j| (0..width).map(|i| w.down.get(j, i) as f64 * hidden[i]).sum::<f64>() + w.down_bias[j] as f64)
        .collect();
    (y, pruned)
}

#[test]
fn c06_sparse_ffn_matches_zeroed_channel_oracle() {
    criterion(6, "sparse FFN oracle over 1000 cases, s_f monotone in tau", || {
        let model = target();
        let FeedForwardWeights::Dense(w) = &model.weights().layers[0].ffn else {
            panic!("layer 0 is dense");
        };
        assert_eq!(activation(0.0), 0.0);
        let taus = [0.01f32, 0.05, 0.1];
        let mut rng = Rng::new(77);
        let mut pruned_by_tau = [0usize; 3];
        for case in 0..1000 {
            let x: Vec<f32> = (0..w.model_dim()).map(|_| rng.uniform_f32(-1.5, 1.5)).collect();
            let tau = taus[case % 3];
            let (y, sel) = sparse_ffn_forward(&x, w, Some(tau), &mut FlopCounter::new(), FlopCategory::Ffn);
            let (want, pruned) = ffn_oracle(&x, w, tau);
            assert_eq!(sel.pruned.len(), pruned, "case {case}");
            for (a, b) in y.iter().zip(&want) {
                assert!((*a as f64 - b).abs() <= 1e-5, "case {case}: {a} vs {b}");
            }
            // same input under every threshold
            let counts: Vec<usize> = taus
                .iter()
                .map(|&t| {
                    sparse_ffn_forward(&x, w, Some(t), &mut FlopCounter::new(), FlopCategory::Ffn)
                        .1
                        .pruned
                        .len()
                })
                .collect();
            assert!(counts.windows(2).all(|c| c[0] <= c[1]));
            for (acc, n) in pruned_by_tau.iter_mut().zip(&counts) {
                *acc += n;
            }
        }
        assert!(pruned_by_tau[0] < pruned_by_tau[2]);

        // measured over whole verification passes
        let prompt = tokens(48, model.config().vocab, 4);
        let mut base = model.session();
        base.prefill(&prompt[..47]).unwrap();
        base.set_pending(prompt[47]).unwrap();
        let mut drafter = ModelDrafter::new(draft_for(&model), 1.0);
        let tree = propose_chain(&mut drafter, &prompt, 4, &mut Rng::new(8)).unwrap();
        let mut last = -1.0;
        for tau in [0.0f32, 0.01, 0.05, 0.1, 0.2] {
            let mut s = base.clone();
            let plan = SparsityPlan {
                ffn_threshold: Some(tau),
                ..SparsityPlan::dense()
            };
            s.verify_forward(&tree, &plan).unwrap();
            let s_f = s.log().ffn_sparsity();
            assert!(s_f >= last, "s_f {s_f} at tau {tau} below {last}");
            last = s_f;
        }
        assert!(last > 0.0);
    });
}

/// Largest level `i <= min(m, k-1)` with `r_i < beta_i`, by exhaustive scan.
fn brute_force_skip(weights: &[f32], betas: &[f64], m: usize) -> usize {
    let k = weights.len();
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut best = 0;
    for i in 1..=m.min(k - 1).min(betas.len()) {
        let kept_small: f64 = weights[..k - i].iter().map(|&w| w as f64).sum();
        if kept_small / total < betas[i - 1] {
            best = i;
        }
    }
    best
}

fn random_routing(rng: &mut Rng, k: usize) -> Vec<f32> {
    let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
    let sum: f64 = raw.iter().sum();
    let mut w: Vec<f32> = raw.iter().map(|r| (r / sum) as f32).collect();
    w.sort_by(f32::total_cmp);
    w
}

#[test]
fn c07_expert_skipping_oracles() {
    criterion(7, "expert skipping matches a brute-force level scan", || {
        let mut rng = Rng::new(31);
        for case in 0..10_000 {
            let k = [2usize, 4, 8][case % 3];
            let w = random_routing(&mut rng, k);
            let mut betas: Vec<f64> = (0..k - 1).map(|_| rng.uniform()).collect();
            if case % 2 == 0 {
                betas.sort_by(|a, b| b.total_cmp(a));
            }
            let m = (rng.next_u64() % (k as u64 + 1)) as usize;
            let experts: Vec<usize> = (0..k).collect();
            let sel = decide_skip(
                experts,
                w.clone(),
                &betas,
                m,
                SkipRule::PerLevel,
                RatioNumerator::Smallest,
            );
            assert_eq!(sel.skipped, brute_force_skip(&w, &betas, m), "case {case}");
            assert!(sel.skipped <= m);
            assert!(sel.skipped < k);
            assert!(sel.kept().any(|(e, _)| e == k - 1), "top expert skipped");
        }

        // two experts: skip the weaker one iff its share is below beta
        for _ in 0..1000 {
            let w = random_routing(&mut rng, 2);
            let beta = rng.uniform();
            let sel = decide_skip(
                vec![0, 1],
                w.clone(),
                &[beta],
                1,
                SkipRule::PerLevel,
                RatioNumerator::Smallest,
            );
            let share = w[0] as f64 / (w[0] as f64 + w[1] as f64);
            assert_eq!(sel.skipped == 1, share < beta);
        }

        // calibrated maps: medians of the ratios, non-increasing in the level
        for k in [2usize, 4, 8] {
            let mut records = Vec::new();
            for i in 0..501 {
                records.push(RoutingRecord {
                    layer: 1 + 2 * (i % 2),
                    weights: random_routing(&mut rng, k),
                });
            }
            let map = build_threshold_map(&records, &[1, 3], k, k - 1, RatioNumerator::Smallest).unwrap();
            assert!(map.is_monotone());
            for lt in &map.layers {
                for m in 1..k {
                    let mut r: Vec<f64> = records
                        .iter()
                        .filter(|rec| rec.layer == lt.layer)
                        .map(|rec| {
                            let total: f64 = rec.weights.iter().map(|&x| x as f64).sum();
                            rec.weights[..k - m].iter().map(|&x| x as f64).sum::<f64>() / total
                        })
                        .collect();
                    r.sort_by(f64::total_cmp);
                    let n = r.len();
                    let med = if n % 2 == 1 {
                        r[n / 2]
                    } else {
                        (r[n / 2 - 1] + r[n / 2]) / 2.0
                    };
                    assert_eq!(lt.beta[m - 1], med);
                }
            }
        }

        // and from routing recorded on the model itself
        let cfg = ExperimentConfig {
            target: ModelSpec {
                config: Some(ModelConfig {
                    active_experts: 3,
                    ..ModelConfig::default()
                }),
                ..ModelSpec::default()
            },
            ..ExperimentConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let seqs: Vec<Vec<TokenId>> = (0..4).map(|i| tokens(30, 256, 100 + i)).collect();
        let out = harness::calibrate(&cfg, CalibrateMode::Moe, &seqs, 1, None, dir.path()).unwrap();
        let (_, map) = out.thresholds.unwrap();
        assert_eq!(map.layers[0].beta.len(), 2);
        assert!(map.is_monotone());
    });
}

fn anchor_oracle(sims: &[u32], k: usize) -> Vec<usize> {
    // similarities in eighths; layer 1 has distance 8 regardless
    let mut order: Vec<(u32, usize)> = sims
        .iter()
        .enumerate()
        .map(|(i, &s)| (if i == 0 { 9 } else { 8 - s }, i))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = order[..k].iter().map(|&(_, i)| i + 1).collect();
    out.sort_unstable();
    out
}

#[test]
fn c08_anchor_selection_and_reuse() {
    criterion(8, "anchor selection oracle and mask reuse", || {
        let mut rng = Rng::new(5);
        for case in 0..1000 {
            let n = 2 + (rng.next_u64() % 15) as usize;
            let eighths: Vec<u32> = (0..n).map(|_| (rng.next_u64() % 9) as u32).collect();
            let sims: Vec<f64> = eighths.iter().map(|&e| e as f64 / 8.0).collect();
            let k = 1 + (rng.next_u64() % n as u64) as usize;
            let set = select_anchors(&sims, k).unwrap();
            assert_eq!(set.anchors, anchor_oracle(&eighths, k), "case {case}");
            assert_eq!(set.anchors[0], 1);
        }

        let model = target();
        let c = model.config().clone();
        let cfg = AttnSparsityConfig::new(32, 0.5, c.block_size);
        let prompt = tokens(120, c.vocab, 21);
        let mut base = model.session();
        base.prefill(&prompt[..119]).unwrap();
        base.set_pending(prompt[119]).unwrap();
        let mut drafter = ModelDrafter::new(draft_for(&model), 1.0);
        let tree = propose_chain(&mut drafter, &prompt, 3, &mut Rng::new(2)).unwrap();
        let own = base
            .clone()
            .verify_forward(&tree, &SparsityPlan::attention_only(cfg.clone(), None))
            .unwrap();
        let all = base
            .clone()
            .verify_forward(
                &tree,
                &SparsityPlan::attention_only(cfg.clone(), Some(AnchorSet::all(c.num_layers))),
            )
            .unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&own.root_logits), bits(&all.root_logits));
        for (a, b) in own.node_logits.iter().zip(&all.node_logits) {
            assert_eq!(bits(a), bits(b));
        }

        let anchors = AnchorSet::new(c.num_layers, vec![1, 3]).unwrap();
        let plan = SparsityPlan::attention_only(cfg, Some(anchors.clone()));
        let options = SessionOptions {
            record_masks: true,
            ..SessionOptions::default()
        };
        let drafter = ModelDrafter::new(draft_for(&model), 1.0);
        let mut dec = Decoder::with_options(
            Arc::clone(&model),
            drafter,
            &prompt,
            plan,
            decode_config(3, 24),
            4,
            options,
        )
        .unwrap();
        dec.run().unwrap();
        let passes = &dec.session().log().masks;
        assert!(!passes.is_empty());
        for masks in passes {
            for l in 1..=c.num_layers {
                let mask = masks[l - 1].as_ref().expect("eviction active");
                if anchors.anchors.contains(&l) {
                    assert_eq!(mask.provenance(), MaskProvenance::Retrieved);
                    continue;
                }
                let a = *anchors.anchors.iter().filter(|&&a| a < l).max().unwrap();
                let source = masks[a - 1].as_ref().unwrap();
                assert_eq!(mask.heads(), source.heads(), "layer {l} vs anchor {a}");
                assert_eq!(mask.provenance(), MaskProvenance::Reused { anchor_layer: a - 1 });
            }
        }
    });
}

fn random_mask(rng: &mut Rng, heads: usize, blocks: usize, per_head: usize) -> BlockMask {
    let mut out = Vec::new();
    for _ in 0..heads {
        let mut pool: Vec<usize> = (0..blocks).collect();
        for i in 0..per_head {
            let j = i + (rng.next_u64() % (blocks - i) as u64) as usize;
            pool.swap(i, j);
        }
        out.push(pool[..per_head].to_vec());
    }
    BlockMask::new(out)
}

#[test]
fn c09_overlap_properties_and_offline_recomputation() {
    criterion(9, "overlap properties and bucket means from mask logs", || {
        let mut rng = Rng::new(17);
        for _ in 0..2000 {
            let heads = 1 + (rng.next_u64() % 4) as usize;
            let blocks = 2 + (rng.next_u64() % 20) as usize;
            let per = 1 + (rng.next_u64() % blocks as u64) as usize;
            let a = random_mask(&mut rng, heads, blocks, per);
            let b = random_mask(&mut rng, heads, blocks, per);
            assert_eq!(overlap_ratio(&a, &a).unwrap(), 1.0);
            let ab = overlap_ratio(&a, &b).unwrap();
            assert_eq!(ab, overlap_ratio(&b, &a).unwrap());
            assert!((0.0..=1.0).contains(&ab));
        }

        let cfg = ExperimentConfig {
            mode: DraftMode::Tree {
                template: vec![2, 2],
                max_nodes: 16,
            },
            max_tokens: 12,
            prompt: tokens(90, 256, 6),
            sparsity: SparsitySettings {
                base_length: Some(32),
                ..SparsitySettings::default()
            },
            ..ExperimentConfig::default()
        };
        let max_distance = 3;
        let (rows, traces) = harness::overlap(&cfg, max_distance).unwrap();
        assert!(!rows.is_empty());

        let mut buckets = std::collections::BTreeMap::<(usize, usize), (f64, usize)>::new();
        for trace in &traces {
            let first = usize::from(trace.pending_first);
            for (layer, masks) in trace.token_masks.iter().enumerate() {
                for i in first..masks.len() {
                    for j in i + 1..masks.len() {
                        let (Some(a), Some(b)) = (&masks[i], &masks[j]) else {
                            continue;
                        };
                        let dist = trace.positions[i].abs_diff(trace.positions[j]);
                        if dist > max_distance {
                            continue;
                        }
                        let mut shared = 0;
                        let mut n = 0;
                        for h in 0..a.heads().len() {
                            let x: BTreeSet<usize> = a.head(h).iter().copied().collect();
                            let y: BTreeSet<usize> = b.head(h).iter().copied().collect();
                            shared += x.intersection(&y).count();
                            n += x.len();
                        }
                        let e = buckets.entry((layer, dist)).or_default();
                        e.0 += shared as f64 / n as f64;
                        e.1 += 1;
                    }
                }
            }
        }
        assert_eq!(rows.len(), buckets.len());
        for row in &rows {
            let (sum, n) = buckets[&(row.layer, row.distance)];
            assert_eq!(row.pairs, n);
            assert!((row.mean_overlap - sum / n as f64).abs() < 1e-12);
        }
        let csv = harness::overlap_csv(&rows);
        let parsed: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(parsed, rows.iter().map(|r| r.mean_overlap).collect::<Vec<_>>());
    });
}

#[test]
fn c10_piecewise_budget() {
    criterion(10, "piecewise budget boundary, hand value and rho limit", || {
        for l0 in [32usize, 128, 1024] {
            let c = AttnSparsityConfig::new(l0, 0.5, 16);
            for l in [1, l0 / 2, l0 - 1, l0] {
                assert_eq!(compute_budget(l, &c, 2), Budget::Full);
            }
            assert_ne!(compute_budget(l0 + 64, &c, 2), Budget::Full);
        }
        assert_eq!(
            compute_budget(3072, &AttnSparsityConfig::new(1024, 0.5, 16), 2),
            Budget::Blocks(256)
        );
        let one = AttnSparsityConfig {
            rho: 1.0,
            ..AttnSparsityConfig::new(1024, 0.5, 16)
        };
        for l in (1025..4096).step_by(7) {
            assert_eq!(compute_budget(l, &one, 2), Budget::Full, "L = {l}");
        }
        // approaching the limit loses at most one block per head to rounding
        let near = AttnSparsityConfig { rho: 1.0 - 1e-9, ..one };
        for l in (1025..4096).step_by(7) {
            let total = 2 * (l as usize).div_ceil(16);
            match compute_budget(l, &near, 2) {
                Budget::Full => {}
                Budget::Blocks(n) => assert!(n + 2 >= total && n < total, "L = {l}: {n} of {total}"),
            }
        }
    });
}

#[test]
fn c11_determinism_and_round_trips() {
    criterion(11, "deterministic outputs and bit-exact file round trips", || {
        let cfg = ExperimentConfig {
            prompt: tokens(60, 256, 12),
            max_tokens: 16,
            sparsity: SparsitySettings {
                base_length: Some(32),
                ffn_threshold: Some(0.05),
                ..SparsitySettings::default()
            },
            ..ExperimentConfig::default()
        };
        let a = harness::generate(&cfg).unwrap();
        let b = harness::generate(&cfg).unwrap();
        assert_eq!(a.record.to_json_line(), b.record.to_json_line());
        assert_eq!(a.record.config_hash, cfg.hash());
        let variants = harness::default_variants(&cfg);
        assert_eq!(
            harness::bench_csv(&harness::bench(&cfg, &variants).unwrap()),
            harness::bench_csv(&harness::bench(&cfg, &variants).unwrap())
        );
        let small = lossless_config();
        assert_eq!(
            harness::lossless(&small, 500, 0.5).unwrap(),
            harness::lossless(&small, 500, 0.5).unwrap()
        );

        let dir = tempfile::tempdir().unwrap();
        let model = Model::seeded(ModelConfig::default(), 3).unwrap();
        let wpath = dir.path().join("model.svwt");
        io::save_weights(&wpath, &model).unwrap();
        let back = io::load_weights(&wpath).unwrap();
        assert_eq!(back, model);
        assert_eq!(io::encode_weights(&back).unwrap(), std::fs::read(&wpath).unwrap());

        let seqs: Vec<Vec<TokenId>> = (0..3).map(|i| tokens(80, 256, 40 + i)).collect();
        let out = harness::calibrate(&cfg, CalibrateMode::Both, &seqs, 2, None, dir.path()).unwrap();
        let (apath, report) = out.anchors.unwrap();
        let (tpath, map) = out.thresholds.unwrap();
        let anchors: AnchorSet = io::load_json(&apath).unwrap();
        assert_eq!(anchors, report.anchors);
        let thresholds: ThresholdMap = io::load_json(&tpath).unwrap();
        assert_eq!(thresholds, map);
        for (path, again) in [
            (&apath, dir.path().join("a2.json")),
            (&tpath, dir.path().join("t2.json")),
        ] {
            if path == &apath {
                io::save_json(&again, &anchors).unwrap();
            } else {
                io::save_json(&again, &thresholds).unwrap();
            }
            assert_eq!(std::fs::read(path).unwrap(), std::fs::read(&again).unwrap());
        }
    });
}
