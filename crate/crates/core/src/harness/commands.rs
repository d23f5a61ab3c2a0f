use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io, with_pool, DraftSpec, ExperimentConfig, MetricsRecord, SparsitySettings};
use crate::error::{Error, Result};
use crate::flops::{attention_flops, ffn_flops, moe_flops, reconcile, FlopsBreakdown, FlopsParams};
use crate::kernels::FlopCategory;
use crate::model::{Model, ModelConfig, PassTrace, Session, SessionOptions, TokenId};
use crate::retrieval_reuse::{calibrate_anchors, ReuseCalibReport};
use crate::rng::Rng;
use crate::sparse_attention::overlap_ratio;
use crate::sparse_moe::{build_threshold_map, RoutingRecord, ThresholdMap};
use crate::specdec::{
    probs_from_logits, propose_chain, propose_tree, verify_step, Decoder, DraftMode, DraftTree, Drafter, MemoDrafter,
    ModelDrafter, PointMassDrafter,
};

/// Either drafter kind behind one type.
#[derive(Debug, Clone)]
pub(crate) enum AnyDrafter {
    Model(ModelDrafter),
    PointMass(PointMassDrafter),
}

impl Drafter for AnyDrafter {
    fn vocab(&self) -> usize {
        match self {
            AnyDrafter::Model(d) => d.vocab(),
            AnyDrafter::PointMass(d) => d.vocab(),
        }
    }

    fn distribution(&mut self, context: &[TokenId]) -> Result<Vec<f32>> {
        match self {
            AnyDrafter::Model(d) => d.distribution(context),
            AnyDrafter::PointMass(d) => d.distribution(context),
        }
    }
}

pub(crate) fn build_drafter(cfg: &ExperimentConfig, target: &Arc<Model>) -> Result<AnyDrafter> {
    let vocab = target.config().vocab;
    Ok(match &cfg.draft {
        DraftSpec::SelfDraft => AnyDrafter::Model(ModelDrafter::new(Arc::clone(target), cfg.temperature)),
        DraftSpec::PointMass { token, mass } => AnyDrafter::PointMass(PointMassDrafter {
            vocab,
            token: *token,
            mass: *mass,
        }),
        DraftSpec::Model {
            config,
            weights_file,
            seed,
        } => {
            let spec = super::ModelSpec {
                config: config.clone(),
                weights_file: weights_file.clone(),
                seed: *seed,
            };
            let model = spec.load(|| ModelConfig::draft_default(vocab))?;
            AnyDrafter::Model(ModelDrafter::new(Arc::new(model), cfg.temperature))
        }
    })
}

fn flop_map(counter: &crate::kernels::FlopCounter) -> BTreeMap<String, u64> {
    let mut m: BTreeMap<String, u64> = counter.iter().map(|(c, n)| (c.name().to_string(), n)).collect();
    m.insert("total".into(), counter.total());
    m
}

struct RunResult {
    tokens: Vec<TokenId>,
    record: MetricsRecord,
    flops: FlopsBreakdown,
    session: Session,
}

fn run_variant(
    cfg: &ExperimentConfig,
    settings: &SparsitySettings,
    command: &str,
    variant: &str,
    options: SessionOptions,
) -> Result<RunResult> {
    let target = cfg.load_target()?;
    let plan = settings.plan(target.config())?;
    let drafter = build_drafter(cfg, &target)?;
    let prompt = cfg.load_prompt()?;
    let mut dec = Decoder::with_options(
        Arc::clone(&target),
        drafter,
        &prompt,
        plan,
        cfg.decode_config(),
        cfg.seed,
        options,
    )?;
    let tokens = dec.run()?;
    let stats = dec.stats();
    let log = dec.session().log();
    let flops = reconcile(target.config(), log, dec.verify_flops());
    let record = MetricsRecord {
        command: command.to_string(),
        variant: variant.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        alpha: stats.mean_acceptance_length(),
        steps: stats.steps,
        emitted: stats.emitted,
        tokens: tokens.clone(),
        flops: flop_map(dec.verify_flops()),
        s_a: log.attention_sparsity(),
        s_f: log.ffn_sparsity(),
        s_e: log.expert_sparsity(),
    };
    Ok(RunResult {
        tokens,
        record,
        flops,
        session: dec.session().clone(),
    })
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub tokens: Vec<TokenId>,
    pub record: MetricsRecord,
    pub flops: FlopsBreakdown,
    pub session: Session,
}

/// Speculative decoding with the configured plan.
pub fn generate(cfg: &ExperimentConfig) -> Result<GenerateOutput> {
    let r = run_variant(cfg, &cfg.sparsity, "generate", "configured", SessionOptions::default())?;
    Ok(GenerateOutput {
        tokens: r.tokens,
        record: r.record,
        flops: r.flops,
        session: r.session,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrateMode {
    Anchors,
    Moe,
    Both,
}

#[derive(Debug, Clone, Default)]
pub struct CalibrationOutput {
    pub anchors: Option<(PathBuf, ReuseCalibReport)>,
    pub thresholds: Option<(PathBuf, ThresholdMap)>,
    /// One human-readable line per layer.
    pub summary: Vec<String>,
}

fn calibrate_moe(
    model: &Arc<Model>,
    sequences: &[Vec<TokenId>],
    max_level: usize,
    cfg: &ExperimentConfig,
) -> Result<ThresholdMap> {
    let per_seq: Vec<Result<Vec<RoutingRecord>>> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            if seq.is_empty() {
                log::warn!("calibration sequence {i} is empty; skipped");
                return Ok(Vec::new());
            }
            let mut s = Session::with_options(
                Arc::clone(model),
                SessionOptions {
                    record_routing: true,
                    ..SessionOptions::default()
                },
            );
            s.prefill(seq)?;
            Ok(s.log().routing.clone())
        })
        .collect();
    let mut records = Vec::new();
    for r in per_seq {
        records.extend(r?);
    }
    let c = model.config();
    build_threshold_map(
        &records,
        &c.moe_layers(),
        c.active_experts,
        max_level,
        cfg.sparsity.ratio_numerator,
    )
}

/// Writes `anchors.json` and/or `thresholds.json` into `out_dir`.
pub fn calibrate(
    cfg: &ExperimentConfig,
    mode: CalibrateMode,
    sequences: &[Vec<TokenId>],
    num_anchors: usize,
    max_level: Option<usize>,
    out_dir: &Path,
) -> Result<CalibrationOutput> {
    let target = cfg.load_target()?;
    let c = target.config().clone();
    let want_moe = matches!(mode, CalibrateMode::Moe | CalibrateMode::Both);
    let want_anchors = matches!(mode, CalibrateMode::Anchors | CalibrateMode::Both);
    if want_moe && c.moe_layers().is_empty() {
        return Err(Error::config(
            "MoE calibration requested for a model without MoE layers",
        ));
    }
    if sequences.is_empty() {
        return Err(Error::config("no calibration sequences"));
    }
    let mut out = CalibrationOutput::default();
    let lengths: Vec<usize> = sequences.iter().map(Vec::len).collect();
    out.summary.push(format!(
        "calibration sequences: {} (length min {} max {})",
        lengths.len(),
        lengths.iter().min().unwrap(),
        lengths.iter().max().unwrap()
    ));
    if want_anchors {
        let attn = cfg
            .sparsity
            .attention_config(c.block_size)
            .ok_or_else(|| Error::config("anchor calibration needs sparsity.base_length"))?;
        let report = with_pool(|| calibrate_anchors(&target, sequences, &attn, num_anchors))??;
        let path = out_dir.join("anchors.json");
        io::save_json(&path, &report.anchors)?;
        for (l, j) in report.mean_adjacent_jaccard.iter().enumerate() {
            let tag = if report.anchors.contains(l + 1) { " anchor" } else { "" };
            out.summary
                .push(format!("layer {}: mean adjacent jaccard {j:.4}{tag}", l + 1));
        }
        out.anchors = Some((path, report));
    }
    if want_moe {
        let max_level = max_level.unwrap_or(c.active_experts.saturating_sub(1));
        let map = with_pool(|| calibrate_moe(&target, sequences, max_level, cfg))??;
        let path = out_dir.join("thresholds.json");
        io::save_json(&path, &map)?;
        for l in &map.layers {
            let betas: Vec<String> = l.beta.iter().map(|b| format!("{b:.4}")).collect();
            out.summary
                .push(format!("moe layer {}: beta [{}]", l.layer, betas.join(", ")));
        }
        out.thresholds = Some((path, map));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    /// 0-based layer.
    pub layer: usize,
    pub distance: usize,
    pub mean_overlap: f64,
    pub pairs: usize,
}

/// Mean pairwise overlap of per-token masks, bucketed by layer and
/// positional distance. The pending token is not a draft token and takes
/// no part.
pub fn overlap_from_traces(traces: &[PassTrace], max_distance: usize) -> Result<Vec<OverlapRow>> {
    let mut buckets: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for trace in traces {
        let start = usize::from(trace.pending_first);
        for (layer, masks) in trace.token_masks.iter().enumerate() {
            for i in start..masks.len() {
                for j in i + 1..masks.len() {
                    let (Some(a), Some(b)) = (&masks[i], &masks[j]) else {
                        continue;
                    };
                    let dist = trace.positions[i].abs_diff(trace.positions[j]);
                    if dist > max_distance {
                        continue;
                    }
                    let e = buckets.entry((layer, dist)).or_insert((0.0, 0));
                    e.0 += overlap_ratio(a, b)?;
                    e.1 += 1;
                }
            }
        }
    }
    Ok(buckets
        .into_iter()
        .map(|((layer, distance), (sum, n))| OverlapRow {
            layer,
            distance,
            mean_overlap: sum / n as f64,
            pairs: n,
        })
        .collect())
}

pub fn overlap_csv(rows: &[OverlapRow]) -> String {
    let mut s = String::from("layer,distance,mean_overlap\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.layer, r.distance, r.mean_overlap));
    }
    s
}

/// Decodes with diagnostic per-token retrieval and buckets the overlaps.
pub fn overlap(cfg: &ExperimentConfig, max_distance: usize) -> Result<(Vec<OverlapRow>, Vec<PassTrace>)> {
    if cfg.sparsity.base_length.is_none() {
        return Err(Error::config(
            "overlap analysis needs attention sparsity (sparsity.base_length)",
        ));
    }
    let options = SessionOptions {
        record_token_masks: true,
        ..SessionOptions::default()
    };
    let r = run_variant(cfg, &cfg.sparsity, "overlap", "configured", options)?;
    let traces = r.session.log().token_masks.clone();
    Ok((overlap_from_traces(&traces, max_distance)?, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosslessReport {
    pub trials: usize,
    pub vocab: usize,
    pub tv_distance: f64,
    pub threshold: f64,
    pub pass: bool,
    pub exact: Vec<f64>,
    pub empirical: Vec<f64>,
}

type TargetMemo = HashMap<Vec<(Option<usize>, TokenId)>, (Vec<f32>, Vec<Vec<f32>>)>;

/// Independent single-step decodes; compares the first emitted token's
/// empirical distribution with the exact target distribution.
///
/// Target and draft evaluations are cached by tree and context, which
/// leaves every trial's result unchanged.
pub fn lossless(cfg: &ExperimentConfig, trials: usize, threshold: f64) -> Result<LosslessReport> {
    if trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    let target = cfg.load_target()?;
    let plan = cfg.sparsity.plan(target.config())?;
    if !plan.is_dense() {
        return Err(Error::config("losslessness is checked with sparsity off"));
    }
    let prompt = cfg.load_prompt()?;
    let drafter = build_drafter(cfg, &target)?;
    let (&last, head) = prompt.split_last().ok_or_else(|| Error::input("prompt is empty"))?;
    let mut base = target.session();
    if !head.is_empty() {
        base.prefill(head)?;
    }
    base.set_pending(last)?;
    let vocab = target.config().vocab;
    let t = cfg.temperature;

    let exact: Vec<f64> = {
        let mut s = base.clone();
        let out = s.verify_forward(&DraftTree::empty(), &plan)?;
        probs_from_logits(&out.root_logits, t)?
            .into_iter()
            .map(f64::from)
            .collect()
    };

    let mode = cfg.mode.clone();
    let seed = cfg.seed;
    let counts = with_pool(|| {
        (0..trials)
            .into_par_iter()
            .map_init(
                || (MemoDrafter::new(drafter.clone()), TargetMemo::new()),
                |(memo_drafter, memo_target), i| -> Result<usize> {
                    let mut rng = Rng::for_session(seed, i as u64);
                    let tree = match &mode {
                        DraftMode::Chain { k } => propose_chain(memo_drafter, &prompt, *k, &mut rng)?,
                        DraftMode::Tree { template, max_nodes } => {
                            propose_tree(memo_drafter, &prompt, template, *max_nodes)?
                        }
                    };
                    let key: Vec<(Option<usize>, TokenId)> = tree.nodes().iter().map(|n| (n.parent, n.token)).collect();
                    if !memo_target.contains_key(&key) {
                        let mut s = base.clone();
                        let out = s.verify_forward(&tree, &plan)?;
                        let root = probs_from_logits(&out.root_logits, t)?;
                        let nodes = out
                            .node_logits
                            .iter()
                            .map(|l| probs_from_logits(l, t))
                            .collect::<Result<Vec<_>>>()?;
                        memo_target.insert(key.clone(), (root, nodes));
                    }
                    let (root, nodes) = &memo_target[&key];
                    let outcome = verify_step(&tree, root, nodes, &mut rng)?;
                    Ok(outcome.emitted_tokens[0] as usize)
                },
            )
            .try_fold(
                || vec![0usize; vocab],
                |mut acc, tok| {
                    acc[tok?] += 1;
                    Ok::<_, Error>(acc)
                },
            )
            .try_reduce(
                || vec![0usize; vocab],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                    Ok(a)
                },
            )
    })??;

    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    let tv = 0.5 * exact.iter().zip(&empirical).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(LosslessReport {
        trials,
        vocab,
        tv_distance: tv,
        threshold,
        pass: tv < threshold,
        exact,
        empirical,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchVariant {
    pub name: String,
    pub sparsity: SparsitySettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub alpha: f64,
    pub steps: usize,
    pub emitted: usize,
    pub flops: BTreeMap<String, u64>,
    pub s_a: f64,
    pub s_f: f64,
    pub s_e: f64,
    pub retained_keys: u64,
    pub total_keys: u64,
    pub tokens: Vec<TokenId>,
    pub record: MetricsRecord,
}

/// Strict plan next to the configured one.
pub fn default_variants(cfg: &ExperimentConfig) -> Vec<BenchVariant> {
    vec![
        BenchVariant {
            name: "strict".into(),
            sparsity: SparsitySettings::strict(),
        },
        BenchVariant {
            name: "configured".into(),
            sparsity: cfg.sparsity.clone(),
        },
    ]
}

/// One decode per variant with the same seed and prompt.
pub fn bench(cfg: &ExperimentConfig, variants: &[BenchVariant]) -> Result<Vec<BenchRow>> {
    if variants.len() < 2 {
        return Err(Error::config("bench needs at least two variants"));
    }
    let results: Vec<Result<BenchRow>> = with_pool(|| {
        variants
            .par_iter()
            .map(|v| {
                let r = run_variant(cfg, &v.sparsity, "bench", &v.name, SessionOptions::default())?;
                let log = r.session.log();
                Ok(BenchRow {
                    variant: v.name.clone(),
                    alpha: r.record.alpha,
                    steps: r.record.steps,
                    emitted: r.record.emitted,
                    flops: r.record.flops.clone(),
                    s_a: r.record.s_a,
                    s_f: r.record.s_f,
                    s_e: r.record.s_e,
                    retained_keys: log.attn_retained_keys,
                    total_keys: log.attn_total_keys,
                    tokens: r.tokens,
                    record: r.record,
                })
            })
            .collect()
    })?;
    results.into_iter().collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,alpha,steps,emitted");
    for c in FlopCategory::ALL {
        s.push(',');
        s.push_str(c.name());
    }
    s.push_str(",s_a,s_f,s_e\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}", r.variant, r.alpha, r.steps, r.emitted));
        for c in FlopCategory::ALL {
            s.push_str(&format!(",{}", r.flops.get(c.name()).copied().unwrap_or(0)));
        }
        s.push_str(&format!(",{},{},{}\n", r.s_a, r.s_f, r.s_e));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsTableRow {
    pub component: String,
    pub dense_flops: f64,
    pub sparse_flops: f64,
    pub sparsity: f64,
    pub reduction_ratio: f64,
}

/// Analytical totals for the model at `tokens` tokens per pass, with
/// sparsities either given or measured by decoding under the configured
/// plan. Also returns the reconciliation of the measuring run, if any.
pub fn flops_table(
    cfg: &ExperimentConfig,
    tokens: Option<usize>,
    sparsities: Option<(f64, f64, f64)>,
) -> Result<(Vec<FlopsTableRow>, Option<FlopsBreakdown>)> {
    let target = cfg.load_target()?;
    let c = target.config();
    let (s, ledger) = match sparsities {
        Some(s) => (s, None),
        None => {
            let r = run_variant(cfg, &cfg.sparsity, "flops", "configured", SessionOptions::default())?;
            let log = r.session.log();
            (
                (
                    log.attention_sparsity(),
                    log.dense_ffn_sparsity(),
                    log.expert_sparsity(),
                ),
                Some(r.flops),
            )
        }
    };
    for v in [s.0, s.1, s.2] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!("sparsity {v} outside [0, 1]")));
        }
    }
    let t = tokens.unwrap_or(cfg.mode.max_depth() + 1);
    let mut p = FlopsParams::from_config(c, t);
    p.s_a = s.0;
    p.s_f = s.1;
    p.s_e = s.2;
    let layers = c.num_layers as f64;
    let dense = c.dense_layers().len() as f64;
    let moe = c.moe_layers().len() as f64;
    let mk = |component: &str, mult: f64, f: fn(&FlopsParams, bool) -> f64, sparsity: f64| {
        let d = mult * f(&p, false);
        let sp = mult * f(&p, true);
        FlopsTableRow {
            component: component.to_string(),
            dense_flops: d,
            sparse_flops: sp,
            sparsity,
            reduction_ratio: if d > 0.0 { 1.0 - sp / d } else { 0.0 },
        }
    };
    let rows = vec![
        mk("attention", layers, attention_flops, s.0),
        mk("ffn", dense, ffn_flops, s.1),
        mk("moe", moe, moe_flops, s.2),
    ];
    Ok((rows, ledger))
}

pub fn flops_csv(rows: &[FlopsTableRow]) -> String {
    let mut s = String::from("component,dense_flops,sparse_flops,sparsity,reduction_ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.component, r.dense_flops, r.sparse_flops, r.sparsity, r.reduction_ratio
        ));
    }
    s
}
