use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cache::KvCache;
use super::{FeedForwardWeights, Model, SparsityPlan, TokenId};
use crate::error::{Error, Result};
use crate::kernels::{self, dot, FlopCategory, FlopCounter};
use crate::retrieval_reuse::{nearest_anchor, MaskSource};
use crate::sparse_attention::{self, compute_budget, BlockMask, Budget};
use crate::sparse_ffn::sparse_ffn_forward;
use crate::sparse_moe::{decide_skip, sparse_moe_forward, ExpertSelection, RoutingRecord};
use crate::specdec::DraftTree;

/// Extra records a session keeps beyond the always-on sparsity counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionOptions {
    /// Routing weights of every token at every MoE layer, prefill included.
    pub record_routing: bool,
    /// Shared per-layer masks of every verification pass.
    pub record_masks: bool,
    /// Per-token diagnostic masks of every verification pass.
    pub record_token_masks: bool,
}

/// Geometry of one verification pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassShape {
    pub tokens: usize,
    /// Cached positions visible to every pass token.
    pub cache_keys: usize,
    /// Keys drawn from the tree itself, summed over tokens.
    pub intra_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnRecord {
    pub layer: usize,
    pub expert: Option<usize>,
    pub pruned: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeRecord {
    pub layer: usize,
    pub skipped: usize,
    pub k: usize,
}

/// Telemetry from verification passes.
#[derive(Debug, Clone, Default)]
pub struct SparsityLog {
    pub passes: Vec<PassShape>,
    /// Cached keys attended, summed over layers, tokens and KV heads.
    pub attn_retained_keys: u64,
    /// Cached keys a dense pass would attend, same summation.
    pub attn_total_keys: u64,
    pub ffn: Vec<FfnRecord>,
    pub moe: Vec<MoeRecord>,
    pub routing: Vec<RoutingRecord>,
    pub masks: Vec<Vec<Option<BlockMask>>>,
    pub token_masks: Vec<PassTrace>,
}

impl SparsityLog {
    /// `s_a = 1 - retained / total` over cached keys.
    pub fn attention_sparsity(&self) -> f64 {
        if self.attn_total_keys == 0 {
            return 0.0;
        }
        1.0 - self.attn_retained_keys as f64 / self.attn_total_keys as f64
    }

    fn mean_pruned<'a>(records: impl Iterator<Item = &'a FfnRecord>) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in records {
            sum += r.pruned as f64 / r.width as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Mean channel sparsity over every FFN invocation.
    pub fn ffn_sparsity(&self) -> f64 {
        Self::mean_pruned(self.ffn.iter())
    }

    /// Mean channel sparsity over dense-layer FFNs only.
    pub fn dense_ffn_sparsity(&self) -> f64 {
        Self::mean_pruned(self.ffn.iter().filter(|r| r.expert.is_none()))
    }

    /// Mean channel sparsity inside routed experts.
    pub fn expert_ffn_sparsity(&self) -> f64 {
        Self::mean_pruned(self.ffn.iter().filter(|r| r.expert.is_some()))
    }

    /// `s_e = Σ i* / Σ k` over token-layer routings.
    pub fn expert_sparsity(&self) -> f64 {
        let k: usize = self.moe.iter().map(|r| r.k).sum();
        if k == 0 {
            return 0.0;
        }
        self.moe.iter().map(|r| r.skipped).sum::<usize>() as f64 / k as f64
    }

    pub fn pass_tokens(&self) -> usize {
        self.passes.iter().map(|p| p.tokens).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassTrace {
    /// Token 0 is the pending token rather than a tree node.
    pub pending_first: bool,
    /// Absolute position of every pass token.
    pub positions: Vec<usize>,
    /// `[layer][token]`: the mask each token would retrieve with its own
    /// query. Empty unless requested.
    pub token_masks: Vec<Vec<Option<BlockMask>>>,
}

#[derive(Debug, Clone)]
pub struct VerifyOutput {
    /// Next-token logits at the committed prefix.
    pub root_logits: Vec<f32>,
    /// Next-token logits after each tree node.
    pub node_logits: Vec<Vec<f32>>,
    /// Shared mask per layer; `None` where every block is kept.
    pub masks: Vec<Option<BlockMask>>,
    pub trace: PassTrace,
}

#[derive(Debug, Clone)]
struct PendingPass {
    tokens: Vec<TokenId>,
    parents: Vec<Option<usize>>,
    /// `[layer][node] -> (rotated key, value)`, all KV heads.
    kv: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
}

struct PassToken {
    token: TokenId,
    /// Pass-local parent index.
    parent: Option<usize>,
}

struct PassResult {
    logits: Vec<Vec<f32>>,
    masks: Vec<Option<BlockMask>>,
    trace: PassTrace,
    kv: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
}

/// One decoding stream over a shared model: KV cache, FLOP counter and
/// sparsity log.
///
/// The last emitted token is held as *pending* until the next verification
/// pass, which processes it first and appends its key and value to the cache.
#[derive(Debug, Clone)]
pub struct Session {
    model: Arc<Model>,
    cache: KvCache,
    counter: FlopCounter,
    pending: Option<TokenId>,
    last_logits: Option<Vec<f32>>,
    last_pass: Option<PendingPass>,
    log: SparsityLog,
    options: SessionOptions,
}

impl Session {
    pub fn new(model: Arc<Model>) -> Self {
        Self::with_options(model, SessionOptions::default())
    }

    pub fn with_options(model: Arc<Model>, options: SessionOptions) -> Self {
        let c = model.config();
        let cache = KvCache::new(c.num_layers, c.num_kv_heads, c.head_dim(), c.block_size);
        Self {
            model,
            cache,
            counter: FlopCounter::new(),
            pending: None,
            last_logits: None,
            last_pass: None,
            log: SparsityLog::default(),
            options,
        }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn counter(&self) -> &FlopCounter {
        &self.counter
    }

    pub fn log(&self) -> &SparsityLog {
        &self.log
    }

    pub fn options(&self) -> SessionOptions {
        self.options
    }

    pub fn pending(&self) -> Option<TokenId> {
        self.pending
    }

    /// Logits after the last processed token, if any.
    pub fn last_logits(&self) -> Option<&[f32]> {
        self.last_logits.as_deref()
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        let v = self.model.config().vocab;
        if token as usize >= v {
            return Err(Error::input(format!("token id {token} outside vocabulary of {v}")));
        }
        Ok(())
    }

    /// Marks `token` as emitted but not yet cached.
    pub fn set_pending(&mut self, token: TokenId) -> Result<()> {
        self.check_token(token)?;
        if self.pending.is_some() {
            return Err(Error::logic("a pending token is already queued"));
        }
        self.pending = Some(token);
        self.last_pass = None;
        Ok(())
    }

    /// Dense forward over `tokens` into an empty cache; returns the logits
    /// of the final position.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::input("prefill needs at least one token"));
        }
        if !self.cache.is_empty() || self.pending.is_some() {
            return Err(Error::logic("prefill requires an empty session"));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let mut logits = Vec::new();
        for &t in tokens {
            logits = self.feed(t)?;
        }
        Ok(logits)
    }

    /// Appends one token with a dense pass and returns its logits.
    pub fn feed(&mut self, token: TokenId) -> Result<Vec<f32>> {
        if self.pending.is_some() {
            return Err(Error::logic("feed called while a token is pending"));
        }
        self.check_token(token)?;
        let pass = [PassToken { token, parent: None }];
        let out = self.run_pass(&pass, true, &SparsityPlan::dense(), false)?;
        let logits = out.logits.into_iter().next().expect("one token");
        self.last_logits = Some(logits.clone());
        self.last_pass = None;
        Ok(logits)
    }

    /// Scores every node of `tree` in one pass.
    ///
    /// The pending token, if any, goes first and enters the cache. Tree
    /// nodes see the cached prefix (under the plan's block masks) plus their
    /// own ancestors; their keys and values are held until [`commit`].
    ///
    /// [`commit`]: Session::commit
    pub fn verify_forward(&mut self, tree: &DraftTree, plan: &SparsityPlan) -> Result<VerifyOutput> {
        tree.validate(self.model.config().vocab)?;
        plan.validate(self.model.config())?;
        let offset = usize::from(self.pending.is_some());
        let mut pass = Vec::with_capacity(tree.len() + offset);
        if let Some(p) = self.pending {
            pass.push(PassToken { token: p, parent: None });
        }
        for node in tree.nodes() {
            let parent = match node.parent {
                Some(i) => Some(i + offset),
                None if offset == 1 => Some(0),
                None => None,
            };
            pass.push(PassToken {
                token: node.token,
                parent,
            });
        }
        let root_logits = match (self.pending, &self.last_logits) {
            (Some(_), _) => None,
            (None, Some(l)) => Some(l.clone()),
            (None, None) => return Err(Error::logic("verification needs a prefix: prefill first")),
        };
        if pass.is_empty() {
            return Err(Error::logic("nothing to verify: no pending token and an empty tree"));
        }
        let out = self.run_pass(&pass, offset == 1, plan, true)?;
        let mut logits = out.logits.into_iter();
        let root_logits = match root_logits {
            Some(l) => l,
            None => logits.next().expect("pending logits"),
        };
        let node_logits: Vec<Vec<f32>> = logits.collect();
        self.pending = None;
        self.last_logits = Some(root_logits.clone());
        self.last_pass = Some(PendingPass {
            tokens: tree.nodes().iter().map(|n| n.token).collect(),
            parents: tree.nodes().iter().map(|n| n.parent).collect(),
            kv: out
                .kv
                .into_iter()
                .map(|layer| layer.into_iter().skip(offset).collect())
                .collect(),
        });
        if self.options.record_masks {
            self.log.masks.push(out.masks.clone());
        }
        if self.options.record_token_masks {
            self.log.token_masks.push(out.trace.clone());
        }
        Ok(VerifyOutput {
            root_logits,
            node_logits,
            masks: out.masks,
            trace: out.trace,
        })
    }

    /// Appends the accepted root-to-node chain `path` of the last verified
    /// tree to the cache and queues `bonus` as the pending token.
    pub fn commit(&mut self, tree: &DraftTree, path: &[usize], bonus: TokenId) -> Result<()> {
        self.check_token(bonus)?;
        let pass = self
            .last_pass
            .take()
            .ok_or_else(|| Error::logic("commit without a preceding verification pass"))?;
        let same_tree = pass.tokens.len() == tree.len()
            && tree
                .nodes()
                .iter()
                .zip(pass.tokens.iter().zip(&pass.parents))
                .all(|(n, (&t, &p))| n.token == t && n.parent == p);
        if !same_tree {
            self.last_pass = Some(pass);
            return Err(Error::logic("commit tree differs from the verified tree"));
        }
        let mut expect_parent = None;
        for &i in path {
            if i >= pass.tokens.len() || pass.parents[i] != expect_parent {
                self.last_pass = Some(pass);
                return Err(Error::logic(format!(
                    "accepted path {path:?} is not a root-to-node chain"
                )));
            }
            expect_parent = Some(i);
        }
        for (layer, nodes) in pass.kv.iter().enumerate() {
            for &i in path {
                let (k, v) = &nodes[i];
                self.cache.push(layer, k, v);
            }
        }
        self.pending = Some(bonus);
        self.last_logits = None;
        Ok(())
    }

    /// Drops cached positions from `len` on, along with any pending state.
    pub fn truncate(&mut self, len: usize) {
        self.cache.truncate(len);
        self.pending = None;
        self.last_pass = None;
        self.last_logits = None;
    }

    pub fn clear_log(&mut self) {
        self.log = SparsityLog::default();
    }

    fn run_pass(
        &mut self,
        pass: &[PassToken],
        first_is_cached: bool,
        plan: &SparsityPlan,
        verify: bool,
    ) -> Result<PassResult> {
        let model = Arc::clone(&self.model);
        let cfg = model.config();
        let w = model.weights();
        let (d, hd, nh, nkv, group) = (
            cfg.hidden,
            cfg.head_dim(),
            cfg.num_query_heads,
            cfg.num_kv_heads,
            cfg.group_size(),
        );
        let scale = 1.0 / (hd as f64).sqrt();
        let n = pass.len();
        let base = self.cache.seq_len();

        // ancestors of each token, root first, excluding the cached first token
        let mut chains: Vec<Vec<usize>> = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        for (t, tok) in pass.iter().enumerate() {
            let mut chain = match tok.parent {
                Some(p) => {
                    depth.push(depth[p] + 1);
                    chains[p].clone()
                }
                None => {
                    depth.push(0);
                    Vec::new()
                }
            };
            if !(first_is_cached && t == 0) {
                chain.push(t);
            }
            chains.push(chain);
        }
        let positions: Vec<usize> = depth.iter().map(|&dp| base + dp).collect();
        let intra_pairs: usize = chains.iter().map(Vec::len).sum();

        let mut xs: Vec<Vec<f32>> = pass.iter().map(|t| w.embed.row(t.token as usize).to_vec()).collect();
        let mut masks = Vec::with_capacity(cfg.num_layers);
        let mut token_masks = Vec::new();
        let mut kv_out = Vec::with_capacity(cfg.num_layers);
        let attn_plan = plan.attention.as_ref().filter(|_| verify);

        for (l, lw) in w.layers.iter().enumerate() {
            let mut qs = Vec::with_capacity(n);
            let mut ks = Vec::with_capacity(n);
            let mut vs = Vec::with_capacity(n);
            for (t, x) in xs.iter().enumerate() {
                let h = kernels::rms_norm(x, &lw.attn_norm);
                let mut q = kernels::matvec(&lw.wq, &h, &mut self.counter, FlopCategory::AttnProj);
                let mut k = kernels::matvec(&lw.wk, &h, &mut self.counter, FlopCategory::AttnProj);
                let v = kernels::matvec(&lw.wv, &h, &mut self.counter, FlopCategory::AttnProj);
                rotate(&mut q, positions[t], hd, cfg.rope_base);
                rotate(&mut k, positions[t], hd, cfg.rope_base);
                qs.push(q);
                ks.push(k);
                vs.push(v);
            }
            if first_is_cached {
                self.cache.push(l, &ks[0], &vs[0]);
            }
            let cache_len = self.cache.layer_len(l);

            let mask = match attn_plan {
                None => None,
                Some(ap) => match compute_budget(cache_len, &ap.config, nkv) {
                    Budget::Full => None,
                    Budget::Blocks(_) => {
                        let source = match &ap.anchors {
                            Some(a) => nearest_anchor(l + 1, a),
                            None => MaskSource::SelfRetrieval,
                        };
                        match source {
                            MaskSource::SelfRetrieval => sparse_attention::retrieve(
                                &self.cache,
                                l,
                                &qs[0],
                                group,
                                &ap.config,
                                &mut self.counter,
                            )?,
                            MaskSource::Anchor(a) => {
                                let anchor: &Option<BlockMask> = &masks[a - 1];
                                anchor.as_ref().map(|m| m.reused_from(a - 1))
                            }
                        }
                    }
                },
            };
            if verify && self.options.record_token_masks {
                let mut scratch = FlopCounter::new();
                let per_token = match attn_plan {
                    Some(ap) if !matches!(compute_budget(cache_len, &ap.config, nkv), Budget::Full) => qs
                        .iter()
                        .map(|q| sparse_attention::retrieve(&self.cache, l, q, group, &ap.config, &mut scratch))
                        .collect::<Result<Vec<_>>>()?,
                    _ => vec![None; n],
                };
                token_masks.push(per_token);
            }

            for t in 0..n {
                let q = &qs[t];
                let mut attn = vec![0.0f32; d];
                for qh in 0..nh {
                    let kvh = qh / group;
                    let qv = &q[qh * hd..(qh + 1) * hd];
                    let mut scores: Vec<f64> = Vec::new();
                    let mut values: Vec<&[f32]> = Vec::new();
                    let blocks = self.cache.blocks(l, kvh);
                    let mut visit = |b: usize| {
                        let block = &blocks[b];
                        for s in 0..block.len() {
                            scores.push(dot(qv, block.key(s, hd)) * scale);
                            values.push(block.value(s, hd));
                        }
                    };
                    match &mask {
                        Some(m) => m.head(kvh).iter().for_each(|&b| visit(b)),
                        None => (0..blocks.len()).for_each(&mut visit),
                    }
                    for &a in &chains[t] {
                        scores.push(dot(qv, &ks[a][kvh * hd..(kvh + 1) * hd]) * scale);
                        values.push(&vs[a][kvh * hd..(kvh + 1) * hd]);
                    }
                    self.counter
                        .add(FlopCategory::AttnScore, (4 * hd * scores.len()) as u64);
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0f64;
                    for s in &mut scores {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let mut out = vec![0.0f64; hd];
                    for (p, v) in scores.iter().zip(&values) {
                        let p = p / total;
                        for (o, &x) in out.iter_mut().zip(v.iter()) {
                            *o += p * x as f64;
                        }
                    }
                    for (j, o) in out.into_iter().enumerate() {
                        attn[qh * hd + j] = o as f32;
                    }
                }
                if verify {
                    for kvh in 0..nkv {
                        let kept = mask
                            .as_ref()
                            .map_or(cache_len, |m| m.retained_keys(&self.cache, l, kvh));
                        self.log.attn_retained_keys += kept as u64;
                        self.log.attn_total_keys += cache_len as u64;
                    }
                }
                let o = kernels::matvec(&lw.wo, &attn, &mut self.counter, FlopCategory::AttnProj);
                for (x, o) in xs[t].iter_mut().zip(o) {
                    *x += o;
                }
            }
            masks.push(mask);

            for x in xs.iter_mut() {
                let h = kernels::rms_norm(x, &lw.ffn_norm);
                let y = self.ffn(l, &lw.ffn, &h, plan, verify)?;
                for (x, y) in x.iter_mut().zip(y) {
                    *x += y;
                }
            }

            kv_out.push(ks.into_iter().zip(vs).collect::<Vec<_>>());
        }

        if verify {
            self.log.passes.push(PassShape {
                tokens: n,
                cache_keys: self.cache.seq_len(),
                intra_pairs,
            });
        }
        let logits = xs
            .iter()
            .map(|x| {
                let h = kernels::rms_norm(x, &w.final_norm);
                kernels::matvec(&w.lm_head, &h, &mut self.counter, FlopCategory::Other)
            })
            .collect();
        Ok(PassResult {
            logits,
            masks,
            trace: PassTrace {
                pending_first: first_is_cached,
                positions,
                token_masks,
            },
            kv: kv_out,
        })
    }

    fn ffn(
        &mut self,
        layer: usize,
        ffn: &FeedForwardWeights,
        h: &[f32],
        plan: &SparsityPlan,
        verify: bool,
    ) -> Result<Vec<f32>> {
        let tau = if verify { plan.ffn_threshold } else { None };
        match ffn {
            FeedForwardWeights::Dense(fw) => {
                let (y, sel) = sparse_ffn_forward(h, fw, tau, &mut self.counter, FlopCategory::Ffn);
                if verify {
                    self.log.ffn.push(FfnRecord {
                        layer,
                        expert: None,
                        pruned: sel.pruned.len(),
                        width: sel.width,
                    });
                }
                Ok(y)
            }
            FeedForwardWeights::Moe { experts, .. } => {
                let (ids, weights) = self.model.route_topk(h, layer, &mut self.counter)?;
                if self.options.record_routing {
                    self.log.routing.push(RoutingRecord {
                        layer,
                        weights: weights.clone(),
                    });
                }
                let skip = plan.moe_skip.as_ref().filter(|_| verify);
                let selection = match skip {
                    Some(s) => {
                        let betas = s
                            .map
                            .betas(layer)
                            .ok_or_else(|| Error::config(format!("threshold map lacks MoE layer {layer}")))?;
                        decide_skip(ids, weights, betas, s.budget, s.rule, s.numerator)
                    }
                    None => ExpertSelection::keep_all(ids, weights),
                };
                let renormalize = skip.is_some_and(|s| s.renormalize);
                let (y, channels) = sparse_moe_forward(h, &selection, experts, tau, renormalize, &mut self.counter);
                if verify {
                    self.log.moe.push(MoeRecord {
                        layer,
                        skipped: selection.skipped,
                        k: selection.k(),
                    });
                    for (e, sel) in channels {
                        self.log.ffn.push(FfnRecord {
                            layer,
                            expert: Some(e),
                            pruned: sel.pruned.len(),
                            width: sel.width,
                        });
                    }
                }
                Ok(y)
            }
        }
    }
}

/// Rotary encoding over pairs `(2i, 2i+1)` of every head, angle
/// `pos · base^(-2i/hd)`.
fn rotate(x: &mut [f32], pos: usize, head_dim: usize, base: f32) {
    for head in x.chunks_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let theta = pos as f64 * (base as f64).powf(-2.0 * i as f64 / head_dim as f64);
            let (s, c) = theta.sin_cos();
            let (a, b) = (head[2 * i] as f64, head[2 * i + 1] as f64);
            head[2 * i] = (a * c - b * s) as f32;
            head[2 * i + 1] = (a * s + b * c) as f32;
        }
    }
}
