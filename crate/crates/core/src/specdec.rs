//! Draft proposal, lossless verification and the decode loop.
//!
//! A drafted token `x` with proposal probability `q(x)` is accepted against
//! target probability `p(x)` when `u < min(1, p(x)/q(x))`. After a rejection
//! the next candidate (or the final token) is drawn from the residual
//! `norm(max(0, P - Q))`. If every token on a path is accepted, one bonus
//! token is drawn from the target distribution after the leaf.
//!
//! Random numbers are consumed in a fixed order per step: draft samples in
//! node order, then one acceptance uniform per tried child along the walk,
//! then one uniform for the final token.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{reconcile, FlopsBreakdown};
use crate::kernels::{self, FlopCounter};
use crate::model::{Model, Session, SessionOptions, SparsityPlan, TokenId};
use crate::rng::{sample_with, Rng};

/// Residual mass below which the target distribution is used directly.
pub const RESIDUAL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftNode {
    /// Parent node index; `None` attaches to the committed prefix.
    pub parent: Option<usize>,
    pub token: TokenId,
    /// Proposal probability used in the acceptance test.
    pub q: f32,
    /// Probability of `token` under the draft model.
    pub draft_prob: f32,
}

/// How children were proposed, which fixes the proposal distribution used
/// for residual updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    /// Children sampled independently from the draft distribution.
    Sampled,
    /// Children chosen by rank; each is a point-mass proposal.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftTree {
    nodes: Vec<DraftNode>,
    kind: ProposalKind,
    /// Draft distribution at each parent slot (slot 0 is the root, slot
    /// `i+1` is node `i`). Only kept for sampled trees.
    proposals: Vec<Option<Vec<f32>>>,
}

impl DraftTree {
    pub fn empty() -> Self {
        Self {
            nodes: Vec::new(),
            kind: ProposalKind::Deterministic,
            proposals: vec![None],
        }
    }

    /// Tree whose children are point-mass proposals.
    pub fn deterministic(nodes: Vec<DraftNode>) -> Result<Self> {
        let n = nodes.len();
        let tree = Self {
            nodes,
            kind: ProposalKind::Deterministic,
            proposals: vec![None; n + 1],
        };
        tree.check_structure()?;
        Ok(tree)
    }

    /// Tree whose children were sampled from `proposals[slot]`.
    pub fn sampled(nodes: Vec<DraftNode>, proposals: Vec<Option<Vec<f32>>>) -> Result<Self> {
        if proposals.len() != nodes.len() + 1 {
            return Err(Error::input("one proposal slot per node plus the root is required"));
        }
        let tree = Self {
            nodes,
            kind: ProposalKind::Sampled,
            proposals,
        };
        tree.check_structure()?;
        for (i, n) in tree.nodes.iter().enumerate() {
            let slot = n.parent.map_or(0, |p| p + 1);
            if tree.proposals[slot].is_none() {
                return Err(Error::input(format!(
                    "node {i} has no proposal distribution at its parent"
                )));
            }
        }
        Ok(tree)
    }

    fn check_structure(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                if p >= i {
                    return Err(Error::input(format!(
                        "node {i} has parent {p}; parents must precede children"
                    )));
                }
            }
            if !(n.q > 0.0 && n.q <= 1.0) {
                return Err(Error::input(format!("node {i} has proposal probability {}", n.q)));
            }
        }
        Ok(())
    }

    /// Structure plus token range.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        self.check_structure()?;
        if let Some((i, n)) = self.nodes.iter().enumerate().find(|(_, n)| n.token as usize >= vocab) {
            return Err(Error::input(format!(
                "node {i} token {} outside vocabulary of {vocab}",
                n.token
            )));
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self) -> ProposalKind {
        self.kind
    }

    /// Children of `parent` (`None` for the root) in tree order.
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent == parent)
            .collect()
    }

    pub fn depth(&self, node: usize) -> usize {
        let mut d = 1;
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            d += 1;
            cur = self.nodes[p].parent;
        }
        d
    }

    /// Longest root-to-leaf path.
    pub fn max_depth(&self) -> usize {
        (0..self.nodes.len()).map(|i| self.depth(i)).max().unwrap_or(0)
    }

    /// Tokens from the root down to `node`.
    pub fn path_tokens(&self, node: usize) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut cur = Some(node);
        while let Some(i) = cur {
            out.push(self.nodes[i].token);
            cur = self.nodes[i].parent;
        }
        out.reverse();
        out
    }

    fn proposal(&self, parent: Option<usize>) -> Option<&[f32]> {
        self.proposals[parent.map_or(0, |p| p + 1)].as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub accepted_path: Vec<usize>,
    /// Accepted tokens followed by the resampled or bonus token.
    pub emitted_tokens: Vec<TokenId>,
    /// `min(1, p/q)` of every acceptance test, in test order.
    pub acceptance_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub steps: usize,
    pub emitted: usize,
}

impl AcceptanceStats {
    pub fn record(&mut self, outcome: &StepOutcome) {
        self.steps += 1;
        self.emitted += outcome.emitted_tokens.len();
    }

    /// `α = emitted / steps`; 0 before the first step.
    pub fn mean_acceptance_length(&self) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        self.emitted as f64 / self.steps as f64
    }
}

/// Distribution over the next token after a context.
pub trait Drafter {
    fn vocab(&self) -> usize;
    /// Next-token probabilities after `context` (already tempered).
    fn distribution(&mut self, context: &[TokenId]) -> Result<Vec<f32>>;
}

/// Softmax of `logits / temperature`; a non-positive temperature gives the
/// one-hot argmax (lowest index among ties).
pub fn probs_from_logits(logits: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        let mut out = vec![0.0; logits.len()];
        out[best] = 1.0;
        return Ok(out);
    }
    if temperature == 1.0 {
        return kernels::softmax(logits);
    }
    let scaled: Vec<f32> = logits.iter().map(|l| l / temperature).collect();
    kernels::softmax(&scaled)
}

/// A draft model run in its own session, reusing the cached prefix shared
/// with the previous request.
#[derive(Debug, Clone)]
pub struct ModelDrafter {
    session: Session,
    fed: Vec<TokenId>,
    logits: Option<Vec<f32>>,
    temperature: f32,
}

impl ModelDrafter {
    pub fn new(model: Arc<Model>, temperature: f32) -> Self {
        Self {
            session: Session::new(model),
            fed: Vec::new(),
            logits: None,
            temperature,
        }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }
}

impl Drafter for ModelDrafter {
    fn vocab(&self) -> usize {
        self.session.model().config().vocab
    }

    fn distribution(&mut self, context: &[TokenId]) -> Result<Vec<f32>> {
        if context.is_empty() {
            return Err(Error::input("draft context is empty"));
        }
        if self.fed.as_slice() != context || self.logits.is_none() {
            let lcp = self.fed.iter().zip(context).take_while(|(a, b)| a == b).count();
            let keep = lcp.min(context.len() - 1);
            if keep < self.fed.len() {
                self.session.truncate(keep);
                self.fed.truncate(keep);
            }
            let mut logits = None;
            for &t in &context[keep..] {
                logits = Some(self.session.feed(t)?);
                self.fed.push(t);
            }
            self.logits = logits;
        }
        probs_from_logits(self.logits.as_ref().expect("fed at least one token"), self.temperature)
    }
}

/// Puts `mass` on one token and spreads the rest evenly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMassDrafter {
    pub vocab: usize,
    pub token: TokenId,
    pub mass: f32,
}

impl Drafter for PointMassDrafter {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn distribution(&mut self, _context: &[TokenId]) -> Result<Vec<f32>> {
        if self.token as usize >= self.vocab || !(0.0..=1.0).contains(&self.mass) {
            return Err(Error::config("point-mass drafter token or mass out of range"));
        }
        let rest = if self.vocab > 1 {
            (1.0 - self.mass) / (self.vocab - 1) as f32
        } else {
            0.0
        };
        let mut p = vec![rest; self.vocab];
        p[self.token as usize] = if self.vocab > 1 { self.mass } else { 1.0 };
        Ok(p)
    }
}

/// Caches draft distributions by context.
#[derive(Debug, Clone)]
pub struct MemoDrafter<D> {
    inner: D,
    memo: HashMap<Vec<TokenId>, Vec<f32>>,
}

impl<D: Drafter> MemoDrafter<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            memo: HashMap::new(),
        }
    }
}

impl<D: Drafter> Drafter for MemoDrafter<D> {
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }

    fn distribution(&mut self, context: &[TokenId]) -> Result<Vec<f32>> {
        if let Some(p) = self.memo.get(context) {
            return Ok(p.clone());
        }
        let p = self.inner.distribution(context)?;
        self.memo.insert(context.to_vec(), p.clone());
        Ok(p)
    }
}

/// `K` tokens sampled autoregressively after `context`.
pub fn propose_chain<D: Drafter>(drafter: &mut D, context: &[TokenId], k: usize, rng: &mut Rng) -> Result<DraftTree> {
    if k == 0 {
        return Err(Error::config("draft length must be at least 1"));
    }
    let mut ctx = context.to_vec();
    let mut nodes = Vec::with_capacity(k);
    let mut proposals = Vec::with_capacity(k + 1);
    for i in 0..k {
        let q = drafter.distribution(&ctx)?;
        let token = rng.sample(&q);
        let prob = q[token];
        nodes.push(DraftNode {
            parent: i.checked_sub(1),
            token: token as TokenId,
            q: prob,
            draft_prob: prob,
        });
        proposals.push(Some(q));
        ctx.push(token as TokenId);
    }
    proposals.push(None);
    DraftTree::sampled(nodes, proposals)
}

/// Top-`b_i` children by draft probability at every depth `i`.
///
/// Children are point-mass proposals (`q = 1`), so verification stays
/// exact with distinct siblings.
pub fn propose_tree<D: Drafter>(
    drafter: &mut D,
    context: &[TokenId],
    template: &[usize],
    max_nodes: usize,
) -> Result<DraftTree> {
    if template.is_empty() || template.contains(&0) {
        return Err(Error::config("tree template needs positive branching factors"));
    }
    let v = drafter.vocab();
    if let Some(&b) = template.iter().find(|&&b| b > v) {
        return Err(Error::input(format!("branching factor {b} exceeds vocabulary {v}")));
    }
    let mut count = 0usize;
    let mut width = 1usize;
    for &b in template {
        width = width.saturating_mul(b);
        count = count.saturating_add(width);
    }
    if count > max_nodes {
        return Err(Error::config(format!(
            "template expands to {count} nodes, limit is {max_nodes}"
        )));
    }
    let mut nodes: Vec<DraftNode> = Vec::with_capacity(count);
    let mut frontier: Vec<Option<usize>> = vec![None];
    for &b in template {
        let mut next = Vec::new();
        for &parent in &frontier {
            let mut ctx = context.to_vec();
            ctx.extend(match parent {
                Some(p) => path_of(&nodes, p),
                None => Vec::new(),
            });
            let q = drafter.distribution(&ctx)?;
            let mut order: Vec<usize> = (0..q.len()).collect();
            order.sort_by(|&a, &c| q[c].total_cmp(&q[a]).then(a.cmp(&c)));
            for &tok in &order[..b] {
                next.push(Some(nodes.len()));
                nodes.push(DraftNode {
                    parent,
                    token: tok as TokenId,
                    q: 1.0,
                    draft_prob: q[tok],
                });
            }
        }
        frontier = next;
    }
    DraftTree::deterministic(nodes)
}

fn path_of(nodes: &[DraftNode], node: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut cur = Some(node);
    while let Some(i) = cur {
        out.push(nodes[i].token);
        cur = nodes[i].parent;
    }
    out.reverse();
    out
}

/// `u < min(1, p/q)`.
pub fn accept_token(p: f64, q: f64, u: f64) -> Result<bool> {
    if !(q > 0.0) {
        return Err(Error::logic(format!(
            "draft probability {q} of a drafted token must be positive"
        )));
    }
    Ok(u < (p / q).min(1.0))
}

/// `norm(max(0, P - Q))`, or `P` when the residual mass is below
/// [`RESIDUAL_EPS`].
pub fn residual_distribution(p: &[f32], q: &[f32]) -> Vec<f32> {
    let diff: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).max(0.0)).collect();
    let total: f64 = diff.iter().sum();
    if total < RESIDUAL_EPS {
        return p.to_vec();
    }
    diff.into_iter().map(|x| (x / total) as f32).collect()
}

fn point_mass(len: usize, token: TokenId) -> Vec<f32> {
    let mut q = vec![0.0; len];
    q[token as usize] = 1.0;
    q
}

/// Walks the tree from the root, trying each position's children in tree
/// order, and emits the accepted tokens plus one final token.
///
/// `root_probs` is the target distribution at the committed prefix and
/// `node_probs[i]` the one after node `i`.
pub fn verify_step(
    tree: &DraftTree,
    root_probs: &[f32],
    node_probs: &[Vec<f32>],
    rng: &mut Rng,
) -> Result<StepOutcome> {
    if node_probs.len() != tree.len() {
        return Err(Error::logic(format!(
            "{} target distributions for {} tree nodes",
            node_probs.len(),
            tree.len()
        )));
    }
    let mut path = Vec::new();
    let mut emitted = Vec::new();
    let mut alphas = Vec::new();
    let mut here: Option<usize> = None;
    let mut p: Vec<f32> = root_probs.to_vec();
    'walk: loop {
        for child in tree.children(here) {
            let node = tree.nodes[child];
            let alpha = (p[node.token as usize] as f64 / node.q as f64).min(1.0);
            let u = rng.uniform();
            alphas.push(alpha);
            if accept_token(p[node.token as usize] as f64, node.q as f64, u)? {
                path.push(child);
                emitted.push(node.token);
                here = Some(child);
                p = node_probs[child].clone();
                continue 'walk;
            }
            let q = match (tree.kind, tree.proposal(here)) {
                (ProposalKind::Sampled, Some(q)) => q.to_vec(),
                _ => point_mass(p.len(), node.token),
            };
            p = residual_distribution(&p, &q);
        }
        break;
    }
    let last = sample_with(&p, rng.uniform());
    emitted.push(last as TokenId);
    Ok(StepOutcome {
        accepted_path: path,
        emitted_tokens: emitted,
        acceptance_probs: alphas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftMode {
    Chain { k: usize },
    Tree { template: Vec<usize>, max_nodes: usize },
}

impl DraftMode {
    /// Longest path a tree of this mode can hold.
    pub fn max_depth(&self) -> usize {
        match self {
            DraftMode::Chain { k } => *k,
            DraftMode::Tree { template, .. } => template.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DraftMode,
    pub temperature: f32,
    pub max_tokens: usize,
}

/// One speculative decoding stream.
#[derive(Debug, Clone)]
pub struct Decoder<D> {
    target: Session,
    drafter: D,
    plan: SparsityPlan,
    config: DecodeConfig,
    rng: Rng,
    context: Vec<TokenId>,
    generated: Vec<TokenId>,
    stats: AcceptanceStats,
    verify_flops: FlopCounter,
}

impl<D: Drafter> Decoder<D> {
    /// Prefills the target with all but the last prompt token; the last one
    /// is verified in the first step.
    pub fn new(
        target: Arc<Model>,
        drafter: D,
        prompt: &[TokenId],
        plan: SparsityPlan,
        config: DecodeConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::with_options(target, drafter, prompt, plan, config, seed, SessionOptions::default())
    }

    pub fn with_options(
        target: Arc<Model>,
        drafter: D,
        prompt: &[TokenId],
        plan: SparsityPlan,
        config: DecodeConfig,
        seed: u64,
        options: SessionOptions,
    ) -> Result<Self> {
        let (&last, head) = prompt.split_last().ok_or_else(|| Error::input("prompt is empty"))?;
        if config.max_tokens == 0 {
            return Err(Error::config("max_tokens must be at least 1"));
        }
        if drafter.vocab() != target.config().vocab {
            return Err(Error::config(format!(
                "draft vocabulary {} differs from target vocabulary {}",
                drafter.vocab(),
                target.config().vocab
            )));
        }
        plan.validate(target.config())?;
        let mut session = Session::with_options(target, options);
        if !head.is_empty() {
            session.prefill(head)?;
        }
        session.set_pending(last)?;
        Ok(Self {
            target: session,
            drafter,
            plan,
            config,
            rng: Rng::new(seed),
            context: prompt.to_vec(),
            generated: Vec::new(),
            stats: AcceptanceStats::default(),
            verify_flops: FlopCounter::new(),
        })
    }

    pub fn session(&self) -> &Session {
        &self.target
    }

    pub fn stats(&self) -> AcceptanceStats {
        self.stats
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    /// FLOPs of target verification passes only.
    pub fn verify_flops(&self) -> &FlopCounter {
        &self.verify_flops
    }

    pub fn propose(&mut self) -> Result<DraftTree> {
        match &self.config.mode {
            DraftMode::Chain { k } => propose_chain(&mut self.drafter, &self.context, *k, &mut self.rng),
            DraftMode::Tree { template, max_nodes } => {
                propose_tree(&mut self.drafter, &self.context, template, *max_nodes)
            }
        }
    }

    /// One propose, verify, accept and commit cycle.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let tree = self.propose()?;
        let before = self.target.counter().clone();
        let out = self.target.verify_forward(&tree, &self.plan)?;
        self.verify_flops.merge(&self.target.counter().since(&before));
        let t = self.config.temperature;
        let root = probs_from_logits(&out.root_logits, t)?;
        let nodes = out
            .node_logits
            .iter()
            .map(|l| probs_from_logits(l, t))
            .collect::<Result<Vec<_>>>()?;
        let outcome = verify_step(&tree, &root, &nodes, &mut self.rng)?;
        let bonus = *outcome.emitted_tokens.last().expect("at least one token");
        self.target.commit(&tree, &outcome.accepted_path, bonus)?;
        self.context.extend(&outcome.emitted_tokens);
        self.generated.extend(&outcome.emitted_tokens);
        self.stats.record(&outcome);
        Ok(outcome)
    }

    /// Steps until `max_tokens` are emitted; returns exactly that many.
    pub fn run(&mut self) -> Result<Vec<TokenId>> {
        while self.generated.len() < self.config.max_tokens {
            self.step()?;
        }
        Ok(self.generated[..self.config.max_tokens].to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub stats: AcceptanceStats,
    pub flops: FlopsBreakdown,
    pub session: Session,
}

/// Full decode run with the FLOPs ledger of the verification passes.
pub fn decode<D: Drafter>(
    target: Arc<Model>,
    drafter: D,
    prompt: &[TokenId],
    plan: SparsityPlan,
    config: DecodeConfig,
    seed: u64,
) -> Result<DecodeOutput> {
    let mut dec = Decoder::new(target, drafter, prompt, plan, config, seed)?;
    let tokens = dec.run()?;
    let flops = reconcile(dec.target.model().config(), dec.target.log(), &dec.verify_flops);
    Ok(DecodeOutput {
        tokens,
        stats: dec.stats,
        flops,
        session: dec.target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn chain(tokens: &[(TokenId, f32)]) -> DraftTree {
        let nodes = tokens
            .iter()
            .enumerate()
            .map(|(i, &(t, q))| DraftNode {
                parent: i.checked_sub(1),
                token: t,
                q,
                draft_prob: q,
            })
            .collect();
        DraftTree::deterministic(nodes).unwrap()
    }

    #[test]
    fn accept_token_cases() {
        assert!(accept_token(0.6, 0.3, 0.999).unwrap());
        assert!(!accept_token(0.2, 0.4, 0.7).unwrap());
        assert!(accept_token(0.2, 0.4, 0.3).unwrap());
        assert!(!accept_token(0.0, 0.5, 0.0).unwrap());
        assert!(matches!(accept_token(0.5, 0.0, 0.1), Err(Error::Logic(_))));
    }

    #[test]
    fn residual_cases() {
        assert_eq!(residual_distribution(&[0.5, 0.5], &[1.0, 0.0]), vec![0.0, 1.0]);
        let p = [0.25, 0.75];
        assert_eq!(residual_distribution(&p, &p), p.to_vec());
    }

    #[test]
    fn residual_matches_direct_formula() {
        let mut rng = Rng::new(21);
        for _ in 0..200 {
            let p = kernels::softmax(&(0..8).map(|_| rng.uniform_f32(-2.0, 2.0)).collect::<Vec<_>>()).unwrap();
            let q = kernels::softmax(&(0..8).map(|_| rng.uniform_f32(-2.0, 2.0)).collect::<Vec<_>>()).unwrap();
            let r = residual_distribution(&p, &q);
            let raw: Vec<f64> = (0..8).map(|i| (p[i] as f64 - q[i] as f64).max(0.0)).collect();
            let z: f64 = raw.iter().sum();
            for i in 0..8 {
                assert!((r[i] as f64 - raw[i] / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn self_draft_accepts_everything() {
        let p = vec![0.1f32, 0.2, 0.3, 0.4];
        let nodes: Vec<DraftNode> = (0..3)
            .map(|i| DraftNode {
                parent: if i == 0 { None } else { Some(i - 1) },
                token: 2,
                q: 0.3,
                draft_prob: 0.3,
            })
            .collect();
        let tree = DraftTree::sampled(nodes, vec![Some(p.clone()), Some(p.clone()), Some(p.clone()), None]).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let out = verify_step(&tree, &p, &[p.clone(), p.clone(), p.clone()], &mut rng).unwrap();
            assert_eq!(out.accepted_path, vec![0, 1, 2]);
            assert_eq!(out.emitted_tokens.len(), 4);
        }
    }

    #[test]
    fn first_rejection_emits_one_token() {
        // target gives the drafted token zero mass
        let tree = chain(&[(0, 1.0), (1, 1.0)]);
        let mut rng = Rng::new(4);
        let out = verify_step(
            &tree,
            &[0.0, 0.5, 0.5],
            &[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]],
            &mut rng,
        )
        .unwrap();
        assert!(out.accepted_path.is_empty());
        assert_eq!(out.emitted_tokens.len(), 1);
        assert_ne!(out.emitted_tokens[0], 0);
    }

    /// Exact emitted-token distribution of a single sampled node, by
    /// summing over the drafted token and the acceptance event.
    #[test]
    fn single_node_is_exactly_lossless() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let v = 6;
            let p = kernels::softmax(&(0..v).map(|_| rng.uniform_f32(-2.0, 2.0)).collect::<Vec<_>>()).unwrap();
            let q = kernels::softmax(&(0..v).map(|_| rng.uniform_f32(-2.0, 2.0)).collect::<Vec<_>>()).unwrap();
            let res = residual_distribution(&p, &q);
            let mut out = vec![0.0f64; v];
            for x in 0..v {
                let a = (p[x] as f64 / q[x] as f64).min(1.0);
                out[x] += q[x] as f64 * a;
                for y in 0..v {
                    out[y] += q[x] as f64 * (1.0 - a) * res[y] as f64;
                }
            }
            for x in 0..v {
                assert!((out[x] - p[x] as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sibling_point_masses_are_lossless() {
        // two deterministic children: emitted distribution must equal p
        let p = vec![0.1f32, 0.4, 0.3, 0.2];
        let nodes = vec![
            DraftNode {
                parent: None,
                token: 1,
                q: 1.0,
                draft_prob: 0.5,
            },
            DraftNode {
                parent: None,
                token: 2,
                q: 1.0,
                draft_prob: 0.3,
            },
        ];
        let tree = DraftTree::deterministic(nodes).unwrap();
        let leaf = vec![vec![1.0, 0.0, 0.0, 0.0]; 2];
        let mut rng = Rng::new(6);
        let n = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let o = verify_step(&tree, &p, &leaf, &mut rng).unwrap();
            counts[o.emitted_tokens[0] as usize] += 1;
        }
        for i in 0..4 {
            assert!((counts[i] as f64 / n as f64 - p[i] as f64).abs() < 0.005);
        }
    }

    #[test]
    fn tree_shape_and_errors() {
        let mut d = PointMassDrafter {
            vocab: 8,
            token: 3,
            mass: 0.5,
        };
        let t = propose_tree(&mut d, &[0], &[2, 2], 64).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.children(None).len(), 2);
        assert_eq!(t.nodes()[0].token, 3);
        let c = propose_tree(&mut d, &[0], &[1, 1, 1], 64).unwrap();
        assert_eq!(c.max_depth(), 3);
        assert!(matches!(propose_tree(&mut d, &[0], &[9], 64), Err(Error::Input(_))));
        assert!(propose_tree(&mut d, &[0], &[4, 4, 4], 20).is_err());
        for p in [None, Some(0), Some(1)] {
            let kids = t.children(p);
            if kids.len() == 2 {
                assert_ne!(t.nodes()[kids[0]].token, t.nodes()[kids[1]].token);
            }
        }
    }

    #[test]
    fn malformed_tree_rejected() {
        let bad = vec![DraftNode {
            parent: Some(0),
            token: 1,
            q: 0.5,
            draft_prob: 0.5,
        }];
        assert!(matches!(DraftTree::deterministic(bad), Err(Error::Input(_))));
    }

    #[test]
    fn recorded_q_matches_draft_reevaluation() {
        let model = Arc::new(Model::seeded(ModelConfig::draft_default(32), 2).unwrap());
        let mut drafter = ModelDrafter::new(Arc::clone(&model), 1.0);
        let mut rng = Rng::new(7);
        let ctx = [1, 2, 3];
        let tree = propose_chain(&mut drafter, &ctx, 4, &mut rng).unwrap();
        for (i, n) in tree.nodes().iter().enumerate() {
            let mut fresh = ModelDrafter::new(Arc::clone(&model), 1.0);
            let mut c = ctx.to_vec();
            c.extend(tree.path_tokens(i));
            c.pop();
            let q = fresh.distribution(&c).unwrap();
            assert_eq!(q[n.token as usize], n.q);
        }
    }

    #[test]
    fn argmax_chains_are_reproducible() {
        let model = Arc::new(Model::seeded(ModelConfig::draft_default(32), 2).unwrap());
        let mut a = ModelDrafter::new(Arc::clone(&model), 0.0);
        let mut b = ModelDrafter::new(model, 0.0);
        let ta = propose_chain(&mut a, &[5], 3, &mut Rng::new(1)).unwrap();
        let tb = propose_chain(&mut b, &[5], 3, &mut Rng::new(2)).unwrap();
        assert_eq!(ta, tb);
        assert!(ta.nodes().iter().all(|n| n.q == 1.0));
    }

    #[test]
    fn stats_bounds() {
        let mut s = AcceptanceStats::default();
        assert_eq!(s.mean_acceptance_length(), 0.0);
        s.steps = 2;
        s.emitted = 5;
        assert_eq!(s.mean_acceptance_length(), 2.5);
    }

    proptest::proptest! {
        #[test]
        fn residual_is_a_distribution(raw in proptest::collection::vec((0.0f32..1.0, 0.0f32..1.0), 2..40)) {
            let norm = |v: Vec<f32>| {
                let s: f32 = v.iter().sum::<f32>() + 1e-3;
                v.into_iter().map(|x| (x + 1e-3 / 40.0) / s).collect::<Vec<f32>>()
            };
            let p = norm(raw.iter().map(|r| r.0).collect());
            let q = norm(raw.iter().map(|r| r.1).collect());
            let r = residual_distribution(&p, &q);
            let mass: f64 = p.iter().zip(&q).map(|(&a, &b)| (a as f64 - b as f64).max(0.0)).sum();
            let total: f64 = r.iter().map(|&x| x as f64).sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-5);
            for i in 0..p.len() {
                proptest::prop_assert!(r[i] >= 0.0);
                if mass >= RESIDUAL_EPS && p[i] <= q[i] {
                    proptest::prop_assert_eq!(r[i], 0.0);
                }
            }
        }
    }
}
