//! Experiment configuration, file formats and the analysis commands behind
//! the `specverify` binary.

mod commands;
pub mod io;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use commands::{
    bench, bench_csv, calibrate, default_variants, flops_csv, flops_table, generate, lossless, overlap, overlap_csv,
    overlap_from_traces, BenchRow, BenchVariant, CalibrateMode, CalibrationOutput, FlopsTableRow, GenerateOutput,
    LosslessReport, OverlapRow,
};

use crate::error::{Error, Result};
use crate::model::{AttentionPlan, Model, ModelConfig, MoeSkipPlan, SparsityPlan, TokenId};
use crate::retrieval_reuse::AnchorSet;
use crate::sparse_attention::{AttnSparsityConfig, QueryAggregation};
use crate::sparse_moe::{RatioNumerator, SkipRule, ThresholdMap};
use crate::specdec::{DecodeConfig, DraftMode};

/// Where a model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Ignored when `weights_file` is set, except that it must then agree
    /// with the file's embedded configuration.
    pub config: Option<ModelConfig>,
    pub weights_file: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            config: None,
            weights_file: None,
            seed: 1,
        }
    }
}

impl ModelSpec {
    pub fn load(&self, default: impl FnOnce() -> ModelConfig) -> Result<Model> {
        match &self.weights_file {
            Some(path) => {
                let model = io::load_weights(path)?;
                if let Some(c) = &self.config {
                    if c != model.config() {
                        return Err(Error::config(format!(
                            "config differs from the one embedded in {}",
                            path.display()
                        )));
                    }
                }
                Ok(model)
            }
            None => Model::seeded(self.config.clone().unwrap_or_else(default), self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DraftSpec {
    /// A separate draft model; its default configuration shares the
    /// target's vocabulary.
    Model {
        #[serde(default)]
        config: Option<ModelConfig>,
        #[serde(default)]
        weights_file: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
    },
    /// The target drafts for itself.
    SelfDraft,
    /// Fixed distribution with `mass` on `token`.
    PointMass { token: TokenId, mass: f32 },
}

impl Default for DraftSpec {
    fn default() -> Self {
        DraftSpec::Model {
            config: None,
            weights_file: None,
            seed: 2,
        }
    }
}

/// Flat sparsity settings as they appear in experiment files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsitySettings {
    /// Enables attention sparsity when set.
    pub base_length: Option<usize>,
    pub rho: f64,
    pub sink_blocks: usize,
    pub local_blocks: usize,
    pub aggregation: QueryAggregation,
    pub anchors_file: Option<PathBuf>,
    pub ffn_threshold: Option<f32>,
    pub threshold_map_file: Option<PathBuf>,
    /// Most experts skipped per token; 0 disables skipping.
    pub skip_budget: usize,
    pub skip_rule: SkipRule,
    pub ratio_numerator: RatioNumerator,
    pub renormalize: bool,
}

impl Default for SparsitySettings {
    fn default() -> Self {
        Self {
            base_length: None,
            rho: 0.5,
            sink_blocks: 1,
            local_blocks: 1,
            aggregation: QueryAggregation::Mean,
            anchors_file: None,
            ffn_threshold: None,
            threshold_map_file: None,
            skip_budget: 0,
            skip_rule: SkipRule::PerLevel,
            ratio_numerator: RatioNumerator::Smallest,
            renormalize: false,
        }
    }
}

impl SparsitySettings {
    pub fn strict() -> Self {
        Self::default()
    }

    pub fn attention_config(&self, block_size: usize) -> Option<AttnSparsityConfig> {
        self.base_length.map(|l0| AttnSparsityConfig {
            base_length: l0,
            rho: self.rho,
            sink_blocks: self.sink_blocks,
            local_blocks: self.local_blocks,
            block_size,
            aggregation: self.aggregation,
        })
    }

    /// Resolves files and builds the plan for `model`.
    pub fn plan(&self, model: &ModelConfig) -> Result<SparsityPlan> {
        let attention = match self.attention_config(model.block_size) {
            None => {
                if self.anchors_file.is_some() {
                    return Err(Error::config("anchors_file given without base_length"));
                }
                None
            }
            Some(config) => {
                let anchors = match &self.anchors_file {
                    Some(p) => Some(io::load_json::<AnchorSet>(p)?),
                    None => None,
                };
                Some(AttentionPlan { config, anchors })
            }
        };
        let moe_skip = if self.skip_budget > 0 {
            let path = self
                .threshold_map_file
                .as_ref()
                .ok_or_else(|| Error::config("skip_budget > 0 needs threshold_map_file"))?;
            let map: ThresholdMap = io::load_json(path)?;
            Some(MoeSkipPlan {
                map,
                budget: self.skip_budget,
                rule: self.skip_rule,
                numerator: self.ratio_numerator,
                renormalize: self.renormalize,
            })
        } else {
            None
        };
        let plan = SparsityPlan {
            attention,
            ffn_threshold: self.ffn_threshold,
            moe_skip,
        };
        plan.validate(model)?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: ModelSpec,
    pub draft: DraftSpec,
    pub mode: DraftMode,
    pub temperature: f32,
    pub sparsity: SparsitySettings,
    pub seed: u64,
    pub max_tokens: usize,
    pub prompt_file: Option<PathBuf>,
    /// Inline prompt, used when no prompt file is given.
    pub prompt: Vec<TokenId>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            target: ModelSpec::default(),
            draft: DraftSpec::default(),
            mode: DraftMode::Chain { k: 3 },
            temperature: 1.0,
            sparsity: SparsitySettings::default(),
            seed: 0,
            max_tokens: 32,
            prompt_file: None,
            prompt: vec![1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        io::load_json(path)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            mode: self.mode.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn load_prompt(&self) -> Result<Vec<TokenId>> {
        match &self.prompt_file {
            Some(p) => io::read_prompt(p),
            None if self.prompt.is_empty() => Err(Error::config("no prompt given")),
            None => Ok(self.prompt.clone()),
        }
    }

    pub fn load_target(&self) -> Result<Arc<Model>> {
        self.target.load(ModelConfig::default).map(Arc::new)
    }
}

/// One run's metrics, bound to its configuration by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub command: String,
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    pub alpha: f64,
    pub steps: usize,
    pub emitted: usize,
    pub tokens: Vec<TokenId>,
    pub flops: std::collections::BTreeMap<String, u64>,
    pub s_a: f64,
    pub s_f: f64,
    pub s_e: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Worker count from `SPECVERIFY_THREADS`, unset or 0 meaning the rayon
/// default.
pub fn thread_limit() -> Option<usize> {
    std::env::var("SPECVERIFY_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs `f` on a pool capped by `SPECVERIFY_THREADS`.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_limit() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}
