//! Experiment configuration, training recipes, and the evaluation and
//! latency-sweep tables.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{latency_of, ContextSpec, ConvRightMode};
use crate::corpus::{CorpusConfig, Utterance};
use crate::decode::{
    greedy_decode_offline, greedy_decode_streaming_with, levenshtein, StreamingOptions,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Real;
use crate::train::{Strategy, TrainConfig};

/// Named training setups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Single-mode, always offline.
    OfflineBaseline,
    /// Single-mode, always streaming.
    StreamingBaseline,
    /// Single-mode with the configured `p_off`.
    SingleMode,
    /// Dual-mode without regularization.
    DualMode,
    /// Dual-mode with the configured regularization.
    DmMcr,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [
        Recipe::OfflineBaseline,
        Recipe::StreamingBaseline,
        Recipe::SingleMode,
        Recipe::DualMode,
        Recipe::DmMcr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::OfflineBaseline => "offline_baseline",
            Recipe::StreamingBaseline => "streaming_baseline",
            Recipe::SingleMode => "single_mode",
            Recipe::DualMode => "dual_mode",
            Recipe::DmMcr => "dm_mcr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown recipe {s:?}")))
    }

    /// Overrides strategy, mode weights and λ in `cfg`.
    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Recipe::OfflineBaseline => {
                cfg.strategy = Strategy::SingleMode;
                cfg.mode_weights.p_off = 1.0;
            }
            // No right context, and the convolution stops at the chunk end.
            Recipe::StreamingBaseline => {
                cfg.strategy = Strategy::SingleMode;
                cfg.mode_weights.p_off = 0.0;
                cfg.context_sets.right_set = vec![0];
                cfg.conv_right_mode = ConvRightMode::Zero;
            }
            Recipe::SingleMode => cfg.strategy = Strategy::SingleMode,
            Recipe::DualMode => {
                cfg.strategy = Strategy::DualMode;
                cfg.mcr.lambda = 0.0;
            }
            Recipe::DmMcr => cfg.strategy = Strategy::DualMode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Duration of one encoder frame.
    pub frame_ms: f64,
    /// Left context used at decode time.
    pub left: usize,
    /// `(chunk, right)` pairs in encoder frames.
    pub specs: Vec<[usize; 2]>,
    /// Latency budgets (encoder frames) for the sweep.
    pub budgets: Vec<usize>,
    pub conv_right_mode: ConvRightMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frame_ms: 80.0,
            left: 70,
            specs: vec![[13, 13], [7, 7], [2, 5], [1, 4], [1, 3], [1, 2], [1, 1], [1, 0]],
            budgets: vec![2, 4, 6],
            conv_right_mode: ConvRightMode::Real,
        }
    }
}

impl EvalConfig {
    pub fn context_specs(&self) -> Result<Vec<ContextSpec>> {
        self.specs
            .iter()
            .map(|&[c, r]| ContextSpec::new(self.left, c, r))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: Option<Recipe>,
    pub train_utterances: usize,
    pub eval_utterances: usize,
    /// Eval corpus seed is `corpus.seed + eval_seed_offset`.
    pub eval_seed_offset: u64,
    pub checkpoint_every: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            recipe: None,
            train_utterances: 2000,
            eval_utterances: 300,
            eval_seed_offset: 1_000_000,
            checkpoint_every: 500,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.context_specs()?;
        if self.eval.budgets.contains(&0) {
            return Err(Error::Config("latency budgets must be >= 1 frame".into()));
        }
        if self.model.feat_dim != self.corpus.feat_dim {
            return Err(Error::Config(format!(
                "model.feat_dim {} != corpus.feat_dim {}",
                self.model.feat_dim, self.corpus.feat_dim
            )));
        }
        if self.model.vocab_size < self.corpus.n_symbols + 1 {
            return Err(Error::Config(format!(
                "model.vocab_size {} must be at least corpus.n_symbols + 1 = {}",
                self.model.vocab_size,
                self.corpus.n_symbols + 1
            )));
        }
        Ok(())
    }

    /// Training config with the recipe applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(r) = self.recipe {
            r.apply(&mut t);
        }
        t
    }

    pub fn eval_corpus(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.corpus.seed + self.eval_seed_offset,
            ..self.corpus.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    /// `offline` or `streaming`.
    pub mode: String,
    pub spec: Option<ContextSpec>,
    pub chunk_s: f64,
    pub right_s: f64,
    pub latency_s: f64,
    pub ter: f64,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "mode,chunk_s,right_s,latency_s,ter";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6}",
            self.mode, self.chunk_s, self.right_s, self.latency_s, self.ter
        )
    }
}

/// Corpus-level TER: total edits over total reference tokens.
fn corpus_ter(pairs: &[(usize, usize)]) -> f64 {
    let edits: usize = pairs.iter().map(|p| p.0).sum();
    let refs: usize = pairs.iter().map(|p| p.1).sum();
    edits as f64 / refs.max(1) as f64
}

/// TER of offline decoding.
pub fn offline_ter<T: Real>(model: &Model<T>, utts: &[Utterance], frame_ms: f64) -> Result<f64> {
    let pairs = utts
        .par_iter()
        .map(|u| {
            let d = greedy_decode_offline(model, &u.features.cast(), frame_ms)?;
            Ok((levenshtein(&d.tokens, &u.tokens), u.tokens.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(corpus_ter(&pairs))
}

/// TER of chunked streaming decoding under `spec`.
pub fn streaming_ter<T: Real>(
    model: &Model<T>,
    utts: &[Utterance],
    spec: &ContextSpec,
    frame_ms: f64,
    conv_right_mode: ConvRightMode,
) -> Result<f64> {
    let opts = StreamingOptions {
        conv_right_mode,
        ..StreamingOptions::default()
    };
    let pairs = utts
        .par_iter()
        .map(|u| {
            let d = greedy_decode_streaming_with(model, &u.features.cast(), spec, frame_ms, &opts)?;
            Ok((levenshtein(&d.tokens, &u.tokens), u.tokens.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(corpus_ter(&pairs))
}

/// One offline row followed by one row per spec, by latency descending
/// (ties keep the configured order).
pub fn evaluate<T: Real>(model: &Model<T>, utts: &[Utterance], cfg: &EvalConfig) -> Result<Vec<EvalRow>> {
    let mut specs = cfg.context_specs()?;
    specs.sort_by(|a, b| {
        latency_of(b, cfg.frame_ms).total_cmp(&latency_of(a, cfg.frame_ms))
    });
    let mut rows = vec![EvalRow {
        mode: "offline".into(),
        spec: None,
        chunk_s: f64::INFINITY,
        right_s: f64::INFINITY,
        latency_s: f64::INFINITY,
        ter: offline_ter(model, utts, cfg.frame_ms)?,
    }];
    for spec in specs {
        rows.push(EvalRow {
            mode: "streaming".into(),
            spec: Some(spec),
            chunk_s: spec.chunk as f64 * cfg.frame_ms / 1000.0,
            right_s: spec.right as f64 * cfg.frame_ms / 1000.0,
            latency_s: latency_of(&spec, cfg.frame_ms),
            ter: streaming_ter(model, utts, &spec, cfg.frame_ms, cfg.conv_right_mode)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub budget_frames: usize,
    pub budget_s: f64,
    pub chunk: usize,
    pub right: usize,
    pub chunk_s: f64,
    pub right_s: f64,
    pub ter: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "budget_s,chunk_s,right_s,ter";

    pub fn csv(&self) -> String {
        format!("{},{},{},{:.6}", self.budget_s, self.chunk_s, self.right_s, self.ter)
    }
}

/// Every split `C + R = budget` with `C >= 1`, for each budget.
pub fn sweep_latency<T: Real>(
    model: &Model<T>,
    utts: &[Utterance],
    budgets: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &b in budgets {
        if b == 0 {
            return Err(Error::Config("latency budget must be >= 1 frame".into()));
        }
        for c in 1..=b {
            let spec = ContextSpec::new(cfg.left, c, b - c)?;
            let s = |n: usize| n as f64 * cfg.frame_ms / 1000.0;
            rows.push(SweepRow {
                budget_frames: b,
                budget_s: s(b),
                chunk: c,
                right: b - c,
                chunk_s: s(c),
                right_s: s(b - c),
                ter: streaming_ter(model, utts, &spec, cfg.frame_ms, cfg.conv_right_mode)?,
            });
        }
    }
    Ok(rows)
}

/// Split with the lowest TER in one budget group; ties go to the larger
/// chunk.
pub fn best_split(rows: &[SweepRow], budget: usize) -> Option<&SweepRow> {
    rows.iter()
        .filter(|r| r.budget_frames == budget)
        .min_by(|a, b| a.ter.total_cmp(&b.ter).then(b.chunk.cmp(&a.chunk)))
}
