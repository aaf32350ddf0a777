//! Dataset preparation, training loops for the three regimes, evaluation
//! reports, and the adapter that deploys a replacement classifier inside the
//! simulator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cachesim::{
    lru_choose_victim, simulate, useful_prefetch_ratio, AccessContext, CacheConfig,
    CacheLineState, Lru, MissType, ReplacementPolicy, SimError, SimOptions, StridePrefetcher,
};
use crate::features::{
    build_vocab, demand_events, encode_context, extract_replacement_samples, make_pairs,
    prefetch_view, FeatureError, PairConfig, PairSample, PrefetchSample, ReplacementSample,
    Vocab, VocabField, Vocabs, OOV_ID, PAD_ID,
};
use crate::models::{
    ContrastiveModel, JointModel, LossParts, LossWeights, ModelDims, ModelError, ModelKind,
    PrefetchModel, PretrainGroup, ReplacementModel, PF_ENC, REPL_ENC,
};
use crate::nnkit::{
    adam_step, cosine, load_checkpoint, save_checkpoint, AdamConfig, ContrastiveConfig, Meta,
    NnError, ParamStore, Precision,
};
use crate::oracle::{belady_simulate, BeladyResult, LabeledInsertion};
use crate::trace::{page_and_offset, BlockGeometry, Trace, TraceError};

pub const TRAIN_PERCENT: usize = 60;
pub const VAL_PERCENT: usize = 20;
pub const MIN_SPLIT_SAMPLES: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot split {0} samples: at least {MIN_SPLIT_SAMPLES} are required")]
    DegenerateSplit(usize),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<std::num::ParseIntError> for PipelineError {
    fn from(e: std::num::ParseIntError) -> Self {
        Self::Config(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Every tunable of a run, rendered as a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub history: usize,
    pub window: usize,
    pub negatives: usize,
    pub temperature: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub lstm_layers: usize,
    pub shared_dim: usize,
    pub proj_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub pretrain_epochs: usize,
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub pos_weight: f64,
    pub finetune: bool,
    pub num_sets: usize,
    pub associativity: usize,
    pub block_size: u64,
    pub page_size: u64,
    pub log_prefetch_degree: usize,
    pub vocab_min_count: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            history: 16,
            window: 32,
            negatives: 4,
            temperature: 0.1,
            embed_dim: 32,
            hidden_dim: 64,
            lstm_layers: 2,
            shared_dim: 64,
            proj_dim: 32,
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            pretrain_epochs: 30,
            lambda_r: 1.0,
            lambda_p: 1.0,
            pos_weight: 1.0,
            finetune: false,
            num_sets: 64,
            associativity: 8,
            block_size: 64,
            page_size: 4096,
            log_prefetch_degree: 1,
            vocab_min_count: 10,
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.parse()
        .map_err(|_| PipelineError::Config(format!("invalid value `{v}` for `{key}`")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 26] = [
        "history", "window", "negatives", "temperature", "embed_dim", "hidden_dim",
        "lstm_layers", "shared_dim", "proj_dim", "lr", "batch_size", "max_epochs", "patience",
        "pretrain_epochs", "lambda_r", "lambda_p", "pos_weight", "finetune", "num_sets",
        "associativity", "block_size", "page_size", "log_prefetch_degree", "vocab_min_count",
        "seed", "seeds",
    ];

    /// Parses a config file: one `key = value` per line, `#` starts a comment.
    /// Keys absent from the file keep their defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| PipelineError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), PipelineError> {
        match key {
            "history" => self.history = parse_num(key, v)?,
            "window" => self.window = parse_num(key, v)?,
            "negatives" => self.negatives = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, v)?,
            "lstm_layers" => self.lstm_layers = parse_num(key, v)?,
            "shared_dim" => self.shared_dim = parse_num(key, v)?,
            "proj_dim" => self.proj_dim = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(key, v)?,
            "lambda_r" => self.lambda_r = parse_num(key, v)?,
            "lambda_p" => self.lambda_p = parse_num(key, v)?,
            "pos_weight" => self.pos_weight = parse_num(key, v)?,
            "finetune" => self.finetune = parse_num(key, v)?,
            "num_sets" => self.num_sets = parse_num(key, v)?,
            "associativity" => self.associativity = parse_num(key, v)?,
            "block_size" => self.block_size = parse_num(key, v)?,
            "page_size" => self.page_size = parse_num(key, v)?,
            "log_prefetch_degree" => self.log_prefetch_degree = parse_num(key, v)?,
            "vocab_min_count" => self.vocab_min_count = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            _ => return Err(PipelineError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "history" => self.history.to_string(),
            "window" => self.window.to_string(),
            "negatives" => self.negatives.to_string(),
            "temperature" => self.temperature.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "lstm_layers" => self.lstm_layers.to_string(),
            "shared_dim" => self.shared_dim.to_string(),
            "proj_dim" => self.proj_dim.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "lambda_r" => self.lambda_r.to_string(),
            "lambda_p" => self.lambda_p.to_string(),
            "pos_weight" => self.pos_weight.to_string(),
            "finetune" => self.finetune.to_string(),
            "num_sets" => self.num_sets.to_string(),
            "associativity" => self.associativity.to_string(),
            "block_size" => self.block_size.to_string(),
            "page_size" => self.page_size.to_string(),
            "log_prefetch_degree" => self.log_prefetch_degree.to_string(),
            "vocab_min_count" => self.vocab_min_count.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key in a fixed order; parsing the result gives back `self`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.value_of(k));
        }
        out
    }

    /// SHA-256 of the rendered config, hex.
    pub fn digest(&self) -> String {
        sha256_hex(self.render().as_bytes())
    }

    pub fn geometry(&self) -> Result<BlockGeometry, PipelineError> {
        Ok(BlockGeometry::new(self.block_size, self.page_size)?)
    }

    pub fn cache_config(&self) -> Result<CacheConfig, PipelineError> {
        Ok(CacheConfig::new(
            self.num_sets,
            self.associativity,
            self.geometry()?,
            self.log_prefetch_degree,
        )?)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("history", self.history),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("lstm_layers", self.lstm_layers),
            ("shared_dim", self.shared_dim),
            ("proj_dim", self.proj_dim),
            ("batch_size", self.batch_size),
            ("negatives", self.negatives),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(PipelineError::Config(format!("`{k}` must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return Err(PipelineError::Config("`lr` and `temperature` must be positive".into()));
        }
        Ok(())
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights {
            repl: self.lambda_r,
            pf: self.lambda_p,
            pos_weight: self.pos_weight,
        }
    }

    fn dims(&self, vocabs: &Vocabs, geometry: &BlockGeometry) -> ModelDims {
        ModelDims {
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            lstm_layers: self.lstm_layers,
            shared: self.shared_dim,
            proj: self.proj_dim,
            pc_vocab: vocabs.pc.size(),
            page_vocab: vocabs.page.size(),
            blocks_per_page: geometry.blocks_per_page() as usize,
        }
    }
}

/// Hex SHA-256 of arbitrary bytes, used to tie derived files to their inputs.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Splitting and datasets

/// `(train, val, test)` sizes: floor(60%), floor(20%), remainder.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize), PipelineError> {
    if n < MIN_SPLIT_SAMPLES {
        return Err(PipelineError::DegenerateSplit(n));
    }
    let train = n * TRAIN_PERCENT / 100;
    let val = n * VAL_PERCENT / 100;
    Ok((train, val, n - train - val))
}

/// Contiguous chronological split of samples already in event order.
pub fn split_dataset<T>(samples: &[T]) -> Result<(&[T], &[T], &[T]), PipelineError> {
    let (train, val, _) = split_sizes(samples.len())?;
    let (a, rest) = samples.split_at(train);
    let (b, c) = rest.split_at(val);
    Ok((a, b, c))
}

/// Samples of one chronological region. `aligned[i]` is the prefetch view at
/// `repl[i].position`; `pf` holds a view for every demand position in the
/// region that has a successor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitData {
    pub repl: Vec<ReplacementSample>,
    pub aligned: Vec<PrefetchSample>,
    pub pf: Vec<PrefetchSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub cache: CacheConfig,
    pub history: usize,
    pub vocabs: Vocabs,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
    pub train_pairs: Vec<PairSample>,
    /// Pairs drawn entirely from the test region.
    pub heldout_pairs: Vec<PairSample>,
    /// Fraction of test-region pc and page tokens mapped to OOV.
    pub oov_rate: f64,
    /// Useful-prefetch ratio of the stride prefetcher in the logging run.
    pub useful_prefetch_ratio: f64,
}

/// Belady labels under the configured cache.
pub fn label_trace(trace: &Trace, cfg: &RunConfig) -> Result<BeladyResult, PipelineError> {
    Ok(belady_simulate(trace, &cfg.cache_config()?))
}

/// Logs the trace through an LRU cache with a stride prefetcher, builds
/// vocabularies on the training region only and extracts every split's
/// samples and contrastive pairs. `labels` must come from the same trace.
pub fn prepare_dataset(
    name: &str,
    trace: &Trace,
    labels: &[LabeledInsertion],
    cfg: &RunConfig,
) -> Result<Dataset, PipelineError> {
    prepare_dataset_with_vocabs(name, trace, labels, cfg, None)
}

/// As [`prepare_dataset`], but featurizes with `vocabs` (e.g. a
/// checkpoint's) when given instead of building them from the trace.
pub fn prepare_dataset_with_vocabs(
    name: &str,
    trace: &Trace,
    labels: &[LabeledInsertion],
    cfg: &RunConfig,
    vocabs: Option<Vocabs>,
) -> Result<Dataset, PipelineError> {
    cfg.validate()?;
    let cache = cfg.cache_config()?;
    let geometry = cache.geometry;
    let mut labels = labels.to_vec();
    labels.sort_by_key(|l| l.trace_position);
    let (n_train, n_val, _) = split_sizes(labels.len())?;
    let val_start = labels[n_train].trace_position;
    let test_start = labels[n_train + n_val].trace_position;

    let mut prefetcher = StridePrefetcher::new(cfg.log_prefetch_degree);
    let sim = simulate(trace, &cache, &mut Lru, Some(&mut prefetcher), &SimOptions::default())?;
    let train_events: Vec<_> = sim
        .events
        .iter()
        .filter(|e| e.position < val_start)
        .cloned()
        .collect();
    let vocabs = match vocabs {
        Some(v) => v,
        None => Vocabs {
            pc: build_vocab(&train_events, VocabField::Pc, &geometry, cfg.vocab_min_count)?,
            page: build_vocab(&train_events, VocabField::Page, &geometry, cfg.vocab_min_count)?,
        },
    };

    let repl = extract_replacement_samples(&sim.events, &labels, &vocabs, cache.num_sets, cfg.history)?;
    let demand = demand_events(&sim.events);
    let region = |lo: usize, hi: usize| -> SplitData {
        let repl: Vec<ReplacementSample> = repl
            .iter()
            .filter(|s| s.position >= lo && s.position < hi)
            .cloned()
            .collect();
        let view = |p: usize| prefetch_view(&demand, p, &vocabs, &geometry, cfg.history);
        SplitData {
            aligned: repl.iter().map(|s| view(s.position)).collect(),
            pf: (lo..hi.min(demand.len().saturating_sub(1))).map(view).collect(),
            repl,
        }
    };
    let train = region(0, val_start);
    let val = region(val_start, test_start);
    let test = region(test_start, usize::MAX);

    let pair_cfg = PairConfig {
        window: cfg.window,
        negatives_per_positive: cfg.negatives,
        same_block: false,
    };
    let train_pairs = make_pairs(&train.repl, &train.pf, &pair_cfg, cfg.seed);
    let heldout_pairs = make_pairs(&test.repl, &test.pf, &pair_cfg, cfg.seed ^ 0x5eed);

    let test_events: Vec<_> = demand.iter().filter(|e| e.position >= test_start).collect();
    let oov = test_events
        .iter()
        .map(|e| {
            usize::from(vocabs.pc.lookup(e.pc) == OOV_ID)
                + usize::from(vocabs.page.lookup(page_and_offset(e.block, &geometry).0) == OOV_ID)
        })
        .sum::<usize>();
    let oov_rate = if test_events.is_empty() {
        0.0
    } else {
        oov as f64 / (2 * test_events.len()) as f64
    };

    Ok(Dataset {
        name: name.to_string(),
        cache,
        history: cfg.history,
        vocabs,
        train,
        val,
        test,
        train_pairs,
        heldout_pairs,
        oov_rate,
        useful_prefetch_ratio: useful_prefetch_ratio(&sim),
    })
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Baseline,
    Joint,
    Contrastive,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Joint, Mode::Contrastive];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Joint => "joint",
            Mode::Contrastive => "contrastive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Per-epoch record. Losses are means over the epoch's training items,
/// computed before each optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub repl_loss: f64,
    pub pf_loss: f64,
    pub total_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,repl_loss,pf_loss,total_loss,val_accuracy,val_loss";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for m in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch, m.repl_loss, m.pf_loss, m.total_loss, m.val_accuracy, m.val_loss
        );
    }
    out
}

pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{e},{l}");
    }
    out
}

/// A trained model together with its parameters. Baseline checkpoints hold
/// either half, so both are optional.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Baseline {
        repl: Option<(ReplacementModel, ParamStore)>,
        pf: Option<(PrefetchModel, ParamStore)>,
    },
    Joint {
        model: JointModel,
        store: ParamStore,
    },
    Contrastive {
        model: ContrastiveModel,
        store: ParamStore,
    },
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl TrainedModel {
    pub fn mode(&self) -> Mode {
        match self {
            TrainedModel::Baseline { .. } => Mode::Baseline,
            TrainedModel::Joint { .. } => Mode::Joint,
            TrainedModel::Contrastive { .. } => Mode::Contrastive,
        }
    }

    pub fn has_replacement_head(&self) -> bool {
        !matches!(self, TrainedModel::Baseline { repl: None, .. })
    }

    /// Probability that the insertion described by the aligned views is
    /// cache-friendly.
    pub fn predict_friendly(&self, rs: &ReplacementSample, ps: &PrefetchSample) -> Result<f64, PipelineError> {
        Ok(match self {
            TrainedModel::Baseline { repl: Some((m, s)), .. } => m.forward(s, rs)?,
            TrainedModel::Baseline { repl: None, .. } => {
                return Err(PipelineError::Config("model has no replacement head".into()))
            }
            TrainedModel::Joint { model, store } => model.forward(store, rs, ps)?.0,
            TrainedModel::Contrastive { model, store } => model.forward(store, rs, ps)?.0,
        })
    }

    /// Top-1 `(page id, offset)`, or `None` without a prefetch head.
    pub fn predict_prefetch(
        &self,
        rs: &ReplacementSample,
        ps: &PrefetchSample,
    ) -> Result<Option<(usize, usize)>, PipelineError> {
        let (page, off) = match self {
            TrainedModel::Baseline { pf: Some((m, s)), .. } => m.forward(s, ps)?,
            TrainedModel::Baseline { pf: None, .. } => return Ok(None),
            TrainedModel::Joint { model, store } => {
                let (_, p, o) = model.forward(store, rs, ps)?;
                (p, o)
            }
            TrainedModel::Contrastive { model, store } => {
                let (_, p, o) = model.forward(store, rs, ps)?;
                (p, o)
            }
        };
        Ok(Some((argmax(&page), argmax(&off))))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// Replacement-side (or joint) history.
    pub history: Vec<EpochMetrics>,
    /// Baseline prefetch model history; empty for the other modes.
    pub pf_history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Contrastive stage-1 loss: entry 0 at initialization, then one per epoch.
    pub pretrain_curve: Vec<f64>,
    /// Held-out mean cosine of positives minus negatives after stage 1.
    pub cosine_gap: Option<f64>,
}

fn epoch_order(n: usize, seed: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(epoch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

const STREAM_REPL: u64 = 1;
const STREAM_PF: u64 = 2;
const STREAM_PRETRAIN: u64 = 3;

/// One pass over `n_items` in an order fixed by `(seed, stream, epoch)`,
/// one Adam step per minibatch on the batch-mean gradient. Returns the mean
/// per-item loss. Resuming from a checkpoint at an epoch boundary reproduces
/// an uninterrupted run exactly.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    store: &mut ParamStore,
    n_items: usize,
    batch_size: usize,
    seed: u64,
    stream: u64,
    epoch: usize,
    adam: &AdamConfig,
    item: &mut dyn FnMut(&mut ParamStore, usize) -> Result<LossParts, PipelineError>,
) -> Result<LossParts, PipelineError> {
    let mut sum = LossParts::default();
    for chunk in epoch_order(n_items, seed, stream, epoch).chunks(batch_size.max(1)) {
        store.zero_grads();
        for &i in chunk {
            sum.add(&item(store, i)?);
        }
        store.scale_grads(1.0 / chunk.len() as f64);
        adam_step(store, adam);
    }
    if n_items > 0 {
        sum.scale(1.0 / n_items as f64);
    }
    Ok(sum)
}

type ItemFn<'a> = dyn FnMut(&mut ParamStore, usize) -> Result<LossParts, PipelineError> + 'a;
type ValidateFn<'a> = dyn FnMut(&mut ParamStore) -> Result<(f64, f64), PipelineError> + 'a;

/// Trains until validation accuracy has not improved for `patience` epochs
/// (equal accuracy with lower validation loss counts as improvement), then
/// restores the best epoch's parameters.
fn fit(
    store: &mut ParamStore,
    n_items: usize,
    cfg: &RunConfig,
    seed: u64,
    stream: u64,
    item: &mut ItemFn<'_>,
    validate: &mut ValidateFn<'_>,
) -> Result<(Vec<EpochMetrics>, usize), PipelineError> {
    if n_items == 0 {
        return Err(PipelineError::EmptySplit("train"));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, Vec<crate::nnkit::Mat>)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let parts = run_epoch(store, n_items, cfg.batch_size, seed, stream, epoch, &adam, item)?;
        let (acc, vloss) = validate(store)?;
        history.push(EpochMetrics {
            epoch,
            repl_loss: parts.repl,
            pf_loss: parts.page + parts.offset,
            total_loss: parts.total,
            val_accuracy: acc,
            val_loss: vloss,
        });
        let improved = match &best {
            None => true,
            Some((ba, bl, ..)) => acc > *ba || (acc == *ba && vloss < *bl),
        };
        if improved {
            best = Some((acc, vloss, epoch, store.snapshot()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, _, e, snap)) => {
            store.restore(&snap);
            e
        }
        None => 0,
    };
    Ok((history, best_epoch))
}

fn replacement_accuracy(
    data: &SplitData,
    predict: &mut dyn FnMut(usize) -> Result<f64, PipelineError>,
) -> Result<f64, PipelineError> {
    if data.repl.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (i, s) in data.repl.iter().enumerate() {
        if (predict(i)? >= 0.5) == s.is_friendly() {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.repl.len() as f64)
}

fn new_store() -> ParamStore {
    ParamStore::new(Precision::F32)
}

fn train_baseline(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<TrainOutcome, PipelineError> {
    let dims = cfg.dims(&ds.vocabs, &ds.cache.geometry);
    let w = cfg.loss_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut rstore = new_store();
    let repl = ReplacementModel::new(&mut rstore, &dims, &mut rng)?;
    let (history, best_epoch) = fit(
        &mut rstore,
        ds.train.repl.len(),
        cfg,
        seed,
        STREAM_REPL,
        &mut |s, i| Ok(repl.loss_grad(s, &ds.train.repl[i], &w, true)?),
        &mut |s| {
            let mut loss = 0.0;
            let acc = replacement_accuracy(&ds.val, &mut |i| {
                loss += repl.loss_grad(s, &ds.val.repl[i], &w, false)?.repl;
                Ok(repl.forward(s, &ds.val.repl[i])?)
            })?;
            Ok((acc, loss / ds.val.repl.len().max(1) as f64))
        },
    )?;

    let mut pstore = new_store();
    let pf = PrefetchModel::new(&mut pstore, &dims, &mut rng)?;
    let pf_train: Vec<&PrefetchSample> = ds.train.pf.iter().filter(|p| p.target.is_some()).collect();
    let pf_val: Vec<&PrefetchSample> = ds.val.pf.iter().filter(|p| p.target.is_some()).collect();
    let (pf_history, _) = if pf_train.is_empty() {
        (Vec::new(), 0)
    } else {
        fit(
            &mut pstore,
            pf_train.len(),
            cfg,
            seed,
            STREAM_PF,
            &mut |s, i| Ok(pf.loss_grad(s, pf_train[i], &w, true)?),
            &mut |s| {
                let (mut hits, mut loss) = (0usize, 0.0);
                for p in &pf_val {
                    let t = p.target.expect("filtered");
                    let (page, off) = pf.forward(s, p)?;
                    hits += usize::from(argmax(&page) == t.page as usize)
                        + usize::from(argmax(&off) == t.offset as usize);
                    let parts = pf.loss_grad(s, p, &w, false)?;
                    loss += parts.page + parts.offset;
                }
                let n = pf_val.len().max(1) as f64;
                Ok((hits as f64 / (2.0 * n), loss / n))
            },
        )?
    };

    Ok(TrainOutcome {
        model: TrainedModel::Baseline {
            repl: Some((repl, rstore)),
            pf: Some((pf, pstore)),
        },
        history,
        pf_history,
        best_epoch,
        pretrain_curve: Vec::new(),
        cosine_gap: None,
    })
}

fn train_joint(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<TrainOutcome, PipelineError> {
    let dims = cfg.dims(&ds.vocabs, &ds.cache.geometry);
    let w = cfg.loss_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = new_store();
    let model = JointModel::new(&mut store, &dims, &mut rng)?;
    let (history, best_epoch) = fit(
        &mut store,
        ds.train.repl.len(),
        cfg,
        seed,
        STREAM_REPL,
        &mut |s, i| Ok(model.loss_grad(s, &ds.train.repl[i], &ds.train.aligned[i], &w, true)?),
        &mut |s| {
            let mut loss = 0.0;
            let acc = replacement_accuracy(&ds.val, &mut |i| {
                let (r, p) = (&ds.val.repl[i], &ds.val.aligned[i]);
                loss += model.loss_grad(s, r, p, &w, false)?.repl;
                Ok(model.forward(s, r, p)?.0)
            })?;
            Ok((acc, loss / ds.val.repl.len().max(1) as f64))
        },
    )?;
    Ok(TrainOutcome {
        model: TrainedModel::Joint { model, store },
        history,
        pf_history: Vec::new(),
        best_epoch,
        pretrain_curve: Vec::new(),
        cosine_gap: None,
    })
}

/// Converts pairs into pretraining groups indexed into `data.repl` and `data.pf`.
pub fn pretrain_groups(pairs: &[PairSample], data: &SplitData) -> Vec<PretrainGroup> {
    let r_idx: HashMap<usize, usize> = data.repl.iter().enumerate().map(|(i, s)| (s.position, i)).collect();
    let p_idx: HashMap<usize, usize> = data.pf.iter().enumerate().map(|(i, s)| (s.position, i)).collect();
    let mut groups: BTreeMap<usize, PretrainGroup> = BTreeMap::new();
    for p in pairs {
        let (Some(&r), Some(&q)) = (r_idx.get(&p.repl_ref), p_idx.get(&p.pf_ref)) else {
            continue;
        };
        if p.is_positive {
            groups.insert(
                p.group,
                PretrainGroup {
                    repl: r,
                    positive: q,
                    negatives: Vec::new(),
                },
            );
        } else if let Some(g) = groups.get_mut(&p.group) {
            g.negatives.push(q);
        }
    }
    groups.into_values().filter(|g| !g.negatives.is_empty()).collect()
}

/// Mean cosine similarity of positive projections minus that of negatives.
pub fn cosine_gap(
    model: &ContrastiveModel,
    store: &ParamStore,
    pairs: &[PairSample],
    data: &SplitData,
) -> Result<Option<f64>, PipelineError> {
    let r_idx: HashMap<usize, &ReplacementSample> = data.repl.iter().map(|s| (s.position, s)).collect();
    let p_idx: HashMap<usize, &PrefetchSample> = data.pf.iter().map(|s| (s.position, s)).collect();
    let mut r_cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut p_cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for p in pairs {
        let (Some(r), Some(q)) = (r_idx.get(&p.repl_ref), p_idx.get(&p.pf_ref)) else {
            continue;
        };
        if !r_cache.contains_key(&p.repl_ref) {
            r_cache.insert(p.repl_ref, model.project_repl(store, r)?);
        }
        if !p_cache.contains_key(&p.pf_ref) {
            p_cache.insert(p.pf_ref, model.project_pf(store, q)?);
        }
        let c = cosine(&r_cache[&p.repl_ref], &p_cache[&p.pf_ref]);
        if p.is_positive {
            pos.push(c);
        } else {
            neg.push(c);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Some(mean(&pos) - mean(&neg)))
}

/// Stage 1 only: trains encoders and projections on the training pairs and
/// returns the loss curve (entry 0 before any update).
pub fn contrastive_pretrain(
    model: &ContrastiveModel,
    store: &mut ParamStore,
    ds: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<f64>, PipelineError> {
    let groups = pretrain_groups(&ds.train_pairs, &ds.train);
    if groups.is_empty() {
        return Err(ModelError::Config("no positive pairs in the training split".into()).into());
    }
    let ccfg = ContrastiveConfig {
        temperature: cfg.temperature,
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let (rs, ps) = (&ds.train.repl, &ds.train.pf);
    let mut curve = vec![model.pretrain_loss(store, &groups, rs, ps, &ccfg, false)?];
    for epoch in 1..=cfg.pretrain_epochs {
        for chunk in epoch_order(groups.len(), seed, STREAM_PRETRAIN, epoch).chunks(cfg.batch_size) {
            let batch: Vec<PretrainGroup> = chunk.iter().map(|&i| groups[i].clone()).collect();
            store.zero_grads();
            model.pretrain_loss(store, &batch, rs, ps, &ccfg, true)?;
            adam_step(store, &adam);
        }
        curve.push(model.pretrain_loss(store, &groups, rs, ps, &ccfg, false)?);
    }
    Ok(curve)
}

fn train_contrastive(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<TrainOutcome, PipelineError> {
    let dims = cfg.dims(&ds.vocabs, &ds.cache.geometry);
    let w = cfg.loss_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = new_store();
    let mut model = ContrastiveModel::new(&mut store, &dims, &mut rng)?;
    let pretrain_curve = contrastive_pretrain(&model, &mut store, ds, cfg, seed)?;
    let gap = cosine_gap(&model, &store, &ds.heldout_pairs, &ds.test)?;

    let enc_scale = if cfg.finetune { 0.1 } else { 0.0 };
    store.set_lr_scale(REPL_ENC, enc_scale);
    store.set_lr_scale(PF_ENC, enc_scale);
    model.encoders_frozen = !cfg.finetune;

    let (history, best_epoch) = fit(
        &mut store,
        ds.train.repl.len(),
        cfg,
        seed,
        STREAM_REPL,
        &mut |s, i| Ok(model.stage2_loss_grad(s, &ds.train.repl[i], &ds.train.aligned[i], &w, true)?),
        &mut |s| {
            let mut loss = 0.0;
            let acc = replacement_accuracy(&ds.val, &mut |i| {
                let (r, p) = (&ds.val.repl[i], &ds.val.aligned[i]);
                loss += model.stage2_loss_grad(s, r, p, &w, false)?.repl;
                Ok(model.forward(s, r, p)?.0)
            })?;
            Ok((acc, loss / ds.val.repl.len().max(1) as f64))
        },
    )?;
    Ok(TrainOutcome {
        model: TrainedModel::Contrastive { model, store },
        history,
        pf_history: Vec::new(),
        best_epoch,
        pretrain_curve,
        cosine_gap: gap,
    })
}

pub fn train_model(mode: Mode, ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    if ds.train.repl.is_empty() {
        return Err(PipelineError::EmptySplit("train"));
    }
    match mode {
        Mode::Baseline => train_baseline(ds, cfg, seed),
        Mode::Joint => train_joint(ds, cfg, seed),
        Mode::Contrastive => train_contrastive(ds, cfg, seed),
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Confusion counts with cache-friendly as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl ClassCounts {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// Undefined precision or recall (no predictions or no members of the
    /// class) is reported as 0.
    pub fn friendly_precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn friendly_recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn averse_precision(&self) -> f64 {
        ratio(self.tn, self.tn + self.fn_)
    }

    pub fn averse_recall(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub trace: String,
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub friendly_precision: f64,
    pub friendly_recall: f64,
    pub averse_precision: f64,
    pub averse_recall: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub oov_rate: f64,
    pub page_accuracy: f64,
    pub offset_accuracy: f64,
    pub useful_prefetch_ratio: f64,
    pub config_digest: String,
}

pub const REPORT_CSV_HEADER: &str = "trace,method,seed,accuracy,friendly_precision,friendly_recall,averse_precision,averse_recall,n_train,n_val,n_test,oov_rate,page_accuracy,offset_accuracy,useful_prefetch_ratio,config_digest";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.trace,
            self.method,
            self.seed,
            self.accuracy,
            self.friendly_precision,
            self.friendly_recall,
            self.averse_precision,
            self.averse_recall,
            self.n_train,
            self.n_val,
            self.n_test,
            self.oov_rate,
            self.page_accuracy,
            self.offset_accuracy,
            self.useful_prefetch_ratio,
            self.config_digest
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self, PipelineError> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 16 {
            return Err(PipelineError::Report(format!(
                "expected 16 fields, found {} in `{line}`",
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64, PipelineError> {
            f[i].parse()
                .map_err(|_| PipelineError::Report(format!("bad number `{}`", f[i])))
        };
        let int = |i: usize| -> Result<usize, PipelineError> {
            f[i].parse()
                .map_err(|_| PipelineError::Report(format!("bad count `{}`", f[i])))
        };
        Ok(Self {
            trace: f[0].to_string(),
            method: f[1].to_string(),
            seed: int(2)? as u64,
            accuracy: num(3)?,
            friendly_precision: num(4)?,
            friendly_recall: num(5)?,
            averse_precision: num(6)?,
            averse_recall: num(7)?,
            n_train: int(8)?,
            n_val: int(9)?,
            n_test: int(10)?,
            oov_rate: num(11)?,
            page_accuracy: num(12)?,
            offset_accuracy: num(13)?,
            useful_prefetch_ratio: num(14)?,
            config_digest: f[15].to_string(),
        })
    }
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_reports_csv(text: &str) -> Result<Vec<EvalReport>, PipelineError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPORT_CSV_HEADER) {
        return Err(PipelineError::Report("missing report header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(EvalReport::from_csv_row)
        .collect()
}

/// Scores replacement decisions (threshold 0.5) on the test split against
/// the oracle labels, plus top-1 page and offset accuracy of the prefetch
/// head on the aligned test views.
pub fn evaluate_accuracy(
    model: &TrainedModel,
    ds: &Dataset,
    seed: u64,
    config_digest: &str,
) -> Result<EvalReport, PipelineError> {
    if ds.test.repl.is_empty() {
        return Err(PipelineError::EmptySplit("test"));
    }
    let mut pred = Vec::with_capacity(ds.test.repl.len());
    let (mut page_hits, mut off_hits, mut pf_n) = (0usize, 0usize, 0usize);
    for (r, p) in ds.test.repl.iter().zip(&ds.test.aligned) {
        pred.push(model.predict_friendly(r, p)? >= 0.5);
        if let (Some(t), Some((page, off))) = (p.target, model.predict_prefetch(r, p)?) {
            pf_n += 1;
            page_hits += usize::from(page == t.page as usize);
            off_hits += usize::from(off == t.offset as usize);
        }
    }
    let truth: Vec<bool> = ds.test.repl.iter().map(|s| s.is_friendly()).collect();
    let c = ClassCounts::from_predictions(&pred, &truth);
    Ok(EvalReport {
        trace: ds.name.clone(),
        method: model.mode().as_str().to_string(),
        seed,
        accuracy: c.accuracy(),
        friendly_precision: c.friendly_precision(),
        friendly_recall: c.friendly_recall(),
        averse_precision: c.averse_precision(),
        averse_recall: c.averse_recall(),
        n_train: ds.train.repl.len(),
        n_val: ds.val.repl.len(),
        n_test: ds.test.repl.len(),
        oov_rate: ds.oov_rate,
        page_accuracy: ratio(page_hits, pf_n),
        offset_accuracy: ratio(off_hits, pf_n),
        useful_prefetch_ratio: ds.useful_prefetch_ratio,
        config_digest: config_digest.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Comparison tables

/// Median accuracy per (method, trace). Columns keep first-appearance order;
/// rows follow [`Mode::ALL`] order for known methods.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub methods: Vec<String>,
    pub traces: Vec<String>,
    /// `cells[m][t]`
    pub cells: Vec<Vec<f64>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn comparison_table(reports: &[EvalReport]) -> Result<ComparisonTable, PipelineError> {
    if reports.is_empty() {
        return Err(PipelineError::Report("no reports".into()));
    }
    let mut traces: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    let mut acc: HashMap<(String, String), Vec<f64>> = HashMap::new();
    for r in reports {
        if !traces.contains(&r.trace) {
            traces.push(r.trace.clone());
        }
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        acc.entry((r.method.clone(), r.trace.clone())).or_default().push(r.accuracy);
    }
    let rank = |m: &String| Mode::parse(m).map_or(usize::MAX, |k| k as usize);
    methods.sort_by_key(|m| rank(m));
    let mut missing = Vec::new();
    for m in &methods {
        for t in &traces {
            if !acc.contains_key(&(m.clone(), t.clone())) {
                missing.push(format!("{m} has no report for trace {t}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(PipelineError::Report(format!(
            "inconsistent trace sets: {}",
            missing.join("; ")
        )));
    }
    let cells = methods
        .iter()
        .map(|m| traces.iter().map(|t| median(&acc[&(m.clone(), t.clone())])).collect())
        .collect();
    Ok(ComparisonTable {
        methods,
        traces,
        cells,
    })
}

impl ComparisonTable {
    /// Method rows × trace columns, percentages to two decimals. The best
    /// value of each column is bold; tied values are all bold.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method |");
        for t in &self.traces {
            let _ = write!(out, " {t} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.traces.len()));
        out.push('\n');
        let best: Vec<f64> = (0..self.traces.len())
            .map(|t| self.cells.iter().map(|row| row[t]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for (m, row) in self.methods.iter().zip(&self.cells) {
            let _ = write!(out, "| {m} |");
            for (t, v) in row.iter().enumerate() {
                let cell = format!("{:.2}%", v * 100.0);
                if *v == best[t] {
                    let _ = write!(out, " **{cell}** |");
                } else {
                    let _ = write!(out, " {cell} |");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,trace,median_accuracy\n");
        for (m, row) in self.methods.iter().zip(&self.cells) {
            for (t, v) in self.traces.iter().zip(row) {
                let _ = writeln!(out, "{m},{t},{v}");
            }
        }
        out
    }

    pub fn bold_cells(&self) -> usize {
        self.to_markdown().matches("**").count() / 2
    }

    pub fn get(&self, method: &str, trace: &str) -> Option<f64> {
        let m = self.methods.iter().position(|x| x == method)?;
        let t = self.traces.iter().position(|x| x == trace)?;
        Some(self.cells[m][t])
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

fn join_hex(values: &[u64]) -> String {
    values.iter().map(|v| format!("{v:x}")).collect::<Vec<_>>().join(",")
}

fn split_hex(s: &str) -> Result<Vec<u64>, PipelineError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| u64::from_str_radix(x, 16).map_err(|e| PipelineError::Config(format!("bad vocab entry `{x}`: {e}"))))
        .collect()
}

fn checkpoint_meta(kind: ModelKind, ds: &Dataset, cfg: &RunConfig, seed: u64) -> Meta {
    let geo = ds.cache.geometry;
    let mut m = Meta::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("model_kind", kind.as_str().into());
    put(
        "vocab_sizes",
        format!("{},{},{}", ds.vocabs.pc.size(), ds.vocabs.page.size(), geo.blocks_per_page()),
    );
    put("pc_vocab", join_hex(ds.vocabs.pc.values()));
    put("page_vocab", join_hex(ds.vocabs.page.values()));
    put("H", ds.history.to_string());
    put("seed", seed.to_string());
    put(
        "dims",
        format!(
            "{},{},{},{},{}",
            cfg.embed_dim, cfg.hidden_dim, cfg.lstm_layers, cfg.shared_dim, cfg.proj_dim
        ),
    );
    put("num_sets", ds.cache.num_sets.to_string());
    put("block_size", geo.block_size_bytes.to_string());
    put("page_size", geo.page_size_bytes.to_string());
    put("config_digest", cfg.digest());
    m
}

/// Serialized checkpoints of a trained model, keyed by file stem. Baseline
/// runs produce one file per half.
pub fn save_model(model: &TrainedModel, ds: &Dataset, cfg: &RunConfig, seed: u64) -> Vec<(String, Vec<u8>)> {
    let meta = |k: ModelKind| checkpoint_meta(k, ds, cfg, seed);
    let mut out = Vec::new();
    match model {
        TrainedModel::Baseline { repl, pf } => {
            if let Some((_, s)) = repl {
                out.push(("baseline_repl".into(), save_checkpoint(s, &meta(ModelKind::BaselineRepl))));
            }
            if let Some((_, s)) = pf {
                out.push(("baseline_pf".into(), save_checkpoint(s, &meta(ModelKind::BaselinePf))));
            }
        }
        TrainedModel::Joint { store, .. } => out.push(("joint".into(), save_checkpoint(store, &meta(ModelKind::Joint)))),
        TrainedModel::Contrastive { store, .. } => {
            out.push(("contrastive".into(), save_checkpoint(store, &meta(ModelKind::Contrastive))))
        }
    }
    out
}

/// A model rebuilt from a checkpoint with everything needed to featurize
/// new accesses.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub kind: ModelKind,
    pub model: TrainedModel,
    pub vocabs: Vocabs,
    pub history: usize,
    pub num_sets: usize,
    pub geometry: BlockGeometry,
    pub meta: Meta,
}

pub fn load_model(bytes: &[u8]) -> Result<LoadedModel, PipelineError> {
    let (loaded, meta) = load_checkpoint(bytes)?;
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| PipelineError::Config(format!("checkpoint lacks `{k}`")))
    };
    let kind_s = get("model_kind")?;
    let kind = ModelKind::parse(&kind_s)
        .ok_or_else(|| PipelineError::Config(format!("unknown model kind `{kind_s}`")))?;
    let vocabs = Vocabs {
        pc: Vocab::from_ordered(split_hex(&get("pc_vocab")?)?),
        page: Vocab::from_ordered(split_hex(&get("page_vocab")?)?),
    };
    let geometry = BlockGeometry::new(get("block_size")?.parse()?, get("page_size")?.parse()?)?;
    let dims_v: Vec<usize> = get("dims")?
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if dims_v.len() != 5 {
        return Err(PipelineError::Config("`dims` needs five entries".into()));
    }
    let dims = ModelDims {
        embed: dims_v[0],
        hidden: dims_v[1],
        lstm_layers: dims_v[2],
        shared: dims_v[3],
        proj: dims_v[4],
        pc_vocab: vocabs.pc.size(),
        page_vocab: vocabs.page.size(),
        blocks_per_page: geometry.blocks_per_page() as usize,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = new_store();
    let model = match kind {
        ModelKind::BaselineRepl => {
            let m = ReplacementModel::new(&mut store, &dims, &mut rng)?;
            store.load_from(&loaded)?;
            TrainedModel::Baseline {
                repl: Some((m, store)),
                pf: None,
            }
        }
        ModelKind::BaselinePf => {
            let m = PrefetchModel::new(&mut store, &dims, &mut rng)?;
            store.load_from(&loaded)?;
            TrainedModel::Baseline {
                repl: None,
                pf: Some((m, store)),
            }
        }
        ModelKind::Joint => {
            let model = JointModel::new(&mut store, &dims, &mut rng)?;
            store.load_from(&loaded)?;
            TrainedModel::Joint { model, store }
        }
        ModelKind::Contrastive => {
            let model = ContrastiveModel::new(&mut store, &dims, &mut rng)?;
            store.load_from(&loaded)?;
            TrainedModel::Contrastive { model, store }
        }
    };
    if store_param_count(&model) != loaded.len() {
        return Err(PipelineError::Config(format!(
            "checkpoint has {} tensors, architecture expects {}",
            loaded.len(),
            store_param_count(&model)
        )));
    }
    Ok(LoadedModel {
        kind,
        model,
        vocabs,
        history: get("H")?.parse()?,
        num_sets: get("num_sets")?.parse()?,
        geometry,
        meta,
    })
}

fn store_param_count(m: &TrainedModel) -> usize {
    match m {
        TrainedModel::Baseline { repl, pf } => {
            repl.as_ref().map_or(0, |(_, s)| s.len()) + pf.as_ref().map_or(0, |(_, s)| s.len())
        }
        TrainedModel::Joint { store, .. } | TrainedModel::Contrastive { store, .. } => store.len(),
    }
}

// ---------------------------------------------------------------------------
// Deployment as a replacement policy

/// Classifies each new insertion as cache-friendly or not.
pub trait InsertionPredictor {
    /// Sees every demand access before the tag lookup.
    fn observe(&mut self, _ctx: &AccessContext<'_>) {}
    fn predict_friendly(&mut self, ctx: &AccessContext<'_>) -> bool;
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub bool);

impl InsertionPredictor for ConstantPredictor {
    fn predict_friendly(&mut self, _: &AccessContext<'_>) -> bool {
        self.0
    }
}

/// Replays Belady labels by trace position. Positions with no MIN insertion
/// (MIN hit there) count as friendly.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    averse: HashSet<usize>,
}

impl OraclePredictor {
    pub fn new(labels: &[LabeledInsertion]) -> Self {
        Self {
            averse: labels
                .iter()
                .filter(|l| !l.label.is_friendly())
                .map(|l| l.trace_position)
                .collect(),
        }
    }
}

impl InsertionPredictor for OraclePredictor {
    fn predict_friendly(&mut self, ctx: &AccessContext<'_>) -> bool {
        !self.averse.contains(&ctx.position)
    }
}

/// Runs a loaded model on features rebuilt online from the demand stream.
#[derive(Debug, Clone)]
pub struct ModelPredictor {
    model: LoadedModel,
    pcs: Vec<u32>,
    pages: Vec<u32>,
    offsets: Vec<u32>,
}

impl ModelPredictor {
    pub fn new(model: LoadedModel) -> Result<Self, PipelineError> {
        if !model.model.has_replacement_head() {
            return Err(PipelineError::Config(format!(
                "`{}` checkpoint has no replacement head",
                model.kind.as_str()
            )));
        }
        Ok(Self {
            model,
            pcs: Vec::new(),
            pages: Vec::new(),
            offsets: Vec::new(),
        })
    }

    fn window(v: &[u32], h: usize) -> Vec<u32> {
        let tail = &v[v.len().saturating_sub(h)..];
        let mut out = vec![PAD_ID; h - tail.len()];
        out.extend_from_slice(tail);
        out
    }
}

impl InsertionPredictor for ModelPredictor {
    fn observe(&mut self, ctx: &AccessContext<'_>) {
        let (page, offset) = page_and_offset(ctx.block, &self.model.geometry);
        self.pcs.push(self.model.vocabs.pc.lookup(ctx.access.pc));
        self.pages.push(self.model.vocabs.page.lookup(page));
        self.offsets.push(offset as u32 + 1);
    }

    fn predict_friendly(&mut self, ctx: &AccessContext<'_>) -> bool {
        let h = self.model.history;
        let pc_history = Self::window(&self.pcs, h);
        let rs = ReplacementSample {
            position: ctx.position,
            insertion_id: 0,
            set_index: ctx.set_index,
            block: ctx.block,
            pc_history: pc_history.clone(),
            context: encode_context(
                ctx.set_index,
                self.model.num_sets,
                ctx.stride_id,
                MissType::DemandMiss,
                ctx.access.core_id,
            ),
            label: 0.0,
        };
        let ps = PrefetchSample {
            position: ctx.position,
            set_index: ctx.set_index,
            block: ctx.block,
            pc_history,
            page_history: Self::window(&self.pages, h),
            offset_history: Self::window(&self.offsets, h),
            target: None,
        };
        // ids come from the model's own vocabularies, so inference cannot
        // fail on bounds; treat any error as "no information" (LRU)
        self.model.model.predict_friendly(&rs, &ps).map_or(true, |p| p >= 0.5)
    }
}

/// Each line carries the label predicted at its insertion. Victims are the
/// least-recently-used predicted-averse line, else the LRU line. Prefetch
/// fills are treated as friendly.
#[derive(Debug, Clone)]
pub struct ModelPolicy<P> {
    pub predictor: P,
    assoc: usize,
    friendly: Vec<bool>,
}

impl<P: InsertionPredictor> ModelPolicy<P> {
    pub fn new(predictor: P, cache: &CacheConfig) -> Self {
        Self {
            predictor,
            assoc: cache.associativity,
            friendly: vec![true; cache.num_sets * cache.associativity],
        }
    }
}

impl<P: InsertionPredictor> ReplacementPolicy for ModelPolicy<P> {
    fn on_access(&mut self, ctx: &AccessContext<'_>) {
        self.predictor.observe(ctx);
    }

    fn on_insert(&mut self, ctx: &AccessContext<'_>, way: usize) {
        let f = ctx.is_prefetch || self.predictor.predict_friendly(ctx);
        self.friendly[ctx.set_index * self.assoc + way] = f;
    }

    fn choose_victim(&mut self, ctx: &AccessContext<'_>, lines: &[CacheLineState]) -> usize {
        let labels = &self.friendly[ctx.set_index * self.assoc..(ctx.set_index + 1) * self.assoc];
        lines
            .iter()
            .enumerate()
            .filter(|(w, _)| !labels[*w])
            .min_by_key(|(w, l)| (l.last_touch, *w))
            .map_or_else(|| lru_choose_victim(lines), |(w, _)| w)
    }
}

/// Deploys a checkpoint with a replacement head as a simulator policy.
pub fn model_replacement_policy(
    bytes: &[u8],
    cache: &CacheConfig,
) -> Result<ModelPolicy<ModelPredictor>, PipelineError> {
    Ok(ModelPolicy::new(ModelPredictor::new(load_model(bytes)?)?, cache))
}

// ---------------------------------------------------------------------------
// End-to-end runs

/// Everything produced by one (trace, mode, seed) run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Labels, featurizes, trains and evaluates one configuration.
pub fn run_single(
    name: &str,
    trace: &Trace,
    labels: &[LabeledInsertion],
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
) -> Result<(Dataset, RunResult), PipelineError> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let ds = prepare_dataset(name, trace, labels, &cfg)?;
    let outcome = train_model(mode, &ds, &cfg, seed)?;
    let report = evaluate_accuracy(&outcome.model, &ds, seed, &cfg.digest())?;
    Ok((ds, RunResult { outcome, report }))
}

#[derive(Debug, Clone)]
pub struct AblationInput {
    pub name: String,
    pub trace: Trace,
    pub config: RunConfig,
}

/// Every (trace, mode, seed) cell, run sequentially with isolated state.
/// Returns the per-run reports; [`comparison_table`] turns them into medians.
pub fn run_ablation(inputs: &[AblationInput], modes: &[Mode], seeds: &[u64]) -> Result<Vec<EvalReport>, PipelineError> {
    if inputs.is_empty() || seeds.is_empty() || modes.is_empty() {
        return Err(PipelineError::Config("ablation needs traces, modes and seeds".into()));
    }
    let mut reports = Vec::new();
    for input in inputs {
        let labels = label_trace(&input.trace, &input.config)?.insertions;
        for &seed in seeds {
            let mut cfg = input.config.clone();
            cfg.seed = seed;
            let ds = prepare_dataset(&input.name, &input.trace, &labels, &cfg)?;
            for &mode in modes {
                let outcome = train_model(mode, &ds, &cfg, seed)?;
                reports.push(evaluate_accuracy(&outcome.model, &ds, seed, &cfg.digest())?);
            }
        }
    }
    Ok(reports)
}
