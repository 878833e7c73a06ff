//! Two-stage contrastive training: adaptation on role-swapped caption pairs,
//! then instruction tuning on mixed-task data, each with fresh adapters.
//!
//! A stage merges whatever adapters its starting checkpoint carries, attaches
//! new ones, and runs AdamW on InfoNCE over sampled batches. One generator
//! seeded from [`StageConfig::seed`] drives both batch sampling and adapter
//! dropout, so a run is a pure function of its inputs.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::adapters::{attach, default_targets, merge, AdapterSpec, ADAPTER_PREFIX};
use crate::assembly::{tokenize, Vocabulary};
use crate::data::{Item, TrainExample};
use crate::encoder::{Encoder, Mode, OneTower, OneTowerConfig, TwoTower, TwoTowerConfig};
use crate::numerics::{Grads, ParamStore};
use crate::objective::{
    info_nce, info_nce_grad, lr_at, optimizer_step, AdamWConfig, ContrastiveBatch, OptimState,
    ScheduleConfig, DEFAULT_TAU,
};
use crate::sampler::{
    compose_batch, expand_caption_pairs, CaptionPair, ExamplePool, SamplerConfig, SamplingMode,
};
use crate::{rng_from_seed, Error, Result, Rng};

/// Dataset name given to expanded caption pairs.
pub const CAPTION_DATASET: &str = "captions";

/// Prefix of the two-tower combiner tensors.
pub const COMBINER_PREFIX: &str = "combiner.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Stage {
    /// Post-training adaptation on caption pairs.
    Adapt,
    /// Instruction tuning.
    Instruct,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Adapt => "adapt",
            Stage::Instruct => "instruct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adapt" => Ok(Stage::Adapt),
            "instruct" => Ok(Stage::Instruct),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Architecture and shape of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelConfig {
    OneTower(OneTowerConfig),
    TwoTower(TwoTowerConfig),
}

impl ModelConfig {
    /// Fresh parameters drawn from `rng`.
    pub fn init(&self, rng: &mut Rng) -> Result<(Encoder, ParamStore)> {
        let mut store = ParamStore::new();
        let enc = match self {
            ModelConfig::OneTower(c) => Encoder::OneTower(OneTower::init(*c, &mut store, rng)?),
            ModelConfig::TwoTower(c) => Encoder::TwoTower(TwoTower::init(*c, &mut store, rng)?),
        };
        Ok((enc, store))
    }

    pub fn bind(&self, store: &ParamStore) -> Result<Encoder> {
        Ok(match self {
            ModelConfig::OneTower(c) => Encoder::OneTower(OneTower::bind(*c, store)?),
            ModelConfig::TwoTower(c) => Encoder::TwoTower(TwoTower::bind(*c, store)?),
        })
    }
}

/// Position of a ChaCha generator, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = <Rng as rand::SeedableRng>::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos((u128::from(self.word_pos_hi) << 64) | u128::from(self.word_pos_lo));
        rng
    }
}

/// Adapter hyper-parameters recorded with unmerged adapter tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdapterInfo {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl AdapterInfo {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A model snapshot: architecture, tensors and the training lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Stages applied so far, oldest first. Empty for a fresh model.
    pub stages: Vec<Stage>,
    /// Hyper-parameters of the adapters in `store`, if any are unmerged.
    pub adapter: Option<AdapterInfo>,
    /// Generator position at the end of the last stage (or initialization).
    pub rng: RngState,
    /// Optimizer steps taken by the last stage.
    pub steps: u64,
    pub store: ParamStore,
}

impl Checkpoint {
    /// Randomly initialized model; all tensors trainable.
    pub fn init(model: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let (_, store) = model.init(&mut rng)?;
        Ok(Self {
            model,
            stages: Vec::new(),
            adapter: None,
            rng: RngState::capture(&rng),
            steps: 0,
            store,
        })
    }

    pub fn encoder(&self) -> Result<Encoder> {
        self.model.bind(&self.store)
    }

    /// Stage tag of the most recent stage, or `"init"`.
    pub fn stage_tag(&self) -> &'static str {
        self.stages.last().map_or("init", |s| s.as_str())
    }
}

/// Settings of one training stage.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageConfig {
    pub stage: Stage,
    /// Adapter preset. Empty targets select every attention and
    /// feed-forward weight of the model.
    pub adapter: AdapterSpec,
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    pub max_steps: Option<u64>,
    pub base_lr: f64,
    pub warmup_frac: f64,
    /// Batch size and dataset-count policy. Its seed is unused; the stage
    /// seed drives sampling.
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub tau: f64,
    pub symmetric: bool,
    /// Prepend dataset instructions to queries. Instruction tuning without
    /// this flag requires it to be cleared explicitly.
    pub use_instructions: bool,
    /// Train the two-tower combiner tensors in full next to the adapters.
    pub train_combiner: bool,
    pub adamw: AdamWConfig,
}

impl StageConfig {
    fn desk(stage: Stage, adapter: AdapterSpec, epochs: usize) -> Self {
        Self {
            stage,
            adapter,
            epochs,
            max_steps: None,
            base_lr: 3e-3,
            warmup_frac: 0.03,
            sampler: SamplerConfig {
                batch_size: 64,
                ..SamplerConfig::default()
            },
            seed: 0,
            tau: DEFAULT_TAU,
            symmetric: false,
            use_instructions: stage == Stage::Instruct,
            train_combiner: false,
            adamw: AdamWConfig::default(),
        }
    }

    /// Desk-scale adaptation: rank 4, batch 64, one epoch.
    pub fn desk_stage1() -> Self {
        Self::desk(
            Stage::Adapt,
            AdapterSpec::desk_stage1(Default::default()),
            1,
        )
    }

    /// Desk-scale instruction tuning: rank 8, batch 64, three epochs.
    pub fn desk_stage2() -> Self {
        Self::desk(
            Stage::Instruct,
            AdapterSpec::desk_stage2(Default::default()),
            3,
        )
    }

    /// Full-scale adaptation: rank 128, batch 2048, lr 2e-4, one epoch.
    pub fn paper_stage1() -> Self {
        let mut c = Self::desk(Stage::Adapt, AdapterSpec::stage1(Default::default()), 1);
        c.base_lr = 2e-4;
        c.sampler.batch_size = 2048;
        c
    }

    /// Full-scale instruction tuning: rank 256, batch 1024, three epochs.
    pub fn paper_stage2() -> Self {
        let mut c = Self::desk(Stage::Instruct, AdapterSpec::stage2(Default::default()), 3);
        c.base_lr = 2e-4;
        c.sampler.batch_size = 1024;
        c
    }

    pub fn batch_size(&self) -> usize {
        self.sampler.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return Err(Error::Config(
                "epochs must be at least 1 unless max_steps is set".into(),
            ));
        }
        ScheduleConfig {
            base_lr: self.base_lr,
            warmup_frac: self.warmup_frac,
            total_steps: 1,
        }
        .validate()
    }

    /// Optimizer steps over `num_examples`: `epochs · ⌈N / B⌉` unless
    /// overridden.
    pub fn total_steps(&self, num_examples: usize) -> u64 {
        self.max_steps
            .unwrap_or_else(|| (self.epochs * num_examples.div_ceil(self.batch_size())) as u64)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// A query (with its instruction) and its positive candidate.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a> {
    pub query: &'a Item,
    pub instruction: Option<&'a [u32]>,
    pub candidate: &'a Item,
}

fn embed_all(
    encoder: &Encoder,
    store: &ParamStore,
    pairs: &[PairRef],
    mode: &mut Mode,
) -> Result<(
    Vec<f64>,
    Vec<f64>,
    Vec<crate::encoder::Trace>,
    Vec<crate::encoder::Trace>,
)> {
    let mut hq = Vec::with_capacity(pairs.len() * encoder.dim());
    let mut hc = Vec::with_capacity(pairs.len() * encoder.dim());
    let mut tq = Vec::with_capacity(pairs.len());
    let mut tc = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (e, t) = encoder.forward(store, p.query, p.instruction, mode)?;
        hq.extend(e);
        tq.push(t);
        let (e, t) = encoder.forward(store, p.candidate, None, mode)?;
        hc.extend(e);
        tc.push(t);
    }
    Ok((hq, hc, tq, tc))
}

/// InfoNCE of a batch in evaluation mode.
pub fn batch_loss(
    encoder: &Encoder,
    store: &ParamStore,
    pairs: &[PairRef],
    tau: f64,
    symmetric: bool,
) -> Result<f64> {
    let (hq, hc, _, _) = embed_all(encoder, store, pairs, &mut Mode::Eval)?;
    let mut batch = ContrastiveBatch::new(hq, hc, encoder.dim(), tau)?;
    batch.symmetric = symmetric;
    info_nce(&batch)
}

/// InfoNCE of a batch and its gradient with respect to every trainable
/// tensor of `store`.
pub fn batch_loss_and_grads(
    encoder: &Encoder,
    store: &ParamStore,
    pairs: &[PairRef],
    tau: f64,
    symmetric: bool,
    mode: &mut Mode,
) -> Result<(f64, Grads)> {
    let d = encoder.dim();
    let (hq, hc, tq, tc) = embed_all(encoder, store, pairs, mode)?;
    let mut batch = ContrastiveBatch::new(hq, hc, d, tau)?;
    batch.symmetric = symmetric;
    let (loss, dq, dc) = info_nce_grad(&batch)?;
    let mut grads = Grads::for_store(store);
    for (i, t) in tq.iter().enumerate() {
        encoder.backward(store, t, &dq[i * d..(i + 1) * d], &mut grads)?;
    }
    for (i, t) in tc.iter().enumerate() {
        encoder.backward(store, t, &dc[i * d..(i + 1) * d], &mut grads)?;
    }
    Ok((loss, grads))
}

/// Merges the adapters of `base` and attaches fresh ones for `cfg`.
pub fn prepare_stage(base: &Checkpoint, cfg: &StageConfig) -> Result<ParamStore> {
    let mut merged = if base.store.has_adapters() {
        merge(&base.store)
    } else {
        base.store.clone()
    };
    merged.snap_to_f32();
    let mut spec = cfg.adapter.clone();
    if spec.targets.is_empty() {
        spec.targets = default_targets(&merged);
    }
    let adapter_seed = cfg.seed ^ 0xA5A5_5A5A_0F0F_F0F0;
    let mut store = attach(&merged, &spec, adapter_seed)?;
    if cfg.train_combiner {
        let ids: Vec<_> = store
            .ids()
            .filter(|id| store.name(*id).starts_with(COMBINER_PREFIX))
            .collect();
        for id in ids {
            store.set_trainable(id, true);
        }
    }
    Ok(store)
}

/// Runs one stage from `base` over `examples`.
pub fn train_stage(
    base: &Checkpoint,
    examples: &[TrainExample],
    vocab: &Vocabulary,
    cfg: &StageConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("training needs at least one example".into()));
    }
    let instructions: Vec<Option<Vec<u32>>> = if cfg.use_instructions {
        examples
            .iter()
            .map(|e| match &e.instruction {
                Some(s) => Ok(Some(tokenize(s, vocab))),
                None => Err(Error::Config(format!(
                    "dataset {} has no instruction; disable use_instructions to train without them",
                    e.dataset
                ))),
            })
            .collect::<Result<_>>()?
    } else {
        alloc::vec![None; examples.len()]
    };

    let mut store = prepare_stage(base, cfg)?;
    let encoder = base.model.bind(&store)?;
    let pool = ExamplePool::new(examples);
    let total = cfg.total_steps(examples.len());
    let schedule = ScheduleConfig {
        base_lr: cfg.base_lr,
        warmup_frac: cfg.warmup_frac,
        total_steps: total,
    };
    let mut rng = rng_from_seed(cfg.seed);
    let mut opt = OptimState::new(&store, cfg.adamw);
    let mut log = Vec::with_capacity(total as usize);

    for step in 0..total {
        let lr = lr_at(step, &schedule)?;
        let batch = compose_batch(&mut rng, &pool, &cfg.sampler)
            .map_err(|e| e.context(&format!("step {step}")))?;
        let pairs: Vec<PairRef> = batch
            .examples
            .iter()
            .map(|&i| PairRef {
                query: &examples[i].query,
                instruction: instructions[i].as_deref(),
                candidate: &examples[i].candidate,
            })
            .collect();
        let (loss, grads) = batch_loss_and_grads(
            &encoder,
            &store,
            &pairs,
            cfg.tau,
            cfg.symmetric,
            &mut Mode::Train(&mut rng),
        )
        .map_err(|e| e.context(&format!("step {step} (lr {lr:e})")))?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} stage diverged at step {step}: loss {loss}, lr {lr:e}, max |grad| {}, datasets [{}]",
                cfg.stage.as_str(),
                grads.max_abs(),
                batch.datasets.join(", ")
            )));
        }
        optimizer_step(&mut opt, &grads, &mut store, lr)?;
        store.snap_to_f32();
        log.push(StepLog { step, lr, loss });
    }

    let mut stages = base.stages.clone();
    stages.push(cfg.stage);
    let a = &cfg.adapter;
    let checkpoint = Checkpoint {
        model: base.model,
        stages,
        adapter: Some(AdapterInfo {
            rank: a.rank,
            alpha: a.alpha,
            dropout: a.dropout,
        }),
        rng: RngState::capture(&rng),
        steps: total,
        store,
    };
    Ok(TrainOutcome { checkpoint, log })
}

/// Adaptation: expands each caption pair into both retrieval directions and
/// trains fresh adapters on them without instructions.
pub fn run_stage1(
    base: &Checkpoint,
    pairs: &[CaptionPair],
    vocab: &Vocabulary,
    cfg: &StageConfig,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Adapt {
        return Err(Error::Config(format!(
            "run_stage1 needs an adapt config, got {}",
            cfg.stage.as_str()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Data(
            "adaptation needs at least one caption pair".into(),
        ));
    }
    let examples = expand_caption_pairs(pairs, CAPTION_DATASET)?;
    let cfg = StageConfig {
        use_instructions: false,
        ..cfg.clone()
    };
    train_stage(base, &examples, vocab, &cfg)
}

/// Instruction tuning from a fresh or adapted checkpoint.
pub fn run_stage2(
    base: &Checkpoint,
    examples: &[TrainExample],
    vocab: &Vocabulary,
    cfg: &StageConfig,
) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Instruct {
        return Err(Error::Config(format!(
            "run_stage2 needs an instruct config, got {}",
            cfg.stage.as_str()
        )));
    }
    train_stage(base, examples, vocab, cfg)
}

/// Marks adapter tensors trainable and everything else frozen, as after
/// [`attach`]. Used when a checkpoint is reloaded.
pub fn restore_trainability(store: &mut ParamStore, train_combiner: bool) {
    let adapted = store.has_adapters();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let trainable = !adapted
            || name.starts_with(ADAPTER_PREFIX)
            || (train_combiner && name.starts_with(COMBINER_PREFIX));
        store.set_trainable(id, trainable);
    }
}

/// Shortcut for a stage config with the uniform sampler.
pub fn without_sampling(cfg: &StageConfig) -> StageConfig {
    StageConfig {
        sampler: SamplerConfig {
            mode: SamplingMode::None,
            ..cfg.sampler
        },
        ..cfg.clone()
    }
}

/// Mean of the first and last `window` logged losses.
pub fn loss_trend(log: &[StepLog], window: usize) -> Option<(f64, f64)> {
    if log.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(log.len());
    let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..w]), mean(&log[log.len() - w..])))
}
