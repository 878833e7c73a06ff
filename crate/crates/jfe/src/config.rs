//! Run configuration files.
//!
//! A TOML document with the sections `[run]`, `[model]`, `[budget]`,
//! `[objective]`, `[sampler]`, `[stage1]`, `[stage2]` and `[eval]`. Every
//! key has a default, so an empty file is a complete desk-scale
//! configuration; unknown keys are rejected with their name.

use std::path::Path;

use jfe_core::adapters::AdapterSpec;
use jfe_core::assembly::{BudgetConfig, InstructionOrder, RESERVED_TOKENS};
use jfe_core::encoder::{Combiner, OneTowerConfig, TowerConfig, TwoTowerConfig};
use jfe_core::eval::{EvalOptions, Scope};
use jfe_core::objective::AdamWConfig;
use jfe_core::sampler::{SamplerConfig, SamplingMode};
use jfe_core::trainer::{ModelConfig, Stage, StageConfig};
use serde::{Deserialize, Serialize};

use crate::error::{JfeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub budget: BudgetConfig,
    pub objective: ObjectiveSection,
    pub sampler: SamplerSection,
    pub stage1: StageSection,
    pub stage2: StageSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Seeds model initialization; stage `k` uses `seed + k`.
    pub seed: u64,
    /// Stages `train` runs, in order.
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    OneTower,
    TwoTower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Architecture,
    /// Two-tower only.
    pub combiner: Combiner,
    /// Transformer blocks in total; a two-tower model gives each tower half.
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Hidden width of the feature-fusion MLP.
    pub fusion_hidden: usize,
    /// Initial score-fusion weight on the image embedding.
    pub score_weight: f64,
    pub causal: bool,
    pub normalize: bool,
    pub instruction_order: InstructionOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub tau: f64,
    pub symmetric: bool,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Gaussian,
    None,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub mode: SamplerMode,
    /// Datasets per batch in `fixed` mode.
    pub datasets: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Prepend dataset instructions to queries; ignored by stage 1.
    pub use_instructions: bool,
    /// Train the two-tower combiner tensors in full.
    pub train_combiner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub scope: String,
    pub use_instructions: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            stages: vec![Stage::Adapt, Stage::Instruct],
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = OneTowerConfig::desk(RESERVED_TOKENS.len(), 1);
        Self {
            arch: Architecture::OneTower,
            combiner: Combiner::FeatureFusion,
            layers: t.tower.layers,
            hidden_dim: t.tower.hidden_dim,
            heads: t.tower.heads,
            ffn_dim: t.tower.ffn_dim,
            fusion_hidden: 128,
            score_weight: 0.5,
            causal: false,
            normalize: true,
            instruction_order: InstructionOrder::AfterContent,
        }
    }
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        let s = StageConfig::desk_stage1();
        let a = AdamWConfig::default();
        Self {
            tau: s.tau,
            symmetric: s.symmetric,
            warmup_frac: s.warmup_frac,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            mode: SamplerMode::Gaussian,
            datasets: 4,
            mean: s.mean,
            std: s.std,
        }
    }
}

impl StageSection {
    fn from_preset(c: &StageConfig) -> Self {
        Self {
            rank: c.adapter.rank,
            alpha: c.adapter.alpha,
            dropout: c.adapter.dropout,
            epochs: c.epochs,
            max_steps: c.max_steps,
            batch_size: c.batch_size(),
            base_lr: c.base_lr,
            use_instructions: c.use_instructions,
            train_combiner: c.train_combiner,
        }
    }

    pub fn stage1() -> Self {
        Self::from_preset(&StageConfig::desk_stage1())
    }

    pub fn stage2() -> Self {
        Self::from_preset(&StageConfig::desk_stage2())
    }
}

impl Default for StageSection {
    fn default() -> Self {
        Self::stage2()
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            scope: Scope::Task.as_str().into(),
            use_instructions: true,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            model: ModelSection::default(),
            budget: BudgetConfig::desk(),
            objective: ObjectiveSection::default(),
            sampler: SamplerSection::default(),
            stage1: StageSection::stage1(),
            stage2: StageSection::stage2(),
            eval: EvalSection::default(),
        }
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        if let (Some(toml::Value::Table(b)), toml::Value::Table(o)) = (base.get_mut(&k), &v) {
            merge_tables(b, o.clone());
            continue;
        }
        base.insert(k, v);
    }
}

impl RunConfig {
    /// Parses a configuration file. Keys left out of a section take the
    /// value of that section's default, so a partial `[stage1]` table keeps
    /// the stage-1 preset for everything it does not mention.
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table =
            toml::from_str(text).map_err(|e| JfeError::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge_tables(&mut merged, user);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| JfeError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| JfeError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            JfeError::Config(m) => JfeError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// The effective configuration as JSON, for report and checkpoint echoes.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.model_config(RESERVED_TOKENS.len() + 1, 1)?;
        self.stage_config(Stage::Adapt)?.validate()?;
        self.stage_config(Stage::Instruct)?.validate()?;
        self.eval_options()?;
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.rank == 0 || !(0.0..1.0).contains(&s.dropout) || !(s.alpha > 0.0) {
                return Err(JfeError::Config(format!(
                    "{name}: adapter needs rank >= 1, alpha > 0 and dropout in [0, 1), got rank {} alpha {} dropout {}",
                    s.rank, s.alpha, s.dropout
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.model.score_weight) {
            return Err(JfeError::Config(format!(
                "model.score_weight {} outside [0, 1]",
                self.model.score_weight
            )));
        }
        Ok(())
    }

    /// Architecture for a vocabulary of `vocab_size` tokens and patches of
    /// `patch_dim` features.
    pub fn model_config(&self, vocab_size: usize, patch_dim: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let tower = TowerConfig {
            layers: m.layers,
            hidden_dim: m.hidden_dim,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            vocab_size,
            patch_dim,
            max_len: self.budget.max_len(),
            causal: m.causal,
        };
        if m.layers == 0 {
            return Err(JfeError::Config("model.layers must be at least 1".into()));
        }
        let model = match m.arch {
            Architecture::OneTower => {
                let c = OneTowerConfig {
                    tower,
                    budget: self.budget,
                    order: m.instruction_order,
                    normalize: m.normalize,
                };
                c.validate()?;
                ModelConfig::OneTower(c)
            }
            Architecture::TwoTower => {
                let per_tower = (m.layers / 2).max(1);
                let text = TowerConfig {
                    layers: per_tower,
                    patch_dim: 0,
                    ..tower
                };
                let image = TowerConfig {
                    layers: per_tower,
                    vocab_size: RESERVED_TOKENS.len(),
                    max_len: self.budget.vision_tokens + 1,
                    ..tower
                };
                let c = TwoTowerConfig {
                    text,
                    image,
                    combiner: m.combiner,
                    fusion_hidden: m.fusion_hidden,
                    budget: self.budget,
                    order: m.instruction_order,
                    normalize: m.normalize,
                };
                c.validate()?;
                ModelConfig::TwoTower(c)
            }
        };
        Ok(model)
    }

    pub fn sampler_config(&self, batch_size: usize) -> SamplerConfig {
        let s = &self.sampler;
        let mode = match s.mode {
            SamplerMode::Gaussian => SamplingMode::Gaussian,
            SamplerMode::None => SamplingMode::None,
            SamplerMode::Fixed => SamplingMode::Fixed(s.datasets),
        };
        SamplerConfig {
            mean: s.mean,
            std: s.std,
            batch_size,
            mode,
            seed: self.run.seed,
        }
    }

    /// Stage settings; stage 1 uses `seed + 1`, stage 2 `seed + 2`.
    pub fn stage_config(&self, stage: Stage) -> Result<StageConfig> {
        let (sec, offset) = match stage {
            Stage::Adapt => (&self.stage1, 1),
            Stage::Instruct => (&self.stage2, 2),
        };
        let o = &self.objective;
        Ok(StageConfig {
            stage,
            adapter: AdapterSpec::new(sec.rank, sec.alpha, sec.dropout, Default::default()),
            epochs: sec.epochs,
            max_steps: sec.max_steps,
            base_lr: sec.base_lr,
            warmup_frac: o.warmup_frac,
            sampler: self.sampler_config(sec.batch_size),
            seed: self.run.seed.wrapping_add(offset),
            tau: o.tau,
            symmetric: o.symmetric,
            use_instructions: stage == Stage::Instruct && sec.use_instructions,
            train_combiner: sec.train_combiner,
            adamw: AdamWConfig {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
        })
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            scope: Scope::parse(&self.eval.scope)?,
            use_instructions: self.eval.use_instructions,
        })
    }
}
