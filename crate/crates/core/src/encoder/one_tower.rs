use alloc::format;
use alloc::vec::Vec;

use super::{pool, Embedding, Mode, Pooled, Tower, TowerConfig, TowerInput};
use crate::assembly::{assemble, BudgetConfig, InputSequence, InstructionOrder, EMB_ID, PAD_ID};
use crate::data::Item;
use crate::numerics::ParamStore;
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OneTowerConfig {
    pub tower: TowerConfig,
    pub budget: BudgetConfig,
    pub order: InstructionOrder,
    /// L2-normalize the pooled state.
    pub normalize: bool,
}

impl OneTowerConfig {
    /// Two 64-wide layers over the desk truncation budget.
    pub fn desk(vocab_size: usize, patch_dim: usize) -> Self {
        let budget = BudgetConfig::desk();
        Self {
            tower: TowerConfig {
                layers: 2,
                hidden_dim: 64,
                heads: 4,
                ffn_dim: 128,
                vocab_size,
                patch_dim,
                max_len: budget.max_len(),
                causal: false,
            },
            budget,
            order: InstructionOrder::AfterContent,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tower.validate()?;
        self.budget.validate()?;
        if self.tower.max_len < self.budget.max_len() {
            return Err(Error::Config(format!(
                "max_len {} is below the assembled budget {}",
                self.tower.max_len,
                self.budget.max_len()
            )));
        }
        Ok(())
    }
}

/// Joint encoder over `[vision][text][instruction][Emb]`.
#[derive(Debug, Clone)]
pub struct OneTower {
    cfg: OneTowerConfig,
    tower: Tower,
}

impl OneTower {
    pub fn init(cfg: OneTowerConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let tower = Tower::init("", cfg.tower, store, rng)?;
        store.snap_to_f32();
        Ok(Self { cfg, tower })
    }

    pub fn bind(cfg: OneTowerConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let tower = Tower::bind("", cfg.tower, store)?;
        Ok(Self { cfg, tower })
    }

    pub fn config(&self) -> &OneTowerConfig {
        &self.cfg
    }

    pub fn tower(&self) -> &Tower {
        &self.tower
    }

    pub fn assemble(&self, item: &Item, instruction: Option<&[u32]>) -> Result<InputSequence> {
        assemble(item, instruction, &self.cfg.budget, self.cfg.order)
    }

    /// Embeds an assembled sequence.
    pub fn encode_sequence(&self, store: &ParamStore, seq: &InputSequence) -> Result<Embedding> {
        Ok(Embedding(
            self.forward_seq(store, seq, seq.total_len, &mut Mode::Eval)?
                .out,
        ))
    }

    /// Forward over `seq` right-padded with `<pad>` to `width` positions.
    pub(crate) fn forward_seq(
        &self,
        store: &ParamStore,
        seq: &InputSequence,
        width: usize,
        mode: &mut Mode,
    ) -> Result<Pooled> {
        if seq.total_len > self.cfg.tower.max_len {
            return Err(Error::Budget(format!(
                "sequence of {} tokens exceeds max_len {}",
                seq.total_len, self.cfg.tower.max_len
            )));
        }
        if width < seq.total_len || width > self.cfg.tower.max_len {
            return Err(Error::Shape(format!(
                "padding width {width} outside [{}, max_len]",
                seq.total_len
            )));
        }
        let mut tokens: Vec<u32> = Vec::with_capacity(width - seq.vision_len());
        tokens.extend_from_slice(&seq.text_ids);
        tokens.push(EMB_ID);
        tokens.resize(width - seq.vision_len(), PAD_ID);
        let input = TowerInput {
            patches: seq.vision.as_ref(),
            tokens: &tokens,
            valid_len: seq.total_len,
            out_row: seq.emb_index,
        };
        pool(&self.tower, store, &input, self.cfg.normalize, mode)
    }
}
