use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::transformer::{Linear, LoraCache};
use super::{pool, pool_backward, Mode, Pooled, Tower, TowerConfig, TowerInput};
use crate::assembly::{
    assemble, BudgetConfig, InputSequence, InstructionOrder, EMB_ID, RESERVED_TOKENS,
};
use crate::data::{Item, PatchGrid};
use crate::numerics::{
    gelu, gelu_grad, l2_normalize, l2_normalize_backward, matmul_acc, matmul_at_acc, matmul_bt_acc,
    Grads, ParamId, ParamStore, Tensor,
};
use crate::{Error, Result, Rng};

/// How a two-tower model merges an image embedding with a text embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Combiner {
    /// Inputs carrying both modalities are rejected.
    None,
    /// `normalize(w·h_i + (1−w)·h_t)` with a scalar `w`.
    ScoreFusion,
    /// `normalize(z·S + fc2(gelu(fc1(z))))` over `z = [h_i; h_t]`.
    FeatureFusion,
}

impl Combiner {
    pub fn as_str(self) -> &'static str {
        match self {
            Combiner::None => "none",
            Combiner::ScoreFusion => "score_fusion",
            Combiner::FeatureFusion => "feature_fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Combiner::None),
            "score_fusion" => Ok(Combiner::ScoreFusion),
            "feature_fusion" => Ok(Combiner::FeatureFusion),
            other => Err(Error::Config(format!("unknown combiner {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TwoTowerConfig {
    pub text: TowerConfig,
    pub image: TowerConfig,
    pub combiner: Combiner,
    /// Hidden width of the feature-fusion MLP.
    pub fusion_hidden: usize,
    pub budget: BudgetConfig,
    pub order: InstructionOrder,
    pub normalize: bool,
}

impl TwoTowerConfig {
    /// One layer per tower, so both towers together hold as many transformer
    /// blocks as the desk one-tower model.
    pub fn desk(vocab_size: usize, patch_dim: usize, combiner: Combiner) -> Self {
        let budget = BudgetConfig::desk();
        let base = TowerConfig {
            layers: 1,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 128,
            vocab_size,
            patch_dim: 0,
            max_len: budget.max_len(),
            causal: false,
        };
        Self {
            text: base,
            image: TowerConfig {
                vocab_size: RESERVED_TOKENS.len(),
                patch_dim,
                max_len: budget.vision_tokens + 1,
                ..base
            },
            combiner,
            fusion_hidden: 128,
            budget,
            order: InstructionOrder::AfterContent,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.image.validate()?;
        self.budget.validate()?;
        if self.text.hidden_dim != self.image.hidden_dim {
            return Err(Error::Config(format!(
                "towers project to different widths: text {} vs image {}",
                self.text.hidden_dim, self.image.hidden_dim
            )));
        }
        if self.image.patch_dim == 0 {
            return Err(Error::Config("image tower needs a patch embedder".into()));
        }
        if self.combiner == Combiner::FeatureFusion && self.fusion_hidden == 0 {
            return Err(Error::Config("fusion_hidden must be positive".into()));
        }
        if self.text.max_len < self.budget.text_cap_text_only + 1
            || self.image.max_len < self.budget.vision_tokens + 1
        {
            return Err(Error::Config(
                "tower max_len below the truncation budget".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum CombinerIds {
    None,
    Score {
        w: ParamId,
    },
    Feature {
        skip: ParamId,
        fc1: Linear,
        fc2: Linear,
    },
}

#[derive(Debug, Clone)]
pub(crate) enum TwoTrace {
    Text(Pooled),
    Image(Pooled),
    Fused {
        image: Pooled,
        text: Pooled,
        comb: CombCache,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct CombCache {
    /// `[h_i; h_t]`.
    z: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    lora1: Option<LoraCache>,
    lora2: Option<LoraCache>,
    out: Vec<f64>,
    norm: Option<f64>,
}

/// Separate text and image towers with a late-fusion combiner.
#[derive(Debug, Clone)]
pub struct TwoTower {
    cfg: TwoTowerConfig,
    text: Tower,
    image: Tower,
    comb: CombinerIds,
}

const TEXT_PREFIX: &str = "text.";
const IMAGE_PREFIX: &str = "image.";

impl TwoTower {
    pub fn init(cfg: TwoTowerConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Tower::init(TEXT_PREFIX, cfg.text, store, rng)?;
        Tower::init(IMAGE_PREFIX, cfg.image, store, rng)?;
        let d = cfg.text.hidden_dim;
        match cfg.combiner {
            Combiner::None => {}
            Combiner::ScoreFusion => {
                store.insert("combiner.w", Tensor::filled(&[1], 0.5), true)?;
            }
            Combiner::FeatureFusion => {
                let h = cfg.fusion_hidden;
                let mut skip = Tensor::zeros(&[2 * d, d]);
                for i in 0..d {
                    skip.data_mut()[i * d + i] = 0.5;
                    skip.data_mut()[(d + i) * d + i] = 0.5;
                }
                store.insert("combiner.skip", skip, true)?;
                Linear::create(store, "combiner.fc1", 2 * d, h, rng)?;
                Linear::create(store, "combiner.fc2", h, d, rng)?;
            }
        }
        store.snap_to_f32();
        Self::bind(cfg, store)
    }

    pub fn bind(cfg: TwoTowerConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let text = Tower::bind(TEXT_PREFIX, cfg.text, store)?;
        let image = Tower::bind(IMAGE_PREFIX, cfg.image, store)?;
        let d = cfg.text.hidden_dim;
        let h = cfg.fusion_hidden;
        let check = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(name)?;
            if store.get(id).shape() != shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let comb = match cfg.combiner {
            Combiner::None => CombinerIds::None,
            Combiner::ScoreFusion => CombinerIds::Score {
                w: check("combiner.w", &[1])?,
            },
            Combiner::FeatureFusion => CombinerIds::Feature {
                skip: check("combiner.skip", &[2 * d, d])?,
                fc1: Linear::bind(store, "combiner.fc1", 2 * d, h)?,
                fc2: Linear::bind(store, "combiner.fc2", h, d)?,
            },
        };
        Ok(Self {
            cfg,
            text,
            image,
            comb,
        })
    }

    pub fn config(&self) -> &TwoTowerConfig {
        &self.cfg
    }

    pub fn text_tower(&self) -> &Tower {
        &self.text
    }

    pub fn image_tower(&self) -> &Tower {
        &self.image
    }

    fn text_pooled(
        &self,
        store: &ParamStore,
        tokens: &[u32],
        instruction: Option<&[u32]>,
        mode: &mut Mode,
    ) -> Result<Pooled> {
        let seq = assemble(
            &Item::Text(tokens.to_vec()),
            instruction,
            &self.cfg.budget,
            self.cfg.order,
        )?;
        self.run_text(store, &seq, mode)
    }

    fn run_text(&self, store: &ParamStore, seq: &InputSequence, mode: &mut Mode) -> Result<Pooled> {
        let mut tokens = seq.text_ids.clone();
        tokens.push(EMB_ID);
        let input = TowerInput {
            patches: None,
            tokens: &tokens,
            valid_len: seq.total_len,
            out_row: seq.emb_index,
        };
        pool(&self.text, store, &input, self.cfg.normalize, mode)
    }

    fn image_pooled(
        &self,
        store: &ParamStore,
        grid: &PatchGrid,
        mode: &mut Mode,
    ) -> Result<Pooled> {
        let n = grid.num_patches();
        if n > self.cfg.budget.vision_tokens {
            return Err(Error::Budget(format!(
                "vision block of {n} tokens exceeds the vision budget of {}",
                self.cfg.budget.vision_tokens
            )));
        }
        let tokens = [EMB_ID];
        let input = TowerInput {
            patches: Some(grid),
            tokens: &tokens,
            valid_len: n + 1,
            out_row: n,
        };
        pool(&self.image, store, &input, self.cfg.normalize, mode)
    }

    /// Embedding and backward state for `item`.
    pub(crate) fn forward(
        &self,
        store: &ParamStore,
        item: &Item,
        instruction: Option<&[u32]>,
        mode: &mut Mode,
    ) -> Result<(Vec<f64>, TwoTrace)> {
        item.validate()?;
        let (grid, text) = match (item, instruction) {
            (Item::Text(t), _) => {
                let p = self.text_pooled(store, t, instruction, mode)?;
                return Ok((p.out.clone(), TwoTrace::Text(p)));
            }
            (Item::Image(g), None) => {
                let p = self.image_pooled(store, g, mode)?;
                return Ok((p.out.clone(), TwoTrace::Image(p)));
            }
            (Item::Image(g), Some(instr)) => (g, (instr, None)),
            (Item::Pair { image, text }, _) => (image, (text.as_slice(), instruction)),
        };
        if matches!(self.comb, CombinerIds::None) {
            return Err(Error::Config(format!(
                "two-tower model without a combiner cannot encode {} inputs with both modalities",
                item.modality().as_str()
            )));
        }
        let image = self.image_pooled(store, grid, mode)?;
        let text = self.text_pooled(store, text.0, text.1, mode)?;
        let comb = self.combine(store, &image.out, &text.out, mode)?;
        Ok((comb.out.clone(), TwoTrace::Fused { image, text, comb }))
    }

    fn combine(
        &self,
        store: &ParamStore,
        hi: &[f64],
        ht: &[f64],
        mode: &mut Mode,
    ) -> Result<CombCache> {
        let d = hi.len();
        let mut z = Vec::with_capacity(2 * d);
        z.extend_from_slice(hi);
        z.extend_from_slice(ht);
        let (raw, pre, act, lora1, lora2) = match &self.comb {
            CombinerIds::None => unreachable!("checked by the caller"),
            CombinerIds::Score { w } => {
                let w = store.data(*w)[0];
                let raw = hi
                    .iter()
                    .zip(ht)
                    .map(|(a, b)| w * a + (1.0 - w) * b)
                    .collect();
                (raw, Vec::new(), Vec::new(), None, None)
            }
            CombinerIds::Feature { skip, fc1, fc2 } => {
                let (pre, lora1) = fc1.forward(store, &z, 1, mode);
                let act: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
                let (mut raw, lora2) = fc2.forward(store, &act, 1, mode);
                matmul_acc(&mut raw, &z, 1, 2 * d, store.data(*skip), d);
                (raw, pre, act, lora1, lora2)
            }
        };
        if !self.cfg.normalize {
            return Ok(CombCache {
                z,
                pre,
                act,
                lora1,
                lora2,
                out: raw,
                norm: None,
            });
        }
        let (out, norm) = l2_normalize(&raw);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "combined embedding has norm {norm}"
            )));
        }
        Ok(CombCache {
            z,
            pre,
            act,
            lora1,
            lora2,
            out,
            norm: Some(norm),
        })
    }

    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        trace: &TwoTrace,
        d_emb: &[f64],
        grads: &mut Grads,
    ) {
        let (image, text, comb) = match trace {
            TwoTrace::Text(p) => return pool_backward(&self.text, store, p, d_emb, grads),
            TwoTrace::Image(p) => return pool_backward(&self.image, store, p, d_emb, grads),
            TwoTrace::Fused { image, text, comb } => (image, text, comb),
        };
        let d = image.out.len();
        let draw = match comb.norm {
            Some(n) => l2_normalize_backward(d_emb, &comb.out, n),
            None => d_emb.to_vec(),
        };
        let mut dz = vec![0.0; 2 * d];
        match &self.comb {
            CombinerIds::None => unreachable!("fused traces need a combiner"),
            CombinerIds::Score { w } => {
                let wv = store.data(*w)[0];
                if let Some(gw) = grads.get_mut(*w) {
                    gw[0] += (0..d)
                        .map(|j| draw[j] * (comb.z[j] - comb.z[d + j]))
                        .sum::<f64>();
                }
                for j in 0..d {
                    dz[j] = wv * draw[j];
                    dz[d + j] = (1.0 - wv) * draw[j];
                }
            }
            CombinerIds::Feature { skip, fc1, fc2 } => {
                if let Some(g) = grads.get_mut(*skip) {
                    matmul_at_acc(g, &comb.z, 1, 2 * d, &draw, d);
                }
                matmul_bt_acc(&mut dz, &draw, 1, d, store.data(*skip), 2 * d);
                let dact = fc2.backward(store, &comb.act, &comb.lora2, &draw, 1, grads);
                let dpre: Vec<f64> = dact
                    .iter()
                    .zip(&comb.pre)
                    .map(|(g, p)| g * gelu_grad(*p))
                    .collect();
                let dzm = fc1.backward(store, &comb.z, &comb.lora1, &dpre, 1, grads);
                dz.iter_mut().zip(&dzm).for_each(|(a, b)| *a += b);
            }
        }
        pool_backward(&self.image, store, image, &dz[..d], grads);
        pool_backward(&self.text, store, text, &dz[d..], grads);
    }
}
