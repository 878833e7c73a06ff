//! Token-stream assembly: vision block, item text, optional instruction and
//! the trailing `[Emb]` token, under the configured truncation budgets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::{Item, PatchGrid};
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EMB_ID: u32 = 3;

/// Names of the four reserved ids, in id order.
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "[Emb]"];

/// Word-level vocabulary. Token id = position; ids 0..4 are reserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the full token list, reserved entries included.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(|s| s.as_ref().to_string()).collect();
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r)
        {
            return Err(Error::Data(format!(
                "vocabulary must start with the reserved tokens {RESERVED_TOKENS:?}"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "vocabulary line {i}: invalid token {tok:?}"
                )));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Data(format!(
                    "vocabulary line {i}: duplicate token {tok:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by `words` (duplicates skipped).
    pub fn with_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: BTreeMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len() as u32);
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_id(&self) -> u32 {
        UNK_ID
    }
}

/// Whitespace split with unknown-token fallback.
pub fn tokenize(s: &str, vocab: &Vocabulary) -> Vec<u32> {
    s.split_whitespace()
        .map(|w| vocab.id(w).unwrap_or(vocab.unk_id()))
        .collect()
}

/// Truncation budgets for assembled sequences. The `[Emb]` slot is reserved
/// on top of these counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BudgetConfig {
    pub total_budget: usize,
    pub vision_tokens: usize,
    pub text_cap_with_image: usize,
    pub text_cap_text_only: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            total_budget: 384,
            vision_tokens: 256,
            text_cap_with_image: 128,
            text_cap_text_only: 378,
        }
    }
}

impl BudgetConfig {
    /// Small budget used by the desk-scale encoders.
    pub fn desk() -> Self {
        Self {
            total_budget: 32,
            vision_tokens: 16,
            text_cap_with_image: 16,
            text_cap_text_only: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vision_tokens + self.text_cap_with_image > self.total_budget {
            return Err(Error::Config(format!(
                "vision_tokens ({}) + text_cap_with_image ({}) exceeds total_budget ({})",
                self.vision_tokens, self.text_cap_with_image, self.total_budget
            )));
        }
        if self.text_cap_text_only >= self.total_budget {
            return Err(Error::Config(format!(
                "text_cap_text_only ({}) must be below total_budget ({})",
                self.text_cap_text_only, self.total_budget
            )));
        }
        Ok(())
    }

    /// Maximum assembled length, `[Emb]` included.
    pub fn max_len(&self) -> usize {
        self.total_budget + 1
    }

    fn text_cap(&self, vision: usize) -> usize {
        if vision > 0 {
            self.text_cap_with_image.min(self.total_budget - vision)
        } else {
            self.text_cap_text_only
        }
    }
}

/// Where the instruction goes relative to the item text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InstructionOrder {
    /// `[vision][text][instruction][Emb]`.
    #[default]
    AfterContent,
    /// `[vision][instruction][text][Emb]`.
    BeforeContent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Vision,
    Text,
    Instruction,
    Emb,
}

/// An assembled encoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub vision: Option<PatchGrid>,
    /// Text block after truncation: item text and instruction, `[Emb]` excluded.
    pub text_ids: Vec<u32>,
    /// One tag per position.
    pub segments: Vec<Segment>,
    pub emb_index: usize,
    pub total_len: usize,
}

impl InputSequence {
    pub fn vision_len(&self) -> usize {
        self.vision.as_ref().map_or(0, PatchGrid::num_patches)
    }

    /// Item tokens kept after truncation (instruction tokens excluded).
    pub fn item_text(&self) -> Vec<u32> {
        let v = self.vision_len();
        self.text_ids
            .iter()
            .zip(&self.segments[v..])
            .filter(|(_, s)| **s == Segment::Text)
            .map(|(t, _)| *t)
            .collect()
    }
}

/// Assembles `item` with an optional tokenized instruction.
pub fn assemble(
    item: &Item,
    instruction: Option<&[u32]>,
    budget: &BudgetConfig,
    order: InstructionOrder,
) -> Result<InputSequence> {
    item.validate()?;
    budget.validate()?;
    if let Some(instr) = instruction {
        if instr.is_empty() {
            return Err(Error::Data(
                "instruction must tokenize to at least one token".into(),
            ));
        }
    }
    let vision = item.image().cloned();
    let n_vision = vision.as_ref().map_or(0, PatchGrid::num_patches);
    if n_vision > budget.vision_tokens || n_vision > budget.total_budget {
        return Err(Error::Budget(format!(
            "vision block of {n_vision} tokens exceeds the vision budget of {}",
            budget.vision_tokens
        )));
    }

    let item_text: &[u32] = item.text().unwrap_or(&[]);
    let instr: &[u32] = instruction.unwrap_or(&[]);
    let (first, first_seg, second, second_seg) = match order {
        InstructionOrder::AfterContent => (item_text, Segment::Text, instr, Segment::Instruction),
        InstructionOrder::BeforeContent => (instr, Segment::Instruction, item_text, Segment::Text),
    };
    let cap = budget.text_cap(n_vision);
    let mut text_ids = Vec::with_capacity(cap.min(first.len() + second.len()));
    let mut segments = Vec::with_capacity(n_vision + cap + 1);
    segments.resize(n_vision, Segment::Vision);
    for (tok, seg) in first
        .iter()
        .map(|t| (*t, first_seg))
        .chain(second.iter().map(|t| (*t, second_seg)))
        .take(cap)
    {
        text_ids.push(tok);
        segments.push(seg);
    }
    segments.push(Segment::Emb);
    let total_len = segments.len();
    Ok(InputSequence {
        vision,
        text_ids,
        segments,
        emb_index: total_len - 1,
        total_len,
    })
}

/// Convenience wrapper that tokenizes the instruction string first.
pub fn assemble_with_text(
    item: &Item,
    instruction: Option<&str>,
    budget: &BudgetConfig,
    order: InstructionOrder,
    vocab: &Vocabulary,
) -> Result<InputSequence> {
    let instr = instruction.map(|s| tokenize(s, vocab));
    assemble(item, instr.as_deref(), budget, order)
}
