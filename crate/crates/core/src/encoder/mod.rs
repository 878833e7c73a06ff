//! Encoders that map items to unit-norm embeddings.
//!
//! [`OneTower`] runs a single transformer over the assembled
//! `[vision][text][instruction][Emb]` sequence and pools the `[Emb]` state.
//! [`TwoTower`] encodes text and images in separate towers and merges them
//! with a [`Combiner`] when an input carries both.

mod one_tower;
mod transformer;
mod two_tower;

use alloc::format;
use alloc::vec::Vec;

pub use one_tower::{OneTower, OneTowerConfig};
pub use transformer::{Tower, TowerCache, TowerConfig, TowerInput};
pub use two_tower::{Combiner, TwoTower, TwoTowerConfig};

use crate::assembly::InputSequence;
use crate::data::Item;
use crate::numerics::{l2_normalize, l2_normalize_backward, Grads, ParamStore};
use crate::{Error, Result, Rng};

/// Forward-pass mode. Adapter dropout is only active in training.
#[derive(Debug)]
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

/// A retrieval embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.0.iter().map(|v| v * v).sum())
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Pooled tower output with its optional L2 normalization.
#[derive(Debug, Clone)]
pub(crate) struct Pooled {
    pub cache: TowerCache,
    pub out: Vec<f64>,
    /// Norm of the raw state when normalization was applied.
    pub norm: Option<f64>,
}

pub(crate) fn pool(
    tower: &Tower,
    store: &ParamStore,
    input: &TowerInput,
    normalize: bool,
    mode: &mut Mode,
) -> Result<Pooled> {
    let (h, cache) = tower.forward(store, input, mode)?;
    if !normalize {
        return Ok(Pooled {
            cache,
            out: h,
            norm: None,
        });
    }
    let (out, norm) = l2_normalize(&h);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "{}pooled state has norm {norm}",
            tower.prefix()
        )));
    }
    Ok(Pooled {
        cache,
        out,
        norm: Some(norm),
    })
}

pub(crate) fn pool_backward(
    tower: &Tower,
    store: &ParamStore,
    p: &Pooled,
    d_out: &[f64],
    grads: &mut Grads,
) {
    match p.norm {
        Some(norm) => {
            let dh = l2_normalize_backward(d_out, &p.out, norm);
            tower.backward(store, &p.cache, &dh, grads);
        }
        None => tower.backward(store, &p.cache, d_out, grads),
    }
}

/// Backward state of one [`Encoder::forward`] call.
#[derive(Debug, Clone)]
pub struct Trace(pub(crate) TraceInner);

#[derive(Debug, Clone)]
pub(crate) enum TraceInner {
    One(Pooled),
    Two(two_tower::TwoTrace),
}

/// Either architecture behind one interface.
#[derive(Debug, Clone)]
pub enum Encoder {
    OneTower(OneTower),
    TwoTower(TwoTower),
}

impl Encoder {
    pub fn dim(&self) -> usize {
        match self {
            Encoder::OneTower(m) => m.config().tower.hidden_dim,
            Encoder::TwoTower(m) => m.config().text.hidden_dim,
        }
    }

    /// Embeds `item`, with an optional tokenized instruction.
    pub fn encode(
        &self,
        store: &ParamStore,
        item: &Item,
        instruction: Option<&[u32]>,
    ) -> Result<Embedding> {
        let (e, _) = self.forward(store, item, instruction, &mut Mode::Eval)?;
        Ok(Embedding(e))
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        item: &Item,
        instruction: Option<&[u32]>,
        mode: &mut Mode,
    ) -> Result<(Vec<f64>, Trace)> {
        match self {
            Encoder::OneTower(m) => {
                let seq = m.assemble(item, instruction)?;
                let p = m.forward_seq(store, &seq, seq.total_len, mode)?;
                Ok((p.out.clone(), Trace(TraceInner::One(p))))
            }
            Encoder::TwoTower(m) => {
                let (e, t) = m.forward(store, item, instruction, mode)?;
                Ok((e, Trace(TraceInner::Two(t))))
            }
        }
    }

    /// Accumulates parameter gradients for upstream gradient `d_emb`.
    pub fn backward(
        &self,
        store: &ParamStore,
        trace: &Trace,
        d_emb: &[f64],
        grads: &mut Grads,
    ) -> Result<()> {
        match (self, &trace.0) {
            (Encoder::OneTower(m), TraceInner::One(p)) => {
                pool_backward(m.tower(), store, p, d_emb, grads);
                Ok(())
            }
            (Encoder::TwoTower(m), TraceInner::Two(t)) => {
                m.backward(store, t, d_emb, grads);
                Ok(())
            }
            _ => Err(Error::Config(
                "trace does not belong to this encoder".into(),
            )),
        }
    }
}

/// Encodes assembled sequences padded to a common length; row `i` is the
/// embedding of `seqs[i]`.
pub fn encode_batch(
    model: &OneTower,
    store: &ParamStore,
    seqs: &[InputSequence],
) -> Result<Vec<Embedding>> {
    if seqs.is_empty() {
        return Err(Error::Data(
            "encode_batch needs at least one sequence".into(),
        ));
    }
    let width = seqs.iter().map(|s| s.total_len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            model
                .forward_seq(store, s, width, &mut Mode::Eval)
                .map(|p| Embedding(p.out))
        })
        .collect()
}
