//! Low-rank adapters on linear weights.
//!
//! For a base weight `W` (in×out) an adapter adds `A` (in×r) and `B`
//! (r×out), and the layer computes `x·W + b + (α/r)·(drop(x)·A)·B`. Adapter
//! tensors are named `lora.<weight>.a` and `lora.<weight>.b`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::numerics::{matmul, LoraLink, ParamStore, Tensor};
use crate::{rng_from_seed, Error, Result};

/// Name prefix reserved for adapter tensors.
pub const ADAPTER_PREFIX: &str = "lora.";

const DEFAULT_TARGET_SUFFIXES: [&str; 8] = [
    ".attn.q.w",
    ".attn.k.w",
    ".attn.v.w",
    ".attn.o.w",
    ".ffn.up.w",
    ".ffn.down.w",
    "combiner.fc1.w",
    "combiner.fc2.w",
];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: BTreeSet<String>,
}

impl AdapterSpec {
    pub fn new(rank: usize, alpha: f64, dropout: f64, targets: BTreeSet<String>) -> Self {
        Self {
            rank,
            alpha,
            dropout,
            targets,
        }
    }

    /// Stage-one preset at full scale: r = 128, α = 256, dropout 0.05.
    pub fn stage1(targets: BTreeSet<String>) -> Self {
        Self::new(128, 256.0, 0.05, targets)
    }

    /// Stage-two preset at full scale: r = 256, α = 512, dropout 0.3.
    pub fn stage2(targets: BTreeSet<String>) -> Self {
        Self::new(256, 512.0, 0.3, targets)
    }

    /// Stage-one preset with the rank scaled from a 2048-wide backbone to
    /// the 64-wide desk encoder.
    pub fn desk_stage1(targets: BTreeSet<String>) -> Self {
        Self::new(4, 8.0, 0.05, targets)
    }

    pub fn desk_stage2(targets: BTreeSet<String>) -> Self {
        Self::new(8, 16.0, 0.3, targets)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "adapter dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("adapter alpha must be finite".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("adapter spec has no targets".into()));
        }
        for name in &self.targets {
            let t = store
                .by_name(name)
                .map_err(|_| Error::Config(format!("adapter target {name} not found")))?;
            t.dims2()
                .map_err(|_| Error::Config(format!("adapter target {name} is not a matrix")))?;
            if name.starts_with(ADAPTER_PREFIX) {
                return Err(Error::Config(format!(
                    "adapter target {name} is itself an adapter"
                )));
            }
        }
        Ok(())
    }
}

/// Every attention, feed-forward and fusion-MLP weight matrix in `store`.
pub fn default_targets(store: &ParamStore) -> BTreeSet<String> {
    store
        .entries()
        .iter()
        .filter(|e| !e.name.starts_with(ADAPTER_PREFIX))
        .filter(|e| DEFAULT_TARGET_SUFFIXES.iter().any(|s| e.name.ends_with(s)))
        .map(|e| e.name.clone())
        .collect()
}

/// Returns a copy of `store` with every tensor frozen and a fresh trainable
/// adapter on each target. `B` starts at zero, so outputs are unchanged.
pub fn attach(store: &ParamStore, spec: &AdapterSpec, seed: u64) -> Result<ParamStore> {
    if store.has_adapters() {
        return Err(Error::Config(
            "store already carries adapters; merge them first".into(),
        ));
    }
    spec.validate(store)?;
    let mut out = store.clone();
    out.freeze_all();
    let mut rng = rng_from_seed(seed);
    for name in &spec.targets {
        let w = out.id(name)?;
        let (din, dout) = out.get(w).dims2()?;
        let bound = 1.0 / libm::sqrt(din as f64);
        let mut init = Tensor::uniform(&[din, spec.rank], bound, &mut rng);
        init.data_mut()
            .iter_mut()
            .for_each(|v| *v = *v as f32 as f64);
        let a = out.insert(&format!("{ADAPTER_PREFIX}{name}.a"), init, true)?;
        let b = out.insert(
            &format!("{ADAPTER_PREFIX}{name}.b"),
            Tensor::zeros(&[spec.rank, dout]),
            true,
        )?;
        out.link_lora(
            w,
            LoraLink {
                a,
                b,
                scale: spec.scale(),
                dropout: spec.dropout,
            },
        );
    }
    Ok(out)
}

/// Folds each adapter into its base weight, `W += (α/r)·A·B`, and drops the
/// adapter tensors. Trainability of the remaining tensors is kept.
pub fn merge(store: &ParamStore) -> ParamStore {
    let mut merged = store.without(|e| e.name.starts_with(ADAPTER_PREFIX));
    for (w, link) in store.lora_links() {
        let (din, dout) = store.get(w).dims2().expect("adapter targets are matrices");
        let r = store.get(link.a).len() / din;
        let ab = matmul(store.data(link.a), din, r, store.data(link.b), dout);
        let id = merged.id(store.name(w)).expect("base weight kept");
        for (x, d) in merged.data_mut(id).iter_mut().zip(&ab) {
            *x += link.scale * d;
        }
    }
    merged
}

/// Adapter re-linking after a checkpoint load: records every
/// `lora.<weight>.a`/`.b` pair in `store` as an adapter on `<weight>`.
pub fn relink(store: &mut ParamStore, alpha_over_rank: f64, dropout: f64) -> Result<usize> {
    let names: Vec<String> = store
        .entries()
        .iter()
        .filter_map(|e| {
            e.name
                .strip_prefix(ADAPTER_PREFIX)?
                .strip_suffix(".a")
                .map(String::from)
        })
        .collect();
    for base in &names {
        let w = store.id(base)?;
        let a = store.id(&format!("{ADAPTER_PREFIX}{base}.a"))?;
        let b = store.id(&format!("{ADAPTER_PREFIX}{base}.b"))?;
        let (din, dout) = store.get(w).dims2()?;
        let (ain, r) = store.get(a).dims2()?;
        let (br, bout) = store.get(b).dims2()?;
        if ain != din || br != r || bout != dout {
            return Err(Error::Shape(format!(
                "adapter on {base} has mismatched shapes"
            )));
        }
        store.link_lora(
            w,
            LoraLink {
                a,
                b,
                scale: alpha_over_rank,
                dropout,
            },
        );
    }
    Ok(names.len())
}
