//! Contrastive loss, optimizer and learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{dot, Grads, ParamStore};
use crate::{Error, Result};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.07;

/// Query and candidate embeddings of one batch, row-major `batch × dim`.
/// Row `i` of `hc` is the positive of row `i` of `hq`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub hq: Vec<f64>,
    pub hc: Vec<f64>,
    pub dim: usize,
    pub tau: f64,
    /// Averages the query→candidate loss with the candidate→query loss.
    pub symmetric: bool,
}

impl ContrastiveBatch {
    pub fn new(hq: Vec<f64>, hc: Vec<f64>, dim: usize, tau: f64) -> Result<Self> {
        let b = Self {
            hq,
            hc,
            dim,
            tau,
            symmetric: false,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_rows(queries: &[Vec<f64>], candidates: &[Vec<f64>], tau: f64) -> Result<Self> {
        let dim = queries.first().map_or(0, Vec::len);
        if queries.iter().chain(candidates).any(|r| r.len() != dim) {
            return Err(Error::Shape("embedding rows differ in length".into()));
        }
        Self::new(queries.concat(), candidates.concat(), dim, tau)
    }

    pub fn size(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.hq.len() / self.dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hq.len() % self.dim != 0 || self.hq.len() != self.hc.len() {
            return Err(Error::Shape(format!(
                "query ({}) and candidate ({}) matrices do not share a {}-wide row layout",
                self.hq.len(),
                self.hc.len(),
                self.dim
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.size() < 2 {
            return Err(Error::Data(
                "contrastive batch needs at least two pairs".into(),
            ));
        }
        if !self.hq.iter().chain(&self.hc).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("contrastive batch embeddings".into()));
        }
        Ok(())
    }

    /// `S = Hq·Hcᵀ / τ`, row-major `batch × batch`.
    pub fn logits(&self) -> Vec<f64> {
        let b = self.size();
        let d = self.dim;
        let mut s = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                s[i * b + j] =
                    dot(&self.hq[i * d..(i + 1) * d], &self.hc[j * d..(j + 1) * d]) / self.tau;
            }
        }
        s
    }
}

fn transpose(s: &[f64], b: usize) -> Vec<f64> {
    let mut t = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            t[j * b + i] = s[i * b + j];
        }
    }
    t
}

/// Mean of `logsumexp(S_i) − S_ii` over rows, and `dS = (softmax(S) − I)/B`.
fn row_loss(s: &[f64], b: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut ds = vec![0.0; b * b];
    for i in 0..b {
        let row = &s[i * b..(i + 1) * b];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| libm::exp(v - m)).sum();
        let lse = m + libm::log(z);
        loss += lse - row[i];
        for j in 0..b {
            ds[i * b + j] = libm::exp(row[j] - lse) / b as f64;
        }
        ds[i * b + i] -= 1.0 / b as f64;
    }
    (loss / b as f64, ds)
}

/// Query→candidate InfoNCE over a square logit matrix.
pub fn info_nce_from_logits(logits: &[f64], batch: usize) -> Result<f64> {
    if batch < 2 || logits.len() != batch * batch {
        return Err(Error::Shape(format!(
            "need a {batch}×{batch} logit matrix with batch ≥ 2"
        )));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(row_loss(logits, batch).0)
}

/// `−(1/B)·Σ_i log softmax(S_i)_i`, stabilized by log-sum-exp.
pub fn info_nce(batch: &ContrastiveBatch) -> Result<f64> {
    Ok(info_nce_grad(batch)?.0)
}

/// Loss together with its gradients with respect to `hq` and `hc`.
pub fn info_nce_grad(batch: &ContrastiveBatch) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    batch.validate()?;
    let b = batch.size();
    let d = batch.dim;
    let s = batch.logits();
    let (mut loss, mut ds) = row_loss(&s, b);
    if batch.symmetric {
        let (l2, ds2) = row_loss(&transpose(&s, b), b);
        loss = 0.5 * (loss + l2);
        let ds2 = transpose(&ds2, b);
        ds.iter_mut()
            .zip(&ds2)
            .for_each(|(a, c)| *a = 0.5 * (*a + c));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("InfoNCE loss".into()));
    }
    let mut dq = vec![0.0; b * d];
    let mut dc = vec![0.0; b * d];
    for i in 0..b {
        for j in 0..b {
            let g = ds[i * b + j] / batch.tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                dq[i * d + k] += g * batch.hc[j * d + k];
                dc[j * d + k] += g * batch.hq[i * d + k];
            }
        }
    }
    Ok((loss, dq, dc))
}

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for every trainable tensor of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || -> Vec<Option<Vec<f64>>> {
            store
                .entries()
                .iter()
                .map(|e| e.trainable.then(|| vec![0.0; e.tensor.len()]))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay at rate `lr`.
pub fn optimizer_step(
    state: &mut OptimState,
    grads: &Grads,
    params: &mut ParamStore,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer state ({}) / grads ({}) / params ({}) disagree",
            state.m.len(),
            grads.len(),
            params.len()
        )));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    let c = state.cfg;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(c.beta1, t);
    let bc2 = 1.0 - libm::pow(c.beta2, t);
    for id in params.ids().collect::<Vec<_>>() {
        let (Some(g), Some(m), Some(v)) = (
            grads.get(id),
            state.m[id.index()].as_mut(),
            state.v[id.index()].as_mut(),
        ) else {
            continue;
        };
        if g.len() != m.len() {
            return Err(Error::Shape(format!(
                "gradient for {} has the wrong size",
                params.name(id)
            )));
        }
        let p = params.data_mut(id);
        for k in 0..g.len() {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= lr * (mhat / (libm::sqrt(vhat) + c.eps) + c.weight_decay * p[k]);
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn new(total_steps: u64) -> Self {
        Self {
            base_lr: 2e-4,
            warmup_frac: 0.03,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac {} outside (0, 1)",
                self.warmup_frac
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "base_lr {} must be finite and non-negative",
                self.base_lr
            )));
        }
        Ok(())
    }

    /// `⌈warmup_frac · total_steps⌉`, ignoring float noise in the product.
    pub fn warmup_steps(&self) -> u64 {
        let w = libm::ceil(self.warmup_frac * self.total_steps as f64 - 1e-9) as u64;
        w.clamp(1, self.total_steps)
    }
}

pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let w = cfg.warmup_steps();
    if step < w {
        return Ok(cfg.base_lr * step as f64 / w as f64);
    }
    let span = cfg.total_steps - w;
    if span == 0 {
        return Ok(if step == cfg.total_steps {
            0.0
        } else {
            cfg.base_lr
        });
    }
    let progress = (step - w) as f64 / span as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}
