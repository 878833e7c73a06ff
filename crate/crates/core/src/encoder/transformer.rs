//! Pre-norm transformer tower with explicit backward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::Mode;
use crate::assembly::RESERVED_TOKENS;
use crate::data::PatchGrid;
use crate::numerics::{
    add_bias, attention, attention_backward, bias_grad_acc, gelu, gelu_grad, layernorm_rows,
    layernorm_rows_backward, matmul, matmul_acc, matmul_at_acc, matmul_bt_acc, AttentionShape,
    Grads, LayerNormCache, ParamId, ParamStore, Tensor,
};
use crate::{Error, Result, Rng};

/// Shape of one transformer tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TowerConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Rows of the token embedding table. Image-only towers still need the
    /// reserved ids for `[Emb]`.
    pub vocab_size: usize,
    /// Patch feature width; 0 disables the patch embedder.
    pub patch_dim: usize,
    pub max_len: usize,
    pub causal: bool,
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.vocab_size < RESERVED_TOKENS.len() {
            return Err(Error::Config(format!(
                "vocab_size {} below the reserved ids",
                self.vocab_size
            )));
        }
        if self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("ffn_dim and max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

/// Saved state of one linear call that carries an adapter.
#[derive(Debug, Clone)]
pub(crate) struct LoraCache {
    /// Dropout multipliers (0 or 1/(1-p)) per input entry; `None` without dropout.
    keep: Option<Vec<f64>>,
    /// `drop(x) · A`, n×r.
    u: Vec<f64>,
}

impl Linear {
    pub(crate) fn create(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = 1.0 / libm::sqrt(din as f64);
        let w = store.insert(
            &format!("{name}.w"),
            Tensor::randn(&[din, dout], std, rng),
            true,
        )?;
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[dout]), true)?;
        Ok(Self { w, b, din, dout })
    }

    pub(crate) fn bind(store: &ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        if store.get(w).shape() != [din, dout] || store.get(b).shape() != [dout] {
            return Err(Error::Shape(format!(
                "{name}: expected [{din}, {dout}], found {:?}",
                store.get(w).shape()
            )));
        }
        Ok(Self { w, b, din, dout })
    }

    pub(crate) fn forward(
        &self,
        store: &ParamStore,
        x: &[f64],
        n: usize,
        mode: &mut Mode,
    ) -> (Vec<f64>, Option<LoraCache>) {
        let mut y = matmul(x, n, self.din, store.data(self.w), self.dout);
        add_bias(&mut y, store.data(self.b));
        let Some(link) = store.lora(self.w) else {
            return (y, None);
        };
        let a = store.data(link.a);
        let b = store.data(link.b);
        let r = a.len() / self.din;
        let keep = match mode {
            Mode::Train(rng) if link.dropout > 0.0 => {
                let s = 1.0 / (1.0 - link.dropout);
                Some(
                    (0..x.len())
                        .map(|_| {
                            if rng.random::<f64>() < link.dropout {
                                0.0
                            } else {
                                s
                            }
                        })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let u = match &keep {
            Some(k) => {
                let xd: Vec<f64> = x.iter().zip(k).map(|(v, m)| v * m).collect();
                matmul(&xd, n, self.din, a, r)
            }
            None => matmul(x, n, self.din, a, r),
        };
        let us: Vec<f64> = u.iter().map(|v| v * link.scale).collect();
        matmul_acc(&mut y, &us, n, r, b, self.dout);
        (y, Some(LoraCache { keep, u }))
    }

    /// Returns the input gradient; parameter gradients accumulate into `grads`.
    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        cache: &Option<LoraCache>,
        dy: &[f64],
        n: usize,
        grads: &mut Grads,
    ) -> Vec<f64> {
        let mut dx = vec![0.0; n * self.din];
        matmul_bt_acc(&mut dx, dy, n, self.dout, store.data(self.w), self.din);
        if let Some(dw) = grads.get_mut(self.w) {
            matmul_at_acc(dw, x, n, self.din, dy, self.dout);
        }
        if let Some(db) = grads.get_mut(self.b) {
            bias_grad_acc(db, dy);
        }
        if let (Some(link), Some(lc)) = (store.lora(self.w), cache) {
            let a = store.data(link.a);
            let b = store.data(link.b);
            let r = a.len() / self.din;
            if let Some(gb) = grads.get_mut(link.b) {
                let us: Vec<f64> = lc.u.iter().map(|v| v * link.scale).collect();
                matmul_at_acc(gb, &us, n, r, dy, self.dout);
            }
            let mut du = vec![0.0; n * r];
            matmul_bt_acc(&mut du, dy, n, self.dout, b, r);
            du.iter_mut().for_each(|v| *v *= link.scale);
            let xd: Option<Vec<f64>> = lc
                .keep
                .as_ref()
                .map(|k| x.iter().zip(k).map(|(v, m)| v * m).collect());
            if let Some(ga) = grads.get_mut(link.a) {
                matmul_at_acc(ga, xd.as_deref().unwrap_or(x), n, self.din, &du, r);
            }
            let mut dxd = vec![0.0; n * self.din];
            matmul_bt_acc(&mut dxd, &du, n, r, a, self.din);
            match &lc.keep {
                Some(k) => dx
                    .iter_mut()
                    .zip(dxd.iter().zip(k))
                    .for_each(|(d, (g, m))| *d += g * m),
                None => dx.iter_mut().zip(&dxd).for_each(|(d, g)| *d += g),
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2_g: ParamId,
    ln2_b: ParamId,
    up: Linear,
    down: Linear,
}

/// A stack of pre-norm blocks over token, patch and position embeddings,
/// followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Tower {
    cfg: TowerConfig,
    prefix: String,
    tok: ParamId,
    patch: Option<Linear>,
    pos: ParamId,
    layers: Vec<Layer>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// One tower call: patches occupy the first positions, then `tokens`.
#[derive(Debug, Clone, Copy)]
pub struct TowerInput<'a> {
    pub patches: Option<&'a PatchGrid>,
    pub tokens: &'a [u32],
    /// Keys at or beyond this position are masked (padding).
    pub valid_len: usize,
    /// Position whose final hidden state is returned.
    pub out_row: usize,
}

#[derive(Debug, Clone)]
struct LayerCache {
    rows: Vec<usize>,
    ln1: LayerNormCache,
    h1: Vec<f64>,
    hq: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    q_lc: Option<LoraCache>,
    k_lc: Option<LoraCache>,
    v_lc: Option<LoraCache>,
    probs: Vec<f64>,
    att: Vec<f64>,
    o_lc: Option<LoraCache>,
    ln2: LayerNormCache,
    h2: Vec<f64>,
    up_lc: Option<LoraCache>,
    pre: Vec<f64>,
    act: Vec<f64>,
    down_lc: Option<LoraCache>,
    /// Rows of the layer input that feed the next layer.
    in_len: usize,
}

/// Everything the backward pass needs from one tower forward.
#[derive(Debug, Clone)]
pub struct TowerCache {
    len: usize,
    n_vision: usize,
    tokens: Vec<u32>,
    patch_in: Vec<f64>,
    patch_lc: Option<LoraCache>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    shape: AttentionShape,
    out_row: usize,
}

fn gather_rows(x: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

fn layer_names(prefix: &str, i: usize) -> String {
    format!("{prefix}layers.{i}")
}

impl Tower {
    /// Creates the tower's parameters under `prefix` with random values.
    pub fn init(
        prefix: &str,
        cfg: TowerConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        store.insert(
            &format!("{prefix}tok_emb"),
            Tensor::randn(&[cfg.vocab_size, d], 1.0, rng),
            true,
        )?;
        if cfg.patch_dim > 0 {
            let w = Tensor::randn(&[cfg.patch_dim, d], 1.0, rng);
            store.insert(&format!("{prefix}patch.w"), w, true)?;
            store.insert(&format!("{prefix}patch.b"), Tensor::zeros(&[d]), true)?;
        }
        store.insert(
            &format!("{prefix}pos_emb"),
            Tensor::randn(&[cfg.max_len, d], 0.5, rng),
            true,
        )?;
        for i in 0..cfg.layers {
            let p = layer_names(prefix, i);
            store.insert(&format!("{p}.ln1.g"), Tensor::filled(&[d], 1.0), true)?;
            store.insert(&format!("{p}.ln1.b"), Tensor::zeros(&[d]), true)?;
            for name in ["q", "k", "v", "o"] {
                Linear::create(store, &format!("{p}.attn.{name}"), d, d, rng)?;
            }
            store.insert(&format!("{p}.ln2.g"), Tensor::filled(&[d], 1.0), true)?;
            store.insert(&format!("{p}.ln2.b"), Tensor::zeros(&[d]), true)?;
            Linear::create(store, &format!("{p}.ffn.up"), d, cfg.ffn_dim, rng)?;
            Linear::create(store, &format!("{p}.ffn.down"), cfg.ffn_dim, d, rng)?;
        }
        store.insert(
            &format!("{prefix}final_ln.g"),
            Tensor::filled(&[d], 1.0),
            true,
        )?;
        store.insert(&format!("{prefix}final_ln.b"), Tensor::zeros(&[d]), true)?;
        Self::bind(prefix, cfg, store)
    }

    /// Resolves an existing tower's parameters, checking their shapes.
    pub fn bind(prefix: &str, cfg: TowerConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let check = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(&name)?;
            if store.get(id).shape() != shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let tok = check(format!("{prefix}tok_emb"), &[cfg.vocab_size, d])?;
        let patch = if cfg.patch_dim > 0 {
            Some(Linear::bind(
                store,
                &format!("{prefix}patch"),
                cfg.patch_dim,
                d,
            )?)
        } else {
            None
        };
        let pos = check(format!("{prefix}pos_emb"), &[cfg.max_len, d])?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = layer_names(prefix, i);
            layers.push(Layer {
                ln1_g: check(format!("{p}.ln1.g"), &[d])?,
                ln1_b: check(format!("{p}.ln1.b"), &[d])?,
                q: Linear::bind(store, &format!("{p}.attn.q"), d, d)?,
                k: Linear::bind(store, &format!("{p}.attn.k"), d, d)?,
                v: Linear::bind(store, &format!("{p}.attn.v"), d, d)?,
                o: Linear::bind(store, &format!("{p}.attn.o"), d, d)?,
                ln2_g: check(format!("{p}.ln2.g"), &[d])?,
                ln2_b: check(format!("{p}.ln2.b"), &[d])?,
                up: Linear::bind(store, &format!("{p}.ffn.up"), d, cfg.ffn_dim)?,
                down: Linear::bind(store, &format!("{p}.ffn.down"), cfg.ffn_dim, d)?,
            });
        }
        let lnf_g = check(format!("{prefix}final_ln.g"), &[d])?;
        let lnf_b = check(format!("{prefix}final_ln.b"), &[d])?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
            tok,
            patch,
            pos,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    pub fn config(&self) -> &TowerConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Final-layer hidden state at `input.out_row` (after the final norm).
    pub fn forward(
        &self,
        store: &ParamStore,
        input: &TowerInput,
        mode: &mut Mode,
    ) -> Result<(Vec<f64>, TowerCache)> {
        let d = self.cfg.hidden_dim;
        let n_vision = input.patches.map_or(0, PatchGrid::num_patches);
        let len = n_vision + input.tokens.len();
        if len > self.cfg.max_len {
            return Err(Error::Budget(format!(
                "sequence of {len} tokens exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        if input.valid_len == 0 || input.valid_len > len || input.out_row >= input.valid_len {
            return Err(Error::Shape(format!(
                "valid_len {} / out_row {} inconsistent with length {len}",
                input.valid_len, input.out_row
            )));
        }
        let vocab = self.cfg.vocab_size as u32;
        if let Some(t) = input.tokens.iter().find(|t| **t >= vocab) {
            return Err(Error::Data(format!(
                "token id {t} outside vocabulary of {vocab}"
            )));
        }

        let mut x = vec![0.0; len * d];
        let mut patch_in = Vec::new();
        let mut patch_lc = None;
        if let Some(grid) = input.patches {
            let lin = self
                .patch
                .as_ref()
                .ok_or_else(|| Error::Data("tower has no patch embedder".into()))?;
            if grid.patch_dim() != lin.din {
                return Err(Error::Shape(format!(
                    "patch_dim {} != {}",
                    grid.patch_dim(),
                    lin.din
                )));
            }
            patch_in = grid.data().iter().map(|v| *v as f64).collect();
            let (pv, lc) = lin.forward(store, &patch_in, n_vision, mode);
            x[..n_vision * d].copy_from_slice(&pv);
            patch_lc = lc;
        }
        let tok = store.data(self.tok);
        for (i, t) in input.tokens.iter().enumerate() {
            let row = (n_vision + i) * d;
            x[row..row + d].copy_from_slice(&tok[*t as usize * d..(*t as usize + 1) * d]);
        }
        let pos = store.data(self.pos);
        for (a, p) in x.iter_mut().zip(pos) {
            *a += p;
        }

        let shape = AttentionShape {
            heads: self.cfg.heads,
            head_dim: self.cfg.head_dim(),
            keys: len,
            valid_len: input.valid_len,
            causal: self.cfg.causal,
        };
        let all_rows: Vec<usize> = (0..len).collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let rows = if li + 1 == self.layers.len() {
                vec![input.out_row]
            } else {
                all_rows.clone()
            };
            let (out, cache) = self.layer_forward(store, layer, &x, len, rows, &shape, mode);
            x = out;
            caches.push(cache);
        }
        let last = if self.layers.is_empty() {
            gather_rows(&x, d, &[input.out_row])
        } else {
            x
        };
        let (out, lnf) = layernorm_rows(&last, d, store.data(self.lnf_g), store.data(self.lnf_b));
        Ok((
            out,
            TowerCache {
                len,
                n_vision,
                tokens: input.tokens.to_vec(),
                patch_in,
                patch_lc,
                layers: caches,
                lnf,
                shape,
                out_row: input.out_row,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        store: &ParamStore,
        layer: &Layer,
        x: &[f64],
        len: usize,
        rows: Vec<usize>,
        shape: &AttentionShape,
        mode: &mut Mode,
    ) -> (Vec<f64>, LayerCache) {
        let d = self.cfg.hidden_dim;
        let nq = rows.len();
        let (h1, ln1) = layernorm_rows(x, d, store.data(layer.ln1_g), store.data(layer.ln1_b));
        let hq = if nq == len {
            h1.clone()
        } else {
            gather_rows(&h1, d, &rows)
        };
        let (q, q_lc) = layer.q.forward(store, &hq, nq, mode);
        let (k, k_lc) = layer.k.forward(store, &h1, len, mode);
        let (v, v_lc) = layer.v.forward(store, &h1, len, mode);
        let (att, probs) = attention(&q, &k, &v, &rows, shape);
        let (a, o_lc) = layer.o.forward(store, &att, nq, mode);
        let mut xm = if nq == len {
            x.to_vec()
        } else {
            gather_rows(x, d, &rows)
        };
        xm.iter_mut().zip(&a).for_each(|(s, v)| *s += v);
        let (h2, ln2) = layernorm_rows(&xm, d, store.data(layer.ln2_g), store.data(layer.ln2_b));
        let (pre, up_lc) = layer.up.forward(store, &h2, nq, mode);
        let act: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
        let (f, down_lc) = layer.down.forward(store, &act, nq, mode);
        xm.iter_mut().zip(&f).for_each(|(s, v)| *s += v);
        let cache = LayerCache {
            rows,
            ln1,
            h1,
            hq,
            q,
            k,
            v,
            q_lc,
            k_lc,
            v_lc,
            probs,
            att,
            o_lc,
            ln2,
            h2,
            up_lc,
            pre,
            act,
            down_lc,
            in_len: len,
        };
        (xm, cache)
    }

    /// Accumulates parameter gradients for upstream gradient `dout` on the
    /// returned hidden state.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &TowerCache,
        dout: &[f64],
        grads: &mut Grads,
    ) {
        let d = self.cfg.hidden_dim;
        let lnf_g = store.data(self.lnf_g);
        let mut dx = vec![0.0; d];
        {
            let (mut dg, mut db) = split_two(grads, self.lnf_g, self.lnf_b);
            layernorm_rows_backward(
                dout,
                &cache.lnf,
                lnf_g,
                &mut dx,
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            restore_two(grads, self.lnf_g, self.lnf_b, dg, db);
        }
        if self.layers.is_empty() {
            let mut full = vec![0.0; cache.len * d];
            full[cache.out_row * d..(cache.out_row + 1) * d].copy_from_slice(&dx);
            dx = full;
        }
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(store, layer, lc, &dx, &cache.shape, grads);
        }
        self.embed_backward(store, cache, &dx, grads);
    }

    fn layer_backward(
        &self,
        store: &ParamStore,
        layer: &Layer,
        c: &LayerCache,
        dout: &[f64],
        shape: &AttentionShape,
        grads: &mut Grads,
    ) -> Vec<f64> {
        let d = self.cfg.hidden_dim;
        let nq = c.rows.len();
        let len = c.in_len;
        let mut dxm = dout.to_vec();
        let dact = layer
            .down
            .backward(store, &c.act, &c.down_lc, dout, nq, grads);
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&c.pre)
            .map(|(g, p)| g * gelu_grad(*p))
            .collect();
        let dh2 = layer.up.backward(store, &c.h2, &c.up_lc, &dpre, nq, grads);
        {
            let (mut dg, mut db) = split_two(grads, layer.ln2_g, layer.ln2_b);
            layernorm_rows_backward(
                &dh2,
                &c.ln2,
                store.data(layer.ln2_g),
                &mut dxm,
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            restore_two(grads, layer.ln2_g, layer.ln2_b, dg, db);
        }
        let datt = layer.o.backward(store, &c.att, &c.o_lc, &dxm, nq, grads);
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; len * d];
        let mut dv = vec![0.0; len * d];
        attention_backward(
            &datt, &c.q, &c.k, &c.v, &c.probs, &c.rows, shape, &mut dq, &mut dk, &mut dv,
        );
        let dhq = layer.q.backward(store, &c.hq, &c.q_lc, &dq, nq, grads);
        let mut dh1 = layer.k.backward(store, &c.h1, &c.k_lc, &dk, len, grads);
        let dh1v = layer.v.backward(store, &c.h1, &c.v_lc, &dv, len, grads);
        dh1.iter_mut().zip(&dh1v).for_each(|(a, b)| *a += b);
        for (qi, &r) in c.rows.iter().enumerate() {
            for j in 0..d {
                dh1[r * d + j] += dhq[qi * d + j];
            }
        }
        let mut dx = vec![0.0; len * d];
        {
            let (mut dg, mut db) = split_two(grads, layer.ln1_g, layer.ln1_b);
            layernorm_rows_backward(
                &dh1,
                &c.ln1,
                store.data(layer.ln1_g),
                &mut dx,
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            restore_two(grads, layer.ln1_g, layer.ln1_b, dg, db);
        }
        for (qi, &r) in c.rows.iter().enumerate() {
            for j in 0..d {
                dx[r * d + j] += dxm[qi * d + j];
            }
        }
        dx
    }

    fn embed_backward(
        &self,
        store: &ParamStore,
        cache: &TowerCache,
        dx: &[f64],
        grads: &mut Grads,
    ) {
        let d = self.cfg.hidden_dim;
        if let Some(dp) = grads.get_mut(self.pos) {
            for (a, g) in dp.iter_mut().zip(dx) {
                *a += g;
            }
        }
        if let Some(dt) = grads.get_mut(self.tok) {
            for (i, t) in cache.tokens.iter().enumerate() {
                let row = (cache.n_vision + i) * d;
                let t = *t as usize;
                for j in 0..d {
                    dt[t * d + j] += dx[row + j];
                }
            }
        }
        if let Some(lin) = &self.patch {
            if cache.n_vision > 0 {
                let _ = lin.backward(
                    store,
                    &cache.patch_in,
                    &cache.patch_lc,
                    &dx[..cache.n_vision * d],
                    cache.n_vision,
                    grads,
                );
            }
        }
    }
}

// Borrow two gradient buffers at once by temporarily taking them out.
fn split_two(grads: &mut Grads, a: ParamId, b: ParamId) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    (grads.take(a), grads.take(b))
}

fn restore_two(
    grads: &mut Grads,
    a: ParamId,
    b: ParamId,
    ga: Option<Vec<f64>>,
    gb: Option<Vec<f64>>,
) {
    grads.put(a, ga);
    grads.put(b, gb);
}
