use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result, Rng};

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// A low-rank adapter attached to a base weight `W` (in×out):
/// the forward adds `scale · drop(x) · A · B` with `A` in×r and `B` r×out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraLink {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
    pub dropout: f64,
}

/// Named tensors with trainability flags and optional adapter attachments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
    lora: BTreeMap<ParamId, LoraLink>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        self.entries[id.0].tensor.data()
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.entries[id.0].tensor.data_mut()
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn lora(&self, weight: ParamId) -> Option<&LoraLink> {
        self.lora.get(&weight)
    }

    pub fn lora_links(&self) -> impl Iterator<Item = (ParamId, &LoraLink)> {
        self.lora.iter().map(|(k, v)| (*k, v))
    }

    pub fn has_adapters(&self) -> bool {
        !self.lora.is_empty()
    }

    pub(crate) fn link_lora(&mut self, weight: ParamId, link: LoraLink) {
        self.lora.insert(weight, link);
    }

    /// Rebuilds the store without adapter links and without the entries for
    /// which `drop` returns true. Ids are reassigned.
    pub(crate) fn without(&self, drop: impl Fn(&ParamEntry) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| !drop(e)) {
            out.insert(&e.name, e.tensor.clone(), e.trainable)
                .expect("names were unique");
        }
        out
    }

    /// Rounds every value to the nearest `f32`. Stored parameters live on the
    /// `f32` grid so checkpoints reproduce them exactly.
    pub fn snap_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.tensor.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for e in &self.entries {
            e.tensor.check_finite(&e.name)?;
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; frozen tensors get none.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn for_store(store: &ParamStore) -> Self {
        let bufs = store
            .entries
            .iter()
            .map(|e| e.trainable.then(|| vec![0.0; e.tensor.len()]))
            .collect();
        Self { bufs }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        self.bufs.get_mut(id.0).and_then(|b| b.as_deref_mut())
    }

    pub(crate) fn take(&mut self, id: ParamId) -> Option<Vec<f64>> {
        self.bufs.get_mut(id.0).and_then(Option::take)
    }

    pub(crate) fn put(&mut self, id: ParamId, buf: Option<Vec<f64>>) {
        if buf.is_some() {
            self.bufs[id.0] = buf;
        }
    }

    pub fn zero(&mut self) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            if let (Some(a), Some(b)) = (a, b) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bufs
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_deref().map(|b| (ParamId(i), b)))
    }

    pub fn is_finite(&self) -> bool {
        self.bufs
            .iter()
            .flatten()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute gradient entry.
    pub fn max_abs(&self) -> f64 {
        self.bufs
            .iter()
            .flatten()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn grads_skip_frozen() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::zeros(&[3]), true).unwrap();
        let b = s.insert("b", Tensor::zeros(&[3]), false).unwrap();
        let g = Grads::for_store(&s);
        assert!(g.get(a).is_some());
        assert!(g.get(b).is_none());
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(
            Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().dims2().unwrap(),
            (2, 3)
        );
    }
}
