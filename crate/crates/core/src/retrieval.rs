//! Exact inner-product search and Recall@K.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::RelevanceSet;
use crate::numerics::dot;
use crate::{Error, Result};

/// Unit-norm embeddings in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    ids: Vec<String>,
    dim: usize,
    rows: Vec<f64>,
}

/// One search result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit<'a> {
    pub id: &'a str,
    /// Position in the index.
    pub row: usize,
    pub score: f64,
}

/// Normalizes every vector and stores them in the given order.
pub fn build_index<I, S>(entries: I) -> Result<Index>
where
    I: IntoIterator<Item = (S, Vec<f64>)>,
    S: Into<String>,
{
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dim = None;
    for (id, v) in entries {
        let id: String = id.into();
        let d = *dim.get_or_insert(v.len());
        if v.len() != d || d == 0 {
            return Err(Error::Shape(format!(
                "vector {id} has length {}, expected {d}",
                v.len()
            )));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate index id {id}")));
        }
        let norm = libm::sqrt(dot(&v, &v));
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "vector {id} cannot be normalized (norm {norm})"
            )));
        }
        rows.extend(v.iter().map(|x| x / norm));
        ids.push(id);
    }
    let Some(dim) = dim else {
        return Err(Error::Data("cannot build an empty index".into()));
    };
    Ok(Index { ids, dim, rows })
}

impl Index {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Inner product of `q` with every row.
    pub fn scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::Shape(format!(
                "query has length {}, index has {}",
                q.len(),
                self.dim
            )));
        }
        Ok(self
            .rows
            .chunks_exact(self.dim)
            .map(|r| dot(q, r))
            .collect())
    }

    /// Exact top-`k` by inner product, best first; equal scores keep
    /// insertion order. `k` is clipped to the index size.
    pub fn search(&self, q: &[f64], k: usize) -> Result<Vec<Hit<'_>>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let scores = self.scores(q)?;
        let order = top_k(&scores, k);
        Ok(order
            .into_iter()
            .map(|row| Hit {
                id: &self.ids[row],
                row,
                score: scores[row],
            })
            .collect())
    }
}

/// `a` ranks before `b`.
fn better(scores: &[f64], a: usize, b: usize) -> bool {
    scores[a] > scores[b] || (scores[a] == scores[b] && a < b)
}

/// Row indices of the `k` best scores, best first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for i in 0..scores.len() {
        if best.len() == k {
            if k == 0 || !better(scores, i, best[k - 1]) {
                continue;
            }
            best.pop();
        }
        let pos = best.partition_point(|&b| better(scores, b, i));
        best.insert(pos, i);
    }
    best
}

/// Convenience wrapper over [`Index::search`].
pub fn search<'a>(index: &'a Index, q: &[f64], k: usize) -> Result<Vec<Hit<'a>>> {
    index.search(q, k)
}

/// Fraction of queries with at least one relevant id among their first `k`
/// results. Each run is `(query id, ranked candidate ids)`.
pub fn recall_at_k<Q, C>(runs: &[(Q, Vec<C>)], rels: &RelevanceSet, k: usize) -> Result<f64>
where
    Q: AsRef<str>,
    C: AsRef<str>,
{
    if runs.is_empty() {
        return Err(Error::Data("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for (q, ranked) in runs {
        let rel = rels.relevant(q.as_ref()).ok_or_else(|| {
            Error::Data(format!("query {} has no relevance judgments", q.as_ref()))
        })?;
        if ranked.iter().take(k).any(|c| rel.contains(c.as_ref())) {
            hits += 1;
        }
    }
    Ok(hits as f64 / runs.len() as f64)
}
