//! Queries, candidates, datasets and relevance judgments.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::{Error, Result};

/// Token ids of a text segment.
pub type TokenIds = Vec<u32>;

/// Pre-featurized image: a grid of patch feature vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    patch_dim: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || patch_dim == 0 {
            return Err(Error::Data(format!(
                "patch grid dimensions must be positive, got {rows}x{cols}x{patch_dim}"
            )));
        }
        if data.len() != rows * cols * patch_dim {
            return Err(Error::Shape(format!(
                "patch grid {rows}x{cols}x{patch_dim} needs {} values, got {}",
                rows * cols * patch_dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("patch grid value {i}")));
        }
        Ok(Self {
            rows,
            cols,
            patch_dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    /// Number of vision tokens the grid produces (one per patch).
    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.data[index * self.patch_dim..(index + 1) * self.patch_dim]
    }
}

/// Modality of a query or candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Text,
    Image,
    Pair,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Pair => "pair",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "pair" => Ok(Modality::Pair),
            other => Err(Error::Data(format!("unknown modality tag {other:?}"))),
        }
    }
}

/// A query or candidate: text, an image, or both.
#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Text(TokenIds),
    Image(PatchGrid),
    Pair { image: PatchGrid, text: TokenIds },
}

impl Item {
    pub fn modality(&self) -> Modality {
        match self {
            Item::Text(_) => Modality::Text,
            Item::Image(_) => Modality::Image,
            Item::Pair { .. } => Modality::Pair,
        }
    }

    pub fn text(&self) -> Option<&[u32]> {
        match self {
            Item::Text(t) | Item::Pair { text: t, .. } => Some(t),
            Item::Image(_) => None,
        }
    }

    pub fn image(&self) -> Option<&PatchGrid> {
        match self {
            Item::Image(g) | Item::Pair { image: g, .. } => Some(g),
            Item::Text(_) => None,
        }
    }

    /// Text present in an item must be non-empty.
    pub fn validate(&self) -> Result<()> {
        match self.text() {
            Some(t) if t.is_empty() => Err(Error::Data("item text must be non-empty".into())),
            _ => Ok(()),
        }
    }
}

/// Task categories defined by the query/candidate modality combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskCategory {
    Single,
    Cross,
    Mixed,
    Multi,
    Conditional,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 5] = [
        TaskCategory::Single,
        TaskCategory::Cross,
        TaskCategory::Mixed,
        TaskCategory::Multi,
        TaskCategory::Conditional,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::Single => "single",
            TaskCategory::Cross => "cross",
            TaskCategory::Mixed => "mixed",
            TaskCategory::Multi => "multi",
            TaskCategory::Conditional => "conditional",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown task category {s:?}")))
    }

    /// Category implied by a modality pair. Conditional retrieval shares the
    /// (pair, image) signature with mixed-modal retrieval and is only reached
    /// through explicit registration.
    pub fn infer(query: Modality, candidate: Modality) -> Self {
        use Modality::*;
        match (query, candidate) {
            (Pair, Pair) => TaskCategory::Multi,
            (Pair, _) | (_, Pair) => TaskCategory::Mixed,
            (q, c) if q == c => TaskCategory::Single,
            _ => TaskCategory::Cross,
        }
    }

    pub fn admits(self, query: Modality, candidate: Modality) -> bool {
        match self {
            TaskCategory::Conditional => query == Modality::Pair && candidate == Modality::Image,
            other => Self::infer(query, candidate) == other,
        }
    }
}

/// Catalog entry for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInfo {
    pub category: TaskCategory,
    pub query_modality: Modality,
    pub candidate_modality: Modality,
    pub size: usize,
    /// Fashion-style datasets are scored with Recall@10 instead of Recall@5.
    pub fashion: bool,
}

impl DatasetInfo {
    pub fn recall_k(&self) -> usize {
        if self.fashion {
            10
        } else {
            5
        }
    }
}

/// Registered datasets keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetCatalog {
    entries: BTreeMap<String, DatasetInfo>,
}

impl DatasetCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a dataset up front, fixing its category and fashion tag.
    pub fn declare(
        &mut self,
        id: &str,
        category: TaskCategory,
        query: Modality,
        candidate: Modality,
        fashion: bool,
    ) -> Result<()> {
        if !category.admits(query, candidate) {
            return Err(Error::Data(format!(
                "dataset {id}: category {} does not admit {} -> {}",
                category.as_str(),
                query.as_str(),
                candidate.as_str()
            )));
        }
        if let Some(prev) = self.entries.get(id) {
            if prev.category != category
                || prev.query_modality != query
                || prev.candidate_modality != candidate
            {
                return Err(Error::Data(format!(
                    "dataset {id} redeclared inconsistently"
                )));
            }
            return Ok(());
        }
        self.entries.insert(
            id.to_string(),
            DatasetInfo {
                category,
                query_modality: query,
                candidate_modality: candidate,
                size: 0,
                fashion,
            },
        );
        Ok(())
    }

    /// Counts one example for `id`, registering the dataset with an inferred
    /// category on first sight. Examples must keep the dataset's modalities.
    pub fn register_example(
        &mut self,
        id: &str,
        query: Modality,
        candidate: Modality,
    ) -> Result<()> {
        if !self.entries.contains_key(id) {
            self.declare(
                id,
                TaskCategory::infer(query, candidate),
                query,
                candidate,
                false,
            )?;
        }
        let info = self.entries.get_mut(id).expect("registered above");
        if info.query_modality != query || info.candidate_modality != candidate {
            return Err(Error::Data(format!(
                "dataset {id} is {} -> {}, example is {} -> {}",
                info.query_modality.as_str(),
                info.candidate_modality.as_str(),
                query.as_str(),
                candidate.as_str()
            )));
        }
        info.size += 1;
        Ok(())
    }

    /// Restores a complete entry, for catalogs read back from storage.
    pub fn insert(&mut self, id: &str, info: DatasetInfo) -> Result<()> {
        if !info
            .category
            .admits(info.query_modality, info.candidate_modality)
        {
            return Err(Error::Data(format!(
                "dataset {id}: category {} does not admit {} -> {}",
                info.category.as_str(),
                info.query_modality.as_str(),
                info.candidate_modality.as_str()
            )));
        }
        if self.entries.insert(id.to_string(), info).is_some() {
            return Err(Error::Data(format!("dataset {id} listed twice")));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&DatasetInfo> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DatasetInfo)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One contrastive training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub query: Item,
    pub candidate: Item,
    pub instruction: Option<String>,
    pub dataset: String,
    pub pair_id: String,
}

impl TrainExample {
    /// Examples sharing a family within a dataset are never in-batch negatives
    /// of each other. The family is the pair id up to its first `#`.
    pub fn family(&self) -> &str {
        match self.pair_id.find('#') {
            Some(i) => &self.pair_id[..i],
            None => &self.pair_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.query.validate()?;
        self.candidate.validate()?;
        if let Some(instr) = &self.instruction {
            if instr.split_whitespace().next().is_none() {
                return Err(Error::Data(format!(
                    "pair {}: empty instruction",
                    self.pair_id
                )));
            }
        }
        Ok(())
    }
}

/// Checks the catalog invariants over a list of loaded examples: unique
/// pair ids per dataset and modalities consistent with each category.
pub fn register_examples(catalog: &mut DatasetCatalog, examples: &[TrainExample]) -> Result<()> {
    let mut seen: BTreeSet<(&str, &str)> = BTreeSet::new();
    for ex in examples {
        ex.validate()?;
        if !seen.insert((ex.dataset.as_str(), ex.pair_id.as_str())) {
            return Err(Error::Data(format!(
                "duplicate pair_id {} in dataset {}",
                ex.pair_id, ex.dataset
            )));
        }
        catalog.register_example(&ex.dataset, ex.query.modality(), ex.candidate.modality())?;
    }
    Ok(())
}

/// A retrievable candidate with its id and owning dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub id: String,
    pub dataset: String,
    pub item: Item,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoolScope {
    /// Candidates of one dataset only.
    Task(String),
    /// Union of every dataset, de-duplicated by candidate id.
    Global,
}

/// Candidates addressable by a dense integer id (their position).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    ids: Vec<String>,
    items: Vec<Item>,
    by_id: BTreeMap<String, usize>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }
}

/// Builds a pool from candidate records in their given order. The first
/// occurrence of an id wins; later duplicates are dropped.
pub fn build_pool(candidates: &[CandidateRecord], scope: &PoolScope) -> Result<CandidatePool> {
    if candidates.is_empty() {
        return Err(Error::Data("candidate list is empty".into()));
    }
    let mut pool = CandidatePool {
        ids: Vec::new(),
        items: Vec::new(),
        by_id: BTreeMap::new(),
    };
    for cand in candidates {
        if let PoolScope::Task(name) = scope {
            if &cand.dataset != name {
                continue;
            }
        }
        cand.item.validate()?;
        if pool.by_id.contains_key(&cand.id) {
            continue;
        }
        pool.by_id.insert(cand.id.clone(), pool.ids.len());
        pool.ids.push(cand.id.clone());
        pool.items.push(cand.item.clone());
    }
    if pool.is_empty() {
        return Err(Error::Data(format!("no candidates for scope {scope:?}")));
    }
    Ok(pool)
}

/// Relevant candidate ids per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceSet {
    rels: BTreeMap<String, BTreeSet<String>>,
}

impl RelevanceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: &str, candidate: &str) {
        self.rels
            .entry(query.to_string())
            .or_default()
            .insert(candidate.to_string());
    }

    pub fn relevant(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.rels.get(query)
    }

    pub fn len(&self) -> usize {
        self.rels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.rels.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Every referenced candidate must exist in `pool`, and every query needs
    /// at least one relevant candidate.
    pub fn validate(&self, pool: &CandidatePool) -> Result<()> {
        for (q, cands) in &self.rels {
            if cands.is_empty() {
                return Err(Error::Data(format!("query {q} has no relevant candidate")));
            }
            if let Some(missing) = cands.iter().find(|c| !pool.contains(c)) {
                return Err(Error::Data(format!(
                    "query {q} references missing candidate {missing}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn text_cand(id: &str, ds: &str) -> CandidateRecord {
        CandidateRecord {
            id: id.into(),
            dataset: ds.into(),
            item: Item::Text(vec![5, 6]),
        }
    }

    #[test]
    fn task_pool_keeps_only_named_dataset() {
        let mut cands: Vec<_> = (0..10).map(|i| text_cand(&format!("a{i}"), "a")).collect();
        cands.extend((0..15).map(|i| text_cand(&format!("b{i}"), "b")));
        let pool = build_pool(&cands, &PoolScope::Task("a".into())).unwrap();
        assert_eq!(pool.len(), 10);
    }

    #[test]
    fn global_pool_disjoint_union() {
        let mut cands: Vec<_> = (0..10).map(|i| text_cand(&format!("a{i}"), "a")).collect();
        cands.extend((0..15).map(|i| text_cand(&format!("b{i}"), "b")));
        assert_eq!(build_pool(&cands, &PoolScope::Global).unwrap().len(), 25);
    }

    #[test]
    fn global_pool_dedups_shared_ids() {
        let a: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
        let b: Vec<String> = (5..20).map(|i| format!("x{i}")).collect();
        let mut cands: Vec<_> = a.iter().map(|id| text_cand(id, "a")).collect();
        cands.extend(b.iter().map(|id| text_cand(id, "b")));
        let oracle: BTreeSet<&String> = a.iter().chain(b.iter()).collect();
        let pool = build_pool(&cands, &PoolScope::Global).unwrap();
        assert_eq!(pool.len(), oracle.len());
        assert_eq!(pool.len(), 20);
        for (pos, id) in pool.ids().iter().enumerate() {
            assert_eq!(pool.position(id), Some(pos));
        }
    }

    #[test]
    fn empty_candidates_rejected() {
        assert!(build_pool(&[], &PoolScope::Global).is_err());
    }

    #[test]
    fn catalog_rejects_inconsistent_category() {
        let mut cat = DatasetCatalog::new();
        assert!(cat
            .declare(
                "x",
                TaskCategory::Single,
                Modality::Text,
                Modality::Image,
                false
            )
            .is_err());
        assert!(cat
            .declare(
                "y",
                TaskCategory::Conditional,
                Modality::Pair,
                Modality::Image,
                false
            )
            .is_ok());
        assert!(cat
            .declare(
                "z",
                TaskCategory::Mixed,
                Modality::Pair,
                Modality::Pair,
                false
            )
            .is_err());
    }

    #[test]
    fn inferred_taxonomy() {
        use Modality::*;
        assert_eq!(TaskCategory::infer(Text, Text), TaskCategory::Single);
        assert_eq!(TaskCategory::infer(Image, Image), TaskCategory::Single);
        assert_eq!(TaskCategory::infer(Text, Image), TaskCategory::Cross);
        assert_eq!(TaskCategory::infer(Pair, Image), TaskCategory::Mixed);
        assert_eq!(TaskCategory::infer(Text, Pair), TaskCategory::Mixed);
        assert_eq!(TaskCategory::infer(Pair, Pair), TaskCategory::Multi);
    }

    #[test]
    fn family_strips_suffix() {
        let ex = TrainExample {
            query: Item::Text(vec![4]),
            candidate: Item::Text(vec![5]),
            instruction: None,
            dataset: "d".into(),
            pair_id: "p7#t2i".into(),
        };
        assert_eq!(ex.family(), "p7");
    }

    #[test]
    fn relevance_validation() {
        let pool = build_pool(&[text_cand("c1", "d")], &PoolScope::Global).unwrap();
        let mut rels = RelevanceSet::new();
        rels.insert("q1", "c1");
        assert!(rels.validate(&pool).is_ok());
        rels.insert("q2", "nope");
        assert!(rels.validate(&pool).is_err());
    }

    #[test]
    fn patch_grid_rejects_non_finite() {
        assert!(PatchGrid::new(1, 1, 2, vec![0.0, f32::NAN]).is_err());
        assert!(PatchGrid::new(1, 2, 2, vec![0.0; 3]).is_err());
    }
}
