//! Recall@K evaluation over task-specific or global candidate pools, and
//! per-gallery conditional retrieval.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::assembly::{tokenize, Vocabulary};
use crate::data::{CandidateRecord, DatasetCatalog, Item, PatchGrid, RelevanceSet, TaskCategory};
use crate::encoder::Encoder;
use crate::numerics::ParamStore;
use crate::retrieval::{build_index, recall_at_k, top_k};
use crate::{Error, Result};

/// A retrieval query.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub id: String,
    pub dataset: String,
    pub item: Item,
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CondSubtask {
    FocusAttribute,
    FocusObject,
    ChangeAttribute,
    ChangeObject,
}

impl CondSubtask {
    pub const ALL: [CondSubtask; 4] = [
        CondSubtask::FocusAttribute,
        CondSubtask::FocusObject,
        CondSubtask::ChangeAttribute,
        CondSubtask::ChangeObject,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CondSubtask::FocusAttribute => "focus_attribute",
            CondSubtask::FocusObject => "focus_object",
            CondSubtask::ChangeAttribute => "change_attribute",
            CondSubtask::ChangeObject => "change_object",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown conditional subtask {s:?}")))
    }
}

/// A reference image, a condition and a small gallery holding one positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTuple {
    pub id: String,
    pub subtask: CondSubtask,
    pub image: PatchGrid,
    pub condition: Vec<u32>,
    pub instruction: Option<String>,
    pub gallery: Vec<(String, PatchGrid)>,
    pub positive: String,
}

impl ConditionalTuple {
    pub fn validate(&self) -> Result<()> {
        let hits = self
            .gallery
            .iter()
            .filter(|(id, _)| *id == self.positive)
            .count();
        if hits != 1 {
            return Err(Error::Data(format!(
                "conditional tuple {}: gallery holds the positive {hits} times",
                self.id
            )));
        }
        if self.condition.is_empty() {
            return Err(Error::Data(format!(
                "conditional tuple {}: empty condition",
                self.id
            )));
        }
        Ok(())
    }

    pub fn query(&self) -> Item {
        Item::Pair {
            image: self.image.clone(),
            text: self.condition.clone(),
        }
    }
}

/// Everything needed to score a model on held-out data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSplit {
    pub catalog: DatasetCatalog,
    pub queries: Vec<EvalQuery>,
    pub candidates: Vec<CandidateRecord>,
    pub qrels: RelevanceSet,
    pub conditional: Vec<ConditionalTuple>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Task,
    Global,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Task => "task",
            Scope::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(Scope::Task),
            "global" => Ok(Scope::Global),
            other => Err(Error::Config(format!("unknown eval scope {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub scope: Scope,
    pub use_instructions: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            scope: Scope::Task,
            use_instructions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetResult {
    pub dataset: String,
    pub task: TaskCategory,
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalResult {
    pub subtask: CondSubtask,
    /// Recall@1, @2 and @3.
    pub recall: [f64; 3],
}

/// Per-dataset recall with category and overall averages. Conditional
/// subtasks appear as rows scored by Recall@1 and count toward the
/// conditional average only.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scope: Scope,
    pub use_instructions: bool,
    pub results: Vec<DatasetResult>,
    pub conditional: Vec<ConditionalResult>,
    pub category_avg: BTreeMap<TaskCategory, f64>,
    pub overall_avg: f64,
}

impl EvalReport {
    pub fn recall(&self, dataset: &str) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.dataset == dataset)
            .map(|r| r.recall)
    }

    pub fn category(&self, c: TaskCategory) -> Option<f64> {
        self.category_avg.get(&c).copied()
    }

    /// Recomputes the averages from `results`.
    pub fn finalize(&mut self) {
        let mut groups: BTreeMap<TaskCategory, Vec<f64>> = BTreeMap::new();
        for r in &self.results {
            groups.entry(r.task).or_default().push(r.recall);
        }
        self.category_avg = groups.iter().map(|(c, v)| (*c, mean(v))).collect();
        let retrieval: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.task != TaskCategory::Conditional)
            .map(|r| r.recall)
            .collect();
        self.overall_avg = if retrieval.is_empty() {
            0.0
        } else {
            mean(&retrieval)
        };
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn instruction_ids(instr: &Option<String>, vocab: &Vocabulary, enabled: bool) -> Option<Vec<u32>> {
    if !enabled {
        return None;
    }
    instr
        .as_ref()
        .map(|s| tokenize(s, vocab))
        .filter(|t| !t.is_empty())
}

/// Encodes queries (with instructions when enabled) and candidates, then
/// scores every retrieval dataset of the split plus its conditional tuples.
pub fn evaluate(
    encoder: &Encoder,
    store: &ParamStore,
    split: &EvalSplit,
    vocab: &Vocabulary,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let mut cand_emb: Vec<(String, String, Vec<f64>)> = Vec::new();
    let mut seen = BTreeMap::new();
    for c in &split.candidates {
        if seen.insert(c.id.clone(), ()).is_some() {
            continue;
        }
        let e = encoder
            .encode(store, &c.item, None)
            .map_err(|e| e.context(&format!("dataset {}", c.dataset)))?;
        cand_emb.push((c.id.clone(), c.dataset.clone(), e.0));
    }
    let global = match opts.scope {
        Scope::Global if !cand_emb.is_empty() => Some(build_index(
            cand_emb.iter().map(|(id, _, v)| (id.clone(), v.clone())),
        )?),
        _ => None,
    };

    let mut results = Vec::new();
    for (name, info) in split.catalog.iter() {
        if info.category == TaskCategory::Conditional {
            continue;
        }
        let queries: Vec<&EvalQuery> = split.queries.iter().filter(|q| q.dataset == name).collect();
        if queries.is_empty() {
            continue;
        }
        let local;
        let index = match &global {
            Some(g) => g,
            None => {
                let members = cand_emb
                    .iter()
                    .filter(|(_, d, _)| d == name)
                    .map(|(id, _, v)| (id.clone(), v.clone()));
                local = build_index(members).map_err(|e| e.context(&format!("dataset {name}")))?;
                &local
            }
        };
        let k = info.recall_k();
        let mut runs: Vec<(&str, Vec<&str>)> = Vec::with_capacity(queries.len());
        for q in queries {
            let instr = instruction_ids(&q.instruction, vocab, opts.use_instructions);
            let e = encoder
                .encode(store, &q.item, instr.as_deref())
                .map_err(|e| e.context(&format!("dataset {name}")))?;
            let hits = index.search(&e.0, k)?;
            runs.push((q.id.as_str(), hits.iter().map(|h| h.id).collect()));
        }
        let recall = recall_at_k(&runs, &split.qrels, k)?;
        results.push(DatasetResult {
            dataset: name.to_string(),
            task: info.category,
            k,
            recall,
        });
    }

    let conditional = if split.conditional.is_empty() {
        Vec::new()
    } else {
        evaluate_conditional(
            encoder,
            store,
            &split.conditional,
            vocab,
            opts.use_instructions,
        )?
    };
    for c in &conditional {
        results.push(DatasetResult {
            dataset: format!("cond_{}", c.subtask.as_str()),
            task: TaskCategory::Conditional,
            k: 1,
            recall: c.recall[0],
        });
    }
    let mut report = EvalReport {
        scope: opts.scope,
        use_instructions: opts.use_instructions,
        results,
        conditional,
        category_avg: BTreeMap::new(),
        overall_avg: 0.0,
    };
    report.finalize();
    Ok(report)
}

/// Recall@{1,2,3} per subtask; each tuple searches only its own gallery.
pub fn evaluate_conditional(
    encoder: &Encoder,
    store: &ParamStore,
    tuples: &[ConditionalTuple],
    vocab: &Vocabulary,
    use_instructions: bool,
) -> Result<Vec<ConditionalResult>> {
    let mut hits: BTreeMap<CondSubtask, ([usize; 3], usize)> = BTreeMap::new();
    for t in tuples {
        t.validate()?;
        let instr = instruction_ids(&t.instruction, vocab, use_instructions);
        let ctx = format!("conditional {}", t.subtask.as_str());
        let q = encoder
            .encode(store, &t.query(), instr.as_deref())
            .map_err(|e| e.context(&ctx))?;
        let mut scores = Vec::with_capacity(t.gallery.len());
        let mut pos = 0;
        for (i, (id, img)) in t.gallery.iter().enumerate() {
            let c = encoder
                .encode(store, &Item::Image(img.clone()), None)
                .map_err(|e| e.context(&ctx))?;
            scores.push(q.dot(&c));
            if *id == t.positive {
                pos = i;
            }
        }
        let ranked = top_k(&scores, 3);
        let entry = hits.entry(t.subtask).or_insert(([0; 3], 0));
        entry.1 += 1;
        for k in 0..3 {
            if ranked.iter().take(k + 1).any(|r| *r == pos) {
                entry.0[k] += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|(subtask, (h, n))| ConditionalResult {
            subtask,
            recall: [
                h[0] as f64 / n as f64,
                h[1] as f64 / n as f64,
                h[2] as f64 / n as f64,
            ],
        })
        .collect())
}

/// Expected Recall@K of a uniformly random ranking with one relevant item.
pub fn chance_recall(k: usize, pool: usize) -> f64 {
    if pool == 0 {
        0.0
    } else {
        (k.min(pool)) as f64 / pool as f64
    }
}
