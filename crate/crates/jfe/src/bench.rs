//! Benchmark directories.
//!
//! ```text
//! <dir>/world.json              generator settings (synthetic data only)
//! <dir>/vocab.txt               one token per line, id = line index
//! <dir>/catalog.json            training datasets
//! <dir>/captions.jsonl          adaptation pairs (image query, caption candidate)
//! <dir>/train.jsonl             instruction-tuning records
//! <dir>/eval/catalog.json       evaluation datasets
//! <dir>/eval/queries.jsonl      {qid, dataset, kind, text?, image?, instruction?}
//! <dir>/eval/candidates.jsonl   {id, dataset, kind, text?, image?}
//! <dir>/eval/qrels.jsonl        {qid, relevant: [candidate ids]}
//! <dir>/eval/conditional.jsonl  {id, subtask, image, condition, instruction?, gallery, positive}
//! <dir>/images/*.fenc           patch grids referenced by relative path
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use jfe_core::assembly::Vocabulary;
use jfe_core::data::{
    CandidateRecord, DatasetCatalog, DatasetInfo, Item, Modality, TaskCategory, TrainExample,
};
use jfe_core::eval::{CondSubtask, ConditionalTuple, EvalQuery, EvalSplit};
use jfe_core::sampler::CaptionPair;
use jfe_core::synth::{SynthBenchmark, WorldSpec};
use jfe_core::trainer::CAPTION_DATASET;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{JfeError, Result};
use crate::records::{
    format_tokens, item_fields, item_from_fields, load_records, parse_tokens, to_records,
    write_raw_records, ImageReader, ImageWriter, Record,
};

/// A benchmark read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DataDir {
    pub world: Option<WorldSpec>,
    pub vocab: Vocabulary,
    pub catalog: DatasetCatalog,
    pub caption_pairs: Vec<CaptionPair>,
    pub train: Vec<TrainExample>,
    pub eval: EvalSplit,
}

impl From<SynthBenchmark> for DataDir {
    fn from(b: SynthBenchmark) -> Self {
        Self {
            world: Some(b.spec),
            vocab: b.vocab,
            catalog: b.catalog,
            caption_pairs: b.caption_pairs,
            train: b.train,
            eval: b.eval,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogEntry {
    dataset: String,
    category: String,
    query_modality: String,
    candidate_modality: String,
    size: usize,
    fashion: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryLine {
    qid: String,
    dataset: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instruction: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateLine {
    id: String,
    dataset: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QrelLine {
    qid: String,
    relevant: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GalleryEntry {
    id: String,
    image: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionalLine {
    id: String,
    subtask: String,
    image: String,
    condition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instruction: Option<String>,
    gallery: Vec<GalleryEntry>,
    positive: String,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| JfeError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| JfeError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| JfeError::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| JfeError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JfeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| JfeError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("malformed line: {e}"),
        })?;
        out.push((i + 1, row));
    }
    Ok(out)
}

fn catalog_entries(catalog: &DatasetCatalog) -> Vec<CatalogEntry> {
    catalog
        .iter()
        .map(|(id, info)| CatalogEntry {
            dataset: id.to_string(),
            category: info.category.as_str().to_string(),
            query_modality: info.query_modality.as_str().to_string(),
            candidate_modality: info.candidate_modality.as_str().to_string(),
            size: info.size,
            fashion: info.fashion,
        })
        .collect()
}

fn read_catalog(path: &Path) -> Result<Vec<(String, DatasetInfo)>> {
    let bytes = std::fs::read(path).map_err(|e| JfeError::io(path, e))?;
    let entries: Vec<CatalogEntry> = serde_json::from_slice(&bytes)
        .map_err(|e| JfeError::Format(format!("{}: {e}", path.display())))?;
    entries
        .into_iter()
        .map(|e| {
            let info = DatasetInfo {
                category: TaskCategory::parse(&e.category)?,
                query_modality: Modality::parse(&e.query_modality)?,
                candidate_modality: Modality::parse(&e.candidate_modality)?,
                size: e.size,
                fashion: e.fashion,
            };
            Ok((e.dataset, info))
        })
        .collect::<std::result::Result<_, jfe_core::Error>>()
        .map_err(|e| JfeError::Format(format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| JfeError::Format(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| JfeError::io(path, e))?;
    Vocabulary::from_tokens(text.lines())
        .map_err(|e| JfeError::Format(format!("{}: {e}", path.display())))
}

/// Writes a benchmark directory.
pub fn write_data_dir(dir: &Path, data: &DataDir) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| JfeError::io(dir, e))?;
    if let Some(w) = &data.world {
        write_file(&dir.join("world.json"), &pretty(w)?)?;
    }
    write_vocab(&dir.join("vocab.txt"), &data.vocab)?;
    write_file(
        &dir.join("catalog.json"),
        &pretty(&catalog_entries(&data.catalog))?,
    )?;

    let mut images = ImageWriter::new(dir)?;
    let captions: Vec<Record> = data
        .caption_pairs
        .iter()
        .map(|p| {
            Ok(Record {
                qid: p.id.clone(),
                q_kind: "image".into(),
                q_text: None,
                q_image: Some(images.write(&p.image)?),
                instruction: None,
                c_kind: "text".into(),
                c_text: Some(format_tokens(&p.caption)),
                c_image: None,
                dataset: CAPTION_DATASET.into(),
                pair_id: p.id.clone(),
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&dir.join("captions.jsonl"), &captions)?;
    write_raw_records(
        &dir.join("train.jsonl"),
        &to_records(&data.train, &mut images)?,
    )?;

    let eval = &data.eval;
    write_file(
        &dir.join("eval/catalog.json"),
        &pretty(&catalog_entries(&eval.catalog))?,
    )?;
    let queries: Vec<QueryLine> = eval
        .queries
        .iter()
        .map(|q| {
            let (kind, text, image) = item_fields(&q.item, &mut images)?;
            Ok(QueryLine {
                qid: q.id.clone(),
                dataset: q.dataset.clone(),
                kind,
                text,
                image,
                instruction: q.instruction.clone(),
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&dir.join("eval/queries.jsonl"), &queries)?;
    let candidates: Vec<CandidateLine> = eval
        .candidates
        .iter()
        .map(|c| {
            let (kind, text, image) = item_fields(&c.item, &mut images)?;
            Ok(CandidateLine {
                id: c.id.clone(),
                dataset: c.dataset.clone(),
                kind,
                text,
                image,
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&dir.join("eval/candidates.jsonl"), &candidates)?;
    let qrels: Vec<QrelLine> = eval
        .qrels
        .iter()
        .map(|(q, rel)| QrelLine {
            qid: q.to_string(),
            relevant: rel.iter().cloned().collect(),
        })
        .collect();
    write_jsonl(&dir.join("eval/qrels.jsonl"), &qrels)?;
    let conditional: Vec<ConditionalLine> = eval
        .conditional
        .iter()
        .map(|t| {
            Ok(ConditionalLine {
                id: t.id.clone(),
                subtask: t.subtask.as_str().into(),
                image: images.write(&t.image)?,
                condition: format_tokens(&t.condition),
                instruction: t.instruction.clone(),
                gallery: t
                    .gallery
                    .iter()
                    .map(|(id, g)| {
                        Ok(GalleryEntry {
                            id: id.clone(),
                            image: images.write(g)?,
                        })
                    })
                    .collect::<Result<_>>()?,
                positive: t.positive.clone(),
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&dir.join("eval/conditional.jsonl"), &conditional)
}

fn line_error(path: &Path, line: usize) -> impl Fn(String) -> JfeError + '_ {
    move |message| JfeError::Record {
        path: path.to_path_buf(),
        line,
        message,
    }
}

/// Reads the evaluation half of a benchmark directory.
pub fn read_eval_split(dir: &Path) -> Result<EvalSplit> {
    let mut images = ImageReader::new(dir);
    let mut split = EvalSplit::default();
    for (id, info) in read_catalog(&dir.join("eval/catalog.json"))? {
        split.catalog.insert(&id, info)?;
    }
    let path = dir.join("eval/queries.jsonl");
    for (line, q) in read_jsonl::<QueryLine>(&path)? {
        let err = line_error(&path, line);
        let item = item_from_fields(&q.kind, q.text.as_deref(), q.image.as_deref(), &mut images)
            .map_err(&err)?;
        if !split.catalog.contains(&q.dataset) {
            return Err(err(format!("unknown dataset {}", q.dataset)));
        }
        split.queries.push(EvalQuery {
            id: q.qid,
            dataset: q.dataset,
            item,
            instruction: q.instruction,
        });
    }
    let path = dir.join("eval/candidates.jsonl");
    for (line, c) in read_jsonl::<CandidateLine>(&path)? {
        let item = item_from_fields(&c.kind, c.text.as_deref(), c.image.as_deref(), &mut images)
            .map_err(line_error(&path, line))?;
        split.candidates.push(CandidateRecord {
            id: c.id,
            dataset: c.dataset,
            item,
        });
    }
    let path = dir.join("eval/qrels.jsonl");
    for (line, r) in read_jsonl::<QrelLine>(&path)? {
        if r.relevant.is_empty() {
            return Err(line_error(&path, line)(format!(
                "query {} has no relevant candidate",
                r.qid
            )));
        }
        for c in &r.relevant {
            split.qrels.insert(&r.qid, c);
        }
    }
    let path = dir.join("eval/conditional.jsonl");
    for (line, t) in read_jsonl::<ConditionalLine>(&path)? {
        let err = line_error(&path, line);
        let tuple = ConditionalTuple {
            id: t.id,
            subtask: CondSubtask::parse(&t.subtask).map_err(|e| err(e.to_string()))?,
            image: images.read(&t.image).map_err(&err)?,
            condition: parse_tokens(&t.condition).map_err(&err)?,
            instruction: t.instruction,
            gallery: t
                .gallery
                .into_iter()
                .map(|g| Ok((g.id, images.read(&g.image)?)))
                .collect::<std::result::Result<_, String>>()
                .map_err(&err)?,
            positive: t.positive,
        };
        tuple.validate().map_err(|e| err(e.to_string()))?;
        split.conditional.push(tuple);
    }
    Ok(split)
}

/// Reads a benchmark directory written by [`write_data_dir`].
pub fn read_data_dir(dir: &Path) -> Result<DataDir> {
    let world_path = dir.join("world.json");
    let world = if world_path.is_file() {
        let bytes = std::fs::read(&world_path).map_err(|e| JfeError::io(&world_path, e))?;
        Some(
            serde_json::from_slice(&bytes)
                .map_err(|e| JfeError::Format(format!("{}: {e}", world_path.display())))?,
        )
    } else {
        None
    };
    let vocab = read_vocab(&dir.join("vocab.txt"))?;

    let declared = read_catalog(&dir.join("catalog.json"))?;
    let mut catalog = DatasetCatalog::new();
    for (id, info) in &declared {
        catalog.declare(
            id,
            info.category,
            info.query_modality,
            info.candidate_modality,
            info.fashion,
        )?;
    }
    let train = load_records(&dir.join("train.jsonl"), &mut catalog)?;
    for (id, info) in &declared {
        let found = catalog.get(id).map_or(0, |i| i.size);
        if found != info.size {
            return Err(JfeError::Format(format!(
                "dataset {id}: catalog lists {} examples, train.jsonl has {found}",
                info.size
            )));
        }
    }

    let captions_path = dir.join("captions.jsonl");
    let mut caption_pairs = Vec::new();
    if captions_path.is_file() {
        let mut scratch = DatasetCatalog::new();
        for ex in load_records(&captions_path, &mut scratch)? {
            match (ex.query, ex.candidate) {
                (Item::Image(image), Item::Text(caption)) => caption_pairs.push(CaptionPair {
                    id: ex.pair_id,
                    image,
                    caption,
                }),
                _ => {
                    return Err(JfeError::Format(format!(
                        "{}: caption pairs must be image -> text",
                        captions_path.display()
                    )))
                }
            }
        }
    }
    let eval = read_eval_split(dir)?;
    Ok(DataDir {
        world,
        vocab,
        catalog,
        caption_pairs,
        train,
        eval,
    })
}

/// Files of a benchmark directory, sorted, relative to `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| JfeError::io(&d, e))? {
            let entry = entry.map_err(|e| JfeError::io(&d, e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).expect("under dir").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}
