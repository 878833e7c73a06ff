//! Line-delimited training records.
//!
//! Each line is one JSON object with the fields `qid`, `q_kind`, `q_text`,
//! `q_image`, `instruction`, `c_kind`, `c_text`, `c_image`, `dataset` and
//! `pair_id`. Kinds are `text`, `image` or `pair`; text fields hold token
//! ids as space-separated integers; image fields hold a path to a patch-grid
//! file, relative to the directory of the record file. Absent optional
//! fields are omitted. Blank lines are ignored.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use jfe_core::data::{DatasetCatalog, Item, Modality, PatchGrid, TrainExample};
use serde::{Deserialize, Serialize};

use crate::error::{JfeError, Result};
use crate::fenc;

/// One record exactly as stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub qid: String,
    pub q_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    pub c_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_image: Option<String>,
    pub dataset: String,
    pub pair_id: String,
}

pub fn format_tokens(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn parse_tokens(s: &str) -> std::result::Result<Vec<u32>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| format!("bad token id {t:?}")))
        .collect()
}

/// Resolves image paths relative to a base directory, reading each file
/// once.
#[derive(Debug)]
pub struct ImageReader {
    base: PathBuf,
    cache: HashMap<String, PatchGrid>,
}

impl ImageReader {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Self {
            base: base.into(),
            cache: HashMap::new(),
        }
    }

    pub fn read(&mut self, rel: &str) -> std::result::Result<PatchGrid, String> {
        if let Some(g) = self.cache.get(rel) {
            return Ok(g.clone());
        }
        let path = self.base.join(rel);
        if !path.is_file() {
            return Err(format!("dangling image reference {rel:?}"));
        }
        let g = fenc::read_grid(&path).map_err(|e| e.to_string())?;
        self.cache.insert(rel.to_string(), g.clone());
        Ok(g)
    }
}

/// Writes patch grids under `<root>/images/`, sharing one file between
/// identical grids. Paths are returned relative to `root`.
#[derive(Debug)]
pub struct ImageWriter {
    root: PathBuf,
    seen: HashMap<Vec<u8>, String>,
}

impl ImageWriter {
    pub fn new(root: &Path) -> Result<Self> {
        let dir = root.join("images");
        std::fs::create_dir_all(&dir).map_err(|e| JfeError::io(&dir, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            seen: HashMap::new(),
        })
    }

    pub fn write(&mut self, grid: &PatchGrid) -> Result<String> {
        let bytes = fenc::encode_grid(grid);
        if let Some(rel) = self.seen.get(&bytes) {
            return Ok(rel.clone());
        }
        let rel = format!("images/{:06}.fenc", self.seen.len());
        let path = self.root.join(&rel);
        std::fs::write(&path, &bytes).map_err(|e| JfeError::io(&path, e))?;
        self.seen.insert(bytes, rel.clone());
        Ok(rel)
    }
}

/// Builds an item from a kind tag and its optional text and image fields.
pub fn item_from_fields(
    kind: &str,
    text: Option<&str>,
    image: Option<&str>,
    images: &mut ImageReader,
) -> std::result::Result<Item, String> {
    let modality = Modality::parse(kind).map_err(|e| e.to_string())?;
    let text = match text {
        Some(s) => {
            let ids = parse_tokens(s)?;
            if ids.is_empty() {
                return Err("text field is empty".into());
            }
            Some(ids)
        }
        None => None,
    };
    let image = image.map(|rel| images.read(rel)).transpose()?;
    match (modality, text, image) {
        (Modality::Text, Some(t), None) => Ok(Item::Text(t)),
        (Modality::Image, None, Some(g)) => Ok(Item::Image(g)),
        (Modality::Pair, Some(text), Some(image)) => Ok(Item::Pair { image, text }),
        (m, t, i) => Err(format!(
            "kind {} needs {}, found text {} and image {}",
            m.as_str(),
            match m {
                Modality::Text => "text only",
                Modality::Image => "an image only",
                Modality::Pair => "both text and an image",
            },
            if t.is_some() { "present" } else { "absent" },
            if i.is_some() { "present" } else { "absent" },
        )),
    }
}

/// Kind tag plus text and image fields of an item, writing its image.
pub fn item_fields(
    item: &Item,
    images: &mut ImageWriter,
) -> Result<(String, Option<String>, Option<String>)> {
    let text = item.text().map(format_tokens);
    let image = item.image().map(|g| images.write(g)).transpose()?;
    Ok((item.modality().as_str().to_string(), text, image))
}

/// Parses every non-blank line of a record file.
pub fn read_raw_records(path: &Path) -> Result<Vec<(usize, Record)>> {
    let file = File::open(path).map_err(|e| JfeError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JfeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| JfeError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("malformed record: {e}"),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Canonical serialization: one compact JSON object per line, fields in
/// declaration order, absent optionals omitted.
pub fn write_raw_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| JfeError::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = File::create(path).map_err(|e| JfeError::io(path, e))?;
    f.write_all(&buf).map_err(|e| JfeError::io(path, e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads training examples in file order and registers their datasets in
/// `catalog`. Errors carry the 1-based line number.
pub fn load_records(path: &Path, catalog: &mut DatasetCatalog) -> Result<Vec<TrainExample>> {
    let raw = read_raw_records(path)?;
    let mut images = ImageReader::new(base_dir(path));
    let mut examples = Vec::with_capacity(raw.len());
    let mut seen = HashSet::new();
    for (line, r) in &raw {
        let at = |message: String| JfeError::Record {
            path: path.to_path_buf(),
            line: *line,
            message,
        };
        let query = item_from_fields(
            &r.q_kind,
            r.q_text.as_deref(),
            r.q_image.as_deref(),
            &mut images,
        )
        .map_err(|m| at(format!("query: {m}")))?;
        let candidate = item_from_fields(
            &r.c_kind,
            r.c_text.as_deref(),
            r.c_image.as_deref(),
            &mut images,
        )
        .map_err(|m| at(format!("candidate: {m}")))?;
        let ex = TrainExample {
            query,
            candidate,
            instruction: r.instruction.clone(),
            dataset: r.dataset.clone(),
            pair_id: r.pair_id.clone(),
        };
        ex.validate().map_err(|e| at(e.to_string()))?;
        if !seen.insert((ex.dataset.clone(), ex.pair_id.clone())) {
            return Err(at(format!(
                "duplicate pair_id {} in dataset {}",
                ex.pair_id, ex.dataset
            )));
        }
        catalog
            .register_example(&ex.dataset, ex.query.modality(), ex.candidate.modality())
            .map_err(|e| at(e.to_string()))?;
        examples.push(ex);
    }
    Ok(examples)
}

/// Converts examples to records, writing images under `images`. The record
/// id is `<dataset>/<pair_id>`.
pub fn to_records(examples: &[TrainExample], images: &mut ImageWriter) -> Result<Vec<Record>> {
    examples
        .iter()
        .map(|e| {
            let (q_kind, q_text, q_image) = item_fields(&e.query, images)?;
            let (c_kind, c_text, c_image) = item_fields(&e.candidate, images)?;
            Ok(Record {
                qid: format!("{}/{}", e.dataset, e.pair_id),
                q_kind,
                q_text,
                q_image,
                instruction: e.instruction.clone(),
                c_kind,
                c_text,
                c_image,
                dataset: e.dataset.clone(),
                pair_id: e.pair_id.clone(),
            })
        })
        .collect()
}

/// Writes `examples` to `path`; images go under the file's directory.
pub fn save_records(path: &Path, examples: &[TrainExample]) -> Result<()> {
    let base = base_dir(path);
    let mut images = ImageWriter::new(&base)?;
    write_raw_records(path, &to_records(examples, &mut images)?)
}
