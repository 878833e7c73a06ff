//! Batch composition with a capped number of source datasets per batch.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Item, PatchGrid, TrainExample};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SamplingMode {
    /// Uniform over the union of all datasets.
    None,
    /// Always this many datasets per batch.
    Fixed(usize),
    /// `N_d` drawn per batch from a rounded normal.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplerConfig {
    pub mean: f64,
    pub std: f64,
    pub batch_size: usize,
    pub mode: SamplingMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mean: 4.0,
            std: 1.0,
            batch_size: 64,
            mode: SamplingMode::Gaussian,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} must be at least 2",
                self.batch_size
            )));
        }
        if self.mode == SamplingMode::Gaussian
            && !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite())
        {
            return Err(Error::Config(format!(
                "gaussian sampling needs std > 0, got {}",
                self.std
            )));
        }
        if self.mode == SamplingMode::Fixed(0) {
            return Err(Error::Config(
                "fixed sampling needs at least one dataset".into(),
            ));
        }
        Ok(())
    }
}

/// Draws `N_d ~ Normal(mean, std²)`, rounds half away from zero and clamps
/// to `[1, available]`.
pub fn sample_num_datasets(rng: &mut Rng, cfg: &SamplerConfig, available: usize) -> usize {
    let available = available.max(1);
    let z: f64 = StandardNormal.sample(rng);
    let draw = libm::round(cfg.mean + cfg.std * z);
    if draw <= 1.0 {
        1
    } else if draw >= available as f64 {
        available
    } else {
        draw as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DatasetSlot {
    name: String,
    members: Vec<usize>,
}

/// Training examples grouped by dataset, with interned pair-id families.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamplePool {
    datasets: Vec<DatasetSlot>,
    families: Vec<u32>,
}

impl ExamplePool {
    pub fn new(examples: &[TrainExample]) -> Self {
        Self::from_keys(examples.iter().map(|e| (e.dataset.as_str(), e.family())))
    }

    /// Builds the pool from `(dataset, family)` keys, one per example index.
    pub fn from_keys<'a>(keys: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut by_dataset: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut interned: BTreeMap<&str, u32> = BTreeMap::new();
        let mut families = Vec::new();
        for (i, (dataset, family)) in keys.into_iter().enumerate() {
            by_dataset.entry(dataset).or_default().push(i);
            let next = interned.len() as u32;
            families.push(*interned.entry(family).or_insert(next));
        }
        let datasets = by_dataset
            .into_iter()
            .map(|(name, members)| DatasetSlot {
                name: name.to_string(),
                members,
            })
            .collect();
        Self { datasets, families }
    }

    pub fn num_examples(&self) -> usize {
        self.families.len()
    }

    pub fn num_datasets(&self) -> usize {
        self.datasets.len()
    }

    pub fn dataset_names(&self) -> impl Iterator<Item = &str> {
        self.datasets.iter().map(|d| d.name.as_str())
    }

    pub fn dataset_size(&self, name: &str) -> Option<usize> {
        self.datasets
            .iter()
            .find(|d| d.name == name)
            .map(|d| d.members.len())
    }

    pub fn family(&self, example: usize) -> u32 {
        self.families[example]
    }
}

/// Example indices of one batch and the datasets they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub examples: Vec<usize>,
    pub datasets: Vec<String>,
}

/// Up to `need` members with families not yet in `used`, drawn uniformly
/// without replacement.
fn draw_distinct(
    rng: &mut Rng,
    members: &[usize],
    need: usize,
    families: &[u32],
    used: &mut BTreeSet<u32>,
    out: &mut Vec<usize>,
) -> usize {
    let mut rest: Vec<usize> = members.to_vec();
    let mut got = 0;
    while got < need && !rest.is_empty() {
        let j = rng.random_range(0..rest.len());
        let ex = rest.swap_remove(j);
        if used.insert(families[ex]) {
            out.push(ex);
            got += 1;
        }
    }
    got
}

/// Draws one batch according to `cfg.mode`. No two examples of a batch
/// share a pair-id family.
pub fn compose_batch(rng: &mut Rng, pool: &ExamplePool, cfg: &SamplerConfig) -> Result<Batch> {
    cfg.validate()?;
    if pool.num_examples() == 0 {
        return Err(Error::Data(
            "cannot compose a batch from an empty pool".into(),
        ));
    }
    let b = cfg.batch_size;
    let mut used = BTreeSet::new();
    let mut examples = Vec::with_capacity(b);
    let available = pool.num_datasets();
    let n = match cfg.mode {
        SamplingMode::None => {
            let all: Vec<usize> = (0..pool.num_examples()).collect();
            let got = draw_distinct(rng, &all, b, &pool.families, &mut used, &mut examples);
            if got < b {
                return Err(Error::Data(format!(
                    "only {got} distinct pair families available for a batch of {b}"
                )));
            }
            let mut datasets: BTreeSet<&str> = BTreeSet::new();
            for ex in &examples {
                let slot = pool
                    .datasets
                    .iter()
                    .find(|d| d.members.binary_search(ex).is_ok());
                datasets.insert(slot.map_or("", |d| d.name.as_str()));
            }
            return Ok(Batch {
                examples,
                datasets: datasets.into_iter().map(String::from).collect(),
            });
        }
        SamplingMode::Fixed(k) => k.clamp(1, available),
        SamplingMode::Gaussian => sample_num_datasets(rng, cfg, available),
    };
    let n = n.min(b);

    // Size-weighted choice without replacement.
    let mut remaining: Vec<usize> = (0..available).collect();
    let mut chosen = Vec::with_capacity(n);
    for _ in 0..n {
        let total: usize = remaining
            .iter()
            .map(|&d| pool.datasets[d].members.len())
            .sum();
        let mut r = rng.random_range(0..total);
        let mut pick = remaining.len() - 1;
        for (pos, &d) in remaining.iter().enumerate() {
            let size = pool.datasets[d].members.len();
            if r < size {
                pick = pos;
                break;
            }
            r -= size;
        }
        chosen.push(remaining.remove(pick));
    }
    // Largest datasets take the remainder; ties go to the earlier name.
    chosen.sort_by(|&x, &y| {
        pool.datasets[y]
            .members
            .len()
            .cmp(&pool.datasets[x].members.len())
            .then(x.cmp(&y))
    });
    let base = b / n;
    let extra = b % n;
    for (rank, &d) in chosen.iter().enumerate() {
        let share = base + usize::from(rank < extra);
        let slot = &pool.datasets[d];
        let got = draw_distinct(
            rng,
            &slot.members,
            share,
            &pool.families,
            &mut used,
            &mut examples,
        );
        if got < share {
            return Err(Error::Data(format!(
                "dataset {} has only {got} usable examples for a share of {share}",
                slot.name
            )));
        }
    }
    let datasets = chosen
        .iter()
        .map(|&d| pool.datasets[d].name.clone())
        .collect();
    Ok(Batch { examples, datasets })
}

/// Split of a batch across its datasets, in the order `compose_batch` fills
/// them: `batch_size / n` each, remainder one apiece to the largest.
pub fn split_sizes(batch_size: usize, sizes_desc: &[usize]) -> Vec<usize> {
    let n = sizes_desc.len().max(1);
    (0..sizes_desc.len())
        .map(|i| batch_size / n + usize::from(i < batch_size % n))
        .collect()
}

/// An image with its caption. Ids sharing a prefix before `#` form one family.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPair {
    pub id: String,
    pub image: PatchGrid,
    pub caption: Vec<u32>,
}

/// Two examples per pair, image→caption and caption→image, in the same
/// pair-id family so they never meet as in-batch negatives.
pub fn expand_caption_pairs(pairs: &[CaptionPair], dataset: &str) -> Result<Vec<TrainExample>> {
    if pairs.is_empty() {
        return Err(Error::Data("no caption pairs to expand".into()));
    }
    let mut out = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let sep = if p.id.contains('#') { ':' } else { '#' };
        let image = Item::Image(p.image.clone());
        let text = Item::Text(p.caption.clone());
        out.push(TrainExample {
            query: image.clone(),
            candidate: text.clone(),
            instruction: None,
            dataset: dataset.to_string(),
            pair_id: format!("{}{sep}i2t", p.id),
        });
        out.push(TrainExample {
            query: text,
            candidate: image,
            instruction: None,
            dataset: dataset.to_string(),
            pair_id: format!("{}{sep}t2i", p.id),
        });
    }
    Ok(out)
}
