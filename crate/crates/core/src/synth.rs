//! A synthetic world of objects with one attribute each, rendered as patch
//! grids and templated captions, with tasks for every task category.
//!
//! An image of concept `(o, a)` is a grid whose top rows carry a one-hot
//! object code and whose bottom rows carry a one-hot attribute code, plus
//! Gaussian noise. Query-side images are photos and candidate-side images
//! are catalog shots, coded in separate feature blocks, so an untrained
//! encoder cannot match them by raw similarity. Every object and attribute
//! has a primary word and a synonym. Concepts are split into disjoint train and eval halves so that
//! held-out evaluation needs compositional generalization.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::assembly::{tokenize, Vocabulary};
use crate::data::{
    CandidateRecord, DatasetCatalog, Item, Modality, PatchGrid, TaskCategory, TrainExample,
};
use crate::eval::{CondSubtask, ConditionalTuple, EvalQuery, EvalSplit};
use crate::sampler::CaptionPair;
use crate::trainer::CAPTION_DATASET;
use crate::{rng_from_seed, Error, Result, Rng};

const OBJECTS: [(&str, &str); 20] = [
    ("cube", "block"),
    ("ball", "sphere"),
    ("cone", "pyramid"),
    ("ring", "hoop"),
    ("star", "asterisk"),
    ("disk", "plate"),
    ("vase", "urn"),
    ("lamp", "lantern"),
    ("boot", "wellington"),
    ("cup", "mug"),
    ("kite", "glider"),
    ("drum", "tom"),
    ("bell", "chime"),
    ("fork", "prong"),
    ("leaf", "frond"),
    ("shoe", "sneaker"),
    ("hat", "cap"),
    ("key", "latch"),
    ("box", "crate"),
    ("bowl", "basin"),
];

const ATTRIBUTES: [(&str, &str); 10] = [
    ("red", "crimson"),
    ("blue", "azure"),
    ("green", "emerald"),
    ("yellow", "golden"),
    ("purple", "violet"),
    ("orange", "amber"),
    ("pink", "rose"),
    ("black", "ebony"),
    ("white", "ivory"),
    ("gray", "slate"),
];

/// Caption templates; `{A}` and `{O}` are the attribute and object slots.
const CAPTION_TEMPLATES: [&str; 5] = [
    "a photo of a {A} {O}",
    "the {A} {O}",
    "{A} {O}",
    "a picture showing the {A} {O}",
    "some {A} {O} image",
];
const FASHION_TEMPLATES: [&str; 3] = ["{A} {O} product", "shop the {A} {O}", "{A} {O} in stock"];
const PASSAGE_TEMPLATES: [&str; 3] = [
    "entry about the {A} {O}",
    "this page covers a {A} {O}",
    "notes on the {A} {O}",
];

pub const CONDITIONAL_DATASET: &str = "cond_train";
pub const CONDITIONAL_INSTRUCTION: &str = "find the image that satisfies the condition";

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WorldSpec {
    pub n_objects: usize,
    pub n_attributes: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Fraction of concepts in the train split.
    pub train_fraction: f64,
    pub caption_pairs: usize,
    pub train_per_dataset: usize,
    /// Upper bound on queries (and pool size) per eval dataset.
    pub eval_queries: usize,
    pub conditional_train: usize,
    pub conditional_per_subtask: usize,
    pub gallery_size: usize,
    /// Gallery members that match the reference image but not the condition.
    pub image_distractors: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_objects: 20,
            n_attributes: 10,
            grid_rows: 2,
            grid_cols: 2,
            noise_std: 0.1,
            seed: 0,
            train_fraction: 0.5,
            caption_pairs: 16000,
            train_per_dataset: 500,
            eval_queries: 100,
            conditional_train: 500,
            conditional_per_subtask: 50,
            gallery_size: 15,
            image_distractors: 3,
        }
    }
}

impl WorldSpec {
    /// A very small world for fixtures and fast tests.
    pub fn tiny() -> Self {
        Self {
            n_objects: 6,
            n_attributes: 4,
            caption_pairs: 40,
            train_per_dataset: 24,
            eval_queries: 12,
            conditional_train: 24,
            conditional_per_subtask: 4,
            gallery_size: 6,
            image_distractors: 2,
            ..Self::default()
        }
    }

    /// Feature width of a patch: one object and one attribute block per
    /// image style.
    pub fn patch_dim(&self) -> usize {
        2 * (self.n_objects + self.n_attributes)
    }

    pub fn num_concepts(&self) -> usize {
        self.n_objects * self.n_attributes
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects < 3 || self.n_attributes < 3 {
            return Err(Error::Config(
                "the world needs at least 3 objects and 3 attributes".into(),
            ));
        }
        if self.grid_rows < 2 || self.grid_cols == 0 {
            return Err(Error::Config("images need at least two patch rows".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!(
                "noise_std {} must be finite and non-negative",
                self.noise_std
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.num_concepts() < 4 * self.gallery_size {
            return Err(Error::Config(format!(
                "{} concepts cannot host galleries of {} (need 4x)",
                self.num_concepts(),
                self.gallery_size
            )));
        }
        let min_gallery = 1 + self.image_distractors + 2;
        if self.gallery_size < min_gallery
            || self.image_distractors == 0
            || self.image_distractors + 2 > self.n_objects.min(self.n_attributes)
        {
            return Err(Error::Config(format!(
                "gallery of {} with {} image distractors does not fit the world",
                self.gallery_size, self.image_distractors
            )));
        }
        Ok(())
    }

    pub fn object_words(&self, i: usize) -> (String, String) {
        match OBJECTS.get(i) {
            Some((p, s)) => (p.to_string(), s.to_string()),
            None => (format!("obj{i}"), format!("thing{i}")),
        }
    }

    pub fn attribute_words(&self, i: usize) -> (String, String) {
        match ATTRIBUTES.get(i) {
            Some((p, s)) => (p.to_string(), s.to_string()),
            None => (format!("attr{i}"), format!("tone{i}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LatentConcept {
    pub object: usize,
    pub attribute: usize,
}

impl LatentConcept {
    pub fn index(self, spec: &WorldSpec) -> usize {
        self.object * spec.n_attributes + self.attribute
    }

    pub fn from_index(i: usize, spec: &WorldSpec) -> Self {
        Self {
            object: i / spec.n_attributes,
            attribute: i % spec.n_attributes,
        }
    }

    pub fn key(self, spec: &WorldSpec) -> String {
        format!("c{:03}", self.index(spec))
    }
}

/// Which words fill the caption slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordStyle {
    Primary,
    Synonym,
    /// Each slot independently picks one of the two.
    Mixed,
}

/// Rendering style. Photos and catalog shots code the same concept in
/// disjoint feature blocks, so raw pixels of one style say nothing about
/// the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ImageStyle {
    Photo,
    Catalog,
}

/// Noise-free image of `concept`.
pub fn image_centroid(concept: LatentConcept, style: ImageStyle, spec: &WorldSpec) -> Vec<f32> {
    let p = spec.patch_dim();
    let n = spec.grid_rows * spec.grid_cols;
    let top = spec.grid_rows / 2 * spec.grid_cols;
    let offset = match style {
        ImageStyle::Photo => 0,
        ImageStyle::Catalog => spec.n_objects + spec.n_attributes,
    };
    let mut data = vec![0.0f32; n * p];
    for patch in 0..n {
        let slot = if patch < top {
            concept.object
        } else {
            spec.n_objects + concept.attribute
        };
        data[patch * p + offset + slot] = 1.0;
    }
    data
}

pub fn render_image(
    concept: LatentConcept,
    style: ImageStyle,
    spec: &WorldSpec,
    rng: &mut Rng,
) -> PatchGrid {
    let mut data = image_centroid(concept, style, spec);
    if spec.noise_std > 0.0 {
        for v in &mut data {
            let z: f64 = StandardNormal.sample(rng);
            *v += (z * spec.noise_std) as f32;
        }
    }
    PatchGrid::new(spec.grid_rows, spec.grid_cols, spec.patch_dim(), data)
        .expect("rendered grid is well formed")
}

fn pick_word(pair: (String, String), style: WordStyle, rng: &mut Rng) -> String {
    match style {
        WordStyle::Primary => pair.0,
        WordStyle::Synonym => pair.1,
        WordStyle::Mixed => {
            if rng.random_bool(0.5) {
                pair.0
            } else {
                pair.1
            }
        }
    }
}

fn fill(
    template: &str,
    concept: LatentConcept,
    spec: &WorldSpec,
    style: WordStyle,
    rng: &mut Rng,
) -> String {
    let a = pick_word(spec.attribute_words(concept.attribute), style, rng);
    let o = pick_word(spec.object_words(concept.object), style, rng);
    template.replace("{A}", &a).replace("{O}", &o)
}

fn templated(
    templates: &[&str],
    concept: LatentConcept,
    spec: &WorldSpec,
    style: WordStyle,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Vec<u32> {
    let t = templates[rng.random_range(0..templates.len())];
    tokenize(&fill(t, concept, spec, style, rng), vocab)
}

/// A caption naming the attribute then the object, wrapped in filler words.
pub fn render_caption(
    concept: LatentConcept,
    spec: &WorldSpec,
    style: WordStyle,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Vec<u32> {
    templated(&CAPTION_TEMPLATES, concept, spec, style, vocab, rng)
}

/// Recovers the concept named in a caption, if exactly one object and one
/// attribute word occur.
pub fn decode_caption(
    tokens: &[u32],
    spec: &WorldSpec,
    vocab: &Vocabulary,
) -> Option<LatentConcept> {
    let words: Vec<&str> = tokens.iter().filter_map(|t| vocab.token(*t)).collect();
    let find = |n: usize, f: &dyn Fn(usize) -> (String, String)| -> Option<usize> {
        let hits: Vec<usize> = (0..n)
            .filter(|i| {
                let (p, s) = f(*i);
                words.iter().any(|w| *w == p || *w == s)
            })
            .collect();
        (hits.len() == 1).then(|| hits[0])
    };
    let object = find(spec.n_objects, &|i| spec.object_words(i))?;
    let attribute = find(spec.n_attributes, &|i| spec.attribute_words(i))?;
    Some(LatentConcept { object, attribute })
}

/// Nearest noise-free centroid of a rendered grid.
pub fn decode_image(grid: &PatchGrid, spec: &WorldSpec) -> (LatentConcept, ImageStyle) {
    let mut best = (
        f64::INFINITY,
        LatentConcept {
            object: 0,
            attribute: 0,
        },
        ImageStyle::Photo,
    );
    for style in [ImageStyle::Photo, ImageStyle::Catalog] {
        for i in 0..spec.num_concepts() {
            let concept = LatentConcept::from_index(i, spec);
            let c = image_centroid(concept, style, spec);
            let d: f64 = c
                .iter()
                .zip(grid.data())
                .map(|(a, b)| {
                    let d = (a - b) as f64;
                    d * d
                })
                .sum();
            if d < best.0 {
                best = (d, concept, style);
            }
        }
    }
    (best.1, best.2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskKind {
    Paraphrase,
    CaptionToImage,
    ImageToCaption,
    FashionToImage,
    ChangeAttribute,
    ChangeObject,
    TextToPair,
    PairToText,
    PairToPair,
}

#[derive(Debug, Clone, Copy)]
struct TaskDef {
    name: &'static str,
    kind: TaskKind,
    category: TaskCategory,
    query: Modality,
    candidate: Modality,
    fashion: bool,
    instruction: &'static str,
}

const TASKS: [TaskDef; 9] = [
    TaskDef {
        name: "para_t2t",
        kind: TaskKind::Paraphrase,
        category: TaskCategory::Single,
        query: Modality::Text,
        candidate: Modality::Text,
        fashion: false,
        instruction: "find a caption with the same meaning",
    },
    TaskDef {
        name: "cap_t2i",
        kind: TaskKind::CaptionToImage,
        category: TaskCategory::Cross,
        query: Modality::Text,
        candidate: Modality::Image,
        fashion: false,
        instruction: "find an image matching the caption",
    },
    TaskDef {
        name: "cap_i2t",
        kind: TaskKind::ImageToCaption,
        category: TaskCategory::Cross,
        query: Modality::Image,
        candidate: Modality::Text,
        fashion: false,
        instruction: "find a caption describing the image",
    },
    TaskDef {
        name: "fashion_t2i",
        kind: TaskKind::FashionToImage,
        category: TaskCategory::Cross,
        query: Modality::Text,
        candidate: Modality::Image,
        fashion: true,
        instruction: "find the product image for this description",
    },
    TaskDef {
        name: "cir_attr",
        kind: TaskKind::ChangeAttribute,
        category: TaskCategory::Mixed,
        query: Modality::Pair,
        candidate: Modality::Image,
        fashion: true,
        instruction: "find the image with the requested change",
    },
    TaskDef {
        name: "cir_obj",
        kind: TaskKind::ChangeObject,
        category: TaskCategory::Mixed,
        query: Modality::Pair,
        candidate: Modality::Image,
        fashion: false,
        instruction: "find the image with the requested change",
    },
    TaskDef {
        name: "kb_t2p",
        kind: TaskKind::TextToPair,
        category: TaskCategory::Mixed,
        query: Modality::Text,
        candidate: Modality::Pair,
        fashion: false,
        instruction: "find the entry for this caption",
    },
    TaskDef {
        name: "oven_p2t",
        kind: TaskKind::PairToText,
        category: TaskCategory::Mixed,
        query: Modality::Pair,
        candidate: Modality::Text,
        fashion: false,
        instruction: "answer with the matching caption",
    },
    TaskDef {
        name: "info_p2p",
        kind: TaskKind::PairToPair,
        category: TaskCategory::Multi,
        query: Modality::Pair,
        candidate: Modality::Pair,
        fashion: false,
        instruction: "find the entry that answers the question",
    },
];

/// Names of the retrieval datasets, in generation order.
pub fn task_names() -> impl Iterator<Item = &'static str> {
    TASKS.iter().map(|t| t.name)
}

/// The generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBenchmark {
    pub spec: WorldSpec,
    pub vocab: Vocabulary,
    pub catalog: DatasetCatalog,
    pub train_concepts: Vec<LatentConcept>,
    pub eval_concepts: Vec<LatentConcept>,
    /// Image-caption pairs for adaptation.
    pub caption_pairs: Vec<CaptionPair>,
    /// Instruction-tuning examples.
    pub train: Vec<TrainExample>,
    pub eval: EvalSplit,
}

/// Every word the generator can emit.
pub fn world_vocabulary(spec: &WorldSpec) -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    for i in 0..spec.n_objects {
        let (p, s) = spec.object_words(i);
        words.push(p);
        words.push(s);
    }
    for i in 0..spec.n_attributes {
        let (p, s) = spec.attribute_words(i);
        words.push(p);
        words.push(s);
    }
    let mut texts: Vec<&str> = Vec::new();
    texts.extend(CAPTION_TEMPLATES);
    texts.extend(FASHION_TEMPLATES);
    texts.extend(PASSAGE_TEMPLATES);
    texts.extend(TASKS.iter().map(|t| t.instruction));
    texts.extend([
        CONDITIONAL_INSTRUCTION,
        COND_FOCUS_ATTR,
        COND_FOCUS_OBJ,
        "make it",
        "turn it into a",
        "but",
        "instead",
    ]);
    texts.extend(["what is this", "what is shown here"]);
    for t in texts {
        for w in t.split_whitespace().filter(|w| !w.starts_with('{')) {
            words.push(w.to_string());
        }
    }
    Vocabulary::with_words(words)
}

const COND_FOCUS_ATTR: &str = "same color";
const COND_FOCUS_OBJ: &str = "same shape";

/// Splits concepts so that every object and every attribute occurs in both
/// halves.
fn split_concepts(spec: &WorldSpec, rng: &mut Rng) -> (Vec<LatentConcept>, Vec<LatentConcept>) {
    let mut obj_perm: Vec<usize> = (0..spec.n_objects).collect();
    let mut attr_perm: Vec<usize> = (0..spec.n_attributes).collect();
    obj_perm.shuffle(rng);
    attr_perm.shuffle(rng);
    let a = spec.n_attributes;
    let per_object =
        libm::round(spec.train_fraction * a as f64).clamp(1.0, (a - 1) as f64) as usize;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for o in 0..spec.n_objects {
        for k in 0..a {
            let c = LatentConcept {
                object: obj_perm[o],
                attribute: attr_perm[k],
            };
            if (k + o) % a < per_object {
                train.push(c);
            } else {
                eval.push(c);
            }
        }
    }
    train.sort();
    eval.sort();
    (train, eval)
}

struct Gen<'a> {
    spec: &'a WorldSpec,
    vocab: &'a Vocabulary,
    train_set: BTreeSet<LatentConcept>,
}

impl Gen<'_> {
    fn caption(&self, c: LatentConcept, style: WordStyle, rng: &mut Rng) -> Vec<u32> {
        render_caption(c, self.spec, style, self.vocab, rng)
    }

    fn text(&self, s: &str) -> Vec<u32> {
        tokenize(s, self.vocab)
    }

    fn photo(&self, c: LatentConcept, rng: &mut Rng) -> PatchGrid {
        render_image(c, ImageStyle::Photo, self.spec, rng)
    }

    fn catalog(&self, c: LatentConcept, rng: &mut Rng) -> PatchGrid {
        render_image(c, ImageStyle::Catalog, self.spec, rng)
    }

    /// A source concept differing from `target` in one aspect. With
    /// `train_only`, the source comes from the train split when possible.
    fn source(
        &self,
        target: LatentConcept,
        change_attribute: bool,
        train_only: bool,
        rng: &mut Rng,
    ) -> LatentConcept {
        let options: Vec<LatentConcept> = if change_attribute {
            (0..self.spec.n_attributes)
                .filter(|a| *a != target.attribute)
                .map(|a| LatentConcept {
                    attribute: a,
                    ..target
                })
                .collect()
        } else {
            (0..self.spec.n_objects)
                .filter(|o| *o != target.object)
                .map(|o| LatentConcept {
                    object: o,
                    ..target
                })
                .collect()
        };
        let preferred: Vec<LatentConcept> = options
            .iter()
            .copied()
            .filter(|c| self.train_set.contains(c))
            .collect();
        let pool = if train_only && !preferred.is_empty() {
            &preferred
        } else {
            &options
        };
        pool[rng.random_range(0..pool.len())]
    }

    /// Query and candidate for `target` under `kind`.
    fn pair(
        &self,
        kind: TaskKind,
        target: LatentConcept,
        train: bool,
        rng: &mut Rng,
    ) -> (Item, Item) {
        match kind {
            TaskKind::Paraphrase => (
                Item::Text(self.caption(target, WordStyle::Primary, rng)),
                Item::Text(self.caption(target, WordStyle::Synonym, rng)),
            ),
            TaskKind::CaptionToImage => (
                Item::Text(self.caption(target, WordStyle::Mixed, rng)),
                Item::Image(self.catalog(target, rng)),
            ),
            TaskKind::ImageToCaption => (
                Item::Image(self.photo(target, rng)),
                Item::Text(self.caption(target, WordStyle::Mixed, rng)),
            ),
            TaskKind::FashionToImage => (
                Item::Text(templated(
                    &FASHION_TEMPLATES,
                    target,
                    self.spec,
                    WordStyle::Mixed,
                    self.vocab,
                    rng,
                )),
                Item::Image(self.catalog(target, rng)),
            ),
            TaskKind::ChangeAttribute | TaskKind::ChangeObject => {
                let by_attr = kind == TaskKind::ChangeAttribute;
                let src = self.source(target, by_attr, train, rng);
                let text = if by_attr {
                    let w = pick_word(
                        self.spec.attribute_words(target.attribute),
                        WordStyle::Mixed,
                        rng,
                    );
                    self.text(&format!("make it {w}"))
                } else {
                    let w = pick_word(self.spec.object_words(target.object), WordStyle::Mixed, rng);
                    self.text(&format!("turn it into a {w}"))
                };
                (
                    Item::Pair {
                        image: self.photo(src, rng),
                        text,
                    },
                    Item::Image(self.catalog(target, rng)),
                )
            }
            TaskKind::TextToPair => (
                Item::Text(self.caption(target, WordStyle::Primary, rng)),
                Item::Pair {
                    image: self.catalog(target, rng),
                    text: templated(
                        &PASSAGE_TEMPLATES,
                        target,
                        self.spec,
                        WordStyle::Synonym,
                        self.vocab,
                        rng,
                    ),
                },
            ),
            TaskKind::PairToText => (
                Item::Pair {
                    image: self.photo(target, rng),
                    text: self.text("what is this"),
                },
                Item::Text(self.caption(target, WordStyle::Mixed, rng)),
            ),
            TaskKind::PairToPair => (
                Item::Pair {
                    image: self.photo(target, rng),
                    text: self.text("what is shown here"),
                },
                Item::Pair {
                    image: self.catalog(target, rng),
                    text: templated(
                        &PASSAGE_TEMPLATES,
                        target,
                        self.spec,
                        WordStyle::Mixed,
                        self.vocab,
                        rng,
                    ),
                },
            ),
        }
    }

    fn condition_text(
        &self,
        subtask: CondSubtask,
        target: LatentConcept,
        rng: &mut Rng,
    ) -> Vec<u32> {
        match subtask {
            CondSubtask::FocusAttribute => self.text(COND_FOCUS_ATTR),
            CondSubtask::FocusObject => self.text(COND_FOCUS_OBJ),
            CondSubtask::ChangeAttribute => {
                let w = pick_word(
                    self.spec.attribute_words(target.attribute),
                    WordStyle::Mixed,
                    rng,
                );
                self.text(&format!("but {w} instead"))
            }
            CondSubtask::ChangeObject => {
                let w = pick_word(self.spec.object_words(target.object), WordStyle::Mixed, rng);
                self.text(&format!("but a {w} instead"))
            }
        }
    }

    /// Reference concept → positive concept for a subtask.
    fn conditional_target(
        &self,
        subtask: CondSubtask,
        r: LatentConcept,
        rng: &mut Rng,
    ) -> LatentConcept {
        let other = |n: usize, not: usize, rng: &mut Rng| -> usize {
            let v = rng.random_range(0..n - 1);
            if v >= not {
                v + 1
            } else {
                v
            }
        };
        match subtask {
            // Keep the attribute, any other object.
            CondSubtask::FocusAttribute | CondSubtask::ChangeObject => LatentConcept {
                object: other(self.spec.n_objects, r.object, rng),
                ..r
            },
            // Keep the object, any other attribute.
            CondSubtask::FocusObject | CondSubtask::ChangeAttribute => LatentConcept {
                attribute: other(self.spec.n_attributes, r.attribute, rng),
                ..r
            },
        }
    }

    /// Gallery concepts: the positive, `image_distractors` concepts sharing
    /// the reference's uncontrolled aspect (or the reference itself for the
    /// change subtasks), two concepts matching only the condition word for
    /// the change subtasks, and fillers sharing nothing relevant.
    fn gallery(
        &self,
        subtask: CondSubtask,
        r: LatentConcept,
        pos: LatentConcept,
        rng: &mut Rng,
    ) -> Vec<(LatentConcept, bool)> {
        let s = self.spec;
        let mut used: BTreeSet<LatentConcept> = BTreeSet::new();
        used.insert(pos);
        let mut out = vec![(pos, true)];
        let mut push = |c: LatentConcept, out: &mut Vec<(LatentConcept, bool)>| {
            if used.insert(c) {
                out.push((c, false));
                true
            } else {
                false
            }
        };
        let mut attrs: Vec<usize> = (0..s.n_attributes).collect();
        let mut objs: Vec<usize> = (0..s.n_objects).collect();
        attrs.shuffle(rng);
        objs.shuffle(rng);
        let n_match = s.image_distractors;
        match subtask {
            CondSubtask::FocusAttribute => {
                // Same object as the reference, different attribute.
                for &a in attrs.iter().filter(|a| **a != r.attribute).take(n_match) {
                    push(
                        LatentConcept {
                            object: r.object,
                            attribute: a,
                        },
                        &mut out,
                    );
                }
            }
            CondSubtask::FocusObject => {
                for &o in objs.iter().filter(|o| **o != r.object).take(n_match) {
                    push(
                        LatentConcept {
                            object: o,
                            attribute: r.attribute,
                        },
                        &mut out,
                    );
                }
            }
            CondSubtask::ChangeAttribute => {
                push(r, &mut out);
                for &a in attrs
                    .iter()
                    .filter(|a| **a != r.attribute && **a != pos.attribute)
                    .take(n_match - 1)
                {
                    push(
                        LatentConcept {
                            object: r.object,
                            attribute: a,
                        },
                        &mut out,
                    );
                }
                for &o in objs.iter().filter(|o| **o != r.object).take(2) {
                    push(
                        LatentConcept {
                            object: o,
                            attribute: pos.attribute,
                        },
                        &mut out,
                    );
                }
            }
            CondSubtask::ChangeObject => {
                push(r, &mut out);
                for &o in objs
                    .iter()
                    .filter(|o| **o != r.object && **o != pos.object)
                    .take(n_match - 1)
                {
                    push(
                        LatentConcept {
                            object: o,
                            attribute: r.attribute,
                        },
                        &mut out,
                    );
                }
                for &a in attrs.iter().filter(|a| **a != r.attribute).take(2) {
                    push(
                        LatentConcept {
                            object: pos.object,
                            attribute: a,
                        },
                        &mut out,
                    );
                }
            }
        }
        // Fillers share no aspect with the reference and do not satisfy the
        // condition.
        let mut fillers: Vec<LatentConcept> = (0..s.num_concepts())
            .map(|i| LatentConcept::from_index(i, s))
            .filter(|c| c.object != r.object && c.attribute != r.attribute)
            .filter(|c| c.object != pos.object && c.attribute != pos.attribute)
            .collect();
        fillers.shuffle(rng);
        for c in fillers {
            if out.len() >= s.gallery_size {
                break;
            }
            push(c, &mut out);
        }
        out.shuffle(rng);
        out
    }

    fn conditional_tuple(
        &self,
        id: String,
        subtask: CondSubtask,
        reference: LatentConcept,
        rng: &mut Rng,
    ) -> ConditionalTuple {
        let pos = self.conditional_target(subtask, reference, rng);
        let condition = self.condition_text(subtask, pos, rng);
        let members = self.gallery(subtask, reference, pos, rng);
        let mut gallery = Vec::with_capacity(members.len());
        let mut positive = String::new();
        for (k, (c, is_pos)) in members.into_iter().enumerate() {
            let gid = format!("{id}/g{k:02}");
            if is_pos {
                positive = gid.clone();
            }
            gallery.push((gid, self.catalog(c, rng)));
        }
        ConditionalTuple {
            id,
            subtask,
            image: self.photo(reference, rng),
            condition,
            instruction: Some(CONDITIONAL_INSTRUCTION.to_string()),
            gallery,
            positive,
        }
    }
}

fn dataset_rng(seed: u64, salt: u64) -> Rng {
    rng_from_seed(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03)),
    )
}

/// Generates the full benchmark deterministically from `spec.seed`.
pub fn generate_tasks(spec: &WorldSpec) -> Result<SynthBenchmark> {
    spec.validate()?;
    let vocab = world_vocabulary(spec);
    let (train_concepts, eval_concepts) = split_concepts(spec, &mut dataset_rng(spec.seed, 0));
    let gen = Gen {
        spec,
        vocab: &vocab,
        train_set: train_concepts.iter().copied().collect(),
    };
    let mut catalog = DatasetCatalog::new();

    let mut rng = dataset_rng(spec.seed, 1);
    let caption_pairs: Vec<CaptionPair> = (0..spec.caption_pairs)
        .map(|k| {
            let c = train_concepts[rng.random_range(0..train_concepts.len())];
            CaptionPair {
                id: format!("{}#{CAPTION_DATASET}{k}", c.key(spec)),
                image: if rng.random_bool(0.5) {
                    gen.photo(c, &mut rng)
                } else {
                    gen.catalog(c, &mut rng)
                },
                caption: gen.caption(c, WordStyle::Mixed, &mut rng),
            }
        })
        .collect();
    catalog.declare(
        CAPTION_DATASET,
        TaskCategory::Cross,
        Modality::Image,
        Modality::Text,
        false,
    )?;

    let mut train = Vec::new();
    let mut eval = EvalSplit::default();
    let n_eval = spec.eval_queries.min(eval_concepts.len());
    for (t, def) in TASKS.iter().enumerate() {
        catalog.declare(
            def.name,
            def.category,
            def.query,
            def.candidate,
            def.fashion,
        )?;
        eval.catalog.declare(
            def.name,
            def.category,
            def.query,
            def.candidate,
            def.fashion,
        )?;
        let mut rng = dataset_rng(spec.seed, 100 + t as u64);
        for k in 0..spec.train_per_dataset {
            let c = train_concepts[rng.random_range(0..train_concepts.len())];
            let (query, candidate) = gen.pair(def.kind, c, true, &mut rng);
            train.push(TrainExample {
                query,
                candidate,
                instruction: Some(def.instruction.to_string()),
                dataset: def.name.to_string(),
                pair_id: format!("{}#{}{k}", c.key(spec), def.name),
            });
        }
        let mut rng = dataset_rng(spec.seed, 200 + t as u64);
        let mut chosen = eval_concepts.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(n_eval);
        chosen.sort();
        for c in &chosen {
            let (query, candidate) = gen.pair(def.kind, *c, false, &mut rng);
            let qid = format!("{}/q{}", def.name, c.key(spec));
            let cid = format!("{}/{}", def.name, c.key(spec));
            eval.queries.push(EvalQuery {
                id: qid.clone(),
                dataset: def.name.to_string(),
                item: query,
                instruction: Some(def.instruction.to_string()),
            });
            eval.candidates.push(CandidateRecord {
                id: cid.clone(),
                dataset: def.name.to_string(),
                item: candidate,
            });
            eval.qrels.insert(&qid, &cid);
        }
    }

    catalog.declare(
        CONDITIONAL_DATASET,
        TaskCategory::Conditional,
        Modality::Pair,
        Modality::Image,
        false,
    )?;
    let mut rng = dataset_rng(spec.seed, 300);
    for k in 0..spec.conditional_train {
        let subtask = CondSubtask::ALL[k % CondSubtask::ALL.len()];
        let reference = train_concepts[rng.random_range(0..train_concepts.len())];
        let pos = gen.conditional_target(subtask, reference, &mut rng);
        let condition = gen.condition_text(subtask, pos, &mut rng);
        train.push(TrainExample {
            query: Item::Pair {
                image: gen.photo(reference, &mut rng),
                text: condition,
            },
            candidate: Item::Image(gen.catalog(pos, &mut rng)),
            instruction: Some(CONDITIONAL_INSTRUCTION.to_string()),
            dataset: CONDITIONAL_DATASET.to_string(),
            pair_id: format!("{}#{CONDITIONAL_DATASET}{k}", pos.key(spec)),
        });
    }
    let mut rng = dataset_rng(spec.seed, 400);
    for subtask in CondSubtask::ALL {
        for k in 0..spec.conditional_per_subtask {
            let reference = eval_concepts[rng.random_range(0..eval_concepts.len())];
            let id = format!("cond/{}/{k:03}", subtask.as_str());
            eval.conditional
                .push(gen.conditional_tuple(id, subtask, reference, &mut rng));
        }
    }
    crate::data::register_examples(&mut catalog, &train)?;
    Ok(SynthBenchmark {
        spec: spec.clone(),
        vocab,
        catalog,
        train_concepts,
        eval_concepts,
        caption_pairs,
        train,
        eval,
    })
}

/// Image-similarity oracle for conditional galleries: the number of aspects
/// a gallery concept shares with the reference.
pub fn shared_aspects(a: LatentConcept, b: LatentConcept) -> usize {
    usize::from(a.object == b.object) + usize::from(a.attribute == b.attribute)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_pool;
    use crate::data::PoolScope;

    #[test]
    fn noise_free_renders_are_identical() {
        let spec = WorldSpec {
            noise_std: 0.0,
            ..WorldSpec::default()
        };
        let c = LatentConcept {
            object: 3,
            attribute: 7,
        };
        let a = render_image(c, ImageStyle::Photo, &spec, &mut rng_from_seed(1));
        let b = render_image(c, ImageStyle::Photo, &spec, &mut rng_from_seed(2));
        assert_eq!(a, b);
        let cat = render_image(c, ImageStyle::Catalog, &spec, &mut rng_from_seed(1));
        let overlap: f32 = a.data().iter().zip(cat.data()).map(|(x, y)| x * y).sum();
        assert_eq!(overlap, 0.0);
    }

    #[test]
    fn objects_differ_only_in_object_block() {
        let spec = WorldSpec {
            noise_std: 0.0,
            ..WorldSpec::default()
        };
        let a = render_image(
            LatentConcept {
                object: 1,
                attribute: 2,
            },
            ImageStyle::Photo,
            &spec,
            &mut rng_from_seed(0),
        );
        let b = render_image(
            LatentConcept {
                object: 5,
                attribute: 2,
            },
            ImageStyle::Photo,
            &spec,
            &mut rng_from_seed(0),
        );
        let p = spec.patch_dim();
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            if x != y {
                assert!(
                    i % p < spec.n_objects,
                    "difference outside the object block at {i}"
                );
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn nearest_centroid_recovers_concepts() {
        let spec = WorldSpec::default();
        let mut rng = rng_from_seed(3);
        let mut correct = 0;
        for k in 0..1000 {
            let c = LatentConcept::from_index(k % spec.num_concepts(), &spec);
            let style = if k % 2 == 0 {
                ImageStyle::Photo
            } else {
                ImageStyle::Catalog
            };
            if decode_image(&render_image(c, style, &spec, &mut rng), &spec) == (c, style) {
                correct += 1;
            }
        }
        assert!(correct as f64 / 1000.0 > 0.99);
    }

    #[test]
    fn captions_decode_and_differ() {
        let spec = WorldSpec::default();
        let vocab = world_vocabulary(&spec);
        let mut rng = rng_from_seed(4);
        let c = LatentConcept {
            object: 2,
            attribute: 4,
        };
        let style = WordStyle::Primary;
        let same = |rng: &mut Rng| render_caption(c, &spec, style, &vocab, rng);
        assert_eq!(same(&mut rng_from_seed(9)), same(&mut rng_from_seed(9)));
        let other = render_caption(
            LatentConcept {
                object: 3,
                attribute: 4,
            },
            &spec,
            style,
            &vocab,
            &mut rng_from_seed(9),
        );
        assert_ne!(same(&mut rng_from_seed(9)), other);
        for k in 0..1000 {
            let c = LatentConcept::from_index(k % spec.num_concepts(), &spec);
            let cap = render_caption(c, &spec, WordStyle::Mixed, &vocab, &mut rng);
            assert!(!cap.contains(&vocab.unk_id()));
            assert_eq!(decode_caption(&cap, &spec, &vocab), Some(c));
        }
    }

    #[test]
    fn split_is_disjoint_and_covers_every_word() {
        let spec = WorldSpec::default();
        let b = generate_tasks(&spec).unwrap();
        let train: BTreeSet<_> = b.train_concepts.iter().collect();
        assert!(b.eval_concepts.iter().all(|c| !train.contains(c)));
        assert_eq!(
            b.train_concepts.len() + b.eval_concepts.len(),
            spec.num_concepts()
        );
        for o in 0..spec.n_objects {
            assert!(b.train_concepts.iter().any(|c| c.object == o));
            assert!(b.eval_concepts.iter().any(|c| c.object == o));
        }
        for a in 0..spec.n_attributes {
            assert!(b.train_concepts.iter().any(|c| c.attribute == a));
        }
    }

    #[test]
    fn qrels_reference_existing_candidates() {
        let b = generate_tasks(&WorldSpec::default()).unwrap();
        let pool = build_pool(&b.eval.candidates, &PoolScope::Global).unwrap();
        b.eval.qrels.validate(&pool).unwrap();
        assert_eq!(b.eval.queries.len(), 9 * 100);
        assert_eq!(b.train.len(), 9 * 500 + 500);
        assert_eq!(b.caption_pairs.len(), 16000);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = WorldSpec::tiny();
        assert_eq!(
            generate_tasks(&spec).unwrap(),
            generate_tasks(&spec).unwrap()
        );
        let other = WorldSpec {
            seed: 1,
            ..WorldSpec::tiny()
        };
        assert_ne!(
            generate_tasks(&spec).unwrap().train,
            generate_tasks(&other).unwrap().train
        );
    }

    #[test]
    fn spec_too_small_is_rejected() {
        let spec = WorldSpec {
            n_objects: 3,
            n_attributes: 3,
            ..WorldSpec::default()
        };
        assert!(generate_tasks(&spec).is_err());
    }

    #[test]
    fn conditional_galleries_defeat_image_similarity() {
        let spec = WorldSpec::default();
        let b = generate_tasks(&spec).unwrap();
        assert_eq!(b.eval.conditional.len(), 4 * 50);
        for t in &b.eval.conditional {
            t.validate().unwrap();
            assert_eq!(t.gallery.len(), spec.gallery_size);
            let reference = decode_image(&t.image, &spec).0;
            let concepts: Vec<(LatentConcept, bool)> = t
                .gallery
                .iter()
                .map(|(id, g)| (decode_image(g, &spec).0, *id == t.positive))
                .collect();
            let pos = concepts.iter().find(|c| c.1).unwrap().0;
            let pos_sim = shared_aspects(reference, pos);
            let rivals = concepts
                .iter()
                .filter(|(c, p)| !p && shared_aspects(reference, *c) >= pos_sim)
                .count();
            assert!(rivals >= 1, "{}: no image-matching distractor", t.id);
            assert!(rivals >= spec.image_distractors || t.subtask != CondSubtask::FocusAttribute);
        }
    }
}
