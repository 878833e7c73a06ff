//! Acceptance criteria A1 to A10.
//!
//! Prints one line per criterion. Criteria listed in `KNOWN_DEVIATIONS`
//! still print FAIL when they fail but do not fail the process; if one of
//! them passes it prints XPASS. Pass criterion ids as arguments to run a
//! subset, e.g. `cargo test -p jfe --test acceptance -- A1 A9`.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use jfe::bench::DataDir;
use jfe::checkpoint::{decode_checkpoint, encode_checkpoint};
use jfe::cli::main_with;
use jfe::config::{Architecture, RunConfig, SamplerMode};
use jfe::error::JfeError;
use jfe::pipeline::{evaluate_checkpoint, init_checkpoint, run_stage};
use jfe::report::ReportDoc;
use jfe_core::adapters::{attach, default_targets, merge, AdapterSpec};
use jfe_core::assembly::{assemble, tokenize, BudgetConfig, InstructionOrder, Segment};
use jfe_core::data::{Item, PatchGrid, RelevanceSet, TaskCategory};
use jfe_core::encoder::{
    Combiner, Encoder, Mode, OneTower, OneTowerConfig, TwoTower, TwoTowerConfig,
};
use jfe_core::numerics::{fd_check, FdCoverage, ParamStore};
use jfe_core::objective::{info_nce, lr_at, ContrastiveBatch, ScheduleConfig};
use jfe_core::retrieval::{build_index, recall_at_k};
use jfe_core::rng_from_seed;
use jfe_core::sampler::{
    compose_batch, sample_num_datasets, ExamplePool, SamplerConfig, SamplingMode,
};
use jfe_core::synth::{generate_tasks, SynthBenchmark, WorldSpec};
use jfe_core::trainer::{batch_loss, batch_loss_and_grads, Checkpoint, PairRef, Stage};
use rand::Rng;

/// Criteria whose failure is analysed in the decision ledger.
const KNOWN_DEVIATIONS: &[&str] = &["A7"];

// Tolerances.
const A1_MAX_REL_ERR: f64 = 1e-5;
const A1_MAX_SECONDS: f64 = 60.0;
const A1_FD_EPS: f64 = 1e-5;
const A1_FD_COORDS_PER_TENSOR: usize = 12;
const A2_TOL: f64 = 1e-9;
const A4_MERGE_TOL: f64 = 1e-6;
const A5_MEAN_RANGE: (f64, f64) = (3.9, 4.1);
const A6_CHANCE_SIGMAS: f64 = 3.0;
const A7_COND_MARGIN: f64 = 0.10;
const A7_CROSS_GAP: f64 = 0.05;
const A7_PARAM_RATIO: (f64, f64) = (0.8, 1.25);
/// Fusion MLP width that brings feature fusion within the ratio above.
const A7_FUSION_HIDDEN: usize = 16;
const A8_TIE_TOL: f64 = 0.005;
const A9_TOL: f64 = 1e-12;
const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn desk_bench() -> SynthBenchmark {
    generate_tasks(&WorldSpec::default()).expect("desk world generates")
}

// ---------------------------------------------------------------- A1

fn a1_pairs(bench: &SynthBenchmark) -> (Vec<(Item, Option<Vec<u32>>, Item)>, usize) {
    // One example from each of eight datasets, so every modality pairing
    // and instruction path is exercised.
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for ex in &bench.train {
        if out.len() == 8 {
            break;
        }
        if !seen.insert(ex.dataset.clone()) {
            continue;
        }
        let instr = ex
            .instruction
            .as_deref()
            .map(|s| tokenize(s, &bench.vocab))
            .filter(|t| !t.is_empty());
        out.push((ex.query.clone(), instr, ex.candidate.clone()));
    }
    (out, seen.len())
}

fn a1_error(enc: &Encoder, store: &ParamStore, pairs: &[(Item, Option<Vec<u32>>, Item)]) -> f64 {
    let refs: Vec<PairRef> = pairs
        .iter()
        .map(|(q, i, c)| PairRef {
            query: q,
            instruction: i.as_deref(),
            candidate: c,
        })
        .collect();
    let tau = 0.07;
    let (_, g) = batch_loss_and_grads(enc, store, &refs, tau, false, &mut Mode::Eval).unwrap();
    fd_check(
        |s| batch_loss(enc, s, &refs, tau, false),
        &g,
        store,
        A1_FD_EPS,
        FdCoverage::PerTensor(A1_FD_COORDS_PER_TENSOR),
    )
    .unwrap()
}

fn randomize_adapters(store: &mut ParamStore, seed: u64) {
    let mut rng = rng_from_seed(seed);
    let ids: Vec<_> = store
        .ids()
        .filter(|id| store.name(*id).starts_with("lora."))
        .collect();
    for id in ids {
        store
            .data_mut(id)
            .iter_mut()
            .for_each(|v| *v = f64::from(rng.random_range(-0.1f32..0.1)));
    }
}

fn a1() -> Outcome {
    let bench = desk_bench();
    let (pairs, datasets) = a1_pairs(&bench);
    let patch = WorldSpec::default().patch_dim();
    let vocab = bench.vocab.len();
    let mut notes = Vec::new();
    let mut ok = pairs.len() == 8;

    let one = OneTowerConfig::desk(vocab, patch);
    ok &= one.tower.layers == 2 && one.tower.hidden_dim == 64;
    let mut two = TwoTowerConfig::desk(vocab, patch, Combiner::FeatureFusion);
    two.text.layers = 2;
    two.image.layers = 2;

    let mut run = |name: &str,
                   build: &dyn Fn(&mut ParamStore) -> Encoder,
                   rebind: &dyn Fn(&ParamStore) -> Encoder| {
        let t = Instant::now();
        let mut store = ParamStore::new();
        let enc = build(&mut store);
        let base_err = a1_error(&enc, &store, &pairs);
        let mut adapted = attach(
            &store,
            &AdapterSpec::new(4, 8.0, 0.0, default_targets(&store)),
            5,
        )
        .unwrap();
        randomize_adapters(&mut adapted, 6);
        let lora_err = a1_error(&rebind(&adapted), &adapted, &pairs);
        let secs = t.elapsed().as_secs_f64();
        ok &= base_err < A1_MAX_REL_ERR && lora_err < A1_MAX_REL_ERR && secs < A1_MAX_SECONDS;
        notes.push(format!(
            "{name}: base {base_err:.2e}, lora {lora_err:.2e}, {secs:.1}s"
        ));
    };
    run(
        "one-tower",
        &|s| Encoder::OneTower(OneTower::init(one, s, &mut rng_from_seed(1)).unwrap()),
        &|s| Encoder::OneTower(OneTower::bind(one, s).unwrap()),
    );
    run(
        "two-tower feature fusion",
        &|s| Encoder::TwoTower(TwoTower::init(two, s, &mut rng_from_seed(2)).unwrap()),
        &|s| Encoder::TwoTower(TwoTower::bind(two, s).unwrap()),
    );
    check(
        ok,
        format!(
            "L=2 D=64 |B|=8 over {datasets} datasets, {A1_FD_COORDS_PER_TENSOR} coords/tensor; {}; max rel err < {A1_MAX_REL_ERR:e}, < {A1_MAX_SECONDS}s each",
            notes.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- A2

fn a2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = rng_from_seed(11);
    for b in [2usize, 8, 64] {
        let dim = 5;
        // Every query sees the same similarity to every candidate.
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..b).map(|_| v.clone()).collect();
        for tau in [0.07, 1.0] {
            let loss = info_nce(&ContrastiveBatch::from_rows(&rows, &rows, tau).unwrap()).unwrap();
            worst = worst.max((loss - (b as f64).ln()).abs());
        }
        let zero = vec![vec![0.0; dim]; b];
        let loss = info_nce(&ContrastiveBatch::from_rows(&zero, &zero, 0.07).unwrap()).unwrap();
        worst = worst.max((loss - (b as f64).ln()).abs());
    }
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let loss = info_nce(&ContrastiveBatch::from_rows(&eye, &eye, 1.0).unwrap()).unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let eye_err = (loss - expected).abs();
    check(
        worst < A2_TOL && eye_err < A2_TOL,
        format!("uniform |loss - ln|B|| max {worst:.1e} for |B| in {{2,8,64}}; identity |B|=2 err {eye_err:.1e} (tol {A2_TOL:e})"),
    )
}

// ---------------------------------------------------------------- A3

fn a3() -> Outcome {
    let (n, q, dim, k) = (10_000usize, 1_000usize, 16usize, 20usize);
    let mut rng = rng_from_seed(21);
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let cands: Vec<Vec<f64>> = (0..n).map(|_| draw()).collect();
    let queries: Vec<Vec<f64>> = (0..q).map(|_| draw()).collect();
    let index = build_index(
        cands
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("c{i}"), v.clone())),
    )
    .unwrap();

    let unit = |v: &[f64]| -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm).collect()
    };
    let normed: Vec<Vec<f64>> = cands.iter().map(|c| unit(c)).collect();
    let mut agree = 0;
    for qv in &queries {
        // Oracle: score everything, sort in full, ties to the lower id.
        let mut scored: Vec<(f64, usize)> = normed
            .iter()
            .enumerate()
            .map(|(i, c)| (c.iter().zip(qv).map(|(a, b)| a * b).sum(), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let expected: Vec<String> = scored[..k].iter().map(|(_, i)| format!("c{i}")).collect();
        let got: Vec<String> = index
            .search(qv, k)
            .unwrap()
            .iter()
            .map(|h| h.id.to_string())
            .collect();
        agree += usize::from(got == expected);
    }

    // Hand-counted fixture: five queries, ranked lists, relevance sets.
    let mut rels = RelevanceSet::new();
    for (qid, c) in [
        ("q1", "a"),
        ("q2", "b"),
        ("q2", "e"),
        ("q3", "z"),
        ("q4", "c"),
        ("q5", "d"),
    ] {
        rels.insert(qid, c);
    }
    let runs = vec![
        ("q1", vec!["a", "b", "c"]),
        ("q2", vec!["c", "e", "b"]),
        ("q3", vec!["a", "b", "c"]),
        ("q4", vec!["d", "a", "b", "c"]),
        ("q5", vec!["a", "b", "c", "e", "d"]),
    ];
    // Counted by hand: @1 {q1}, @2 adds q2, @3 same, @4 adds q4, @5 adds q5.
    let expected = [(1, 0.2), (2, 0.4), (3, 0.4), (4, 0.6), (5, 0.8), (10, 0.8)];
    let fixtures_ok = expected
        .iter()
        .all(|&(k, r)| recall_at_k(&runs, &rels, k).unwrap() == r);
    check(
        agree == q && fixtures_ok,
        format!("{agree}/{q} queries match the full-sort top-{k} over {n} candidates; recall fixtures exact: {fixtures_ok}"),
    )
}

// ---------------------------------------------------------------- A4

fn a4_items(seed: u64, patch: usize) -> Vec<Item> {
    let mut rng = rng_from_seed(seed);
    let mut grid = |n: usize| {
        PatchGrid::new(
            1,
            n,
            patch,
            (0..n * patch)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
        )
        .unwrap()
    };
    vec![
        Item::Text(vec![5, 9, 12, 20, 31]),
        Item::Image(grid(4)),
        Item::Pair {
            image: grid(4),
            text: vec![7, 8, 29],
        },
    ]
}

fn a4() -> Outcome {
    let (vocab, patch) = (40, 6);
    let cfg = OneTowerConfig::desk(vocab, patch);
    let outputs = |store: &ParamStore, items: &[Item], instr: &[u32]| -> Vec<Vec<f64>> {
        let enc = Encoder::OneTower(OneTower::bind(cfg, store).unwrap());
        items
            .iter()
            .map(|i| enc.encode(store, i, Some(instr)).unwrap().0)
            .collect()
    };
    let max_diff = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let instr = [10u32, 11, 12];
    let (mut bitwise, mut reattach, mut worst) = (0, 0, 0.0f64);
    for seed in 0..50u64 {
        let mut store = ParamStore::new();
        OneTower::init(cfg, &mut store, &mut rng_from_seed(seed)).unwrap();
        let items = a4_items(seed + 500, patch);
        let base_out = outputs(&store, &items, &instr);
        let spec = AdapterSpec::desk_stage1(default_targets(&store));
        let mut adapted = attach(&store, &spec, seed).unwrap();
        bitwise += usize::from(outputs(&adapted, &items, &instr) == base_out);

        // Trained-looking adapters, then merge.
        let mut rng = rng_from_seed(seed + 9);
        let bs: Vec<_> = adapted
            .ids()
            .filter(|id| adapted.name(*id).starts_with("lora."))
            .collect();
        for id in bs {
            adapted
                .data_mut(id)
                .iter_mut()
                .for_each(|v| *v = f64::from(rng.random_range(-0.2f32..0.2)));
        }
        let merged = merge(&adapted);
        let merged_out = outputs(&merged, &items, &instr);
        worst = worst.max(max_diff(&outputs(&adapted, &items, &instr), &merged_out));
        let again = attach(
            &merged,
            &AdapterSpec::desk_stage2(default_targets(&merged)),
            seed + 1,
        )
        .unwrap();
        reattach += usize::from(outputs(&again, &items, &instr) == merged_out);
    }
    check(
        bitwise == 50 && reattach == 50 && worst < A4_MERGE_TOL,
        format!("attach bitwise {bitwise}/50; merge max abs diff {worst:.1e} (tol {A4_MERGE_TOL:e}); merge->reattach bitwise {reattach}/50"),
    )
}

// ---------------------------------------------------------------- A5

fn a5() -> Outcome {
    let cfg = SamplerConfig {
        mean: 4.0,
        std: 1.0,
        batch_size: 64,
        mode: SamplingMode::Gaussian,
        seed: 0,
    };
    let mut rng = rng_from_seed(31);
    let draws: Vec<usize> = (0..100_000)
        .map(|_| sample_num_datasets(&mut rng, &cfg, 10))
        .collect();
    let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
    let (lo, hi) = (*draws.iter().min().unwrap(), *draws.iter().max().unwrap());
    let nd_ok = (A5_MEAN_RANGE.0..=A5_MEAN_RANGE.1).contains(&mean) && lo >= 1 && hi <= 10;

    let bench = desk_bench();
    let pool = ExamplePool::new(&bench.train);
    let family = |i: usize| {
        let id = &bench.train[i].pair_id;
        id.split('#').next().unwrap_or(id).to_string()
    };
    let mut dupes = 0;
    let mut batches = 0;
    for (mode, n) in [
        (SamplingMode::Gaussian, 5_000),
        (SamplingMode::None, 2_500),
        (SamplingMode::Fixed(4), 2_500),
    ] {
        let cfg = SamplerConfig { mode, ..cfg };
        for _ in 0..n {
            let b = compose_batch(&mut rng, &pool, &cfg).unwrap();
            let fams: BTreeSet<String> = b.examples.iter().map(|&i| family(i)).collect();
            dupes +=
                usize::from(fams.len() != b.examples.len() || b.examples.len() != cfg.batch_size);
            batches += 1;
        }
    }
    check(
        nd_ok && dupes == 0,
        format!(
            "N_d over 100k draws: mean {mean:.4}, support [{lo}, {hi}]; {batches} batches of 64 scanned, {dupes} with a repeated family"
        ),
    )
}

// ---------------------------------------------------------------- A6 to A8

struct Experiments {
    data: DataDir,
    cells: BTreeMap<(String, u64), (ReportDoc, usize)>,
    stage1: BTreeMap<u64, Checkpoint>,
}

impl Experiments {
    fn new() -> Self {
        let bench = desk_bench();
        Self {
            data: DataDir::from(bench),
            cells: BTreeMap::new(),
            stage1: BTreeMap::new(),
        }
    }

    fn record(&mut self, name: &str, seed: u64, cfg: &RunConfig, ckpt: &Checkpoint) {
        let t = Instant::now();
        let doc = evaluate_checkpoint(cfg, ckpt, &self.data).unwrap();
        let c = |k: &str| doc.category(k).unwrap_or(f64::NAN);
        eprintln!(
            "  {name:<12} seed {seed}: overall {:.3} single {:.3} cross {:.3} mixed {:.3} multi {:.3} conditional {:.3} ({} params, eval {:.1}s)",
            doc.overall_avg,
            c("single"),
            c("cross"),
            c("mixed"),
            c("multi"),
            c("conditional"),
            ckpt.store.scalar_count(),
            t.elapsed().as_secs_f64()
        );
        self.cells
            .insert((name.to_string(), seed), (doc, ckpt.store.scalar_count()));
    }

    fn stage(&self, cfg: &RunConfig, base: &Checkpoint, stage: Stage, what: &str) -> Checkpoint {
        let t = Instant::now();
        let out = run_stage(cfg, base, stage, &self.data).unwrap();
        eprintln!(
            "  trained {what} ({} steps, {:.0}s)",
            out.log.len(),
            t.elapsed().as_secs_f64()
        );
        out.checkpoint
    }

    fn metric(&self, name: &str, f: impl Fn(&ReportDoc) -> f64) -> Vec<f64> {
        SEEDS
            .iter()
            .map(|s| f(&self.cells[&(name.to_string(), *s)].0))
            .collect()
    }

    fn has(&self, name: &str) -> bool {
        SEEDS
            .iter()
            .all(|s| self.cells.contains_key(&(name.to_string(), *s)))
    }

    /// One-tower cells: untrained, stage 1, stage 2, both; plus the
    /// stage-2 sampler variants on top of stage 1.
    fn one_tower(&mut self, samplers: bool) {
        for &seed in &SEEDS {
            let mut cfg = RunConfig::default();
            cfg.run.seed = seed;
            let need_base = !self.cells.contains_key(&("both".to_string(), seed));
            let need_samplers =
                samplers && !self.cells.contains_key(&("none_mode".to_string(), seed));
            if !need_base && !need_samplers {
                continue;
            }
            let init = init_checkpoint(&cfg, &self.data).unwrap();
            let s1 = match self.stage1.get(&seed) {
                Some(c) => c.clone(),
                None => self.stage(
                    &cfg,
                    &init,
                    Stage::Adapt,
                    &format!("one-tower stage 1, seed {seed}"),
                ),
            };
            self.stage1.insert(seed, s1.clone());
            if need_base {
                self.record("none", seed, &cfg, &init);
                self.record("stage1", seed, &cfg, &s1);
                let s2 = self.stage(
                    &cfg,
                    &init,
                    Stage::Instruct,
                    &format!("one-tower stage 2 only, seed {seed}"),
                );
                self.record("stage2", seed, &cfg, &s2);
                let both = self.stage(
                    &cfg,
                    &s1,
                    Stage::Instruct,
                    &format!("one-tower stage 1+2, seed {seed}"),
                );
                self.record("both", seed, &cfg, &both);
            }
            if need_samplers {
                for (name, mode) in [
                    ("none_mode", SamplerMode::None),
                    ("fixed4", SamplerMode::Fixed),
                ] {
                    let mut c = cfg.clone();
                    c.sampler.mode = mode;
                    c.sampler.datasets = 4;
                    let ck = self.stage(
                        &c,
                        &s1,
                        Stage::Instruct,
                        &format!("one-tower stage 2 {name}, seed {seed}"),
                    );
                    self.record(name, seed, &c, &ck);
                }
            }
        }
    }

    fn two_tower(&mut self, name: &str, combiner: Combiner, w: f64) {
        for &seed in &SEEDS {
            let cfg = two_tower_config(seed, combiner, w);
            let init = init_checkpoint(&cfg, &self.data).unwrap();
            let s1 = self.stage(
                &cfg,
                &init,
                Stage::Adapt,
                &format!("{name} stage 1, seed {seed}"),
            );
            let both = self.stage(
                &cfg,
                &s1,
                Stage::Instruct,
                &format!("{name} stage 1+2, seed {seed}"),
            );
            self.record(name, seed, &cfg, &both);
        }
    }
}

fn two_tower_config(seed: u64, combiner: Combiner, w: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.seed = seed;
    cfg.model.arch = Architecture::TwoTower;
    cfg.model.combiner = combiner;
    cfg.model.score_weight = w;
    cfg.model.fusion_hidden = A7_FUSION_HIDDEN;
    cfg
}

/// Exact chance recall of a uniformly random ranking, and its standard
/// deviation, for the overall average of the retrieval datasets.
fn chance_overall(data: &DataDir) -> (f64, f64) {
    let split = &data.eval;
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for (name, info) in split.catalog.iter() {
        if info.category == TaskCategory::Conditional {
            continue;
        }
        let pool: BTreeSet<&str> = split
            .candidates
            .iter()
            .filter(|c| c.dataset == name)
            .map(|c| c.id.as_str())
            .collect();
        let n = pool.len();
        let k = info.recall_k().min(n);
        let mut ps = Vec::new();
        for q in split.queries.iter().filter(|q| q.dataset == name) {
            let m = split.qrels.relevant(&q.id).map_or(0, |r| {
                r.iter().filter(|c| pool.contains(c.as_str())).count()
            });
            // P(no relevant item among k draws without replacement).
            let miss: f64 = if n - m < k {
                0.0
            } else {
                (0..k)
                    .map(|i| (n - m - i) as f64 / (n - i) as f64)
                    .product()
            };
            ps.push(1.0 - miss);
        }
        if ps.is_empty() {
            continue;
        }
        let nq = ps.len() as f64;
        means.push(ps.iter().sum::<f64>() / nq);
        vars.push(ps.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (nq * nq));
    }
    let d = means.len() as f64;
    (
        means.iter().sum::<f64>() / d,
        vars.iter().sum::<f64>().sqrt() / d,
    )
}

fn single_cross(doc: &ReportDoc) -> f64 {
    0.5 * (doc.category("single").unwrap() + doc.category("cross").unwrap())
}

fn a6(ex: &mut Experiments) -> Outcome {
    ex.one_tower(false);
    let med = |name: &str| median(ex.metric(name, |d| d.overall_avg));
    let (none, s1, s2, both) = (med("none"), med("stage1"), med("stage2"), med("both"));
    let sc2 = median(ex.metric("stage2", single_cross));
    let scb = median(ex.metric("both", single_cross));
    let (chance, sigma) = chance_overall(&ex.data);
    let untrained = ex.metric("none", |d| d.overall_avg);
    let near_chance = untrained
        .iter()
        .all(|u| (u - chance).abs() <= A6_CHANCE_SIGMAS * sigma);
    check(
        none < s1 && none < s2 && scb >= sc2 && near_chance,
        format!(
            "median overall none {none:.3} < stage1 {s1:.3}: {}, none < stage2 {s2:.3}: {}; single+cross both {scb:.3} >= stage2 {sc2:.3}: {}; untrained {:?} vs chance {chance:.4} +- {A6_CHANCE_SIGMAS}x{sigma:.4}: {near_chance} (both overall {both:.3})",
            none < s1,
            none < s2,
            scb >= sc2,
            untrained.iter().map(|u| format!("{u:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn a7(ex: &mut Experiments) -> Outcome {
    ex.one_tower(false);
    let variants = [
        ("feature", Combiner::FeatureFusion, 0.5),
        ("score_w0.25", Combiner::ScoreFusion, 0.25),
        ("score_w0.50", Combiner::ScoreFusion, 0.5),
        ("score_w0.75", Combiner::ScoreFusion, 0.75),
    ];
    for (name, comb, w) in variants {
        if !ex.has(name) {
            ex.two_tower(name, comb, w);
        }
    }
    let cond = |name: &str| median(ex.metric(name, |d| d.category("conditional").unwrap()));
    let cross = |name: &str| median(ex.metric(name, |d| d.category("cross").unwrap()));
    // Base model sizes, adapters excluded.
    let base_params =
        |cfg: &RunConfig| init_checkpoint(cfg, &ex.data).unwrap().store.scalar_count();
    let one_params = base_params(&RunConfig::default());
    let sizes: BTreeMap<&str, usize> = variants
        .iter()
        .map(|(n, c, w)| (*n, base_params(&two_tower_config(0, *c, *w))))
        .collect();
    let params = |name: &str| sizes[name];
    let one_cond = cond("both");
    let one_cross = cross("both");
    let (best, best_cond) = variants
        .iter()
        .map(|(n, _, _)| (*n, cond(n)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let best_cross = cross(best);
    let ratios: Vec<String> = variants
        .iter()
        .map(|(n, _, _)| {
            format!(
                "{n} {} ({:.2}x)",
                params(n),
                params(n) as f64 / one_params as f64
            )
        })
        .collect();
    let matched = variants.iter().all(|(n, _, _)| {
        let r = params(n) as f64 / one_params as f64;
        (A7_PARAM_RATIO.0..=A7_PARAM_RATIO.1).contains(&r)
    });
    let margin = one_cond - best_cond;
    let gap = (one_cross - best_cross).abs();
    let per_variant: Vec<String> = variants
        .iter()
        .map(|(n, _, _)| format!("{n} cond {:.3} cross {:.3}", cond(n), cross(n)))
        .collect();
    check(
        matched && margin >= A7_COND_MARGIN && gap <= A7_CROSS_GAP,
        format!(
            "conditional R@1 one-tower {one_cond:.3} vs best two-tower {best} {best_cond:.3}: margin {margin:+.3} (need >= {A7_COND_MARGIN}); cross gap {gap:.3} (need <= {A7_CROSS_GAP}); params one-tower {one_params}, {}; {}",
            ratios.join(", "),
            per_variant.join(", ")
        ),
    )
}

fn a8(ex: &mut Experiments) -> Outcome {
    ex.one_tower(true);
    let med = |name: &str| median(ex.metric(name, |d| d.overall_avg));
    let (g, n, f) = (med("both"), med("none_mode"), med("fixed4"));
    let between = (g.min(n) - A8_TIE_TOL..=g.max(n) + A8_TIE_TOL).contains(&f);
    check(
        g >= n && between,
        format!("median overall gaussian {g:.3} >= none {n:.3}: {}; fixed(4) {f:.3} between or tied (tol {A8_TIE_TOL}): {between}", g >= n),
    )
}

// ---------------------------------------------------------------- A9

fn a9() -> Outcome {
    let sched = ScheduleConfig::new(1000);
    let w = sched.warmup_steps();
    let mid = w + (sched.total_steps - w) / 2;
    let points = [(0, 0.0), (30, 2e-4), (1000, 0.0), (mid, 1e-4)];
    let lr_ok = w == 30
        && (sched.total_steps - w) % 2 == 0
        && points
            .iter()
            .all(|&(s, v)| (lr_at(s, &sched).unwrap() - v).abs() < A9_TOL);

    let budget = BudgetConfig::default();
    let ids =
        |n: usize, off: u32| -> Vec<u32> { (0..n as u32).map(|i| 4 + off + i % 90).collect() };
    let grid = PatchGrid::new(16, 16, 2, vec![0.25; 512]).unwrap();
    let mut cases = 0;
    let mut exact = 0;
    let mut probe =
        |item: Item, instr: Option<Vec<u32>>, expect_text: Vec<u32>, expect_instr: Vec<u32>| {
            let s = assemble(
                &item,
                instr.as_deref(),
                &budget,
                InstructionOrder::AfterContent,
            )
            .unwrap();
            let v = s.vision_len();
            let text: Vec<u32> = s.item_text();
            let kept_instr: Vec<u32> = s
                .text_ids
                .iter()
                .zip(&s.segments[v..])
                .filter(|(_, seg)| **seg == Segment::Instruction)
                .map(|(t, _)| *t)
                .collect();
            let layout_ok = s.segments.last() == Some(&Segment::Emb)
                && s.emb_index == s.total_len - 1
                && s.total_len == v + expect_text.len() + expect_instr.len() + 1;
            cases += 1;
            exact += usize::from(text == expect_text && kept_instr == expect_instr && layout_ok);
        };
    for n in [127usize, 128, 129, 200] {
        let t = ids(n, 0);
        probe(
            Item::Pair {
                image: grid.clone(),
                text: t.clone(),
            },
            None,
            t[..n.min(128)].to_vec(),
            vec![],
        );
    }
    for n in [377usize, 378, 379, 500] {
        let t = ids(n, 0);
        probe(
            Item::Text(t.clone()),
            None,
            t[..n.min(378)].to_vec(),
            vec![],
        );
    }
    // Instruction tokens share the text cap and are cut after the item text.
    let t = ids(100, 0);
    let instr = ids(40, 50);
    probe(
        Item::Pair {
            image: grid.clone(),
            text: t.clone(),
        },
        Some(instr.clone()),
        t.clone(),
        instr[..28].to_vec(),
    );
    let t = ids(370, 0);
    probe(
        Item::Text(t.clone()),
        Some(instr.clone()),
        t.clone(),
        instr[..8].to_vec(),
    );
    probe(
        Item::Image(grid.clone()),
        Some(instr.clone()),
        vec![],
        instr.clone(),
    );
    check(
        lr_ok && exact == cases,
        format!("lr_at at steps 0/{w}/{mid}/1000 within {A9_TOL:e}: {lr_ok}; truncation fixtures exact {exact}/{cases} (caps 128 with image, 378 text only)"),
    )
}

// ---------------------------------------------------------------- A10

fn jfe(args: &[&str]) -> (i32, Vec<u8>, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = main_with(
        std::iter::once("jfe").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (code, out, String::from_utf8_lossy(&err).into_owned())
}

fn a10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel).to_str().unwrap().to_string();
    std::fs::write(
        p("run.toml"),
        "[stage1]\nbatch_size = 8\nmax_steps = 20\n[stage2]\nbatch_size = 8\nmax_steps = 20\n",
    )
    .unwrap();
    let mut notes = Vec::new();
    let mut ok = true;

    let run_toml = p("run.toml");
    let pipeline = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let data = p(&format!("data_{tag}"));
        let ckpt = p(&format!("model_{tag}.jfec"));
        let steps = [
            vec!["synth", "--preset", "tiny", "--seed", "4", "--out", &data],
            vec![
                "train", "--config", &run_toml, "--data", &data, "--out", &ckpt,
            ],
        ];
        for args in &steps {
            let (code, _, err) = jfe(args);
            assert_eq!(code, 0, "{err}");
        }
        let (code, report, err) = jfe(&["eval", "--checkpoint", &ckpt, "--data", &data]);
        assert_eq!(code, 0, "{err}");
        let metrics = std::fs::read(format!("{ckpt}.metrics.jsonl")).unwrap();
        (report, std::fs::read(&ckpt).unwrap(), metrics)
    };
    let (r1, c1, m1) = pipeline("a");
    let (r2, c2, m2) = pipeline("b");
    let same = r1 == r2 && c1 == c2 && m1 == m2;
    ok &= same && !r1.is_empty();
    notes.push(format!(
        "two runs: report {} bytes, checkpoint and metrics identical: {same}",
        r1.len()
    ));

    let saved = decode_checkpoint(&c1).unwrap();
    let reencoded = encode_checkpoint(&saved.checkpoint, &saved.config).unwrap();
    let again = decode_checkpoint(&reencoded).unwrap();
    let round = reencoded == c1 && again == saved;
    ok &= round;
    notes.push(format!("save/load/save bitwise: {round}"));

    let mut rng = rng_from_seed(41);
    let (mut rejected, mut checksum, trials) = (0, 0, 500);
    for _ in 0..trials {
        let mut b = c1.clone();
        let pos = rng.random_range(8..b.len());
        b[pos] ^= 1 << rng.random_range(0..8);
        match decode_checkpoint(&b) {
            Err(JfeError::Checksum { .. }) => {
                rejected += 1;
                checksum += 1;
            }
            Err(JfeError::Truncated(_)) => rejected += 1,
            _ => {}
        }
    }
    ok &= rejected == trials && checksum > trials * 9 / 10;
    notes.push(format!(
        "{rejected}/{trials} single-bit corruptions rejected ({checksum} by checksum)"
    ));

    let bad = p("bad.jfec");
    let mut b = c1.clone();
    let mid = b.len() / 2;
    b[mid] ^= 0x10;
    std::fs::write(&bad, &b).unwrap();
    let (code, _, err) = jfe(&["eval", "--checkpoint", &bad, "--data", &p("data_a")]);
    let cli_ok = code != 0 && err.contains("checksum") && err.lines().count() == 1;
    ok &= cli_ok;
    notes.push(format!(
        "eval on a corrupted file exits {code}: {}",
        err.trim()
    ));
    check(ok, notes.join("; "))
}

// ---------------------------------------------------------------- driver

fn main() {
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_uppercase())
        .collect();
    let selected = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut ex: Option<Experiments> = None;
    let mut unexpected = Vec::new();
    type Run = fn(&mut Option<Experiments>) -> Outcome;
    let criteria: [(&str, &str, Run); 10] = [
        ("A1", "gradient correctness", |_| a1()),
        ("A2", "InfoNCE exactness", |_| a2()),
        ("A3", "retrieval exactness", |_| a3()),
        ("A4", "LoRA protocol", |_| a4()),
        ("A5", "sampler statistics", |_| a5()),
        ("A6", "two-stage ablation", |e| {
            a6(e.get_or_insert_with(Experiments::new))
        }),
        ("A7", "fusion gap", |e| {
            a7(e.get_or_insert_with(Experiments::new))
        }),
        ("A8", "sampling ablation", |e| {
            a8(e.get_or_insert_with(Experiments::new))
        }),
        ("A9", "schedule and truncation", |_| a9()),
        ("A10", "determinism and round-trip", |_| a10()),
    ];
    for (id, title, run) in criteria {
        if !selected(id) {
            continue;
        }
        let t = Instant::now();
        let outcome = run(&mut ex);
        let secs = t.elapsed().as_secs_f64();
        let known = KNOWN_DEVIATIONS.contains(&id);
        let status = match (&outcome, known) {
            (Ok(_), false) => "PASS",
            (Ok(_), true) => "XPASS",
            (Err(_), true) => "FAIL (known deviation)",
            (Err(_), false) => {
                unexpected.push(id);
                "FAIL"
            }
        };
        let detail = match &outcome {
            Ok(d) | Err(d) => d,
        };
        println!("{id} {status} [{title}, {secs:.1}s]: {detail}");
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
