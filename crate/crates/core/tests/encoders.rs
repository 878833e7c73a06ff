use jfe_core::adapters::{attach, default_targets, AdapterSpec};
use jfe_core::data::{Item, PatchGrid};
use jfe_core::encoder::{
    encode_batch, Combiner, Encoder, Mode, OneTower, OneTowerConfig, TwoTower, TwoTowerConfig,
};
use jfe_core::numerics::{fd_check, FdCoverage, ParamStore, Tensor};
use jfe_core::rng_from_seed;
use jfe_core::trainer::{batch_loss, batch_loss_and_grads, PairRef};
use proptest::prelude::*;
use rand::Rng;

const VOCAB: usize = 40;
const PATCH: usize = 6;

fn small_one_tower() -> OneTowerConfig {
    let mut c = OneTowerConfig::desk(VOCAB, PATCH);
    c.tower.hidden_dim = 16;
    c.tower.heads = 2;
    c.tower.ffn_dim = 24;
    c
}

fn small_two_tower(combiner: Combiner) -> TwoTowerConfig {
    let mut c = TwoTowerConfig::desk(VOCAB, PATCH, combiner);
    for t in [&mut c.text, &mut c.image] {
        t.hidden_dim = 16;
        t.heads = 2;
        t.ffn_dim = 24;
    }
    c.fusion_hidden = 20;
    c
}

fn grid(seed: u64, patches: usize) -> PatchGrid {
    let mut rng = rng_from_seed(seed);
    let data = (0..patches * PATCH)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    PatchGrid::new(1, patches, PATCH, data).unwrap()
}

fn text(seed: u64, len: usize) -> Vec<u32> {
    let mut rng = rng_from_seed(seed);
    (0..len)
        .map(|_| rng.random_range(4..VOCAB as u32))
        .collect()
}

fn mixed_items() -> Vec<Item> {
    vec![
        Item::Text(text(1, 5)),
        Item::Image(grid(2, 4)),
        Item::Pair {
            image: grid(3, 4),
            text: text(4, 3),
        },
        Item::Text(text(5, 12)),
        Item::Pair {
            image: grid(6, 2),
            text: text(7, 9),
        },
        Item::Image(grid(8, 3)),
        Item::Text(text(9, 2)),
        Item::Pair {
            image: grid(10, 4),
            text: text(11, 6),
        },
    ]
}

fn randomize_adapters(store: &mut ParamStore, seed: u64) {
    let mut rng = rng_from_seed(seed);
    let ids: Vec<_> = store
        .ids()
        .filter(|id| store.name(*id).starts_with("lora."))
        .collect();
    for id in ids {
        for v in store.data_mut(id) {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

fn fd_error(enc: &Encoder, store: &ParamStore) -> f64 {
    let items = mixed_items();
    let instr = text(99, 3);
    let cands: Vec<Item> = (0..items.len())
        .map(|i| Item::Image(grid(200 + i as u64, 4)))
        .collect();
    let pairs: Vec<PairRef> = items
        .iter()
        .zip(&cands)
        .enumerate()
        .map(|(i, (q, c))| PairRef {
            query: q,
            instruction: (i % 2 == 0).then_some(instr.as_slice()),
            candidate: c,
        })
        .collect();
    let (_, g) = batch_loss_and_grads(enc, store, &pairs, 0.07, false, &mut Mode::Eval).unwrap();
    fd_check(
        |s| batch_loss(enc, s, &pairs, 0.07, false),
        &g,
        store,
        1e-5,
        FdCoverage::PerTensor(5),
    )
    .unwrap()
}

#[test]
fn one_tower_composite_gradient_matches_differences() {
    let mut store = ParamStore::new();
    let m = OneTower::init(small_one_tower(), &mut store, &mut rng_from_seed(3)).unwrap();
    let enc = Encoder::OneTower(m);
    assert!(fd_error(&enc, &store) < 1e-5);

    let spec = AdapterSpec::new(2, 4.0, 0.0, default_targets(&store));
    let mut adapted = attach(&store, &spec, 4).unwrap();
    randomize_adapters(&mut adapted, 5);
    let enc = Encoder::OneTower(OneTower::bind(small_one_tower(), &adapted).unwrap());
    assert!(fd_error(&enc, &adapted) < 1e-5);
}

#[test]
fn two_tower_composite_gradients_match_differences() {
    for combiner in [Combiner::FeatureFusion, Combiner::ScoreFusion] {
        let mut store = ParamStore::new();
        let m =
            TwoTower::init(small_two_tower(combiner), &mut store, &mut rng_from_seed(6)).unwrap();
        let err = fd_error(&Encoder::TwoTower(m), &store);
        assert!(err < 1e-5, "{combiner:?}: {err:e}");

        let spec = AdapterSpec::new(2, 4.0, 0.0, default_targets(&store));
        let mut adapted = attach(&store, &spec, 7).unwrap();
        randomize_adapters(&mut adapted, 8);
        let enc = Encoder::TwoTower(TwoTower::bind(small_two_tower(combiner), &adapted).unwrap());
        let err = fd_error(&enc, &adapted);
        assert!(err < 1e-5, "{combiner:?} with adapters: {err:e}");
    }
}

#[test]
fn identical_inputs_give_identical_embeddings() {
    let mut store = ParamStore::new();
    let m = OneTower::init(small_one_tower(), &mut store, &mut rng_from_seed(11)).unwrap();
    let item = Item::Pair {
        image: grid(1, 4),
        text: text(2, 7),
    };
    let a = m.assemble(&item, None).unwrap();
    let b = m.assemble(&item.clone(), None).unwrap();
    assert_eq!(
        m.encode_sequence(&store, &a).unwrap(),
        m.encode_sequence(&store, &b).unwrap()
    );
}

#[test]
fn swapping_two_text_tokens_changes_the_embedding() {
    let mut store = ParamStore::new();
    let m = OneTower::init(small_one_tower(), &mut store, &mut rng_from_seed(12)).unwrap();
    let enc = Encoder::OneTower(m);
    let t = vec![10, 20, 30, 31];
    let mut swapped = t.clone();
    swapped.swap(0, 2);
    let a = enc.encode(&store, &Item::Text(t), None).unwrap();
    let b = enc.encode(&store, &Item::Text(swapped), None).unwrap();
    let diff =
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
    assert!(diff > 1e-3, "max diff {diff}");
}

#[test]
fn sequences_beyond_max_len_are_rejected() {
    let mut cfg = small_one_tower();
    cfg.tower.max_len = cfg.budget.max_len();
    let mut store = ParamStore::new();
    let m = OneTower::init(cfg, &mut store, &mut rng_from_seed(13)).unwrap();
    let mut seq = m.assemble(&Item::Text(text(1, 4)), None).unwrap();
    seq.total_len = cfg.tower.max_len + 1;
    assert!(m.encode_sequence(&store, &seq).is_err());
}

#[test]
fn padded_batches_match_single_encodes() {
    let mut store = ParamStore::new();
    let m = OneTower::init(small_one_tower(), &mut store, &mut rng_from_seed(14)).unwrap();
    let seqs: Vec<_> = mixed_items()
        .iter()
        .map(|i| m.assemble(i, None).unwrap())
        .collect();
    let batch = encode_batch(&m, &store, &seqs).unwrap();
    for (s, e) in seqs.iter().zip(&batch) {
        let single = m.encode_sequence(&store, s).unwrap();
        let diff = single
            .0
            .iter()
            .zip(&e.0)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "max diff {diff}");
    }
    let one = encode_batch(&m, &store, &seqs[..1]).unwrap();
    assert_eq!(one[0], m.encode_sequence(&store, &seqs[0]).unwrap());

    let ab = encode_batch(&m, &store, &[seqs[0].clone(), seqs[3].clone()]).unwrap();
    let ba = encode_batch(&m, &store, &[seqs[3].clone(), seqs[0].clone()]).unwrap();
    assert_eq!(ab[0], ba[1]);
    assert_eq!(ab[1], ba[0]);
    assert!(encode_batch(&m, &store, &[]).is_err());
}

#[test]
fn two_tower_text_path_ignores_the_combiner() {
    let item = Item::Text(text(3, 6));
    let mut embeddings = Vec::new();
    for combiner in [
        Combiner::None,
        Combiner::ScoreFusion,
        Combiner::FeatureFusion,
    ] {
        let mut store = ParamStore::new();
        let m = TwoTower::init(
            small_two_tower(combiner),
            &mut store,
            &mut rng_from_seed(21),
        )
        .unwrap();
        embeddings.push(Encoder::TwoTower(m).encode(&store, &item, None).unwrap());
    }
    assert_eq!(embeddings[0], embeddings[1]);
    assert_eq!(embeddings[0], embeddings[2]);
}

#[test]
fn score_fusion_at_one_half_averages_the_towers() {
    let mut store = ParamStore::new();
    let m = TwoTower::init(
        small_two_tower(Combiner::ScoreFusion),
        &mut store,
        &mut rng_from_seed(22),
    )
    .unwrap();
    let enc = Encoder::TwoTower(m);
    let (img, txt) = (grid(4, 4), text(5, 5));
    let hi = enc.encode(&store, &Item::Image(img.clone()), None).unwrap();
    let ht = enc.encode(&store, &Item::Text(txt.clone()), None).unwrap();
    let fused = enc
        .encode(
            &store,
            &Item::Pair {
                image: img,
                text: txt,
            },
            None,
        )
        .unwrap();
    let raw: Vec<f64> =
        hi.0.iter()
            .zip(&ht.0)
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (f, r) in fused.0.iter().zip(&raw) {
        assert!((f - r / n).abs() < 1e-12);
    }
}

#[test]
fn feature_fusion_reduced_to_the_image_half() {
    let cfg = small_two_tower(Combiner::FeatureFusion);
    let mut store = ParamStore::new();
    TwoTower::init(cfg, &mut store, &mut rng_from_seed(23)).unwrap();
    let d = cfg.text.hidden_dim;
    let mut skip = Tensor::zeros(&[2 * d, d]);
    for i in 0..d {
        skip.data_mut()[i * d + i] = 1.0;
    }
    let skip_id = store.id("combiner.skip").unwrap();
    store.data_mut(skip_id).copy_from_slice(skip.data());
    for name in ["combiner.fc2.w", "combiner.fc2.b"] {
        let id = store.id(name).unwrap();
        store.data_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let enc = Encoder::TwoTower(TwoTower::bind(cfg, &store).unwrap());
    let img = grid(7, 4);
    let hi = enc.encode(&store, &Item::Image(img.clone()), None).unwrap();
    let fused = enc
        .encode(
            &store,
            &Item::Pair {
                image: img,
                text: text(8, 4),
            },
            None,
        )
        .unwrap();
    for (a, b) in hi.0.iter().zip(&fused.0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn two_tower_without_combiner_rejects_pairs() {
    let mut store = ParamStore::new();
    let m = TwoTower::init(
        small_two_tower(Combiner::None),
        &mut store,
        &mut rng_from_seed(24),
    )
    .unwrap();
    let pair = Item::Pair {
        image: grid(1, 2),
        text: text(2, 2),
    };
    assert!(Encoder::TwoTower(m).encode(&store, &pair, None).is_err());
}

#[test]
fn towers_of_different_width_are_rejected() {
    let mut cfg = small_two_tower(Combiner::ScoreFusion);
    cfg.image.hidden_dim = 32;
    assert!(cfg.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn embeddings_have_unit_norm(seed in 0u64..500, len in 1usize..40, patches in 0usize..17, two in any::<bool>()) {
        let img = grid(seed, patches.max(1));
        let txt = text(seed + 1, len);
        let item = match (patches, seed % 3) {
            (0, _) => Item::Text(txt),
            (_, 0) => Item::Image(img),
            _ => Item::Pair { image: img, text: txt },
        };
        let mut store = ParamStore::new();
        let enc = if two {
            Encoder::TwoTower(TwoTower::init(small_two_tower(Combiner::FeatureFusion), &mut store, &mut rng_from_seed(seed)).unwrap())
        } else {
            Encoder::OneTower(OneTower::init(small_one_tower(), &mut store, &mut rng_from_seed(seed)).unwrap())
        };
        let e = enc.encode(&store, &item, None).unwrap();
        prop_assert!((e.norm() - 1.0).abs() < 1e-6);
    }
}
