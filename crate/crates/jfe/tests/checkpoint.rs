use jfe::bench::DataDir;
use jfe::checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION,
};
use jfe::config::RunConfig;
use jfe::error::JfeError;
use jfe::pipeline::{init_checkpoint, run_stage};
use jfe_core::synth::{generate_tasks, WorldSpec};
use jfe_core::trainer::Stage;
use proptest::prelude::*;

fn small_config() -> RunConfig {
    RunConfig::parse(
        r#"
[model]
layers = 1
hidden_dim = 16
heads = 2
ffn_dim = 32
[stage1]
batch_size = 8
max_steps = 6
[stage2]
batch_size = 8
max_steps = 6
"#,
    )
    .unwrap()
}

fn tiny_data() -> DataDir {
    DataDir::from(generate_tasks(&WorldSpec::tiny()).unwrap())
}

#[test]
fn save_load_save_is_bitwise() {
    let cfg = small_config();
    let data = tiny_data();
    let ckpt = run_stage(
        &cfg,
        &init_checkpoint(&cfg, &data).unwrap(),
        Stage::Adapt,
        &data,
    )
    .unwrap()
    .checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jfec");
    save_checkpoint(&p, &ckpt, &cfg.echo()).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.checkpoint, ckpt);
    assert_eq!(back.config, cfg.echo());
    let again = encode_checkpoint(&back.checkpoint, &back.config).unwrap();
    assert_eq!(again, std::fs::read(&p).unwrap());
}

#[test]
fn stage_two_resumes_identically_from_a_loaded_stage_one() {
    let cfg = small_config();
    let data = tiny_data();
    let s1 = run_stage(
        &cfg,
        &init_checkpoint(&cfg, &data).unwrap(),
        Stage::Adapt,
        &data,
    )
    .unwrap()
    .checkpoint;
    assert!(s1.adapter.is_some());
    let loaded = decode_checkpoint(&encode_checkpoint(&s1, &cfg.echo()).unwrap())
        .unwrap()
        .checkpoint;
    let direct = run_stage(&cfg, &s1, Stage::Instruct, &data).unwrap();
    let resumed = run_stage(&cfg, &loaded, Stage::Instruct, &data).unwrap();
    assert_eq!(direct.log, resumed.log);
    assert_eq!(direct.checkpoint, resumed.checkpoint);
    assert_eq!(
        resumed.checkpoint.stages,
        vec![Stage::Adapt, Stage::Instruct]
    );
}

fn fixture_bytes() -> Vec<u8> {
    let cfg = small_config();
    let data = tiny_data();
    encode_checkpoint(&init_checkpoint(&cfg, &data).unwrap(), &cfg.echo()).unwrap()
}

#[test]
fn header_errors() {
    let bytes = fixture_bytes();
    assert_eq!(&bytes[..4], MAGIC);

    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    match decode_checkpoint(&v) {
        Err(e @ JfeError::Version { found, expected }) => {
            assert_eq!((found, expected), (VERSION + 1, VERSION));
            assert_eq!(e.exit_code(), 5);
        }
        other => panic!("expected a version error, got {other:?}"),
    }

    let mut m = bytes.clone();
    m[0] = b'X';
    assert!(matches!(decode_checkpoint(&m), Err(JfeError::Format(_))));
}

#[test]
fn truncation_is_reported_as_such() {
    let bytes = fixture_bytes();
    for cut in [9, 20, bytes.len() / 2, bytes.len() - 5] {
        assert!(
            matches!(
                decode_checkpoint(&bytes[..cut]),
                Err(JfeError::Truncated(_))
            ),
            "cut at {cut}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_payload_flip_fails_the_checksum(pos in 8usize..10_000, bit in 0u8..8) {
        let bytes = fixture_bytes();
        let pos = 8 + pos % (bytes.len() - 8);
        let mut b = bytes.clone();
        b[pos] ^= 1 << bit;
        match decode_checkpoint(&b) {
            Err(JfeError::Checksum { .. }) | Err(JfeError::Truncated(_)) => {}
            other => prop_assert!(false, "flip at {} accepted or misreported: {:?}", pos, other.map(|_| ())),
        }
    }
}

#[test]
fn payload_flip_is_a_checksum_error() {
    let bytes = fixture_bytes();
    let mut b = bytes.clone();
    let pos = bytes.len() - 10;
    b[pos] ^= 0x40;
    assert!(matches!(
        decode_checkpoint(&b),
        Err(JfeError::Checksum { .. })
    ));
}
