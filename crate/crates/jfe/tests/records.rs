use std::path::Path;

use jfe::error::JfeError;
use jfe::fenc::write_grid;
use jfe::records::{load_records, read_raw_records, save_records, write_raw_records};
use jfe_core::data::{DatasetCatalog, Item, Modality, PatchGrid, TaskCategory};

fn grid(seed: f32) -> PatchGrid {
    PatchGrid::new(2, 2, 3, (0..12).map(|i| seed + i as f32 * 0.25).collect()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn setup_images(dir: &Path) {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    for i in 0..3 {
        write_grid(&dir.join(format!("img/{i}.fenc")), &grid(i as f32)).unwrap();
    }
}

const THREE_T2I: &str = r#"{"qid":"q0","q_kind":"text","q_text":"4 5 6","c_kind":"image","c_image":"img/0.fenc","dataset":"caps","pair_id":"p0"}
{"qid":"q1","q_kind":"text","q_text":"7","instruction":"find the photo","c_kind":"image","c_image":"img/1.fenc","dataset":"caps","pair_id":"p1"}
{"qid":"q2","q_kind":"text","q_text":"8 9","c_kind":"image","c_image":"img/2.fenc","dataset":"caps","pair_id":"p2"}
"#;

#[test]
fn empty_file_gives_an_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "empty.jsonl", "");
    let mut cat = DatasetCatalog::new();
    assert!(load_records(&p, &mut cat).unwrap().is_empty());
    assert!(cat.get("caps").is_none());
}

#[test]
fn three_text_to_image_records() {
    let dir = tempfile::tempdir().unwrap();
    setup_images(dir.path());
    let p = write(dir.path(), "train.jsonl", THREE_T2I);
    let mut cat = DatasetCatalog::new();
    let ex = load_records(&p, &mut cat).unwrap();
    assert_eq!(ex.len(), 3);
    for (i, e) in ex.iter().enumerate() {
        assert_eq!(e.query.modality(), Modality::Text);
        assert_eq!(e.candidate.modality(), Modality::Image);
        assert_eq!(e.pair_id, format!("p{i}"));
        assert_eq!(e.candidate, Item::Image(grid(i as f32)));
    }
    assert_eq!(ex[1].instruction.as_deref(), Some("find the photo"));
    let info = cat.get("caps").unwrap();
    assert_eq!(info.size, 3);
    assert_eq!(info.category, TaskCategory::Cross);
}

fn record_error(body: &str) -> (usize, String) {
    let dir = tempfile::tempdir().unwrap();
    setup_images(dir.path());
    let p = write(dir.path(), "train.jsonl", body);
    match load_records(&p, &mut DatasetCatalog::new()) {
        Err(JfeError::Record { line, message, .. }) => (line, message),
        other => panic!("expected a record error, got {other:?}"),
    }
}

#[test]
fn pair_without_image_fails_at_its_line() {
    let body = format!(
        "{THREE_T2I}\n{}\n",
        r#"{"qid":"q3","q_kind":"pair","q_text":"4","c_kind":"image","c_image":"img/0.fenc","dataset":"cir","pair_id":"p3"}"#
    );
    // Three records, one blank line, then the bad record on line 5.
    let (line, message) = record_error(&body);
    assert_eq!(line, 5);
    assert!(message.contains("pair"), "{message}");
}

#[test]
fn unknown_kind_is_rejected() {
    let (line, message) = record_error(
        r#"{"qid":"q0","q_kind":"video","q_text":"4","c_kind":"image","c_image":"img/0.fenc","dataset":"caps","pair_id":"p0"}"#,
    );
    assert_eq!(line, 1);
    assert!(message.contains("video"), "{message}");
}

#[test]
fn dangling_image_is_rejected() {
    let body = THREE_T2I.replace("img/2.fenc", "img/9.fenc");
    let (line, message) = record_error(&body);
    assert_eq!(line, 3);
    assert!(message.contains("img/9.fenc"), "{message}");
}

#[test]
fn malformed_line_reports_its_number() {
    let body = format!("{THREE_T2I}{{\"qid\": \n");
    let (line, _) = record_error(&body);
    assert_eq!(line, 4);
    let (line, message) =
        record_error(&THREE_T2I.replace("\"q_text\":\"7\"", "\"q_text\":\"7\",\"extra\":1"));
    assert_eq!(line, 2);
    assert!(message.contains("extra"), "{message}");
}

#[test]
fn duplicate_pair_ids_are_rejected() {
    let (line, message) = record_error(&THREE_T2I.replace("\"p2\"", "\"p0\""));
    assert_eq!(line, 3);
    assert!(message.contains("duplicate"), "{message}");
}

#[test]
fn category_violations_are_rejected_at_load() {
    let body = format!(
        "{THREE_T2I}{}\n",
        r#"{"qid":"q3","q_kind":"image","q_image":"img/0.fenc","c_kind":"image","c_image":"img/1.fenc","dataset":"caps","pair_id":"p3"}"#
    );
    let (line, _) = record_error(&body);
    assert_eq!(line, 4);
}

#[test]
fn canonical_form_round_trips_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    setup_images(dir.path());
    let p = write(dir.path(), "train.jsonl", THREE_T2I);
    let raw: Vec<_> = read_raw_records(&p)
        .unwrap()
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let again = dir.path().join("again.jsonl");
    write_raw_records(&again, &raw).unwrap();
    assert_eq!(std::fs::read_to_string(&again).unwrap(), THREE_T2I);

    // Through typed examples as well: save, reload, save again.
    let ex = load_records(&p, &mut DatasetCatalog::new()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let first = out.path().join("a.jsonl");
    save_records(&first, &ex).unwrap();
    let back = load_records(&first, &mut DatasetCatalog::new()).unwrap();
    assert_eq!(back, ex);
    let second_dir = tempfile::tempdir().unwrap();
    let second = second_dir.path().join("a.jsonl");
    save_records(&second, &back).unwrap();
    assert_eq!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap()
    );
}
