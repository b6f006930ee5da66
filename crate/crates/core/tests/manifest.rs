use std::path::Path;

use avseg_core::manifest::{evaluate_manifest, parse_manifest};
use avseg_core::mask::{BinaryMask, GrayFrame, ImageFrame};
use avseg_core::metrics::Averaging;
use avseg_core::pgm;
use avseg_core::Error;

fn write_pair(dir: &Path, stem: &str, pred: &BinaryMask, gt: &BinaryMask) -> String {
    let (h, w) = (gt.height(), gt.width());
    let files = [
        (format!("{stem}_frame.ppm"), pgm::encode_image(&ImageFrame::zeros(h, w, 3))),
        (format!("{stem}_flow.pgm"), pgm::encode_gray(&GrayFrame::new(h, w, vec![0.0; h * w]).unwrap())),
        (format!("{stem}_gt.pgm"), pgm::encode_binary_mask(gt)),
        (format!("{stem}_pred.pgm"), pgm::encode_binary_mask(pred)),
    ];
    for (name, text) in &files {
        pgm::write_text(&dir.join(name), text).unwrap();
    }
    format!(
        r#"{{"frame":"{}","flow":"{}","gt":"{}","pred":"{}"}}"#,
        files[0].0, files[1].0, files[2].0, files[3].0
    )
}

#[test]
fn identical_pairs_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let m = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    let lines = [write_pair(dir.path(), "a", &m, &m), write_pair(dir.path(), "b", &m, &m)];
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, lines.join("\n")).unwrap();
    let rep = evaluate_manifest(&path, 0.3, Averaging::Micro).unwrap();
    assert_eq!((rep.frames, rep.miou, rep.f_score), (2, 1.0, 1.0));
}

#[test]
fn single_pair_matches_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    let pred = BinaryMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
    let gt = BinaryMask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
    let line = write_pair(dir.path(), "a", &pred, &gt);
    let line = line.replace('}', r#","class":2,"prompt1":"a car","prompt2":"car"}"#);
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, format!("\n{line}\n\n")).unwrap();
    let rep = evaluate_manifest(&path, 0.3, Averaging::Micro).unwrap();
    assert!((rep.miou - 1.0 / 3.0).abs() < 1e-15);
    // P = R = 1/2, so F = 1/2 for any beta.
    assert!((rep.f_score - 0.5).abs() < 1e-15);
    assert!(rep.per_class_iou.is_some());
}

#[test]
fn failures_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let m = BinaryMask::ones(2, 2);
    let good = write_pair(dir.path(), "a", &m, &m);
    let missing = good.replace("a_gt.pgm", "nope.pgm");
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, format!("{good}\n{missing}\n")).unwrap();
    match evaluate_manifest(&path, 0.3, Averaging::Micro) {
        Err(Error::Manifest { line: 2, source }) => assert!(matches!(*source, Error::Io { .. })),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, format!("{good}\n{{\"frame\": 1}}\n")).unwrap();
    match evaluate_manifest(&path, 0.3, Averaging::Micro) {
        Err(Error::Manifest { line: 2, source }) => assert!(matches!(*source, Error::Format { .. })),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "{\"frame\":\"x\"}\n").unwrap();
    assert!(matches!(
        evaluate_manifest(&path, 0.3, Averaging::Micro),
        Err(Error::Manifest { line: 1, .. })
    ));
}

#[test]
fn size_mismatch_and_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = BinaryMask::ones(2, 2);
    let b = BinaryMask::ones(2, 3);
    let line = write_pair(dir.path(), "a", &a, &b);
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, &line).unwrap();
    assert!(matches!(
        evaluate_manifest(&path, 0.3, Averaging::Micro),
        Err(Error::Manifest { line: 1, .. })
    ));
    std::fs::write(&path, "\n  \n").unwrap();
    assert!(matches!(
        evaluate_manifest(&path, 0.3, Averaging::Micro),
        Err(Error::EmptyInput(_))
    ));
}

#[test]
fn relative_paths_resolve_against_the_manifest() {
    let e = parse_manifest(
        r#"{"frame":"f.ppm","flow":"/abs/o.pgm","gt":"g.pgm","pred":"p.pgm"}"#,
        Path::new("/data/set"),
    )
    .unwrap();
    assert_eq!(e[0].frame, Path::new("/data/set/f.ppm"));
    assert_eq!(e[0].flow, Path::new("/abs/o.pgm"));
    assert_eq!(e[0].line, 1);
}
