use super::*;
use crate::annotations::{read_annotations, write_annotations, ANNOTATION_FILE};
use crate::geometry::generate_anchors;

fn small(n: usize) -> SceneSpec {
    SceneSpec { num_images: n, test_images: 2, ..Default::default() }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_dataset(&small(4)).unwrap();
    let b = generate_dataset(&small(4)).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&SceneSpec { seed: 8, ..small(4) }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn test_split_continues_the_index_sequence() {
    let spec = small(3);
    let all = generate_range(&spec, 0, 5).unwrap();
    assert_eq!(generate_test_set(&spec).unwrap(), all[3..]);
}

#[test]
fn object_count_contract() {
    let spec = SceneSpec { objects_per_image: [2, 2], ..small(10) };
    for r in generate_dataset(&spec).unwrap() {
        assert_eq!(r.gts.len(), 2);
    }
}

#[test]
fn records_satisfy_invariants() {
    for r in generate_dataset(&small(20)).unwrap() {
        assert_eq!(r.image.shape(), &[3, 96, 96]);
        assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (b, c) in &r.gts {
            assert!(b.is_inside(96.0, 96.0) && b.area() >= 4.0);
            assert!((1..=3).contains(c));
        }
    }
}

#[test]
fn shapes_fill_their_boxes_as_expected() {
    let h = 10.0;
    for (kind, area) in [
        (ShapeKind::Square, 400.0),
        (ShapeKind::Disc, std::f64::consts::PI * 100.0),
        (ShapeKind::Triangle, 200.0),
    ] {
        let s = Shape { kind, cx: 20.0, cy: 20.0, half: h };
        let mut cov = 0.0;
        for y in 0..40 {
            for x in 0..40 {
                cov += (0.5 - s.sdf(x as f64 + 0.5, y as f64 + 0.5)).clamp(0.0, 1.0);
            }
        }
        assert!((cov - area).abs() / area < 0.03, "{kind:?}: {cov} vs {area}");
        assert!(s.sdf(20.0, 29.0) < 0.0 && s.sdf(20.0, 31.0) > 0.0);
    }
    let tri = Shape { kind: ShapeKind::Triangle, cx: 0.0, cy: 0.0, half: h };
    assert!(tri.sdf(0.0, -h).abs() < 1e-12);
    assert!(tri.sdf(-h, h).abs() < 1e-12 && tri.sdf(h, h).abs() < 1e-12);
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        SceneSpec { objects_per_image: [3, 1], ..Default::default() },
        SceneSpec { object_size: [40.0, 16.0], ..Default::default() },
        SceneSpec { object_size: [16.0, 96.0], ..Default::default() },
        SceneSpec { classes: vec![], ..Default::default() },
    ] {
        assert!(generate_dataset(&spec).is_err());
    }
}

fn default_anchors() -> AnchorGrid {
    let c = CascadeConfig::default();
    generate_anchors(6, 6, 16, &c.anchor_scales, &c.anchor_ratios).unwrap()
}

#[test]
fn default_benchmark_is_imbalanced() {
    let spec = SceneSpec::default();
    let records = generate_dataset(&spec).unwrap();
    let im = imbalance(&records, &default_anchors(), &CascadeConfig::default());
    assert!(im.ratio() >= 50.0, "{im:?} ratio {}", im.ratio());
}

#[test]
fn fewer_objects_never_lowers_the_ratio() {
    let anchors = default_anchors();
    let cfg = CascadeConfig::default();
    for seed in 0..5 {
        let ratio = |objects: usize| {
            let spec = SceneSpec { objects_per_image: [objects, objects], seed, ..small(60) };
            imbalance(&generate_dataset(&spec).unwrap(), &anchors, &cfg).ratio()
        };
        let (one, two, three) = (ratio(1), ratio(2), ratio(3));
        assert!(one >= two && two >= three, "seed {seed}: {one} {two} {three}");
    }
}

#[test]
fn annotation_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate_dataset(&small(5)).unwrap();
    write_annotations(&records, dir.path()).unwrap();
    let back = read_annotations(dir.path()).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!(a.gts.len(), b.gts.len());
        for ((ba, ca), (bb, cb)) in a.gts.iter().zip(&b.gts) {
            assert_eq!(ca, cb);
            for (x, y) in [(ba.x1, bb.x1), (ba.y1, bb.y1), (ba.x2, bb.x2), (ba.y2, bb.y2)] {
                assert!((x - y).abs() <= 1e-6);
            }
        }
        let worst = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0, "{worst}");
    }
}

#[test]
fn empty_record_list_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    write_annotations(&[], dir.path()).unwrap();
    assert_eq!(std::fs::read(dir.path().join(ANNOTATION_FILE)).unwrap(), b"");
    assert!(read_annotations(dir.path()).unwrap().is_empty());
}

#[test]
fn annotation_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    write_annotations(&generate_dataset(&small(2)).unwrap(), dir.path()).unwrap();
    let path = dir.path().join(ANNOTATION_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let cut = lines[1].rsplit_once(' ').unwrap().0.to_string();
    lines[1] = &cut;
    std::fs::write(&path, lines.join("\n")).unwrap();
    match read_annotations(dir.path()) {
        Err(Error::Parse { file, line, .. }) => {
            assert_eq!(line, 2);
            assert_eq!(file, path);
        }
        other => panic!("expected parse error, got {other:?}"),
    }

    std::fs::write(&path, "missing.ppm 1 0 0 4 4\n").unwrap();
    match read_annotations(dir.path()) {
        Err(Error::MissingFile(p)) => assert!(p.ends_with("missing.ppm")),
        other => panic!("expected missing file, got {other:?}"),
    }
}
