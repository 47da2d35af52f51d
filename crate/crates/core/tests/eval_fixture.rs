mod support;

use clipvid::eval::evaluate;
use clipvid::synthvid::Speed;

#[test]
fn evaluator_matches_flat_list_oracle() {
    let (clips, dets) = support::fixture();
    let report = evaluate(&dets, &clips, support::CLASSES).unwrap();
    let cases = [
        (None, &report.overall),
        (Some(Speed::Slow), report.bucket(Speed::Slow)),
        (Some(Speed::Medium), report.bucket(Speed::Medium)),
        (Some(Speed::Fast), report.bucket(Speed::Fast)),
    ];
    for (bucket, got) in cases {
        let (map, per_class) = support::flat_map(&clips, &dets, support::CLASSES, bucket);
        assert!((got.map - map).abs() < 1e-9, "{bucket:?}: {} vs {map}", got.map);
        assert_eq!(got.class_ap.len(), per_class.len());
        for (a, b) in got.class_ap.iter().zip(&per_class) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{bucket:?}: {a} vs {b}"),
                (None, None) => {}
                _ => panic!("{bucket:?}: presence differs {a:?} vs {b:?}"),
            }
        }
    }
    // The fixture is not a trivial all-hit or all-miss case.
    assert!(
        report.overall.map > 0.3 && report.overall.map < 0.95,
        "{}",
        report.overall.map
    );
    assert!(report.bucket(Speed::Fast).class_ap[2].is_none());
}
