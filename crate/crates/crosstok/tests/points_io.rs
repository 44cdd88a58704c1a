use crosstok::points_io::{
    format_bin, format_xyz, parse_bin, parse_xyz, read_points, write_points, PointFormat, PointsError,
};
use crosstok_core::{PointCloud, RngStream};
use proptest::prelude::*;

fn random_cloud(n: usize, c: usize, seed: u64) -> PointCloud<f32> {
    let mut rng = RngStream::new(seed, 0);
    let pos = (0..n)
        .map(|_| {
            [
                rng.normal() as f32,
                rng.normal() as f32 * 1e-3,
                rng.normal() as f32 * 1e4,
            ]
        })
        .collect();
    let feat = (0..n * c).map(|_| rng.uniform() as f32).collect();
    PointCloud::new(pos, feat, c).unwrap()
}

#[test]
fn single_row_has_no_features() {
    let c = parse_xyz("1 2 3").unwrap();
    assert_eq!((c.len(), c.c_in), (1, 0));
    assert_eq!(c.positions[0], [1.0, 2.0, 3.0]);
}

#[test]
fn files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for (i, c) in [0usize, 1, 3].into_iter().enumerate() {
        let cloud = random_cloud(50, c, i as u64);
        for fmt in [PointFormat::Bin, PointFormat::Xyz] {
            let path = dir.path().join(format!("c{i}.{}", fmt.extension()));
            write_points(&path, &cloud, fmt).unwrap();
            let back = read_points(&path, PointFormat::from_path(&path)).unwrap();
            assert_eq!(back, cloud, "{fmt:?}");
        }
    }
}

#[test]
fn binary_layout_by_hand() {
    let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]], vec![0.5], 1).unwrap();
    let mut want = b"P4PC".to_vec();
    want.extend([1, 0, 0, 0, 1, 0, 0, 0]);
    for v in [1.0f32, 2.0, 3.0, 0.5] {
        want.extend(v.to_le_bytes());
    }
    assert_eq!(format_bin(&cloud), want);
}

#[test]
fn ragged_row_reports_its_line() {
    let text = "# four columns\n0 0 0 1\n1 1 1 2\n\n2 2 2 3 9\n";
    match parse_xyz(text) {
        Err(PointsError::Ragged { line, expected, found }) => assert_eq!((line, expected, found), (5, 4, 5)),
        other => panic!("{other:?}"),
    }
    let e = parse_xyz("0 0 0\n1 x 1\n").unwrap_err();
    assert!(matches!(e, PointsError::BadNumber { line: 2, column: 2, .. }));
    assert!(e.to_string().starts_with("line 2"));
    assert!(matches!(
        parse_xyz("1 2\n"),
        Err(PointsError::TooFewColumns { line: 1, found: 2 })
    ));
    assert!(matches!(
        parse_xyz("0 0 nan\n"),
        Err(PointsError::NonFiniteText { line: 1, column: 3 })
    ));
    assert!(matches!(parse_xyz("# nothing\n\n"), Err(PointsError::Empty)));
}

#[test]
fn binary_errors_carry_offsets() {
    let good = format_bin(&random_cloud(4, 2, 1));
    assert!(matches!(
        parse_bin(b"PCD0\0\0\0\0\0\0\0\0"),
        Err(PointsError::BadMagic { .. })
    ));
    assert!(matches!(parse_bin(b"P4"), Err(PointsError::BadMagic { .. })));
    assert!(matches!(
        parse_bin(&good[..10]),
        Err(PointsError::ShortFile { offset: 10, needed: 2 })
    ));
    let cut = &good[..good.len() - 3];
    match parse_bin(cut) {
        Err(e @ PointsError::ShortFile { .. }) => assert!(e.to_string().contains(&format!("offset {}", cut.len()))),
        other => panic!("{other:?}"),
    }
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(parse_bin(&long), Err(PointsError::TrailingBytes { offset, extra: 1 }) if offset == good.len()));
    let mut inf = good.clone();
    inf[16..20].copy_from_slice(&f32::INFINITY.to_le_bytes());
    assert!(matches!(parse_bin(&inf), Err(PointsError::NonFiniteBin { offset: 16 })));
    let mut empty = b"P4PC".to_vec();
    empty.extend([0u8; 8]);
    assert!(matches!(parse_bin(&empty), Err(PointsError::Empty)));
}

proptest! {
    #[test]
    fn round_trips_are_exact(n in 1usize..40, c in 0usize..4, seed in any::<u64>()) {
        let cloud = random_cloud(n, c, seed);
        prop_assert_eq!(parse_bin(&format_bin(&cloud)).unwrap(), cloud.clone());
        prop_assert_eq!(parse_xyz(&format_xyz(&cloud)).unwrap(), cloud);
    }
}
