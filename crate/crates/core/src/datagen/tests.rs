use std::io::Write;

use super::*;
use crate::ndgrad::Tensor;
use crate::stochastics::RngStream;

#[test]
fn default_dataset_shapes_and_splits() {
    let (ds, _) = generate_measurement(1);
    assert_eq!(ds.a.shape(), &[1000, 5]);
    assert_eq!(ds.c.shape(), &[1000, 5]);
    assert_eq!(ds.x.shape(), &[1000, 10]);
    assert!(ds.y.iter().all(|&y| y < 5));
    let count = |s| ds.split.iter().filter(|&&v| v == s).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (450, 50, 500));
}

#[test]
fn label_rule_hand_example() {
    assert_eq!(label_from_parents(&[0.0, 0.0, 0.0, 5.0, 0.0], &[0.0; 5]), 3);
    assert!((g(5.0) - 1.0).abs() < 1e-15);
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate_measurement(7), generate_measurement(7));
    assert_ne!(generate_measurement(7).0, generate_measurement(8).0);
}

#[test]
fn children_are_standardized_before_noise() {
    let (ds, mech) = generate_measurement(3);
    let clean = mech.children(&ds.y, &ds.c);
    for j in 0..DIM_X {
        let col: Vec<f64> = (0..ds.rows()).map(|i| clean.get2(i, j)).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}

/// Independent evaluation of the quadratic mechanism via an explicit
/// `v' Q v` sum, checked against the stored children.
#[test]
fn coparent_shift_matches_regeneration_oracle() {
    let (ds, mech) = generate_measurement(4);
    for delta in [0.0, 0.5, -1.0, 2.0] {
        let shifted = shift_coparents(&ds, &mech, delta).unwrap();
        assert_eq!(shifted.y, ds.y);
        assert_eq!(shifted.a, ds.a);
        let (fresh, fresh_mech) = generate_measurement(4);
        assert_eq!(fresh_mech, mech);
        let c = fresh.c.map(|v| v + delta);
        for i in (0..ds.rows()).step_by(37) {
            let raw = fresh_mech.raw_children(fresh.y[i], c.row(i));
            for j in 0..DIM_X {
                let expect = (raw[j] - mech.mean[j]) / mech.std[j] + fresh.x_noise.get2(i, j);
                assert_eq!(shifted.x.get2(i, j), expect);
            }
        }
    }
    assert_eq!(shift_coparents(&ds, &mech, 0.0).unwrap(), ds);
}

#[test]
fn coparent_shift_rejects_foreign_mechanism() {
    let (ds, _) = generate_measurement(1);
    let (_, other) = generate_measurement(2);
    assert!(matches!(
        shift_coparents(&ds, &other, 1.0),
        Err(DataError::MechanismMismatch { .. })
    ));
}

#[test]
fn child_shift_properties() {
    let (ds, _) = generate_measurement(5);
    assert_eq!(shift_children(&ds, 0.0).unwrap(), ds);
    let s = shift_children(&ds, 1.5).unwrap();
    assert_eq!((s.y.clone(), s.a.clone(), s.c.clone()), (ds.y.clone(), ds.a.clone(), ds.c.clone()));
    for j in 0..DIM_X {
        let m0: f64 = (0..ds.rows()).map(|i| ds.x.get2(i, j)).sum::<f64>() / ds.rows() as f64;
        let m1: f64 = (0..ds.rows()).map(|i| s.x.get2(i, j)).sum::<f64>() / ds.rows() as f64;
        assert!((m1 - m0 - 1.5).abs() < 1e-12);
    }
    let back = shift_children(&s, -1.5).unwrap();
    for (a, b) in back.x.data().iter().zip(ds.x.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn csv_round_trip() {
    let (ds, _) = generate_measurement(6);
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("a0,a1,a2,a3,a4,c0,c1,c2,c3,c4,x0,"));
    let back = MeasurementDataset::read_csv(buf.as_slice(), 6).unwrap();
    assert_eq!((back.a, back.c, back.x, back.y, back.split), (ds.a, ds.c, ds.x, ds.y, ds.split));
}

#[test]
fn role_map_misspecification() {
    let truth = RoleMap::measurement();
    assert_eq!(truth.dims(), (5, 5, 10));
    assert_eq!(truth.misspecify(Misspecification::RelabelChildrenAsCoparents(0)).unwrap(), truth);
    assert_eq!(truth.misspecify(Misspecification::SwapPairs(0)).unwrap(), truth);
    let mis2 = truth.misspecify(Misspecification::RelabelChildrenAsCoparents(2)).unwrap();
    assert_eq!(mis2.dims(), (5, 7, 8));
    assert_eq!(mis2.role_of("x0"), Some(Role::CoParent));
    assert_eq!(mis2.role_of("x2"), Some(Role::Child));
    let swap = truth.misspecify(Misspecification::SwapPairs(3)).unwrap();
    assert_eq!(swap.dims(), (5, 5, 10));
    assert_eq!(swap.role_of("c1"), Some(Role::Child));
    assert_eq!(swap.misspecify(Misspecification::SwapPairs(3)).unwrap(), truth);
    assert!(truth.misspecify(Misspecification::RelabelChildrenAsCoparents(11)).is_err());
    assert!(truth.misspecify(Misspecification::SwapPairs(6)).is_err());
}

#[test]
fn role_projection_moves_columns() {
    let (ds, _) = generate_measurement(2);
    let mis = RoleMap::measurement().misspecify(Misspecification::RelabelChildrenAsCoparents(2)).unwrap();
    let v = mis.project(&ds).unwrap();
    assert_eq!(v.c.shape(), &[1000, 7]);
    assert_eq!(v.x.shape(), &[1000, 8]);
    assert_eq!(v.c.get2(3, 5), ds.x.get2(3, 0));
    assert_eq!(v.x.get2(3, 0), ds.x.get2(3, 2));
    let truth = RoleMap::measurement().project(&ds).unwrap();
    assert_eq!((truth.a, truth.c, truth.x), (ds.a.clone(), ds.c.clone(), ds.x.clone()));
}

fn idx_images(magic: [u8; 4], n: u32, side: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = magic.to_vec();
    for v in [n, side, side] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(n: u32, labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&n.to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_parsing() {
    let img = idx_images([0, 0, 8, 3], 1, 2, &[0, 255, 51, 0]);
    let (t, r, c) = parse_idx_images(&img).unwrap();
    assert_eq!((r, c), (2, 2));
    assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.0]);
    let bad = idx_images([0, 0, 8, 1], 1, 2, &[0, 255, 51, 0]);
    assert!(matches!(parse_idx_images(&bad), Err(DataError::Format(_))));
    let short = idx_images([0, 0, 8, 3], 2, 2, &[0, 255, 51, 0]);
    assert!(parse_idx_images(&short).is_err());
    assert_eq!(parse_idx_labels(&idx_labels(3, &[1, 2, 9])).unwrap(), vec![1, 2, 9]);
    assert!(parse_idx_labels(&idx_labels(4, &[1, 2, 9])).is_err());
}

#[test]
fn load_idx_reads_plain_and_gzip_and_checks_counts() {
    let dir = tempfile::tempdir().unwrap();
    let img = idx_images([0, 0, 8, 3], 2, 2, &[0, 255, 51, 0, 1, 2, 3, 4]);
    let ip = dir.path().join("img");
    std::fs::write(&ip, &img).unwrap();
    let lp = dir.path().join("lab.gz");
    let mut enc = flate2::write::GzEncoder::new(std::fs::File::create(&lp).unwrap(), flate2::Compression::default());
    enc.write_all(&idx_labels(2, &[4, 7])).unwrap();
    enc.finish().unwrap();
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!((ds.rows(), ds.side, ds.labels.clone()), (2, 2, vec![4, 7]));
    let lp3 = dir.path().join("lab3");
    std::fs::write(&lp3, idx_labels(3, &[4, 7, 1])).unwrap();
    assert!(load_idx(&ip, &lp3).is_err());
}

#[test]
fn shift_image_rules() {
    let side = 28;
    let mut rng = RngStream::new(1, 1);
    let imgs = Tensor::new(vec![3, side * side], (0..3 * side * side).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
    assert_eq!(shift_image(&imgs, side, 0.0, Axis::Vertical).unwrap(), imgs);
    let down = shift_image(&imgs, side, 0.5, Axis::Vertical).unwrap();
    for i in 0..3 {
        assert!(down.row(i)[..14 * side].iter().all(|&v| v == 0.0));
        assert_eq!(down.row(i)[14 * side..], imgs.row(i)[..14 * side]);
        assert!(down.row(i).iter().sum::<f64>() <= imgs.row(i).iter().sum::<f64>());
    }
    let left = shift_image(&imgs, side, -0.25, Axis::Horizontal).unwrap();
    assert_eq!(left.get2(0, 0), imgs.get2(0, 7));
    assert_eq!(left.get2(0, side - 1), 0.0);
    assert!(shift_image(&imgs, side, 1.5, Axis::Vertical).is_err());
}

#[test]
fn augmentation_rules() {
    let side = 4;
    let imgs = Tensor::new(vec![5, 16], (0..80).map(|v| (v % 7) as f64 / 7.0).collect()).unwrap();
    let data = ImageDataset { images: imgs.clone(), labels: vec![0, 1, 2, 3, 4], side };
    let (b, shifts) = augment_shift_range(&data, 0.0, Axis::Horizontal, &mut RngStream::new(0, 0)).unwrap();
    assert_eq!(b.rows(), 10);
    assert_eq!(b.x.select_rows(&[5, 6, 7, 8, 9]), imgs);
    assert_eq!(b.clean, [vec![true; 5], vec![false; 5]].concat());
    assert!(shifts.iter().all(|&s| s == 0.0));
    let (b, shifts) = augment_shift_range(&data, 0.5, Axis::Vertical, &mut RngStream::new(0, 1)).unwrap();
    assert_eq!(b.y, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    assert!(shifts.iter().all(|s| s.abs() <= 0.5));
    assert!(augment_shift_range(&data, 1.5, Axis::Vertical, &mut RngStream::new(0, 1)).is_err());
}
