mod common;

use clipgcd::embedstore::{
    l2_normalize, load_matrix, make_split, read_labels, read_split, save_matrix, write_labels,
    write_split, EmbeddingMatrix, LabelMap,
};
use proptest::prelude::*;

#[test]
fn golden_fixture_loads() {
    let m = load_matrix(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/one_by_four.emb")).unwrap();
    assert_eq!((m.rows(), m.dims()), (1, 4));
    assert_eq!(m.row(0), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m.ids(), &["item-0".to_string()]);
}

#[test]
fn save_load_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = common::rng(1);
    let m = common::matrix(&common::gaussian_rows(5, 7, &mut r), "row-");
    let path = dir.path().join("m.emb");
    save_matrix(&m, &path).unwrap();
    assert_eq!(load_matrix(&path).unwrap(), m);
}

#[test]
fn random_matrix_normalizes_within_tolerance() {
    let mut r = common::rng(2);
    let m = common::matrix(&common::gaussian_rows(10, 16, &mut r), "r");
    let n = l2_normalize(&m).unwrap();
    for row in n.iter_rows() {
        // Independent pairwise summation of the squares.
        let sq: Vec<f64> = row.iter().map(|&x| f64::from(x).powi(2)).collect();
        let norm = sq.chunks(2).map(|c| c.iter().sum::<f64>()).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6, "norm {norm}");
    }
}

#[test]
fn labels_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let labels = LabelMap::from_pairs([("a", "cat"), ("b", "dog, big"), ("c", "cat")]).unwrap();
    let path = dir.path().join("labels.csv");
    write_labels(&labels, &path).unwrap();
    assert_eq!(read_labels(&path).unwrap(), labels);
}

fn shaped_labels(classes: usize, per_class: usize) -> LabelMap {
    LabelMap::from_pairs((0..classes).flat_map(|c| {
        (0..per_class).map(move |i| (format!("x{c}-{i}"), format!("class{c:03}")))
    }))
    .unwrap()
}

#[test]
fn cifar10_shape_counts() {
    let split = make_split(&shaped_labels(10, 5000), 0.5, 0.5, 0).unwrap();
    assert_eq!(split.num_seen_classes(), 5);
    assert_eq!(split.num_total_classes(), 10);
    assert_eq!(split.labeled_ids().len(), 12_500);
    assert_eq!(split.unlabeled_ids().len(), 37_500);
}

#[test]
fn cifar100_shape_counts() {
    let split = make_split(&shaped_labels(100, 500), 0.8, 0.5, 0).unwrap();
    assert_eq!(split.num_seen_classes(), 80);
    assert_eq!(split.num_total_classes(), 100);
    assert_eq!(split.labeled_ids().len(), 20_000);
    assert_eq!(split.unlabeled_ids().len(), 30_000);
}

#[test]
fn split_file_round_trip_and_labeled_items_are_seen() {
    let dir = tempfile::tempdir().unwrap();
    let split = make_split(&shaped_labels(4, 6), 0.5, 0.5, 9).unwrap();
    for id in split.labeled_ids() {
        assert!(split.is_seen(&split.get(&id).unwrap().class));
    }
    let path = dir.path().join("split.csv");
    write_split(&split, &path).unwrap();
    assert_eq!(read_split(&path).unwrap(), split);
}

proptest! {
    #[test]
    fn bytes_round_trip(rows in 1usize..6, dims in 1usize..9, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let m = common::matrix(&common::gaussian_rows(rows, dims, &mut r), "id");
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), m.to_bytes());
        prop_assert_eq!(back, m);
    }

    #[test]
    fn split_partitions_every_item(classes in 2usize..6, per in 2usize..8, seed in any::<u64>()) {
        let labels = shaped_labels(classes, per);
        let split = make_split(&labels, 0.5, 0.5, seed).unwrap();
        prop_assert_eq!(split.labeled_ids().len() + split.unlabeled_ids().len(), labels.len());
        prop_assert_eq!(split.truth(), labels);
    }
}
