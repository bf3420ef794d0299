mod common;

use common::{brute_force, random_matrix};
use geoalign_core::evaluation::{
    average_accuracy, kappa, overall_accuracy, per_class_accuracy, ConfusionMatrix, EvalReport,
    Split,
};
use geoalign_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hundred_random_matrices_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..100 {
        let rows = random_matrix(&mut rng);
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let want = brute_force(&rows);
        assert!(
            (overall_accuracy(&cm).unwrap() - want.oa).abs() < 1e-12,
            "OA #{k}"
        );
        assert!(
            (average_accuracy(&cm).unwrap() - want.aa).abs() < 1e-12,
            "AA #{k}"
        );
        let got = kappa(&cm).unwrap();
        assert!((got - want.kappa.unwrap()).abs() < 1e-12, "kappa #{k}");
    }
}

#[test]
fn hand_case_kappa_is_exactly_one_third() {
    let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![1, 2]]).unwrap();
    assert_eq!(kappa(&cm).unwrap(), 1.0 / 3.0);
    assert_eq!(overall_accuracy(&cm).unwrap(), 4.0 / 6.0);
    assert_eq!(average_accuracy(&cm).unwrap(), 2.0 / 3.0);
}

#[test]
fn chance_agreement_and_identity() {
    // outer product of marginals [1,2,3] x [3,1,2]
    let rows: Vec<Vec<u64>> = [1u64, 2, 3]
        .iter()
        .map(|r| [3u64, 1, 2].iter().map(|c| r * c).collect())
        .collect();
    assert_eq!(
        kappa(&ConfusionMatrix::from_rows(&rows).unwrap()).unwrap(),
        0.0
    );
    let eye = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 1, 0], vec![0, 0, 9]]).unwrap();
    assert_eq!(kappa(&eye).unwrap(), 1.0);
    assert_eq!(overall_accuracy(&eye).unwrap(), 1.0);
    assert_eq!(average_accuracy(&eye).unwrap(), 1.0);
}

#[test]
fn degenerate_and_empty_inputs() {
    let single = ConfusionMatrix::from_rows(&[vec![4, 0], vec![0, 0]]).unwrap();
    assert!(matches!(kappa(&single), Err(Error::Degenerate(_))));
    let empty = ConfusionMatrix::new(3);
    assert!(matches!(overall_accuracy(&empty), Err(Error::Config(_))));
}

#[test]
fn report_serializes_absent_class_as_null() {
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1, 0], vec![0, 0, 0], vec![1, 0, 2]]).unwrap();
    let report = EvalReport::from_confusion(&cm, Split::Test, &[0u8; 32]).unwrap();
    let json: serde_json::Value = serde_json::to_value(&report).unwrap();
    assert!(json["per_class"][1].is_null());
    for key in ["oa", "aa", "kappa", "per_class", "confusion"] {
        assert!(!json[key].is_null(), "{key}");
    }
    assert_eq!(json["counts"]["total"], 7);
    assert!((report.aa - (0.75 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    let table = report.render_table(&["a".into(), "b".into(), "c".into()]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[1].ends_with("n/a"));
    assert!(
        lines[3].starts_with("OA") && lines[4].starts_with("AA") && lines[5].starts_with("kappa")
    );
}

fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (2usize..8)
        .prop_flat_map(|c| proptest::collection::vec(proptest::collection::vec(0u64..50, c), c))
}

proptest! {
    #[test]
    fn metrics_stay_in_range_and_oa_is_trace_over_total(rows in matrix_strategy()) {
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        prop_assume!(cm.total() > 0);
        let oa = overall_accuracy(&cm).unwrap();
        prop_assert_eq!(oa, cm.trace() as f64 / cm.total() as f64);
        prop_assert!((0.0..=1.0).contains(&oa));
        let aa = average_accuracy(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&aa));
        if let Ok(k) = kappa(&cm) {
            prop_assert!((-1.0..=1.0).contains(&k));
        }
        let weighted: f64 = per_class_accuracy(&cm)
            .iter()
            .enumerate()
            .filter(|(c, _)| cm.row_sum(*c) > 0)
            .map(|(c, v)| v * cm.row_sum(c) as f64 / cm.total() as f64)
            .sum();
        prop_assert!((weighted - oa).abs() < 1e-14, "{} vs {}", weighted, oa);
        let total: u64 = (0..cm.classes()).map(|c| cm.row_sum(c)).sum();
        prop_assert_eq!(total, cm.total());
        for (c, v) in per_class_accuracy(&cm).iter().enumerate() {
            if cm.row_sum(c) > 0 {
                prop_assert_eq!(*v, cm.get(c, c) as f64 / cm.row_sum(c) as f64);
            } else {
                prop_assert!(v.is_nan());
            }
        }
    }

    #[test]
    fn metrics_invariant_under_class_relabeling(rows in matrix_strategy(), seed in any::<u64>()) {
        let c = rows.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Vec<u64>> = (0..c)
            .map(|i| (0..c).map(|j| rows[perm[i]][perm[j]]).collect())
            .collect();
        let a = ConfusionMatrix::from_rows(&rows).unwrap();
        let b = ConfusionMatrix::from_rows(&permuted).unwrap();
        prop_assume!(a.total() > 0);
        prop_assert_eq!(overall_accuracy(&a).unwrap(), overall_accuracy(&b).unwrap());
        prop_assert!((average_accuracy(&a).unwrap() - average_accuracy(&b).unwrap()).abs() < 1e-15);
        match (kappa(&a), kappa(&b)) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "kappa defined for only one ordering"),
        }
    }
}
