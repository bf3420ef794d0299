#![allow(clippy::excessive_precision)]

mod common;

use common::mini_table;
use geoalign_core::alignment::{
    alignment_loss, classify, contrastive_loss, l2_normalize, load_text_table, max_log_inv_tau,
    random_text_table, similarity, write_text_table, LossDirection, SimilarityMatrix, Temperature,
    TextTable, MAX_LOGIT_SCALE, SYNTHETIC_MAX_COSINE,
};
use geoalign_core::{Error, Tensor};
use proptest::prelude::*;

const DIRECTIONS: [LossDirection; 3] = [
    LossDirection::VisualToText,
    LossDirection::TextToVisual,
    LossDirection::Symmetric,
];

fn loss(values: &[f64], n: usize, dir: LossDirection) -> f64 {
    let s = SimilarityMatrix::from_values(n, values.to_vec()).unwrap();
    contrastive_loss(&s, dir).unwrap().0
}

#[test]
fn uniform_matrix_gives_ln_n_in_both_precisions() {
    for n in [1usize, 2, 8, 128] {
        for dir in DIRECTIONS {
            let l64 = loss(&vec![0.0; n * n], n, dir);
            assert!((l64 - (n as f64).ln()).abs() < 1e-6, "f64 n={n} {dir:?}");
            let s = SimilarityMatrix::from_values(n, vec![0.0f32; n * n]).unwrap();
            let l32 = contrastive_loss(&s, dir).unwrap().0 as f64;
            assert!((l32 - (n as f64).ln()).abs() < 1e-6, "f32 n={n} {dir:?}");
        }
    }
    assert!((loss(&[0.0; 4], 2, LossDirection::Symmetric) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn two_by_two_matches_high_precision_oracle() {
    // 50-digit decimal evaluation of the row and column cross-entropies.
    let s = [1.0, 0.0, 0.5, 1.0];
    let want = 0.393_669_335_849_164_757_460_996_425;
    for dir in DIRECTIONS {
        assert!((loss(&s, 2, dir) - want).abs() < 1e-15, "{dir:?}");
    }
}

#[test]
fn three_by_three_asymmetric_case() {
    let s = [2.0, -1.0, 0.25, 0.5, 1.5, -2.0, 3.0, 0.0, 1.0];
    let v2t = loss(&s, 3, LossDirection::VisualToText);
    let t2v = loss(&s, 3, LossDirection::TextToVisual);
    let sym = loss(&s, 3, LossDirection::Symmetric);
    assert!((v2t - 0.902_236_361_452_295_280_624).abs() < 1e-15);
    assert!((t2v - 0.686_011_039_905_776_780_509).abs() < 1e-15);
    assert!((sym - 0.794_123_700_679_036_030_567).abs() < 1e-15);
    assert!((sym - 0.5 * (v2t + t2v)).abs() < 1e-12);
}

#[test]
fn saturated_identity_is_numerically_zero_in_f32() {
    let n = 8;
    let mut v = vec![0.0f32; n * n];
    for i in 0..n {
        v[i * n + i] = 100.0;
    }
    let s = SimilarityMatrix::from_values(n, v).unwrap();
    for dir in DIRECTIONS {
        assert!(contrastive_loss(&s, dir).unwrap().0 < 1e-40);
    }
}

#[test]
fn similarity_matches_double_loop_oracle() {
    let table = mini_table(5, 16);
    let n = 7;
    let labels: Vec<u16> = vec![1, 3, 5, 2, 2, 4, 1];
    let z: Vec<f64> = (0..n * 16)
        .map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0)
        .collect();
    let temp = Temperature { log_inv_tau: 2.3 };
    let s = similarity(&z, &table, &labels, temp).unwrap();
    for i in 0..n {
        let row = &z[i * 16..(i + 1) * 16];
        let zn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, &label) in labels.iter().enumerate() {
            let t = &table.raw()[(label as usize - 1) * 16..label as usize * 16];
            let tn = t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let dot: f64 = row.iter().zip(t).map(|(a, &b)| a * b as f64).sum();
            let want = 2.3f64.exp() * dot / (zn * tn);
            let got = s.get(i, j);
            assert!(
                (got - want).abs() <= 1e-5 * want.abs().max(1e-12),
                "S[{i}][{j}] {got} vs {want}"
            );
            assert!(got.abs() <= s.scale * (1.0 + 1e-12));
        }
    }
}

#[test]
fn normalize_hand_cases() {
    assert_eq!(l2_normalize(&[3.0f64, 4.0]).unwrap(), vec![0.6, 0.8]);
    assert!(matches!(
        l2_normalize(&[0.0f64; 5]),
        Err(Error::Numerical(_))
    ));
}

#[test]
fn clamp_constant_is_the_largest_value_below_the_limit() {
    let c32 = max_log_inv_tau::<f32>();
    assert!((c32 as f64).exp() <= MAX_LOGIT_SCALE);
    let up = f32::from_bits(c32.to_bits() + 1);
    assert!((up as f64).exp() > MAX_LOGIT_SCALE);
    let c64 = max_log_inv_tau::<f64>();
    assert!(c64.exp() <= MAX_LOGIT_SCALE);
    assert!(f64::from_bits(c64.to_bits() + 1).exp() > MAX_LOGIT_SCALE);
}

#[test]
fn generated_table_honors_pairwise_cosine_bound() {
    for (classes, dim, seed) in [(6, 512, 7), (11, 512, 3), (6, 16, 1)] {
        let table = random_text_table(common::class_names(classes), dim, seed).unwrap();
        let raw = table.raw();
        for a in 0..classes {
            for b in 0..classes {
                if a == b {
                    continue;
                }
                let ra = &raw[a * dim..(a + 1) * dim];
                let rb = &raw[b * dim..(b + 1) * dim];
                let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum();
                let na = ra.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let nb = rb.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                assert!((dot / (na * nb)).abs() <= SYNTHETIC_MAX_COSINE);
            }
        }
    }
}

#[test]
fn text_table_file_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let names = vec![
        "Apples".to_string(),
        "Buildings".into(),
        "Ground".into(),
        "Woods".into(),
        "Vineyard".into(),
        "Roads".into(),
    ];
    let table = random_text_table(names.clone(), 512, 4).unwrap();
    let path = dir.path().join("t.mmte");
    write_text_table(&table, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = load_text_table(&path, Some(512)).unwrap();
    assert_eq!(back.names(), names.as_slice());
    let again = dir.path().join("u.mmte");
    write_text_table(&back, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
    for c in 1..=6 {
        let norm: f64 = back.unit_row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-3);
    }
    assert!(matches!(
        load_text_table(&path, Some(256)),
        Err(Error::Config(_))
    ));
}

#[test]
fn classify_picks_exact_text_row() {
    let table = mini_table(5, 16);
    for c in 1..=5 {
        let z: Vec<f64> = table.unit_row(c).to_vec();
        assert_eq!(classify(&z, &table).unwrap().0, c);
    }
}

fn table_and_batch(n: usize, classes: usize) -> (TextTable, Vec<u16>) {
    let labels = (0..n).map(|i| (i % classes) as u16 + 1).collect();
    (mini_table(classes, 16), labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_is_mean_of_directions(
        n in 1usize..12,
        raw in proptest::collection::vec(-30.0f64..30.0, 144),
    ) {
        let s = &raw[..n * n];
        let v2t = loss(s, n, LossDirection::VisualToText);
        let t2v = loss(s, n, LossDirection::TextToVisual);
        let sym = loss(s, n, LossDirection::Symmetric);
        prop_assert!((sym - 0.5 * (v2t + t2v)).abs() <= 1e-12 * sym.abs().max(1.0));
        prop_assert!(v2t >= 0.0 && t2v >= 0.0);
    }

    #[test]
    fn transposing_swaps_directions(
        n in 1usize..10,
        raw in proptest::collection::vec(-10.0f64..10.0, 100),
    ) {
        let s = &raw[..n * n];
        let t: Vec<f64> = (0..n * n).map(|k| s[(k % n) * n + k / n]).collect();
        let a = loss(s, n, LossDirection::VisualToText);
        let b = loss(&t, n, LossDirection::TextToVisual);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn loss_is_equivariant_under_batch_permutation(
        n in 2usize..9,
        z in proptest::collection::vec(-3.0f64..3.0, 16 * 8),
        log_inv_tau in 0.0f64..4.6,
        seed in any::<u64>(),
    ) {
        let (table, labels) = table_and_batch(n, 4);
        let z = &z[..16 * n];
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        // z is [D, n]; permute columns
        let mut zp = vec![0.0; 16 * n];
        for f in 0..16 {
            for (i, &p) in perm.iter().enumerate() {
                zp[f * n + i] = z[f * n + p];
            }
        }
        let lp: Vec<u16> = perm.iter().map(|&p| labels[p]).collect();
        let zt = Tensor::from_vec(&[16, n], z.to_vec()).unwrap();
        let zpt = Tensor::from_vec(&[16, n], zp).unwrap();
        for dir in DIRECTIONS {
            let a = alignment_loss(&zt, &labels, &table, log_inv_tau, dir);
            let b = alignment_loss(&zpt, &lp, &table, log_inv_tau, dir);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.max(1.0));
                    for f in 0..16 {
                        for (i, &p) in perm.iter().enumerate() {
                            let ga = a.grad_z.data()[f * n + p];
                            let gb = b.grad_z.data()[f * n + i];
                            prop_assert!((ga - gb).abs() <= 1e-12 * ga.abs().max(1e-3));
                        }
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "only one ordering failed"),
            }
        }
    }

    #[test]
    fn classify_ignores_positive_scale(
        z in proptest::collection::vec(-3.0f64..3.0, 16),
        scale in 1e-3f64..1e3,
    ) {
        prop_assume!(z.iter().any(|v| v.abs() > 1e-3));
        let table = mini_table(5, 16);
        let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
        prop_assert_eq!(
            classify(&z, &table).unwrap().0,
            classify(&scaled, &table).unwrap().0
        );
    }

    #[test]
    fn classify_scores_match_brute_force(
        z in proptest::collection::vec(-3.0f64..3.0, 16),
    ) {
        prop_assume!(z.iter().any(|v| v.abs() > 1e-3));
        let table = mini_table(6, 16);
        let (class, scores) = classify(&z, &table).unwrap();
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = (0, f64::NEG_INFINITY);
        for c in 1..=6 {
            let t = &table.raw()[(c - 1) * 16..c * 16];
            let tn = t.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let cos = z.iter().zip(t).map(|(a, &b)| a * b as f64).sum::<f64>() / (zn * tn);
            prop_assert!((scores[c - 1] - cos).abs() < 1e-12);
            if cos > best.1 {
                best = (c, cos);
            }
        }
        prop_assert!(scores[class - 1] >= best.1 - 1e-12);
    }
}
