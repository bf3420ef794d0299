use geoalign_core::data::{ElevationRaster, HyperCube, LabelMap, SceneDataset};
use geoalign_core::sampling::{
    compute_stats, extract_all, extract_patch, extract_window, generate_synthetic_scene, reflect,
    BatchPlan, BatchSchedule, SynthConfig, STD_FLOOR,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_scene(h: usize, w: usize, bands: usize, seed: u64) -> SceneDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cube: Vec<f32> = (0..h * w * bands)
        .map(|_| rng.random_range(-50.0f32..250.0))
        .collect();
    let elev: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0f32..40.0)).collect();
    let labels: Vec<u16> = (0..h * w).map(|i| (i % 3) as u16 + 1).collect();
    let mut pixels: Vec<(usize, usize)> =
        (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let test = pixels.split_off(pixels.len() / 3);
    SceneDataset::new(
        HyperCube::new(h, w, bands, cube).unwrap(),
        ElevationRaster::new(h, w, 1, elev).unwrap(),
        LabelMap::new(h, w, 3, labels).unwrap(),
        pixels,
        test,
    )
    .unwrap()
}

#[test]
fn stats_match_two_pass_oracle() {
    let scene = random_scene(20, 17, 3, 5);
    let stats = compute_stats(&scene).unwrap();
    let n = scene.train_indices.len() as f64;
    for b in 0..3 {
        let values: Vec<f64> = scene
            .train_indices
            .iter()
            .map(|&(r, c)| scene.cube.pixel(r, c)[b] as f64)
            .collect();
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((stats.cube_mean[b] - mean).abs() <= 1e-6 * mean.abs());
        assert!((stats.cube_std[b] - std).abs() <= 1e-6 * std);
    }
    // test pixels never contribute
    let mut changed = scene.clone();
    let (r, c) = changed.test_indices[0];
    let w = changed.width();
    let mut values = changed.cube.values().to_vec();
    values[(r * w + c) * 3] = 1e6;
    changed.cube = HyperCube::new(changed.height(), w, 3, values).unwrap();
    assert_eq!(compute_stats(&changed).unwrap(), stats);
}

#[test]
fn constant_band_floors_std() {
    let mut scene = random_scene(6, 6, 2, 1);
    let values: Vec<f32> = scene
        .cube
        .values()
        .chunks(2)
        .flat_map(|px| [px[0], 4.0])
        .collect();
    scene.cube = HyperCube::new(6, 6, 2, values).unwrap();
    let stats = compute_stats(&scene).unwrap();
    assert_eq!(stats.cube_std[1], STD_FLOOR);
    let pair = extract_patch(&scene, &stats, scene.train_indices[0], 3).unwrap();
    assert!(pair.hsi[9..].iter().all(|&v| v == 0.0));
}

#[test]
fn interior_patch_is_normalized_raw_window() {
    let scene = random_scene(24, 24, 3, 2);
    let stats = compute_stats(&scene).unwrap();
    let center = (12, 11);
    let pair = extract_patch(&scene, &stats, center, 11).unwrap();
    for b in 0..3 {
        for i in 0..11 {
            for j in 0..11 {
                let raw = scene.cube.pixel(12 + i - 5, 11 + j - 5)[b] as f64;
                let want = ((raw - stats.cube_mean[b]) / stats.cube_std[b]) as f32;
                assert_eq!(pair.hsi[b * 121 + i * 11 + j], want);
            }
        }
    }
}

#[test]
fn normalized_training_centers_have_zero_mean_unit_std() {
    let scene = random_scene(30, 23, 4, 9);
    let stats = compute_stats(&scene).unwrap();
    let pairs = extract_all(&scene, &stats, &scene.train_indices, 5).unwrap();
    let n = pairs.len() as f64;
    for b in 0..4 {
        let centers: Vec<f64> = pairs.iter().map(|p| p.hsi[b * 25 + 12] as f64).collect();
        let mean = centers.iter().sum::<f64>() / n;
        let std = (centers.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-5, "band {b} mean {mean}");
        assert!((std - 1.0).abs() < 1e-4, "band {b} std {std}");
    }
}

#[test]
fn synthetic_scene_is_deterministic() {
    let cfg = SynthConfig::default();
    let a = generate_synthetic_scene(&cfg).unwrap();
    let b = generate_synthetic_scene(&cfg).unwrap();
    assert_eq!(a.cube.values(), b.cube.values());
    assert_eq!(a.lidar.values(), b.lidar.values());
    assert_eq!(a.labels.labels(), b.labels.labels());
    assert_eq!(a.train_indices, b.train_indices);
    assert_eq!(a.test_indices, b.test_indices);
    let other = generate_synthetic_scene(&SynthConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a.cube.values(), other.cube.values());
}

#[test]
fn synthetic_defaults_have_expected_shape() {
    let scene = generate_synthetic_scene(&SynthConfig::default()).unwrap();
    assert_eq!(scene.class_count(), 6);
    assert_eq!(scene.train_indices.len(), 600);
    assert_eq!(scene.test_indices.len(), 3000);
    for class in 1..=6u16 {
        assert!(scene.train_indices.iter().any(|&p| scene.label(p) == class));
        assert!(scene.test_indices.iter().any(|&p| scene.label(p) == class));
    }
}

/// Mean raw spectrum of each class over the training split; test pixels go
/// to the nearest mean.
fn nearest_centroid_accuracy(scene: &SceneDataset) -> f64 {
    let b = scene.cube.bands();
    let c = scene.class_count();
    let mut sums = vec![vec![0.0f64; b]; c];
    let mut counts = vec![0usize; c];
    for &(r, col) in &scene.train_indices {
        let k = scene.label((r, col)) as usize - 1;
        counts[k] += 1;
        for (s, &v) in sums[k].iter_mut().zip(scene.cube.pixel(r, col)) {
            *s += v as f64;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let correct = scene
        .test_indices
        .iter()
        .filter(|&&(r, col)| {
            let x = scene.cube.pixel(r, col);
            let best = (0..c)
                .min_by(|&a, &bb| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(x)
                        .map(|(m, &v)| (m - v as f64).powi(2))
                        .sum();
                    let db: f64 = centroids[bb]
                        .iter()
                        .zip(x)
                        .map(|(m, &v)| (m - v as f64).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best + 1 == scene.label((r, col)) as usize
        })
        .count();
    correct as f64 / scene.test_indices.len() as f64
}

#[test]
fn nearest_centroid_on_raw_spectra_reaches_99_percent() {
    let scene = generate_synthetic_scene(&SynthConfig::default()).unwrap();
    let acc = nearest_centroid_accuracy(&scene);
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn zero_noise_two_classes_are_separable() {
    let scene = generate_synthetic_scene(&SynthConfig {
        classes: 2,
        noise: 0.0,
        close_pair_separation: 8.0,
        cells: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    assert_eq!(nearest_centroid_accuracy(&scene), 1.0);
}

#[test]
fn batch_sequences_repeat_for_a_seed() {
    let scene = random_scene(10, 10, 2, 3);
    let stats = compute_stats(&scene).unwrap();
    let pairs = extract_all(&scene, &stats, &scene.train_indices, 3).unwrap();
    let labels: Vec<u16> = pairs.iter().map(|p| p.label).collect();
    let plan = BatchPlan {
        seed: 42,
        batch_size: 8,
        class_balanced: false,
    };
    let mut a = BatchSchedule::new(plan);
    let mut b = BatchSchedule::new(plan);
    for _ in 0..3 {
        assert_eq!(a.next_epoch(&labels), b.next_epoch(&labels));
    }
    let mut c = BatchSchedule::new(BatchPlan { seed: 43, ..plan });
    assert_ne!(
        BatchSchedule::new(plan).next_epoch(&labels),
        c.next_epoch(&labels)
    );
}

proptest! {
    #[test]
    fn every_epoch_is_a_partition(n in 1usize..300, batch in 1usize..64, seed in any::<u64>(), balanced in any::<bool>()) {
        let labels: Vec<u16> = (0..n).map(|i| (i * 7 % 5) as u16 + 1).collect();
        let mut sched = BatchSchedule::new(BatchPlan { seed, batch_size: batch, class_balanced: balanced });
        let batches = sched.next_epoch(&labels);
        prop_assert_eq!(batches.len(), n.div_ceil(batch));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == batch));
    }

    #[test]
    fn reflect_stays_in_range_and_mirrors_the_edge(n in 1usize..40, index in -80isize..120) {
        let r = reflect(index, n);
        prop_assert!(r < n);
        if (0..n as isize).contains(&index) {
            prop_assert_eq!(r, index as usize);
        }
        if n > 1 {
            prop_assert_eq!(reflect(-1, n), 1);
            prop_assert_eq!(reflect(n as isize, n), n - 2);
        }
    }

    #[test]
    fn mirrored_raster_gives_mirrored_patches(
        h in 3usize..14, w in 3usize..14, size in prop::sample::select(vec![1usize, 3, 5, 7, 11]),
        seed in any::<u64>(), r in 0usize..14, c in 0usize..14,
    ) {
        let (r, c) = (r % h, c % w);
        let scene = random_scene(h, w, 2, seed);
        let stats = compute_stats(&scene).unwrap();
        let flip = |values: &[f32], depth: usize| -> Vec<f32> {
            (0..h)
                .flat_map(|i| (0..w).rev().map(move |j| (i, j)))
                .flat_map(|(i, j)| values[(i * w + j) * depth..(i * w + j + 1) * depth].to_vec())
                .collect()
        };
        let cube = HyperCube::new(h, w, 2, flip(scene.cube.values(), 2)).unwrap();
        let lidar = ElevationRaster::new(h, w, 1, flip(scene.lidar.values(), 1)).unwrap();
        let a = extract_window(&scene.cube, &scene.lidar, &stats, (r, c), size).unwrap();
        let b = extract_window(&cube, &lidar, &stats, (r, w - 1 - c), size).unwrap();
        for (plane_a, plane_b) in a.hsi.chunks(size * size).zip(b.hsi.chunks(size * size))
            .chain(a.lidar.chunks(size * size).zip(b.lidar.chunks(size * size)))
        {
            for i in 0..size {
                for j in 0..size {
                    prop_assert_eq!(plane_a[i * size + j], plane_b[i * size + size - 1 - j]);
                }
            }
        }
    }
}
