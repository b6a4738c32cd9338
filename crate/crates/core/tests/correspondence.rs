use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repose_core::correspondence::{best_buddies, encode_heatmaps, load_keypoints, save_keypoints, select_keypoints, KeypointFile, DEFAULT_K};
use repose_core::descriptor::DescriptorGrid;

fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dim: usize, bg_prob: f64) -> DescriptorGrid {
    let grid: Vec<f32> = (0..rows * cols * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let sal: Vec<f32> = (0..rows * cols)
        .map(|_| {
            if rng.random_bool(bg_prob) {
                0.0
            } else {
                rng.random_range(0.01f32..=1.0)
            }
        })
        .collect();
    DescriptorGrid::new(rows, cols, dim, grid, sal).unwrap()
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na * nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// Quadratic mutual-nearest-neighbour search written independently of the library.
fn oracle(a: &DescriptorGrid, p: &DescriptorGrid) -> Vec<(usize, usize)> {
    let fa: Vec<usize> = (0..a.cells()).filter(|&c| a.salience(c) > 0.0).collect();
    let fp: Vec<usize> = (0..p.cells()).filter(|&c| p.salience(c) > 0.0).collect();
    let argmax = |from: &DescriptorGrid, i: usize, to: &DescriptorGrid, cands: &[usize]| -> Option<usize> {
        let mut best = None;
        let mut best_s = f64::NEG_INFINITY;
        for &j in cands {
            let s = cos(from.descriptor(i), to.descriptor(j));
            if s > best_s {
                best_s = s;
                best = Some(j);
            }
        }
        best
    };
    let mut out = Vec::new();
    for &i in &fa {
        if let Some(j) = argmax(a, i, p, &fp) {
            if argmax(p, j, a, &fa) == Some(i) {
                out.push((i, j));
            }
        }
    }
    out
}

#[test]
fn matches_brute_force_oracle_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let d = rng.random_range(1..=16);
        let a = random_grid(&mut rng, r, c, d, 0.3);
        let p = random_grid(&mut rng, r, c, d, 0.3);
        assert_eq!(best_buddies(&a, &p).unwrap(), oracle(&a, &p));
    }
}

#[test]
fn self_matching_and_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_grid(&mut rng, 6, 6, 8, 0.2);
    let pairs = best_buddies(&a, &a).unwrap();
    let fg: Vec<usize> = (0..36).filter(|&c| a.salience(c) > 0.0).collect();
    assert_eq!(pairs, fg.iter().map(|&c| (c, c)).collect::<Vec<_>>());
    let empty = DescriptorGrid::new(6, 6, 8, vec![1.0; 36 * 8], vec![0.0; 36]).unwrap();
    assert!(best_buddies(&a, &empty).unwrap().is_empty());
    let other = DescriptorGrid::new(6, 6, 4, vec![1.0; 36 * 4], vec![1.0; 36]).unwrap();
    assert!(best_buddies(&a, &other).is_err());
}

#[test]
fn three_separated_pairs_come_back_salience_sorted() {
    // Orthogonal descriptors in cells 0, 5, 10 of a 4×4 grid.
    let mut ga = vec![0.0f32; 16 * 3];
    let mut sal = vec![0.0f32; 16];
    for (i, cell) in [0usize, 5, 10].into_iter().enumerate() {
        ga[cell * 3 + i] = 1.0;
        sal[cell] = [0.2, 0.9, 0.5][i];
    }
    let g = DescriptorGrid::new(4, 4, 3, ga, sal).unwrap();
    let pairs = best_buddies(&g, &g).unwrap();
    assert_eq!(pairs, vec![(0, 0), (5, 5), (10, 10)]);
    let c = select_keypoints(&pairs, &g, &g, 3).unwrap();
    assert!(!c.padded);
    // cell 5 → (12, 12), cell 10 → (20, 20), cell 0 → (4, 4)
    assert_eq!(c.a.points, vec![[12.0, 12.0], [20.0, 20.0], [4.0, 4.0]]);
    assert_eq!(c.a.points, c.p.points);
}

#[test]
fn scarce_pairs_are_padded_with_the_best_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_grid(&mut rng, 8, 8, 8, 0.0);
    let c = select_keypoints(&[(3, 3), (9, 9)], &g, &g, DEFAULT_K).unwrap();
    assert_eq!(c.k(), 35);
    assert!(c.padded);
    let best = c.a.points[0];
    assert!(c.a.points[2..].iter().all(|p| *p == best));
}

#[test]
fn selection_has_k_distinct_pairs_when_enough_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_grid(&mut rng, 8, 8, 16, 0.0);
    let pairs: Vec<(usize, usize)> = (0..64).map(|i| (i, (i * 7) % 64)).collect();
    let c = select_keypoints(&pairs, &a, &a, 35).unwrap();
    assert!(!c.padded);
    let mut seen: Vec<_> = c.a.points.iter().zip(&c.p.points).map(|(x, y)| format!("{x:?}{y:?}")).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 35);
    let sal = c.pair_salience();
    assert!(sal.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn heatmap_peaks_and_decay() {
    let h = encode_heatmaps(&[[10.0, 20.0]], 64, 64, 0.5).unwrap();
    let d = h.data();
    let (mut max_i, mut max_v) = (0, f32::MIN);
    for (i, &v) in d.iter().enumerate() {
        if v > max_v {
            max_v = v;
            max_i = i;
        }
    }
    assert_eq!((max_i % 64, max_i / 64), (10, 20));
    assert_eq!(max_v, 1.0);
    for y in 0..64 {
        for x in 0..64 {
            let r = ((x as f64 - 10.0).powi(2) + (y as f64 - 20.0).powi(2)).sqrt();
            let v = d[y * 64 + x] as f64;
            if r > 2.0 {
                assert!(v <= (-8.0f64).exp() * 1.000001, "beyond 4σ at r={r}: {v}");
            }
            if r > 3.0 {
                assert!(v < 1e-6, "beyond 6σ at r={r}: {v}");
            }
        }
    }
    assert!(encode_heatmaps(&[[64.0, 0.0]], 64, 64, 2.0).is_err());
    assert!(encode_heatmaps(&[[1.0, 1.0]], 64, 64, 0.0).is_err());
    assert_eq!(encode_heatmaps(&vec![[32.0, 32.0]; 35], 64, 64, 2.0).unwrap().shape(), &[35, 64, 64]);
}

#[test]
fn keypoint_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_grid(&mut rng, 8, 8, 8, 0.1);
    let pairs = best_buddies(&g, &g).unwrap();
    let c = select_keypoints(&pairs, &g, &g, 15).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kp.json");
    save_keypoints(&c, &path).unwrap();
    assert_eq!(load_keypoints(&path).unwrap(), c);
    let minimal = r#"{"k":1,"image_size":[64,64],"points_a":[[4,4]],"points_p":[[12,4]],"salience":[0.5]}"#;
    let m = KeypointFile::parse(minimal).unwrap();
    assert_eq!(m.a.salience, vec![0.5]);
    assert!(KeypointFile::parse(r#"{"k":2,"image_size":[64,64],"points_a":[[4,4]],"points_p":[[12,4]],"salience":[0.5]}"#).is_err());
    assert!(KeypointFile::parse(r#"{"k":1,"image_size":[64,64],"points_a":[[70,4]],"points_p":[[12,4]],"salience":[0.5]}"#).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn buddies_are_symmetric_partial_matchings(seed in any::<u64>(), r in 1usize..7, c in 1usize..7, d in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_grid(&mut rng, r, c, d, 0.25);
        let p = random_grid(&mut rng, r, c, d, 0.25);
        let ab = best_buddies(&a, &p).unwrap();
        let mut ba: Vec<(usize, usize)> = best_buddies(&p, &a).unwrap().into_iter().map(|(x, y)| (y, x)).collect();
        ba.sort_unstable();
        prop_assert_eq!(&ab, &ba);
        let mut left: Vec<_> = ab.iter().map(|x| x.0).collect();
        let mut right: Vec<_> = ab.iter().map(|x| x.1).collect();
        left.dedup();
        right.sort_unstable();
        right.dedup();
        prop_assert_eq!(left.len(), ab.len());
        prop_assert_eq!(right.len(), ab.len());
    }

    #[test]
    fn selection_ignores_input_order(seed in any::<u64>(), k in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_grid(&mut rng, 6, 6, 6, 0.0);
        let p = random_grid(&mut rng, 6, 6, 6, 0.0);
        let mut pairs = Vec::new();
        for i in 0..36usize {
            if rng.random_bool(0.6) {
                pairs.push((i, rng.random_range(0..36usize)));
            }
        }
        prop_assume!(!pairs.is_empty());
        let first = select_keypoints(&pairs, &a, &p, k).unwrap();
        pairs.reverse();
        let second = select_keypoints(&pairs, &a, &p, k).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn heatmap_argmax_is_rounded_point(x in 0.0f64..63.99, y in 0.0f64..47.99, sigma in 0.5f64..6.0) {
        let h = encode_heatmaps(&[[x, y]], 48, 64, sigma).unwrap();
        let d = h.data();
        let best = (0..d.len()).max_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap().then(j.cmp(&i))).unwrap();
        let (bx, by) = ((best % 64) as f64, (best / 64) as f64);
        // nearest pixel, clamped to the image
        prop_assert!((bx - x.round().min(63.0)).abs() <= 1.0 && (by - y.round().min(47.0)).abs() <= 1.0);
        prop_assert!((bx - x).abs() <= 0.5 + 1e-6 || x > 63.0);
        prop_assert!((by - y).abs() <= 0.5 + 1e-6 || y > 47.0);
        prop_assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
