use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repose_core::correspondence::{Correspondences, KeypointSet};
use repose_core::warp::{
    build_warp_input, convex_upsample, convex_weights, drop_pose_image, fit_tps, load_flow, save_flow, tps_flow, tps_warp_image, warp_image,
    warp_input_for, FlowNet, LEVELS, WARP_PREFIX,
};
use repose_tensor::{ParamStore, Tape, Tensor};

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::rand_uniform(&[c, h, w], 0.0, 1.0, rng)
}

fn constant_flow(h: usize, w: usize, dx: f32, dy: f32) -> Tensor<f32> {
    let mut data = vec![dx; h * w];
    data.extend(std::iter::repeat_n(dy, h * w));
    Tensor::from_vec(&[2, h, w], data).unwrap()
}

#[test]
fn zero_flow_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let img = random_image(&mut rng, 3, h, w);
        let out = warp_image(&img, &Tensor::zeros(&[2, h, w])).unwrap();
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn integer_flows_match_index_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(8..33), rng.random_range(8..33));
        let (dx, dy) = (rng.random_range(-5i32..=5), rng.random_range(-5i32..=5));
        let img = random_image(&mut rng, 3, h, w);
        let out = warp_image(&img, &constant_flow(h, w, dx as f32, dy as f32)).unwrap();
        for c in 0..3 {
            for y in 0..h as i32 {
                for x in 0..w as i32 {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx < 0 || sy < 0 || sx >= w as i32 || sy >= h as i32 {
                        continue;
                    }
                    assert_eq!(
                        out.at3(c, y as usize, x as usize),
                        img.at3(c, sy as usize, sx as usize),
                        "shift ({dx}, {dy}) at ({x}, {y})"
                    );
                }
            }
        }
    }
}

#[test]
fn leftward_flow_shifts_the_image_right() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 3, 16, 16);
    let out = warp_image(&img, &constant_flow(16, 16, -3.0, 0.0)).unwrap();
    for y in 0..16 {
        for x in 3..16 {
            assert_eq!(out.at3(1, y, x), img.at3(1, y, x - 3));
        }
    }
}

#[test]
fn flows_pointing_outside_clamp_to_the_border() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_image(&mut rng, 3, 12, 9);
    let out = warp_image(&img, &constant_flow(12, 9, 500.0, 500.0)).unwrap();
    for c in 0..3 {
        let corner = img.at3(c, 11, 8);
        assert!((0..12 * 9).all(|i| out.data()[c * 108 + i] == corner));
    }
    let out = warp_image(&img, &constant_flow(12, 9, -500.0, 0.0)).unwrap();
    for y in 0..12 {
        for x in 0..9 {
            assert_eq!(out.at3(0, y, x), img.at3(0, y, 0));
        }
    }
    assert!(warp_image(&img, &Tensor::zeros(&[2, 12, 8])).is_err());
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn convex_upsampling_weights_bounds_and_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = 2usize;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let flow = Tensor::<f32>::randn(&[2, h, w], 4.0, &mut rng);
        let logits = Tensor::<f32>::randn(&[9 * f * f, h, w], 3.0, &mut rng);
        let up = convex_upsample(&flow, &logits, f).unwrap();
        assert_eq!(up.shape(), &[2, h * f, w * f]);
        for y in 0..h {
            for x in 0..w {
                let nbrs: Vec<(usize, usize)> = (0..9)
                    .map(|j| {
                        let ny = (y as i64 + j / 3 - 1).clamp(0, h as i64 - 1) as usize;
                        let nx = (x as i64 + j % 3 - 1).clamp(0, w as i64 - 1) as usize;
                        (ny, nx)
                    })
                    .collect();
                for sy in 0..f {
                    for sx in 0..f {
                        let wts = convex_weights(&logits, f, y, x, sy, sx).unwrap();
                        assert!(wts.iter().all(|&v| v >= 0.0));
                        assert!((wts.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
                        let raw: Vec<f64> = (0..9).map(|j| logits.at3(j * f * f + sy * f + sx, y, x) as f64).collect();
                        for (a, b) in wts.iter().zip(softmax(&raw)) {
                            assert!((*a as f64 - b).abs() < 1e-6);
                        }
                        for c in 0..2 {
                            let vals: Vec<f64> = nbrs.iter().map(|&(ny, nx)| flow.at3(c, ny, nx) as f64).collect();
                            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min) * f as f64;
                            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * f as f64;
                            let v = up.at3(c, y * f + sy, x * f + sx) as f64;
                            let tol = 1e-5 * (1.0 + hi.abs().max(lo.abs()));
                            assert!(v >= lo - tol && v <= hi + tol, "{v} outside [{lo}, {hi}]");
                        }
                    }
                }
            }
        }
        let (cx, cy) = (rng.random_range(-5.0f32..5.0), rng.random_range(-5.0f32..5.0));
        let up = convex_upsample(&constant_flow(h, w, cx, cy), &logits, f).unwrap();
        let plane = h * w * f * f;
        assert!(up.data()[..plane].iter().all(|v| (v - 2.0 * cx).abs() <= 1e-5 * (1.0 + cx.abs())));
        assert!(up.data()[plane..].iter().all(|v| (v - 2.0 * cy).abs() <= 1e-5 * (1.0 + cy.abs())));
    }
}

#[test]
fn centre_one_hot_logits_give_nearest_neighbour() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let flow = Tensor::<f32>::randn(&[2, 5, 6], 2.0, &mut rng);
    let logits = Tensor::from_fn(&[36, 5, 6], |i| if i[0] / 4 == 4 { 60.0 } else { 0.0 });
    let up = convex_upsample(&flow, &logits, 2).unwrap();
    for c in 0..2 {
        for y in 0..10 {
            for x in 0..12 {
                assert!((up.at3(c, y, x) - 2.0 * flow.at3(c, y / 2, x / 2)).abs() < 1e-5);
            }
        }
    }
    assert!(convex_upsample(&flow, &Tensor::zeros(&[35, 5, 6]), 2).is_err());
}

fn generic_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.random_range(0.0..63.0), rng.random_range(0.0..63.0)]).collect()
}

#[test]
fn tps_interpolates_control_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = rng.random_range(3..=35);
        let dst = generic_points(&mut rng, n);
        let src: Vec<[f64; 2]> = dst
            .iter()
            .map(|p| [p[0] + rng.random_range(-6.0..6.0), p[1] + rng.random_range(-6.0..6.0)])
            .collect();
        let t = fit_tps(&dst, &src, 0.0).unwrap();
        assert!(!t.regularized);
        assert!(t.max_residual() <= 1e-4, "residual {}", t.max_residual());
    }
}

#[test]
fn tps_reproduces_translations_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let dst = generic_points(&mut rng, 35);
        let t = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
        let src: Vec<[f64; 2]> = dst.iter().map(|p| [p[0] + t[0], p[1] + t[1]]).collect();
        let flow = tps_flow(&fit_tps(&dst, &src, 0.0).unwrap(), 64, 64);
        let plane = 64 * 64;
        assert!(flow.data()[..plane].iter().all(|&v| (v as f64 - t[0]).abs() <= 1e-5));
        assert!(flow.data()[plane..].iter().all(|&v| (v as f64 - t[1]).abs() <= 1e-5));
        let id = tps_flow(&fit_tps(&dst, &dst, 0.0).unwrap(), 64, 64);
        assert!(id.max_abs() <= 1e-5);
    }
}

#[test]
fn tps_baseline_warps_points_onto_targets() {
    // a single bright pixel at P_a should land at P_p under a translation
    let mut img = Tensor::<f32>::zeros(&[3, 32, 32]);
    for c in 0..3 {
        img.data_mut()[c * 1024 + 10 * 32 + 12] = 1.0;
    }
    let pa = vec![[12.0, 10.0], [20.0, 4.0], [5.0, 25.0], [28.0, 28.0]];
    let pp: Vec<[f64; 2]> = pa.iter().map(|p| [p[0] + 3.0, p[1] + 2.0]).collect();
    let out = tps_warp_image(&img, &pa, &pp).unwrap();
    assert!((out.at3(0, 12, 15) - 1.0).abs() < 1e-5);
    assert!(out.at3(0, 10, 12).abs() < 1e-5);
}

#[test]
fn degenerate_control_points_fall_back_to_ridge() {
    let line: Vec<[f64; 2]> = (0..6).map(|i| [i as f64 * 3.0, i as f64 * 2.0]).collect();
    let t = fit_tps(&line, &line, 0.0).unwrap();
    assert!(t.regularized);
    assert!(t.weights.iter().flatten().all(|v| v.is_finite()));
    let dup = vec![[1.0, 1.0], [1.0, 1.0], [5.0, 9.0], [9.0, 2.0]];
    assert!(fit_tps(&dup, &dup, 0.0).unwrap().regularized);
    assert!(fit_tps(&[], &[], 0.0).is_err());
}

#[test]
fn flow_dump_survives_the_file_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = Tensor::<f32>::randn(&[2, 8, 12], 2.0, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.flo");
    save_flow(&f, &path).unwrap();
    assert_eq!(load_flow(&path).unwrap(), f);
    std::fs::write(&path, b"nope").unwrap();
    assert!(load_flow(&path).is_err());
}

fn correspondences(pa: Vec<[f64; 2]>, pp: Vec<[f64; 2]>) -> Correspondences {
    let n = pa.len();
    Correspondences {
        a: KeypointSet {
            points: pa,
            salience: vec![1.0; n],
        },
        p: KeypointSet {
            points: pp,
            salience: vec![1.0; n],
        },
        padded: false,
        image_size: [64, 64],
    }
}

#[test]
fn warp_input_has_76_channels_at_k35() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random_image(&mut rng, 3, 64, 64);
    let p = random_image(&mut rng, 3, 64, 64);
    let c = correspondences(generic_points(&mut rng, 35), generic_points(&mut rng, 35));
    let x = warp_input_for(&a, &p, &c, 2.0).unwrap();
    assert_eq!(x.shape(), &[76, 64, 64]);
    assert_eq!(x.narrow_channels(0, 3).unwrap(), a);
    assert_eq!(x.narrow_channels(38, 3).unwrap(), p);
    let zeros = vec![[0.0, 0.0]; 35];
    let z = build_warp_input(&a, &zeros, &p, &zeros, 2.0).unwrap();
    for ch in (3..38).chain(41..76) {
        assert_eq!(z.at3(ch, 0, 0), 1.0);
    }
    let mut d = x.clone();
    drop_pose_image(&mut d, 35).unwrap();
    assert!(d.narrow_channels(38, 3).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(d.narrow_channels(0, 38).unwrap(), x.narrow_channels(0, 38).unwrap());
    assert_eq!(d.narrow_channels(41, 35).unwrap(), x.narrow_channels(41, 35).unwrap());
    assert!(drop_pose_image(&mut d, 34).is_err());
}

#[test]
fn flow_net_pyramid_doubles_for_any_size() {
    let net = FlowNet::new(3, 4);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    // break the zero init so the test sees real values
    for (name, t) in store.clone().iter() {
        if name.contains("flow") {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            *store.get_mut(name).unwrap() = Tensor::randn(t.shape(), 0.05, &mut rng);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (h, w) in [(16, 16), (24, 40), (64, 32)] {
        let input = random_image(&mut rng, 12, h, w);
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape, WARP_PREFIX, false);
        let x = tape.constant(input);
        let pyr = net.forward(&mut tape, &p, x).unwrap();
        assert_eq!(pyr.levels.len(), LEVELS);
        for (l, &v) in pyr.levels.iter().enumerate() {
            let s = 1 << (LEVELS - 1 - l);
            assert_eq!(tape.shape(v), &[2, h / s, w / s]);
            assert!(tape.value(v).all_finite());
        }
        for &u in &pyr.upsampled {
            assert_eq!(tape.shape(u), &[2, h, w]);
            assert!(tape.value(u).max_abs() > 0.0);
        }
    }
    let mut tape = Tape::<f32>::new();
    let p = store.bind(&mut tape, WARP_PREFIX, false);
    let x = tape.constant(Tensor::zeros(&[12, 20, 20]));
    assert!(net.forward(&mut tape, &p, x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuting_keypoints_permutes_both_heatmap_halves(seed in any::<u64>(), k in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, 3, 16, 16);
        let p = random_image(&mut rng, 3, 16, 16);
        let pts = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
            (0..k).map(|_| [rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)]).collect()
        };
        let c = correspondences(pts(&mut rng), pts(&mut rng));
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let x = warp_input_for(&a, &p, &c, 1.5).unwrap();
        let y = warp_input_for(&a, &p, &c.permuted(&perm).unwrap(), 1.5).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            prop_assert_eq!(y.narrow_channels(3 + i, 1).unwrap(), x.narrow_channels(3 + src, 1).unwrap());
            prop_assert_eq!(y.narrow_channels(6 + k + i, 1).unwrap(), x.narrow_channels(6 + k + src, 1).unwrap());
        }
    }

    #[test]
    fn warped_values_stay_within_image_range(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 3, 10, 10);
        let flow = Tensor::<f32>::randn(&[2, 10, 10], scale, &mut rng);
        let out = warp_image(&img, &flow).unwrap();
        let lo = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }
}
