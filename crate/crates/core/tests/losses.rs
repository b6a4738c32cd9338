use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repose_core::losses::{
    flow_supervision, gen_loss, l1, lsgan_d, lsgan_g, perceptual, style, total_loss, total_variation, warp_loss, FeatureExtractor, LossWeights,
    WarpLevel,
};
use repose_tensor::{Tape, Tensor, Var};

fn fx() -> FeatureExtractor {
    FeatureExtractor::standard(FeatureExtractor::DEFAULT_SEED)
}

fn img(seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn zero_weights() -> LossWeights {
    LossWeights {
        beta1: 0.0,
        beta2: 0.0,
        beta3: 0.0,
        beta4: 0.0,
        beta5: 0.0,
        alpha_l1: 0.0,
        alpha_per: 0.0,
        alpha_sty: 0.0,
        alpha_adv: 0.0,
        alpha1: 0.0,
        alpha2: 0.0,
    }
}

fn value(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t);
    t.scalar(v)
}

#[test]
fn identity_cases_are_exactly_zero() {
    let x = img(1);
    let fx = fx();
    let flow = Tensor::from_fn(&[2, 16, 16], |i| (i[0] * 7 + i[1] * 3 + i[2]) as f64 * 0.1);
    let konst = Tensor::full(&[2, 16, 16], 2.5);
    let ones = Tensor::full(&[1, 2, 2], 1.0);
    let zeros = Tensor::zeros(&[1, 2, 2]);
    let cases: Vec<(&str, f64)> = vec![
        (
            "l1",
            value(|t| {
                let (a, b) = (t.constant(x.clone()), t.constant(x.clone()));
                l1(t, a, b).unwrap()
            }),
        ),
        (
            "perceptual",
            value(|t| {
                let (a, b) = (t.constant(x.clone()), t.constant(x.clone()));
                perceptual(t, &fx, a, b).unwrap()
            }),
        ),
        (
            "style",
            value(|t| {
                let (a, b) = (t.constant(x.clone()), t.constant(x.clone()));
                style(t, &fx, a, b).unwrap()
            }),
        ),
        (
            "tv",
            value(|t| {
                let f = t.constant(konst.clone());
                total_variation(t, f).unwrap()
            }),
        ),
        (
            "flow",
            value(|t| {
                let (a, b) = (t.constant(flow.clone()), t.constant(flow.clone()));
                flow_supervision(t, a, b).unwrap()
            }),
        ),
        (
            "lsgan_g",
            value(|t| {
                let f = t.constant(ones.clone());
                lsgan_g(t, f).unwrap()
            }),
        ),
        (
            "lsgan_d",
            value(|t| {
                let (r, f) = (t.constant(ones.clone()), t.constant(zeros.clone()));
                lsgan_d(t, r, f).unwrap()
            }),
        ),
    ];
    for (name, v) in cases {
        assert_eq!(v, 0.0, "{name}");
    }
}

#[test]
fn l1_matches_elementwise_oracle() {
    let (a, b) = (img(2), img(3));
    let oracle = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    let v = value(|t| {
        let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
        l1(t, x, y).unwrap()
    });
    assert!((v - oracle).abs() < 1e-12);
    let v = value(|t| {
        let x = t.constant(Tensor::full(&[3, 4, 4], 0.25));
        let y = t.constant(Tensor::full(&[3, 4, 4], 0.75));
        l1(t, x, y).unwrap()
    });
    assert_eq!(v, 0.5);
}

#[test]
fn perceptual_grows_along_a_blend() {
    let fx = fx();
    for seed in 0..5 {
        let (x, y) = (img(10 + seed), img(20 + seed));
        let mut last = -1.0;
        for step in 0..=10 {
            let s = step as f64 / 10.0;
            let blend = x.zip_map(&y, |a, b| (1.0 - s) * a + s * b).unwrap();
            let v = value(|t| {
                let (a, b) = (t.constant(x.clone()), t.constant(blend));
                perceptual(t, &fx, a, b).unwrap()
            });
            assert!(v > last || (step == 0 && v == 0.0), "seed {seed} step {step}: {v} after {last}");
            last = v;
        }
    }
}

fn gram_oracle(f: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = f.chw().unwrap();
    let n = h * w;
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let s: f64 = (0..n).map(|p| f.data()[i * n + p] * f.data()[j * n + p]).sum();
            g[i * c + j] = s / (c * n) as f64;
        }
    }
    g
}

#[test]
fn style_matches_explicit_gram_oracle() {
    let fx = fx();
    let (a, b) = (img(30), img(31));
    let fa = fx.eval(&a.cast()).unwrap();
    let fb = fx.eval(&b.cast()).unwrap();
    assert_eq!(fa.len(), 3);
    let mut oracle = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (gx, gy) = (gram_oracle(&x.cast()), gram_oracle(&y.cast()));
        oracle += gx.iter().zip(&gy).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / gx.len() as f64;
    }
    let v = value(|t| {
        let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
        style(t, &fx, x, y).unwrap()
    });
    // the oracle sees f32 features
    assert!((v - oracle).abs() <= 1e-5 * oracle.max(1e-12), "{v} vs {oracle}");
}

#[test]
fn gram_ignores_pixel_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let f = Tensor::<f64>::randn(&[4, 5, 5], 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..25).collect();
    perm.reverse();
    perm.swap(3, 17);
    let g = Tensor::from_fn(&[4, 5, 5], |i| f.data()[i[0] * 25 + perm[i[1] * 5 + i[2]]]);
    let mut t = Tape::<f64>::new();
    let (a, b) = (t.constant(f), t.constant(g));
    let (ga, gb) = (t.gram(a), t.gram(b));
    for (x, y) in t.value(ga).data().iter().zip(t.value(gb).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn total_variation_of_ramps() {
    for s in [0.5, 1.0, 3.0] {
        let ramp = Tensor::from_fn(&[2, 8, 9], |i| s * i[2] as f64);
        let v = value(|t| {
            let f = t.constant(ramp.clone());
            total_variation(t, f).unwrap()
        });
        assert!((v - s).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let f = Tensor::<f64>::randn(&[2, 6, 6], 1.0, &mut rng);
    let once = value(|t| {
        let v = t.constant(f.clone());
        total_variation(t, v).unwrap()
    });
    let twice = value(|t| {
        let v = t.constant(f.map(|x| 2.0 * x));
        total_variation(t, v).unwrap()
    });
    assert!((twice - 2.0 * once).abs() < 1e-12);
    let bad = value(|t| {
        let v = t.constant(Tensor::zeros(&[2, 1, 6]));
        match total_variation(t, v) {
            Ok(x) => x,
            Err(_) => t.constant(Tensor::scalar(-1.0)),
        }
    });
    assert_eq!(bad, -1.0);
}

#[test]
fn flow_supervision_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let f = Tensor::<f64>::randn(&[2, 7, 5], 2.0, &mut rng);
    let shifted = Tensor::from_fn(&[2, 7, 5], |i| f.at3(i[0], i[1], i[2]) + if i[0] == 0 { 1.0 } else { 0.0 });
    let v = value(|t| {
        let (a, b) = (t.constant(shifted.clone()), t.constant(f.clone()));
        flow_supervision(t, a, b).unwrap()
    });
    assert!((v - 1.0).abs() < 1e-12);
    let g = Tensor::<f64>::randn(&[2, 7, 5], 2.0, &mut rng);
    let mut oracle = 0.0;
    for y in 0..7 {
        for x in 0..5 {
            oracle += (f.at3(0, y, x) - g.at3(0, y, x)).powi(2) + (f.at3(1, y, x) - g.at3(1, y, x)).powi(2);
        }
    }
    oracle /= 35.0;
    let v = value(|t| {
        let (a, b) = (t.constant(f.clone()), t.constant(g.clone()));
        flow_supervision(t, a, b).unwrap()
    });
    assert!((v - oracle).abs() < 1e-12);
}

#[test]
fn lsgan_generator_gradient_is_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let fake = Tensor::<f64>::randn(&[1, 3, 4], 1.0, &mut rng);
    let mut t = Tape::new();
    let f = t.param(fake.clone());
    let l = lsgan_g(&mut t, f).unwrap();
    let g = t.backward(l);
    let n = fake.len() as f64;
    for (gi, fi) in g.get(f).unwrap().data().iter().zip(fake.data()) {
        assert!((gi - 2.0 * (fi - 1.0) / n).abs() < 1e-12);
    }
}

struct WarpCase {
    img: Tensor<f64>,
    gt: Tensor<f64>,
    tps: Tensor<f64>,
    flows: Vec<Tensor<f64>>,
}

fn warp_case(seed: u64) -> WarpCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WarpCase {
        img: Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng),
        gt: Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng),
        tps: Tensor::randn(&[2, 16, 16], 1.0, &mut rng),
        flows: (0..2).map(|_| Tensor::randn(&[2, 16, 16], 1.5, &mut rng)).collect(),
    }
}

fn eval_warp_loss(c: &WarpCase, w: &LossWeights, decay: f64) -> (f64, Vec<(String, f64)>) {
    let fx = fx();
    let mut t = Tape::new();
    let i = t.constant(c.img.clone());
    let g = t.constant(c.gt.clone());
    let tps = t.constant(c.tps.clone());
    let mut levels = Vec::new();
    for (l, f) in c.flows.iter().enumerate() {
        let f = t.constant(f.clone());
        let mut warped = t.warp(i, f).unwrap();
        let mut target = g;
        if l == 0 {
            warped = t.avgpool2x(warped).unwrap();
            target = t.avgpool2x(target).unwrap();
        }
        levels.push(WarpLevel { warped, target, flow: f });
    }
    let comp = warp_loss(&mut t, &fx, &levels, tps, w, decay).unwrap();
    (t.scalar(comp.total), comp.values(&t))
}

#[test]
fn warp_loss_is_the_hand_summed_composition() {
    let c = warp_case(70);
    let fx = fx();
    let mut oracle = [0.0f64; 5];
    for (l, f) in c.flows.iter().enumerate() {
        let mut t = Tape::new();
        let i = t.constant(c.img.clone());
        let g = t.constant(c.gt.clone());
        let fv = t.constant(f.clone());
        let mut warped = t.warp(i, fv).unwrap();
        let mut target = g;
        if l == 0 {
            warped = t.avgpool2x(warped).unwrap();
            target = t.avgpool2x(target).unwrap();
        }
        let tp = t.constant(c.tps.clone());
        let parts = [
            l1(&mut t, warped, target).unwrap(),
            perceptual(&mut t, &fx, warped, target).unwrap(),
            style(&mut t, &fx, warped, target).unwrap(),
            flow_supervision(&mut t, fv, tp).unwrap(),
            total_variation(&mut t, fv).unwrap(),
        ];
        for (o, p) in oracle.iter_mut().zip(parts) {
            *o += t.scalar(p);
        }
    }
    let w = LossWeights::default();
    let expect = w.beta1 * oracle[0] + w.beta2 * oracle[1] + w.beta3 * oracle[2] + w.beta4 * 0.25 * oracle[3] + w.beta5 * oracle[4];
    let (total, terms) = eval_warp_loss(&c, &w, 0.25);
    assert!((total - expect).abs() <= 1e-9 * expect.abs());
    for (i, (_, v)) in terms.iter().enumerate() {
        assert!((v - oracle[i]).abs() <= 1e-12 * oracle[i].abs().max(1.0));
    }
    assert_eq!(eval_warp_loss(&c, &zero_weights(), 1.0).0, 0.0);
}

#[test]
fn warp_loss_vanishes_when_everything_agrees() {
    let fx = fx();
    let gt = img(80);
    let tps_flow = Tensor::full(&[2, 16, 16], 0.0);
    let mut t = Tape::new();
    let g = t.constant(gt.clone());
    let f = t.constant(tps_flow.clone());
    let warped = t.warp(g, f).unwrap();
    let tp = t.constant(tps_flow);
    let levels = [WarpLevel { warped, target: g, flow: f }, WarpLevel { warped, target: g, flow: f }];
    let comp = warp_loss(&mut t, &fx, &levels, tp, &LossWeights::default(), 1.0).unwrap();
    assert_eq!(t.scalar(comp.total), 0.0);
    assert!(warp_loss(&mut t, &fx, &[], tp, &LossWeights::default(), 1.0).is_err());
}

#[test]
fn gen_loss_components_and_zero_case() {
    let fx = fx();
    let (out, gt) = (img(90), img(91));
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    let scores = Tensor::<f64>::randn(&[1, 1, 1], 1.0, &mut rng);
    let w = LossWeights::default();
    let mut t = Tape::new();
    let (o, g, s) = (t.constant(out.clone()), t.constant(gt.clone()), t.constant(scores));
    let comp = gen_loss(&mut t, &fx, o, g, Some(s), &w).unwrap();
    let vals = comp.values(&t);
    let names: Vec<&str> = vals.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["gen_l1", "gen_per", "gen_sty", "gen_adv"]);
    let expect = w.alpha_l1 * vals[0].1 + w.alpha_per * vals[1].1 + w.alpha_sty * vals[2].1 + w.alpha_adv * vals[3].1;
    assert!((t.scalar(comp.total) - expect).abs() <= 1e-12 * expect);
    let recon_only = LossWeights { alpha_adv: 0.0, ..w };
    let with = gen_loss(&mut t, &fx, o, g, Some(s), &recon_only).unwrap();
    let without = gen_loss(&mut t, &fx, o, g, None, &w).unwrap();
    assert_eq!(t.scalar(with.total), t.scalar(without.total));
    let one = t.constant(Tensor::full(&[1, 1, 1], 1.0));
    let zero = gen_loss(&mut t, &fx, g, g, Some(one), &w).unwrap();
    assert_eq!(t.scalar(zero.total), 0.0);
}

#[test]
fn total_loss_examples() {
    let v = |a: f64, b: f64, a1: f64, a2: f64| {
        value(|t| {
            let (x, y) = (t.constant(Tensor::scalar(a)), t.constant(Tensor::scalar(b)));
            total_loss(t, x, y, a1, a2).unwrap()
        })
    };
    assert_eq!(v(1.0, 1.0, 0.5, 0.5), 1.0);
    assert_eq!(v(3.0, 9.0, 2.0, 0.0), 6.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>()) {
        let fx = fx();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let f = Tensor::<f64>::randn(&[2, 8, 8], 2.0, &mut rng);
        let mut t = Tape::new();
        let (x, y, fv) = (t.constant(a), t.constant(b), t.constant(f));
        let all = [
            l1(&mut t, x, y).unwrap(),
            perceptual(&mut t, &fx, x, y).unwrap(),
            style(&mut t, &fx, x, y).unwrap(),
            total_variation(&mut t, fv).unwrap(),
            lsgan_d(&mut t, x, y).unwrap(),
            lsgan_g(&mut t, x).unwrap(),
        ];
        for v in all {
            prop_assert!(t.scalar(v) >= 0.0);
        }
    }

    #[test]
    fn warp_loss_is_linear_in_its_weights(seed in 0u64..1000, s in 0.1f64..3.0) {
        let c = warp_case(seed);
        let w1 = LossWeights { beta1: 1.0, beta2: 0.0, beta3: 2.0, beta4: 0.0, beta5: 0.5, ..zero_weights() };
        let w2 = LossWeights { beta1: 0.0, beta2: 0.3, beta3: 0.0, beta4: 1.5, beta5: 0.0, ..zero_weights() };
        let sum = LossWeights {
            beta1: s * w1.beta1 + w2.beta1,
            beta2: s * w1.beta2 + w2.beta2,
            beta3: s * w1.beta3 + w2.beta3,
            beta4: s * w1.beta4 + w2.beta4,
            beta5: s * w1.beta5 + w2.beta5,
            ..zero_weights()
        };
        let (a, _) = eval_warp_loss(&c, &w1, 0.5);
        let (b, _) = eval_warp_loss(&c, &w2, 0.5);
        let (ab, _) = eval_warp_loss(&c, &sum, 0.5);
        prop_assert!((ab - (s * a + b)).abs() <= 1e-9 * ab.abs().max(1.0));
    }
}
