mod common;

use common::Feat;
use ifaseg_core::encoder::{gradient_of, Encoder, EncoderConfig};
use ifaseg_core::graph::Graph;
use ifaseg_core::ifa::{ifa_step, ifa_step_on, test_predict, IfaConfig, LossWeights};
use ifaseg_core::image::{BinaryMask, FeatureMap, Image};
use ifaseg_core::metrics::IouAccumulator;
use ifaseg_core::protonet::{bce_loss, bfp_forward_on, map, predict_mask, sim_map, ssp_prototype, PrototypePair, SoftMask, SspConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feat_strategy(max_c: usize, max_hw: usize) -> impl Strategy<Value = Feat> {
    (1..=max_c, 1..=max_hw, 1..=max_hw).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-2.0f64..2.0, c * h * w).prop_map(move |v| Feat { c, h, w, v })
    })
}

fn feat_and_mask(max_c: usize, max_hw: usize) -> impl Strategy<Value = (Feat, Vec<u8>)> {
    feat_strategy(max_c, max_hw).prop_flat_map(|f| {
        let n = f.n();
        (Just(f), prop::collection::vec(0u8..=1, n))
    })
}

fn vec_strategy(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, c)
}

fn to_map(f: &Feat) -> FeatureMap<f64> {
    FeatureMap::new(f.c, f.h, f.w, f.v.clone()).unwrap()
}

fn disc(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
    let mut m = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            m.set(y, x, dy * dy + dx * dx <= r * r);
        }
    }
    m
}

/// Features whose object pixels sit near `a` and background near `b`.
fn noisy_region(rng: &mut ChaCha8Rng, m: &BinaryMask, a: &[f64], b: &[f64], noise: f64) -> FeatureMap<f64> {
    let (c, n) = (a.len(), m.height() * m.width());
    let mut v = vec![0.0; c * n];
    for p in 0..n {
        let base = if m.data()[p] == 1 { a } else { b };
        for ch in 0..c {
            v[ch * n + p] = base[ch] + noise * rng.random_range(-1.0..1.0);
        }
    }
    FeatureMap::new(c, m.height(), m.width(), v).unwrap()
}

/// Random 12×12 episode with `k` distinct supports.
fn random_episode(seed: u64, k: usize) -> (Vec<FeatureMap<f64>>, Vec<BinaryMask>, FeatureMap<f64>, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let a: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.0)).collect();
    let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..0.5)).collect();
    let noise = rng.random_range(0.05..0.6);
    let mut fs = Vec::new();
    let mut ms = Vec::new();
    for _ in 0..k {
        let m = disc(12, 12, rng.random_range(4.0..8.0), rng.random_range(4.0..8.0), rng.random_range(2.5..4.5));
        fs.push(noisy_region(&mut rng, &m, &a, &b, noise));
        ms.push(m);
    }
    let mq = disc(12, 12, rng.random_range(4.0..8.0), rng.random_range(4.0..8.0), rng.random_range(2.5..4.5));
    let fq = noisy_region(&mut rng, &mq, &a, &b, noise);
    (fs, ms, fq, mq)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn map_equals_per_pixel_loop((f, mask) in feat_and_mask(8, 16)) {
        let m = BinaryMask::new(f.h, f.w, mask.clone()).unwrap();
        match common::map(&f, &mask) {
            None => prop_assert!(map(&to_map(&f), &m).is_err()),
            Some(want) => {
                let got = map(&to_map(&f), &m).unwrap();
                for (g, e) in got.iter().zip(&want) {
                    prop_assert!((g - e).abs() < 1e-6, "{} vs {}", g, e);
                }
            }
        }
    }

    #[test]
    fn mask_head_matches_scalar_oracle(
        (f, fg, bg) in feat_strategy(8, 16).prop_flat_map(|f| { let c = f.c; (Just(f), vec_strategy(c), vec_strategy(c)) }),
        alpha in 0.5f64..20.0,
    ) {
        let proto = PrototypePair::new(fg.clone(), bg.clone());
        let sims = sim_map(&to_map(&f), &proto).unwrap();
        let pred = predict_mask(&to_map(&f), &proto, alpha).unwrap();
        for p in 0..f.n() {
            let x = f.col(p);
            let (sf, sb) = (common::cos(&x, &fg), common::cos(&x, &bg));
            prop_assert!((sims.fg[p] - sf).abs() < 1e-6);
            prop_assert!((sims.bg[p] - sb).abs() < 1e-6);
            prop_assert!((pred.fg()[p] - common::softmax2(alpha * sf, alpha * sb)).abs() < 1e-6);
            prop_assert!((pred.fg()[p] + pred.bg()[p] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn similarity_is_scale_invariant(
        (f, fg, bg) in feat_strategy(8, 8).prop_flat_map(|f| { let c = f.c; (Just(f), vec_strategy(c), vec_strategy(c)) }),
        scale in 1e-3f64..1e3,
    ) {
        let proto = PrototypePair::new(fg, bg);
        let scaled = Feat { c: f.c, h: f.h, w: f.w, v: f.v.iter().map(|x| x * scale).collect() };
        let a = sim_map(&to_map(&f), &proto).unwrap();
        let b = sim_map(&to_map(&scaled), &proto).unwrap();
        for p in 0..a.fg.len() {
            prop_assert!((a.fg[p] - b.fg[p]).abs() < 1e-5);
            prop_assert!((a.bg[p] - b.bg[p]).abs() < 1e-5);
        }
    }

    #[test]
    fn ssp_without_blend_is_identity(
        (f, fg, bg) in feat_strategy(6, 10).prop_flat_map(|f| { let c = f.c; (Just(f), vec_strategy(c), vec_strategy(c)) }),
        passes in 0usize..3,
        adaptive in any::<bool>(),
    ) {
        let cfg = SspConfig { blend: 0.0, refinement_passes: passes, adaptive_bg: adaptive, ..SspConfig::default() };
        let out = ssp_prototype(&to_map(&f), &PrototypePair::new(fg.clone(), bg.clone()), &cfg).unwrap();
        prop_assert_eq!(&out.fg, &fg);
        prop_assert_eq!(&out.bg, &bg);
    }

    #[test]
    fn bce_is_non_negative(probs in prop::collection::vec(0.0f64..=1.0, 1..64), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target: Vec<u8> = probs.iter().map(|_| rng.random_range(0..=1)).collect();
        let n = probs.len();
        let pred = SoftMask::from_fg(1, n, probs).unwrap();
        let l = bce_loss(&pred, &BinaryMask::new(1, n, target).unwrap()).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn unblended_round_trip_reproduces_support_prediction((f, mask) in feat_and_mask(6, 10), adaptive in any::<bool>()) {
        prop_assume!(mask.contains(&1));
        let m = BinaryMask::new(f.h, f.w, mask).unwrap();
        let cfg = SspConfig { blend: 0.0, adaptive_bg: adaptive, ..SspConfig::default() };
        let mut g = Graph::<f64>::new();
        let fv = g.constant(f.v.clone(), &[f.c, f.h, f.w]).unwrap();
        let out = bfp_forward_on(&mut g, fv, &m, fv, &cfg).unwrap();
        let (a, b) = (g.value(out.support_pred), g.value(out.support_back_pred));
        for (x, y) in a.iter().zip(b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn term_count_law(seed in any::<u64>(), rounds in 1usize..=8, k in 1usize..=3) {
        let (fs, ms, fq, mq) = random_episode(seed, k);
        let cfg = IfaConfig { iterations: rounds, ..IfaConfig::default() };
        let (total, trace) = ifa_step(&fs, &ms, &fq, &mq, &cfg).unwrap();
        prop_assert_eq!(trace.iterations.len(), rounds);
        let terms = trace.loss_terms();
        prop_assert_eq!(terms.len(), 3 + 2 * (rounds - 1));
        prop_assert!(terms.iter().all(|t| t.value.is_finite() && t.value >= 0.0));
        prop_assert!((trace.reconstruct_total() - total).abs() < 1e-6);
    }

    #[test]
    fn duplicated_support_changes_nothing(seed in any::<u64>(), copies in 2usize..=5) {
        let (fs, ms, fq, mq) = random_episode(seed, 1);
        let cfg = IfaConfig::default();
        let (one, _) = ifa_step(&fs, &ms, &fq, &mq, &cfg).unwrap();
        let fk = vec![fs[0].clone(); copies];
        let mk = vec![ms[0].clone(); copies];
        let (many, _) = ifa_step(&fk, &mk, &fq, &mq, &cfg).unwrap();
        prop_assert!((one - many).abs() <= 1e-6);
        let p1 = test_predict(&fs, &ms, &fq, &cfg.ssp).unwrap();
        let pk = test_predict(&fk, &mk, &fq, &cfg.ssp).unwrap();
        for (a, b) in p1.fg().iter().zip(pk.fg()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn unblended_rounds_repeat_the_first(seed in any::<u64>(), rounds in 2usize..=5, k in 1usize..=2) {
        let (fs, ms, fq, mq) = random_episode(seed, k);
        let cfg = IfaConfig {
            iterations: rounds,
            ssp: SspConfig { blend: 0.0, ..SspConfig::default() },
            ..IfaConfig::default()
        };
        let (_, trace) = ifa_step(&fs, &ms, &fq, &mq, &cfg).unwrap();
        let first = &trace.iterations[0];
        for it in &trace.iterations[1..] {
            prop_assert!((it.query_loss - first.query_loss).abs() < 1e-6);
            prop_assert!((it.support_loss - first.support_loss).abs() < 1e-6);
            prop_assert_eq!(&it.query_proto.fg, &first.query_proto.fg);
            prop_assert_eq!(&it.support_proto.fg, &first.support_proto.fg);
        }
    }

    #[test]
    fn iou_is_order_invariant(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items: Vec<(u32, BinaryMask, BinaryMask)> = (0..n)
            .map(|_| {
                let mut rand_mask = || BinaryMask::new(4, 5, (0..20).map(|_| rng.random_range(0..=1)).collect()).unwrap();
                let (p, t) = (rand_mask(), rand_mask());
                (rng.random_range(0..4), p, t)
            })
            .collect();
        let report = |items: &[(u32, BinaryMask, BinaryMask)]| {
            let mut acc = IouAccumulator::new();
            for (c, p, t) in items {
                acc.add(*c, p, t).unwrap();
            }
            acc.finish("digest", "stage")
        };
        let a = report(&items);
        items.shuffle(&mut rng);
        let b = report(&items);
        prop_assert_eq!(&a, &b);
        let mean = a.per_category.values().sum::<f64>() / a.per_category.len() as f64;
        prop_assert!((a.mean_iou - mean).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a.mean_iou));
    }
}

/// Gradient of the first conv kernel for a two-round step under `weights`.
fn probe_gradient(weights: LossWeights) -> Vec<f64> {
    let cfg = EncoderConfig {
        widths: vec![4, 6],
        strides: vec![2, 1],
        ..EncoderConfig::default()
    };
    let enc = Encoder::<f64>::init(cfg, 5).unwrap();
    let paint = |m: &BinaryMask, fg: [f32; 3], bg: [f32; 3]| {
        let mut img = Image::filled(16, 16, bg);
        for y in 0..16 {
            for x in 0..16 {
                if m.get(y, x) == 1 {
                    let t = ((y * 16 + x) % 7) as f32 * 0.02;
                    img.set_pixel(y, x, [fg[0] - t, fg[1], fg[2] + t]);
                }
            }
        }
        img
    };
    let ms = disc(16, 16, 7.0, 8.0, 4.5);
    let mq = disc(16, 16, 9.0, 6.5, 5.0);
    let (is, iq) = (paint(&ms, [0.9, 0.4, 0.2], [0.3, 0.3, 0.5]), paint(&mq, [0.85, 0.45, 0.2], [0.35, 0.3, 0.45]));
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, 0).unwrap();
    let fs = enc.forward(&mut g, &bound, &is).unwrap();
    let fq = enc.forward(&mut g, &bound, &iq).unwrap();
    let ifa = IfaConfig { iterations: 2, weights, ..IfaConfig::default() };
    let (loss, _) = ifa_step_on(&mut g, &[fs], &[ms], fq, &mq, &ifa).unwrap();
    gradient_of(&g, loss, &bound).unwrap().swap_remove(0)
}

#[test]
fn every_weighted_term_reaches_the_encoder() {
    let full = probe_gradient(LossWeights::default());
    let knock_out: [fn(&mut LossWeights); 4] = [
        |w| w.support_base = 0.0,
        |w| w.query_base = 0.0,
        |w| w.support_back = 0.0,
        |w| w.iteration = 0.0,
    ];
    for (i, zero) in knock_out.iter().enumerate() {
        let mut w = LossWeights::default();
        zero(&mut w);
        let reduced = probe_gradient(w);
        let diff = full.iter().zip(&reduced).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-8, "weight {i} has no effect on the probe gradient");
    }
    let none = probe_gradient(LossWeights::zero());
    assert!(none.iter().all(|v| *v == 0.0));
}
