mod common;

use common::Feat;
use ifaseg_core::encoder::{Encoder, EncoderConfig};
use ifaseg_core::graph::Graph;
use ifaseg_core::ifa::{bfp_train_step_on, ifa_step, test_predict, IfaConfig, LossWeights};
use ifaseg_core::image::{BinaryMask, FeatureMap, Image};
use ifaseg_core::metrics::IouAccumulator;
use ifaseg_core::protonet::{bce_loss, bfp_forward_on, map, predict_mask, sim_map, ssp_prototype, PrototypePair, SoftMask, SspConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_map(f: &Feat) -> FeatureMap<f64> {
    FeatureMap::new(f.c, f.h, f.w, f.v.clone()).unwrap()
}

fn random_feat(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Feat {
    Feat {
        c,
        h,
        w,
        v: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Object pixels near `a`, background near `b`, with per-pixel noise.
fn two_region(rng: &mut ChaCha8Rng, mask: &BinaryMask, a: &[f64], b: &[f64], noise: f64) -> Feat {
    let (h, w, c) = (mask.height(), mask.width(), a.len());
    let n = h * w;
    let mut v = vec![0.0; c * n];
    for p in 0..n {
        let base = if mask.data()[p] == 1 { a } else { b };
        for ch in 0..c {
            v[ch * n + p] = base[ch] + noise * rng.random_range(-1.0..1.0);
        }
    }
    Feat { c, h, w, v }
}

fn disc_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
    let mut m = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let d = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
            m.set(y, x, d <= r * r);
        }
    }
    m
}

#[test]
fn encoder_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = EncoderConfig {
        widths: vec![4],
        strides: vec![2],
        ..EncoderConfig::default()
    };
    let enc = Encoder::<f64>::init(cfg.clone(), 2).unwrap();
    let pixels: Vec<f32> = (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = Image::new(8, 8, pixels.clone()).unwrap();
    let got = enc.encode(&img).unwrap();
    assert_eq!(got.shape(), [4, 4, 4]);

    let mut planar = vec![0.0; 3 * 64];
    for p in 0..64 {
        for c in 0..3 {
            planar[c * 64 + p] = (pixels[p * 3 + c] as f64 - cfg.input_mean) / cfg.input_std;
        }
    }
    let w = &enc.params()[0].values;
    let b = &enc.params()[1].values;
    let (want, oh, ow) = common::conv2d(&planar, 3, 8, 8, w, b, 4, 3, 2, 1);
    assert_eq!((oh, ow), (4, 4));
    for (g, e) in got.values().iter().zip(&want) {
        assert!((g - e).abs() < 1e-6, "{g} vs {e}");
    }
}

#[test]
fn map_selects_the_masked_columns() {
    // columns a, b, c, d in row-major order; mask picks a and c
    let (a, b, c, d) = ([1.0, 2.0], [10.0, -3.0], [5.0, 0.5], [7.0, 7.0]);
    let mut v = vec![0.0; 8];
    for (p, col) in [a, b, c, d].iter().enumerate() {
        v[p] = col[0];
        v[4 + p] = col[1];
    }
    let f = FeatureMap::new(2, 2, 2, v.clone()).unwrap();
    let mask = BinaryMask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
    let got = map(&f, &mask).unwrap();
    let want = common::map(&Feat { c: 2, h: 2, w: 2, v }, mask.data()).unwrap();
    assert_eq!(want, vec![3.0, 1.25]);
    for (g, e) in got.iter().zip(&want) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn similarity_and_softmax_match_scalar_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random_feat(&mut rng, 3, 2, 2);
    let fg: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bg: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let proto = PrototypePair::new(fg.clone(), bg.clone());
    let sims = sim_map(&to_map(&f), &proto).unwrap();
    let pred = predict_mask(&to_map(&f), &proto, 10.0).unwrap();
    for p in 0..4 {
        let x = f.col(p);
        let (sf, sb) = (common::cos(&x, &fg), common::cos(&x, &bg));
        assert!((sims.fg[p] - sf).abs() < 1e-6);
        assert!((sims.bg[p] - sb).abs() < 1e-6);
        assert!((pred.fg()[p] - common::softmax2(10.0 * sf, 10.0 * sb)).abs() < 1e-6);
    }
}

#[test]
fn confident_softmax_value() {
    // two-way softmax of (8, 2) is σ(6)
    let want = common::sigmoid(6.0);
    assert!((want - 0.997_527_376).abs() < 1e-9);
    let f = FeatureMap::new(2, 1, 1, vec![0.8, 0.6]).unwrap();
    // cos to e0 is 0.8; pick bg with cosine 0.2 against the pixel
    let bg = vec![0.2 * 0.8 - 0.6 * (1.0f64 - 0.04).sqrt(), 0.2 * 0.6 + 0.8 * (1.0f64 - 0.04).sqrt()];
    let proto = PrototypePair::new(vec![1.0, 0.0], bg);
    let p = predict_mask(&f, &proto, 10.0).unwrap();
    assert!((p.fg()[0] - want).abs() < 1e-9);
}

#[test]
fn ssp_on_two_regions_recovers_region_mean() {
    let a = [1.0, 0.1, 0.0];
    let b = [0.0, 0.2, 1.0];
    let mut m = BinaryMask::zeros(4, 4);
    for y in 0..4 {
        for x in 0..2 {
            m.set(y, x, true);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = two_region(&mut rng, &m, &a, &b, 0.0);
    let cfg = SspConfig {
        adaptive_bg: false,
        ..SspConfig::default()
    };
    let out = ssp_prototype(&to_map(&f), &PrototypePair::new(a.to_vec(), b.to_vec()), &cfg).unwrap();
    // enumerate: confident foreground is exactly region A
    let p = common::predict(&f, &common::Proto { fg: a.to_vec(), bg: b.to_vec(), field: None }, 10.0);
    let region: Vec<usize> = (0..16).filter(|&i| p[i] > 0.7).collect();
    assert_eq!(region, (0..16).filter(|&i| m.data()[i] == 1).collect::<Vec<_>>());
    for (o, e) in out.fg.iter().zip(&a) {
        assert!((o - e).abs() < 1e-12);
    }
    for (o, e) in out.bg.iter().zip(&b) {
        assert!((o - e).abs() < 1e-12);
    }
}

#[test]
fn ssp_matches_reference_with_adaptive_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let m = disc_mask(8, 8, 4.0, 3.5, 2.6);
    let f = two_region(&mut rng, &m, &[0.9, 0.2, 0.1, 0.4], &[0.1, 0.3, 0.9, 0.2], 0.25);
    let proto = common::Proto {
        fg: vec![0.8, 0.25, 0.2, 0.35],
        bg: vec![0.2, 0.3, 0.8, 0.25],
        field: None,
    };
    let cfg = SspConfig::default();
    let got = ssp_prototype(&to_map(&f), &PrototypePair::new(proto.fg.clone(), proto.bg.clone()), &cfg).unwrap();
    let want = common::ssp(&f, &proto, &common::Ssp::default());
    for (g, e) in got.fg.iter().zip(&want.fg).chain(got.bg.iter().zip(&want.bg)) {
        assert!((g - e).abs() < 1e-9);
    }
    let field = got.bg_field.unwrap();
    let want_field = want.field.unwrap();
    for ch in 0..4 {
        for p in 0..64 {
            assert!((field[ch * 64 + p] - want_field[p][ch]).abs() < 1e-9);
        }
    }
}

#[test]
fn bfp_covers_a_homogeneous_object() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = disc_mask(8, 8, 4.0, 4.0, 2.5);
    let f = two_region(&mut rng, &m, &[1.0, 0.0, 0.3], &[0.0, 1.0, 0.3], 0.0);
    let mut g = Graph::<f64>::new();
    let fv = g.constant(f.v.clone(), &[3, 8, 8]).unwrap();
    let out = bfp_forward_on(&mut g, fv, &m, fv, &SspConfig::default()).unwrap();
    let q = g.value(out.query_pred);
    for p in 0..64 {
        if m.data()[p] == 1 {
            assert!(q[p] >= 0.5);
        }
    }
}

#[test]
fn bce_mixed_case_matches_per_pixel_formula() {
    let probs = [0.9, 0.2, 0.65, 1e-9];
    let target = [1u8, 0, 0, 1];
    let pred = SoftMask::from_fg(2, 2, probs.to_vec()).unwrap();
    let got = bce_loss(&pred, &BinaryMask::new(2, 2, target.to_vec()).unwrap()).unwrap();
    let want = common::bce(&probs, &target);
    assert!((got - want).abs() < 1e-6);
    let by_hand = -(0.9f64.ln() + 0.8f64.ln() + 0.35f64.ln() + 1e-7f64.ln()) / 4.0;
    assert!((want - by_hand).abs() < 1e-12);
}

fn episode(seed: u64, k: usize) -> (Vec<Feat>, Vec<BinaryMask>, Feat, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = [0.9, 0.3, 0.1, 0.5, 0.2];
    let b = [0.2, 0.4, 0.9, 0.1, 0.6];
    let mut fs = Vec::new();
    let mut ms = Vec::new();
    for i in 0..k {
        let m = disc_mask(16, 16, 7.0 + i as f64, 8.5 - i as f64, 4.5);
        fs.push(two_region(&mut rng, &m, &a, &b, 0.35));
        ms.push(m);
    }
    let mq = disc_mask(16, 16, 9.0, 6.0, 5.0);
    let fq = two_region(&mut rng, &mq, &a, &b, 0.35);
    (fs, ms, fq, mq)
}

#[test]
fn bfp_train_step_matches_reference() {
    let (fs, ms, fq, mq) = episode(8, 1);
    let mut g = Graph::<f64>::new();
    let s = g.constant(fs[0].v.clone(), &[5, 16, 16]).unwrap();
    let q = g.constant(fq.v.clone(), &[5, 16, 16]).unwrap();
    let (loss, trace) = bfp_train_step_on(&mut g, &[s], &ms, q, &mq, LossWeights::default(), &SspConfig::default()).unwrap();
    let masks: Vec<Vec<u8>> = ms.iter().map(|m| m.data().to_vec()).collect();
    let (want, terms) = common::ifa(&fs, &masks, &fq, mq.data(), 1, [0.2, 1.0, 0.4, 0.1], &common::Ssp::default());
    assert!((g.scalar(loss) - want).abs() < 1e-6, "{} vs {want}", g.scalar(loss));
    let got: Vec<f64> = trace.loss_terms().iter().map(|t| t.value).collect();
    for (a, b) in got.iter().zip(&terms) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn ifa_step_matches_reference_for_two_shots_three_rounds() {
    let (fs, ms, fq, mq) = episode(9, 2);
    let maps: Vec<FeatureMap<f64>> = fs.iter().map(to_map).collect();
    let (total, trace) = ifa_step(&maps, &ms, &to_map(&fq), &mq, &IfaConfig::default()).unwrap();
    let masks: Vec<Vec<u8>> = ms.iter().map(|m| m.data().to_vec()).collect();
    let (want, terms) = common::ifa(&fs, &masks, &fq, mq.data(), 3, [0.2, 1.0, 0.4, 0.1], &common::Ssp::default());
    assert_eq!(terms.len(), 7);
    assert!((total - want).abs() < 1e-6);
    for (t, e) in trace.loss_terms().iter().zip(&terms) {
        assert!((t.value - e).abs() < 1e-6, "{}: {} vs {e}", t.name, t.value);
    }
}

#[test]
fn test_prediction_on_the_support_itself_recovers_its_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = disc_mask(8, 8, 3.5, 4.5, 2.8);
    let f = to_map(&two_region(&mut rng, &m, &[0.9, 0.1, 0.2], &[0.1, 0.2, 0.9], 0.0));
    let pred = test_predict(&[f.clone()], &[m.clone()], &f, &SspConfig::default()).unwrap();
    assert_eq!(pred.binarize(0.5), m);
}

#[test]
fn iou_matches_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cats = [0u32, 1, 0];
    let mut acc = IouAccumulator::new();
    let mut counts = [[0u64; 3]; 2];
    for &c in &cats {
        let pred: Vec<u8> = (0..36).map(|_| rng.random_range(0..2)).collect();
        let truth: Vec<u8> = (0..36).map(|_| rng.random_range(0..2)).collect();
        for (p, t) in pred.iter().zip(&truth) {
            match (p, t) {
                (1, 1) => counts[c as usize][0] += 1,
                (1, 0) => counts[c as usize][1] += 1,
                (0, 1) => counts[c as usize][2] += 1,
                _ => {}
            }
        }
        acc.add(c, &BinaryMask::new(6, 6, pred).unwrap(), &BinaryMask::new(6, 6, truth).unwrap()).unwrap();
    }
    let report = acc.finish("digest", "test");
    let iou = |k: [u64; 3]| k[0] as f64 / (k[0] + k[1] + k[2]) as f64;
    assert!((report.per_category[&0] - iou(counts[0])).abs() < 1e-12);
    assert!((report.per_category[&1] - iou(counts[1])).abs() < 1e-12);
    assert!((report.mean_iou - (iou(counts[0]) + iou(counts[1])) / 2.0).abs() < 1e-9);
    assert_eq!(report.episodes, 3);
}
