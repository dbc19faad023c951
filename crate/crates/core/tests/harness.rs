use ifaseg_core::encoder::{Encoder, EncoderConfig};
use ifaseg_core::episodes::{InMemoryDataset, SupportSplit};
use ifaseg_core::harness::{evaluate, finetune_target, train_source, HarnessConfig, OptimConfig, Stage};
use ifaseg_core::synth::{generate_synthetic, SyntheticDomainSpec};

fn small() -> HarnessConfig {
    HarnessConfig {
        encoder: EncoderConfig {
            widths: vec![6, 8],
            strides: vec![2, 2],
            ..EncoderConfig::default()
        },
        source: OptimConfig { lr: 1e-3, momentum: 0.9, epochs: 2 },
        source_episodes_per_epoch: 4,
        finetune: OptimConfig { lr: 5e-4, momentum: 0.9, epochs: 2 },
        finetune_repeats: 2,
        input_size: 32,
        seed: 7,
        ..HarnessConfig::default()
    }
}

fn data(spec: SyntheticDomainSpec) -> InMemoryDataset {
    generate_synthetic(&SyntheticDomainSpec { categories: 2, images_per_category: 4, image_size: 32, ..spec }).unwrap()
}

fn pipeline(cfg: &HarnessConfig) -> (Encoder<f32>, ifaseg_core::metrics::EvalReport) {
    let (src, tgt) = (data(SyntheticDomainSpec::default_source()), data(SyntheticDomainSpec::default_target()));
    let mut enc = Encoder::init(cfg.encoder.clone(), cfg.seed).unwrap();
    train_source(&mut enc, &src, cfg, |_| {}).unwrap();
    let split = SupportSplit::new(&tgt, cfg.shots).unwrap();
    finetune_target(&mut enc, &tgt, &split, cfg, |_| {}).unwrap();
    let report = evaluate(&enc, &tgt, &split, cfg, "digest", "finetune").unwrap();
    (enc, report)
}

#[test]
fn seeded_runs_are_bit_identical() {
    let cfg = small();
    let (e1, r1) = pipeline(&cfg);
    let (e2, r2) = pipeline(&cfg);
    assert_eq!(e1, e2);
    assert_eq!(r1, r2);
    assert_eq!(r1.mean_iou.to_bits(), r2.mean_iou.to_bits());
}

#[test]
fn single_round_finetune_is_bfp_finetune() {
    let cfg = HarnessConfig { ifa: small().ifa.bfp(), ..small() };
    let tgt = data(SyntheticDomainSpec::default_target());
    let split = SupportSplit::new(&tgt, 1).unwrap();
    let mut enc = Encoder::init(cfg.encoder.clone(), 1).unwrap();
    let mut steps = Vec::new();
    let log = finetune_target(&mut enc, &tgt, &split, &cfg, |r| steps.push(r.clone())).unwrap();
    assert_eq!(log.steps, 2 * 2 * 2);
    for s in &steps {
        assert_eq!(s.stage, Stage::Finetune);
        assert_eq!(s.trace.iterations.len(), 1);
        assert_eq!(s.trace.loss_terms().len(), 3);
    }
}

#[test]
fn report_mean_is_the_mean_of_categories() {
    let (_, r) = pipeline(&small());
    let mean = r.per_category.values().sum::<f64>() / r.per_category.len() as f64;
    assert!((r.mean_iou - mean).abs() < 1e-9);
    assert_eq!(r.episodes, 2 * 3);
    assert_eq!(r.stage, "finetune");
}
