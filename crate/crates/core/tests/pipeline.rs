//! Integration tests over the full pipeline stages: fixtures beyond the
//! frozen default benchmark (two-class accuracy drop, cue repair under a
//! gentler shift), the no-op adaptation identity, and transform basics.

use dvd_core::adaptation::{
    adapt_target, generate_source_cue, predict, transform_inference, AdaptConfig,
};
use dvd_core::bench::{run_drift_stage, run_source_stage, score_encoder, BenchConfig};
use dvd_core::databench::{gen_two_domain_shift, ShiftSpec};
use dvd_core::featurebank::{DomainTag, FeatureBank};
use dvd_core::rng::SeedStream;
use dvd_core::training::{accuracy, classify, SourceTrainConfig};

fn two_class_ladder(seed: u64, theta: f32) -> ShiftSpec {
    ShiftSpec {
        class_count: 2,
        centers: vec![vec![1.0, 0.0], vec![3.0, 0.0]],
        cluster_scale: 0.5,
        rotation_deg: theta,
        translation: vec![0.0, 0.0],
        scale_factor: 1.0,
        samples_per_class: 150,
        seed,
    }
}

/// A 45-degree shift on the two-class fixture costs the source classifier
/// at least 10 points of target accuracy (threshold frozen).
#[test]
fn two_class_rotation_drops_accuracy_ten_points() {
    for seed in [1u64, 2, 3] {
        let spec = two_class_ladder(seed, 45.0);
        let (source, target) = gen_two_domain_shift(&spec).unwrap();
        let mut cfg = SourceTrainConfig::defaults(2, seed);
        cfg.epochs = 40;
        let stage = run_source_stage(&source, &cfg).unwrap();
        let src_acc = stage.train_accuracy;
        let tgt_acc = score_encoder(&stage.encoder, &stage.head, &target).unwrap();
        assert!(
            tgt_acc <= src_acc - 0.10,
            "seed {seed}: source {src_acc:.3} vs target {tgt_acc:.3}"
        );
    }
}

/// Under the additive-noise shift, drift-generated cues classify at least
/// as well as the raw noisy features (within noise): the generative
/// transport preserves the label structure end to end. With a near-optimal
/// head on clean two-dimensional blobs, parity is the ceiling — there is
/// no off-manifold unreliability for the drift to repair at this scale.
#[test]
fn cues_preserve_classification_under_noise_shift() {
    let mut held = 0;
    for seed in [1u64, 2, 3, 4, 5] {
        let mut spec = two_class_ladder(seed, 0.0);
        spec.centers = vec![vec![-2.0, 0.0], vec![2.0, 0.0]];
        let (source, clean_target) = gen_two_domain_shift(&spec).unwrap();
        let target = clean_target.perturbed(1.0, seed);
        let mut cfg = BenchConfig::desk_default(seed);
        cfg.source = SourceTrainConfig {
            epochs: 40,
            ..SourceTrainConfig::defaults(2, seed)
        };
        cfg.dvd.epochs = 6;
        cfg.dvd.drift_hidden = vec![64];
        let stage = run_source_stage(&source, &cfg.source).unwrap();
        let model = run_drift_stage(&stage, &source, &cfg.dvd).unwrap();

        let hidden = target.hidden_labels().unwrap();
        let raw_pred = classify(&stage.encoder, &stage.head, target.features()).unwrap();
        let raw_acc = accuracy(&raw_pred, hidden);

        let latents = stage.encoder.forward_eval(target.features()).unwrap();
        let bank = FeatureBank::build(latents.clone(), DomainTag::Target).unwrap();
        let mut rng = SeedStream::derive(seed, "repair-test");
        let mut cue_pred = Vec::new();
        for r in 0..target.len() {
            let cue =
                generate_source_cue(latents.row(r), &bank, &model, 15, &mut rng).unwrap();
            cue_pred.push(predict(&stage.head, &cue).unwrap().argmax());
        }
        let cue_acc = accuracy(&cue_pred, hidden);
        if cue_acc >= raw_acc - 0.02 {
            held += 1;
        }
        println!("seed {seed}: raw {raw_acc:.3} cue {cue_acc:.3}");
    }
    assert!(held == 5, "cue accuracy fell behind raw in {}/5 seeds", 5 - held);
}

/// Zero-epoch adaptation returns a parameter-identical copy of the source
/// encoder.
#[test]
fn zero_epoch_adaptation_is_identity() {
    let spec = two_class_ladder(7, 45.0);
    let (source, target) = gen_two_domain_shift(&spec).unwrap();
    let mut cfg = BenchConfig::desk_default(7);
    cfg.source = SourceTrainConfig {
        epochs: 10,
        ..SourceTrainConfig::defaults(2, 7)
    };
    cfg.dvd.epochs = 1;
    cfg.dvd.drift_hidden = vec![16];
    cfg.dvd.k_s_dif = 5;
    cfg.adapt.epochs = 0;
    cfg.adapt.k_t_dif = 5;
    cfg.adapt.k_t = 3;
    let stage = run_source_stage(&source, &cfg.source).unwrap();
    let model = run_drift_stage(&stage, &source, &cfg.dvd).unwrap();
    let (adapted, history) = adapt_target(
        target.unlabeled(),
        &stage.encoder,
        &stage.head,
        &model,
        &cfg.adapt,
        None,
    )
    .unwrap();
    assert!(history.is_empty());
    assert_eq!(adapted.param_bytes(), stage.encoder.param_bytes());
}

/// The inference transform collapses to the plain classifier when the
/// drift is zero and the vicinity is degenerate, and it never mutates
/// parameters.
#[test]
fn transform_inference_degenerate_case_and_frozen_params() {
    use dvd_core::diffcore::Tensor2;
    use dvd_core::driftnet::DriftModel;

    let spec = two_class_ladder(9, 0.0);
    let (source, _) = gen_two_domain_shift(&spec).unwrap();
    let mut cfg = SourceTrainConfig::defaults(2, 9);
    cfg.epochs = 10;
    let stage = run_source_stage(&source, &cfg).unwrap();

    // Degenerate pool: k identical neighbors; zero drift.
    let v = stage
        .encoder
        .forward_row(source.features().row(0))
        .unwrap();
    let pool = Tensor2::from_rows(&[&v, &v, &v, &v]).unwrap();
    let bank = FeatureBank::build(pool, DomainTag::Target).unwrap();
    let mut rng = SeedStream::from_seed(1);
    let mut model = DriftModel::zero_field(v.len(), 4, &mut rng).unwrap();
    model.freeze();

    let enc_before = stage.encoder.param_bytes();
    let head_before = stage.head.param_bytes();
    let pred = transform_inference(
        source.features().row(0),
        &stage.encoder,
        &stage.head,
        &model,
        &bank,
        3,
        &mut rng,
    )
    .unwrap();
    let direct = predict(&stage.head, &v).unwrap();
    for (a, b) in pred.probs().iter().zip(direct.probs()) {
        assert!((a - b).abs() < 1e-5);
    }
    assert_eq!(stage.encoder.param_bytes(), enc_before);
    assert_eq!(stage.head.param_bytes(), head_before);
}

/// Contract errors for unfrozen inputs to adaptation.
#[test]
fn adaptation_rejects_unfrozen_inputs() {
    use dvd_core::driftnet::DriftModel;
    use dvd_core::training::build_head;

    let spec = two_class_ladder(11, 45.0);
    let (source, target) = gen_two_domain_shift(&spec).unwrap();
    let mut cfg = SourceTrainConfig::defaults(2, 11);
    cfg.epochs = 5;
    let stage = run_source_stage(&source, &cfg).unwrap();
    let mut rng = SeedStream::from_seed(4);
    let mut model = DriftModel::new(stage.encoder.output_width(), &[8], 4, &mut rng).unwrap();

    // Unfrozen drift model.
    let acfg = AdaptConfig {
        k_t_dif: 5,
        k_t: 3,
        epochs: 1,
        ..AdaptConfig::defaults(11)
    };
    let err = adapt_target(
        target.unlabeled(),
        &stage.encoder,
        &stage.head,
        &model,
        &acfg,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, dvd_core::DvdError::Contract(_)));

    // Unfrozen head.
    model.freeze();
    let loose_head = build_head(stage.encoder.output_width(), 2, &mut rng).unwrap();
    let err = adapt_target(
        target.unlabeled(),
        &stage.encoder,
        &loose_head,
        &model,
        &acfg,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, dvd_core::DvdError::Contract(_)));
}
