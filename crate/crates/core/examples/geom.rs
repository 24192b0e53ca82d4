//! Scratch: cue repair/damage rates + variant outcomes on the ladder
//! benchmark, across drift-training configurations (run manually).

use dvd_core::adaptation::{adapt_target, generate_source_cue, predict};
use dvd_core::bench::{
    run_drift_stage, run_source_stage, score_encoder, BenchConfig, Variant,
};
use dvd_core::databench::gen_two_domain_shift;
use dvd_core::featurebank::{DomainTag, FeatureBank};
use dvd_core::rng::SeedStream;
use dvd_core::training::classify;

fn main() {
    let seeds = [1u64, 2, 3, 4, 5];
    let variants = [Variant::Full, Variant::MeanPool, Variant::AugmentOnly];
    // (name, dvd epochs, drift hidden, ce_weight)
    let dvd_cfgs: Vec<(&str, usize, Vec<usize>, f32)> = vec![
        ("smooth-12ep-32-ce1", 12, vec![32], 1.0),
        ("smooth-12ep-64-ce1", 12, vec![64], 1.0),
        ("smooth-20ep-32-ce1", 20, vec![32], 1.0),
        ("ref-8ep-128x128", 8, vec![128, 128], 1.0),
    ];

    for (name, ep, hidden, ce_w) in dvd_cfgs {
        println!("=== dvd {name} ===");
        for &seed in &seeds {
            let mut cfg = BenchConfig::desk_default(seed);
            cfg.shift.seed = seed;
            cfg.source.seed = seed;
            cfg.dvd.seed = seed;
            cfg.dvd.epochs = ep;
            cfg.dvd.drift_hidden = hidden.clone();
            cfg.dvd.ce_weight = ce_w;
            cfg.adapt.seed = seed;

            let (source, target) = gen_two_domain_shift(&cfg.shift).unwrap();
            let stage = run_source_stage(&source, &cfg.source).unwrap();
            let src_only = score_encoder(&stage.encoder, &stage.head, &target).unwrap();
            let model = run_drift_stage(&stage, &source, &cfg.dvd).unwrap();

            let hidden_labels = target.hidden_labels().unwrap();
            let latents = stage.encoder.forward_eval(target.features()).unwrap();
            let bank = FeatureBank::build(latents.clone(), DomainTag::Target).unwrap();
            let raw_pred = classify(&stage.encoder, &stage.head, target.features()).unwrap();
            let mut rng = SeedStream::derive(seed, "cue-check");
            let (mut repair, mut damage, mut cue_hits) = (0usize, 0usize, 0usize);
            for r in 0..target.len() {
                let cue = generate_source_cue(
                    latents.row(r),
                    &bank,
                    &model,
                    cfg.adapt.k_t_dif,
                    &mut rng,
                )
                .unwrap();
                let c = predict(&stage.head, &cue).unwrap().argmax();
                let truth = hidden_labels[r];
                let raw_ok = raw_pred[r] == truth;
                let cue_ok = c == truth;
                cue_hits += usize::from(cue_ok);
                if !raw_ok && cue_ok {
                    repair += 1;
                }
                if raw_ok && !cue_ok {
                    damage += 1;
                }
            }
            let n = target.len() as f64;
            let mut line = format!(
                "seed {seed}: src={src_only:.3} cue={:.3} repair={:.3} damage={:.3}",
                cue_hits as f64 / n,
                repair as f64 / n,
                damage as f64 / n
            );
            for v in variants {
                let mut acfg = cfg.adapt.clone();
                v.apply(&mut acfg);
                let (adapted, _) = adapt_target(
                    target.unlabeled(),
                    &stage.encoder,
                    &stage.head,
                    &model,
                    &acfg,
                    None,
                )
                .unwrap();
                let acc = score_encoder(&adapted, &stage.head, &target).unwrap();
                line.push_str(&format!(" {}={acc:.3}", v.name()));
            }
            println!("{line}");
        }
    }
}
