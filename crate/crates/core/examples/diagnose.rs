//! Scratch diagnostic for one benchmark seed (run manually).

use dvd_core::adaptation::{adapt_target, generate_source_cue, silga, predict};
use dvd_core::bench::{run_drift_stage, run_source_stage, score_encoder, BenchConfig};
use dvd_core::databench::gen_two_domain_shift;
use dvd_core::featurebank::{DomainTag, FeatureBank};
use dvd_core::rng::SeedStream;
use dvd_core::training::{accuracy, train_dvd, DvdTrainContext};

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let mut cfg = BenchConfig::desk_default(seed);
    cfg.shift.seed = seed;
    cfg.source.seed = seed;
    cfg.dvd.seed = seed;
    cfg.adapt.seed = seed;

    let (source, target) = gen_two_domain_shift(&cfg.shift).unwrap();
    let stage = run_source_stage(&source, &cfg.source).unwrap();
    println!("source train acc: {:.3}", stage.train_accuracy);
    let src_only = score_encoder(&stage.encoder, &stage.head, &target).unwrap();
    println!("source-only target acc: {:.3}", src_only);

    // Drift training with history.
    let labels = source.labels().unwrap();
    let ctx = DvdTrainContext {
        encoder: &stage.encoder,
        raw_inputs: source.features(),
    };
    let (model, hist) = train_dvd(&stage.bank, labels, &stage.head, &cfg.dvd, Some(&ctx)).unwrap();
    for h in &hist {
        println!(
            "dvd epoch {}: l_dif={:.4} l_ce={:.4} drifted_acc={:.3}",
            h.epoch, h.l_dif, h.l_ce, h.drifted_accuracy
        );
    }

    // Cue quality on the target before adaptation.
    let hidden = target.hidden_labels().unwrap();
    let latents = stage.encoder.forward_eval(target.features()).unwrap();
    let bank = FeatureBank::build(latents.clone(), DomainTag::Target).unwrap();
    let mut rng = SeedStream::derive(seed, "diagnose");
    let mut cue_pred = Vec::new();
    let mut silga_pred = Vec::new();
    for r in 0..target.len() {
        let cue = generate_source_cue(latents.row(r), &bank, &model, cfg.adapt.k_t_dif, &mut rng)
            .unwrap();
        cue_pred.push(predict(&stage.head, &cue).unwrap().argmax());
        let pooled = silga(&cue, &bank, cfg.adapt.k_t).unwrap();
        silga_pred.push(predict(&stage.head, &pooled).unwrap().argmax());
    }
    println!("cue acc (drifted prior samples): {:.3}", accuracy(&cue_pred, hidden));
    println!("silga positive acc: {:.3}", accuracy(&silga_pred, hidden));

    // Adaptation with per-epoch scoring.
    let head = &stage.head;
    let mut scorer = |enc: &dvd_core::diffcore::MlpNet| -> f64 {
        score_encoder(enc, head, &target).unwrap()
    };
    let (adapted, ahist) = adapt_target(
        target.unlabeled(),
        &stage.encoder,
        &stage.head,
        &model,
        &cfg.adapt,
        Some(&mut scorer),
    )
    .unwrap();
    for h in &ahist {
        println!(
            "adapt epoch {}: l_cls={:.4} acc={:.3}",
            h.epoch,
            h.l_cls,
            h.target_accuracy.unwrap()
        );
    }
    let final_acc = score_encoder(&adapted, &stage.head, &target).unwrap();
    println!("final adapted acc: {:.3} (source-only {:.3})", final_acc, src_only);
}
