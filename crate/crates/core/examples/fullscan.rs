//! Scratch full-pipeline layout trial: adapted-vs-source-only gain per seed
//! (run manually).

use dvd_core::adaptation::adapt_target;
use dvd_core::bench::{run_drift_stage, run_source_stage, score_encoder, BenchConfig};
use dvd_core::databench::{gen_two_domain_shift, ShiftSpec};

fn polar(r: f32, deg: f32) -> Vec<f32> {
    let rad = deg.to_radians();
    vec![r * rad.cos(), r * rad.sin()]
}

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(12);
    let lr: f32 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3e-3);
    let layouts: Vec<(&str, Vec<Vec<f32>>)> = vec![
        (
            "L1-frozen",
            vec![polar(2.0, 0.0), polar(4.5, 0.0), polar(7.0, 0.0), polar(9.5, 0.0)],
        ),
        (
            "L2-mid",
            vec![polar(1.5, 0.0), polar(3.5, 0.0), polar(5.5, 0.0), polar(7.5, 0.0)],
        ),
        (
            "L3-small",
            vec![polar(1.2, 0.0), polar(2.9, 0.0), polar(4.6, 0.0), polar(6.3, 0.0)],
        ),
        (
            "L4-wide",
            vec![polar(2.4, 0.0), polar(5.4, 0.0), polar(8.4, 0.0), polar(11.4, 0.0)],
        ),
    ];
    let seeds = [1u64, 2, 3, 4, 5, 6, 7, 8, 9, 10];

    for (name, centers) in layouts {
        let mut gains = Vec::new();
        let mut wins = 0usize;
        for &seed in &seeds {
            let mut cfg = BenchConfig::desk_default(seed);
            cfg.shift = ShiftSpec {
                centers: centers.clone(),
                seed,
                ..ShiftSpec::default_benchmark(seed)
            };
            cfg.source.seed = seed;
            cfg.dvd.seed = seed;
            cfg.adapt.seed = seed;
            cfg.adapt.epochs = epochs;
            cfg.adapt.lr = lr;
            let (source, target) = gen_two_domain_shift(&cfg.shift).unwrap();
            let stage = run_source_stage(&source, &cfg.source).unwrap();
            let src_only = score_encoder(&stage.encoder, &stage.head, &target).unwrap();
            let model = run_drift_stage(&stage, &source, &cfg.dvd).unwrap();
            let mut accs = Vec::new();
            for v in [
                dvd_core::bench::Variant::Full,
                dvd_core::bench::Variant::MeanPool,
                dvd_core::bench::Variant::AugmentOnly,
            ] {
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
                accs.push(score_encoder(&adapted, &stage.head, &target).unwrap());
            }
            let acc = accs[0];
            let gain = acc - src_only;
            if gain > 0.0 {
                wins += 1;
            }
            println!("  seed {seed}: src={src_only:.3} full={:.3} meanpool={:.3} augment={:.3}", accs[0], accs[1], accs[2]);
            gains.push((seed, src_only, acc, gain));
        }
        let mean_gain: f64 =
            gains.iter().map(|(_, _, _, g)| *g).sum::<f64>() / gains.len() as f64;
        println!("=== {name} (adapt epochs {epochs} lr {lr}): wins {wins}/10 mean gain {mean_gain:+.3}");
        for (seed, s, a, g) in gains {
            println!("  seed {seed}: {s:.3} -> {a:.3} ({g:+.3})");
        }
    }
}
