//! Scratch layout scan: per-cluster majority robustness across seeds using
//! only the source stage (fast). Run manually.

use dvd_core::bench::{run_source_stage, score_encoder, BenchConfig};
use dvd_core::databench::{gen_two_domain_shift, ShiftSpec};
use dvd_core::training::classify;

fn polar(r: f32, deg: f32) -> Vec<f32> {
    let rad = deg.to_radians();
    vec![r * rad.cos(), r * rad.sin()]
}

fn main() {
    let mut layouts: Vec<(String, Vec<Vec<f32>>)> = Vec::new();
    // Spiral: radius grows with angle, so the rotation advances each
    // cluster along the spiral and keeps it nearest its own source spot.
    for (name, radii) in [
        ("spiral-1.0", [1.0f32, 2.2, 3.4, 4.6]),
        ("spiral-0.85", [0.85, 1.87, 2.89, 3.91]),
        ("spiral-1.2", [1.2, 2.64, 4.08, 5.52]),
        ("spiral-tight", [1.0, 2.0, 3.0, 4.0]),
        ("spiral-steep", [1.0, 2.5, 4.0, 5.5]),
    ] {
        layouts.push((
            name.to_string(),
            vec![
                polar(radii[0], 0.0),
                polar(radii[1], 90.0),
                polar(radii[2], 180.0),
                polar(radii[3], 270.0),
            ],
        ));
    }
    // Reference: prior best line layouts.
    for (ri, ro) in [(1.0, 6.0), (1.0, 8.0)] {
        layouts.push((
            format!("line-{ri}-{ro}"),
            vec![
                polar(ri, 0.0),
                polar(ro, 0.0),
                polar(ri, 180.0),
                polar(ro, 180.0),
            ],
        ));
    }
    // Best cross so far.
    layouts.push((
        "cross-0.4-2".to_string(),
        vec![
            polar(0.4, 0.0),
            polar(2.0, 90.0),
            polar(0.4, 180.0),
            polar(2.0, 270.0),
        ],
    ));

    let seeds = [1u64, 2, 3, 4, 5, 6, 7, 8, 9, 10];
    for (name, centers) in layouts {
        let mut maj_ok = 0usize;
        let mut maj_total = 0usize;
        let mut min_share = 1.0f64;
        let mut src_accs = Vec::new();
        for &seed in &seeds {
            let mut cfg = BenchConfig::desk_default(seed);
            cfg.shift = ShiftSpec {
                centers: centers.clone(),
                seed,
                ..ShiftSpec::default_benchmark(seed)
            };
            cfg.source.seed = seed;
            let (source, target) = gen_two_domain_shift(&cfg.shift).unwrap();
            let stage = run_source_stage(&source, &cfg.source).unwrap();
            let hidden = target.hidden_labels().unwrap();
            let pred = classify(&stage.encoder, &stage.head, target.features()).unwrap();
            let c = cfg.shift.class_count;
            let mut votes = vec![vec![0usize; c]; c];
            for (p, &h) in pred.iter().zip(hidden) {
                votes[h as usize][*p as usize] += 1;
            }
            for (h, v) in votes.iter().enumerate() {
                let total: usize = v.iter().sum();
                let (maj, &n) = v.iter().enumerate().max_by_key(|(_, &n)| n).unwrap();
                maj_total += 1;
                if maj == h {
                    maj_ok += 1;
                    min_share = min_share.min(n as f64 / total as f64);
                } else {
                    min_share = 0.0;
                }
            }
            src_accs.push(score_encoder(&stage.encoder, &stage.head, &target).unwrap());
        }
        let mean_src: f64 = src_accs.iter().sum::<f64>() / src_accs.len() as f64;
        println!(
            "{name:18} majorities {maj_ok}/{maj_total} min-share={min_share:.2} src-only mean={mean_src:.3} {:?}",
            src_accs.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }
}
