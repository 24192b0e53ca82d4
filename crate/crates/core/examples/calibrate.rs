//! Scratch check of every directional comparison on the frozen benchmark
//! (run manually before pinning acceptance expectations).

use dvd_core::bench::{
    run_matrix, run_openset, run_transform_study, BenchConfig, Variant, CT_THRESHOLD,
};
use std::time::Instant;

fn main() {
    let seeds = [1u64, 2, 3, 4, 5];
    let variants = Variant::all();
    let cfg = BenchConfig::desk_default(0);

    let t0 = Instant::now();
    let rows = run_matrix(&seeds, variants, &cfg).unwrap();
    println!("matrix elapsed: {:.1}s", t0.elapsed().as_secs_f64());

    let acc = |v: Variant, seed: u64| -> f64 {
        rows.iter()
            .find(|r| r.variant == v && r.seed == seed)
            .unwrap()
            .adapted_accuracy
    };
    for &v in variants {
        let accs: Vec<f64> = seeds.iter().map(|&s| acc(v, s)).collect();
        println!(
            "{:22} {:?}",
            v.name(),
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }

    // Criterion 5: adaptation gain.
    let mut wins = 0;
    let mut gains = Vec::new();
    for &s in &seeds {
        let r = rows
            .iter()
            .find(|r| r.variant == Variant::Full && r.seed == s)
            .unwrap();
        let g = r.adapted_accuracy - r.source_only_accuracy;
        if g > 0.0 {
            wins += 1;
        }
        gains.push(g);
    }
    let mean_gain: f64 = gains.iter().sum::<f64>() / gains.len() as f64;
    println!("\n[c5] gain wins {wins}/5 mean {mean_gain:+.3} {gains:?}");

    let count = |a: Variant, b: Variant| -> usize {
        seeds.iter().filter(|&&s| acc(a, s) >= acc(b, s)).count()
    };
    println!("[c6] full>=meanpool: {}/5; meanpool>=augment: {}/5",
        count(Variant::Full, Variant::MeanPool),
        count(Variant::MeanPool, Variant::AugmentOnly));
    println!("[c7] full>=stochastic: {}/5", count(Variant::Full, Variant::StochasticDrift));
    println!(
        "[c8] full>=centroid {}/5; centroid>=baseline {}/5; baseline>=inputnoise {}/5; baseline>=latentnoise {}/5",
        count(Variant::Full, Variant::PriorCentroid),
        count(Variant::PriorCentroid, Variant::PriorBaseline),
        count(Variant::PriorBaseline, Variant::PriorInputNoise),
        count(Variant::PriorBaseline, Variant::PriorLatentNoise)
    );
    println!("[c9] full>=mismatched: {}/5", count(Variant::Full, Variant::MismatchedSchedule));

    let t1 = Instant::now();
    let mut ct_wins = 0;
    for &s in &seeds {
        let os = run_openset(s, &cfg, 1, CT_THRESHOLD).unwrap();
        if os.ct_h_score > os.closed_h_score {
            ct_wins += 1;
        }
        println!(
            "[c12] seed {s}: closed_h={:.3} ct_h={:.3} (known {:.3} unknown {:.3})",
            os.closed_h_score, os.ct_h_score, os.ct_known_accuracy, os.ct_unknown_accuracy
        );
    }
    println!("[c12] ct wins {ct_wins}/5; elapsed {:.1}s", t1.elapsed().as_secs_f64());

    let t2 = Instant::now();
    let mut plain_sum = 0.0;
    let mut trans_sum = 0.0;
    for &s in &seeds {
        let tr = run_transform_study(s, &cfg).unwrap();
        plain_sum += tr.plain_accuracy;
        trans_sum += tr.transformed_accuracy;
        println!(
            "[c13] seed {s}: plain={:.4} transformed={:.4}",
            tr.plain_accuracy, tr.transformed_accuracy
        );
    }
    println!(
        "[c13] mean plain {:.4} vs transformed {:.4}; elapsed {:.1}s",
        plain_sum / 5.0,
        trans_sum / 5.0,
        t2.elapsed().as_secs_f64()
    );
}
