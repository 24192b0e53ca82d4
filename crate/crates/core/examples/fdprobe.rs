//! Scratch probe: per-parameter analytic vs central-difference values for
//! the seed-12 CE instance (run manually).

use dvd_core::diffcore::{Act, GradTape, MlpNet, Tensor2};
use dvd_core::oracle;
use dvd_core::rng::SeedStream;

fn forward_relu_stack(params: &[(Vec<f64>, Vec<f64>)], input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for (li, (w, b)) in params.iter().enumerate() {
        let wo = b.len();
        let wi = w.len() / wo;
        let mut next = vec![0.0f64; wo];
        for (o, nx) in next.iter_mut().enumerate() {
            let mut acc = b[o];
            for i in 0..wi {
                acc += h[i] * w[i * wo + o];
            }
            *nx = acc;
        }
        if li + 1 < params.len() {
            for v in next.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        h = next;
    }
    h
}

fn main() {
    let mut rng = SeedStream::derive(12, "c1");
    // Skip the drift-shaped stage exactly as the test does.
    let embed = dvd_core::driftnet::EmbedSpec::default();
    let _net = MlpNet::new(
        &[3 + embed.width(), 8, 3],
        &[Act::Relu, Act::Identity],
        &mut rng,
    )
    .unwrap();
    // DriftMseLoss::new consumes 4*3*2 uniforms + 1 alpha; plus kink redraws.
    // Rather than replicate exactly, scan CE instances drawn from this
    // stream until one shows rel err > 1e-4 and dump its worst params.
    for attempt in 0..40 {
        let net = MlpNet::new(&[4, 8, 3], &[Act::Relu, Act::Identity], &mut rng).unwrap();
        let mut data = Vec::new();
        for _ in 0..5 * 4 {
            data.push(rng.uniform(-1.0, 1.0));
        }
        let inputs = Tensor2::from_vec(5, 4, data).unwrap();
        let labels = vec![0u32, 2, 1, 0, 2];

        // Analytic grads via the engine.
        let mut tape = GradTape::new();
        let x = tape.constant(inputs.clone());
        let logits = tape.forward(&net, x).unwrap();
        let (loss, _) = tape.softmax_ce(logits, &labels).unwrap();
        tape.backward_scalar(loss).unwrap();
        let analytic = tape.net_grads(&net).unwrap();

        // f64 FD.
        let mut params = net.params_f64();
        let eval = |ps: &[(Vec<f64>, Vec<f64>)]| -> f64 {
            let rows: Vec<Vec<f64>> = (0..5)
                .map(|r| {
                    let input: Vec<f64> = inputs.row(r).iter().map(|&v| v as f64).collect();
                    forward_relu_stack(ps, &input)
                })
                .collect();
            oracle::softmax_ce_f64(&rows, &labels)
        };
        let eps = 1e-3;
        let mut worst = (0.0f64, 0usize, 0usize, 0.0f64, 0.0f64);
        for li in 0..params.len() {
            for pi in 0..params[li].0.len() {
                let orig = params[li].0[pi];
                params[li].0[pi] = orig + eps;
                let fp = eval(&params);
                params[li].0[pi] = orig - eps;
                let fm = eval(&params);
                params[li].0[pi] = orig;
                let central = (fp - fm) / (2.0 * eps);
                let a = analytic.layers[li].0.data()[pi] as f64;
                let rel = (a - central).abs() / (central.abs() + 1e-12);
                if rel > worst.0 {
                    worst = (rel, li, pi, a, central);
                }
            }
        }
        if worst.0 > 1e-4 {
            println!(
                "attempt {attempt}: rel={:.3e} layer={} idx={} analytic={:.8e} central={:.8e} absdiff={:.2e}",
                worst.0, worst.1, worst.2, worst.3, worst.4, (worst.3 - worst.4).abs()
            );
        }
    }
    println!("done");
}
