//! SGD with momentum, plus the finite-difference gradient checker used by
//! the test suites.

use crate::diffcore::net::MlpNet;
use crate::diffcore::tape::{GradTape, NetGrads, ValueId};
use crate::error::{DvdError, Result};

/// v <- momentum * v + g; p <- p - lr * v, elementwise.
pub fn sgd_step(net: &mut MlpNet, grads: &NetGrads, lr: f32, momentum: f32) -> Result<()> {
    if net.is_frozen() {
        return Err(DvdError::Contract(
            "sgd_step on a frozen network".into(),
        ));
    }
    if !(lr > 0.0) {
        return Err(DvdError::Parameter(format!("learning rate {lr} must be > 0")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(DvdError::Parameter(format!(
            "momentum {momentum} must be in [0, 1)"
        )));
    }
    if grads.layers.len() != net.layers().len() {
        return Err(DvdError::Shape(format!(
            "{} gradient layers for {} net layers",
            grads.layers.len(),
            net.layers().len()
        )));
    }
    for (i, (gw, gb)) in grads.layers.iter().enumerate() {
        let shape_ok = gw.rows() == net.layers()[i].weight.rows()
            && gw.cols() == net.layers()[i].weight.cols()
            && gb.cols() == net.layers()[i].bias.cols();
        if !shape_ok {
            return Err(DvdError::Shape(format!("gradient shape mismatch at layer {i}")));
        }
    }
    let n_layers = net.layers().len();
    for i in 0..n_layers {
        let (gw, gb) = &grads.layers[i];
        {
            let (vw, vb) = &mut net.momentum_mut()[i];
            for (v, g) in vw.data_mut().iter_mut().zip(gw.data()) {
                *v = momentum * *v + g;
            }
            for (v, g) in vb.data_mut().iter_mut().zip(gb.data()) {
                *v = momentum * *v + g;
            }
        }
        let (vw, vb) = (
            net.momentum()[i].0.data().to_vec(),
            net.momentum()[i].1.data().to_vec(),
        );
        let layer = &mut net.layers_mut_unchecked()[i];
        for (p, v) in layer.weight.data_mut().iter_mut().zip(vw) {
            *p -= lr * v;
        }
        for (p, v) in layer.bias.data_mut().iter_mut().zip(vb) {
            *p -= lr * v;
        }
    }
    Ok(())
}

/// A differentiable loss paired with an independent 64-bit evaluation of the
/// same function, used to validate the analytic gradients. `eval_f64`
/// receives per-layer (weights, biases) and must not touch the tape engine.
pub trait LossFunctional {
    fn tape_loss(&self, net: &MlpNet, tape: &mut GradTape) -> Result<(ValueId, f64)>;
    fn eval_f64(&self, params: &[(Vec<f64>, Vec<f64>)]) -> f64;
}

/// Max over parameters of |analytic - central difference| / (|central| + 1e-12).
pub fn finite_diff_check(net: &MlpNet, loss: &dyn LossFunctional, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(DvdError::Parameter(format!("eps {eps} must be > 0")));
    }
    let mut tape = GradTape::new();
    let (node, value) = loss.tape_loss(net, &mut tape)?;
    if !value.is_finite() {
        return Err(DvdError::Numeric(format!("loss is not finite: {value}")));
    }
    tape.backward_scalar(node)?;
    let analytic = tape.net_grads(net)?;

    let mut params = net.params_f64();
    let mut max_rel = 0.0f64;
    for li in 0..params.len() {
        for part in 0..2 {
            let len = if part == 0 {
                params[li].0.len()
            } else {
                params[li].1.len()
            };
            for pi in 0..len {
                let slot = |ps: &mut Vec<(Vec<f64>, Vec<f64>)>, v: f64| {
                    if part == 0 {
                        ps[li].0[pi] = v;
                    } else {
                        ps[li].1[pi] = v;
                    }
                };
                let orig = if part == 0 {
                    params[li].0[pi]
                } else {
                    params[li].1[pi]
                };
                slot(&mut params, orig + eps);
                let f_plus = loss.eval_f64(&params);
                slot(&mut params, orig - eps);
                let f_minus = loss.eval_f64(&params);
                slot(&mut params, orig);
                if !f_plus.is_finite() || !f_minus.is_finite() {
                    return Err(DvdError::Numeric(
                        "non-finite loss during finite differencing".into(),
                    ));
                }
                let central = (f_plus - f_minus) / (2.0 * eps);
                let a = if part == 0 {
                    analytic.layers[li].0.data()[pi] as f64
                } else {
                    analytic.layers[li].1.data()[pi] as f64
                };
                let rel = (a - central).abs() / (central.abs() + 1e-12);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::net::{Act, Layer};
    use crate::diffcore::tensor::Tensor2;

    fn scalar_net(v: f32) -> MlpNet {
        MlpNet::from_layers(
            vec![Layer {
                weight: Tensor2::from_vec(1, 1, vec![v]).unwrap(),
                bias: Tensor2::zeros(1, 1),
                act: Act::Identity,
            }],
            false,
        )
        .unwrap()
    }

    #[test]
    fn vanilla_sgd_step() {
        let mut net = scalar_net(1.0);
        let grads = NetGrads {
            layers: vec![(
                Tensor2::from_vec(1, 1, vec![1.0]).unwrap(),
                Tensor2::zeros(1, 1),
            )],
        };
        sgd_step(&mut net, &grads, 0.1, 0.0).unwrap();
        assert!((net.layers()[0].weight.get(0, 0) - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps() {
        // momentum=0.9, lr=0.1, p=1, g=1 twice: v1=1, p=0.9; v2=1.9, p=0.71.
        let mut net = scalar_net(1.0);
        let grads = NetGrads {
            layers: vec![(
                Tensor2::from_vec(1, 1, vec![1.0]).unwrap(),
                Tensor2::zeros(1, 1),
            )],
        };
        sgd_step(&mut net, &grads, 0.1, 0.9).unwrap();
        sgd_step(&mut net, &grads, 0.1, 0.9).unwrap();
        assert!((net.momentum()[0].0.get(0, 0) - 1.9).abs() < 1e-6);
        assert!((net.layers()[0].weight.get(0, 0) - 0.71).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_decays_momentum_only() {
        let mut net = scalar_net(1.0);
        let ones = NetGrads {
            layers: vec![(
                Tensor2::from_vec(1, 1, vec![1.0]).unwrap(),
                Tensor2::zeros(1, 1),
            )],
        };
        sgd_step(&mut net, &ones, 0.1, 0.9).unwrap();
        let p_before = net.layers()[0].weight.get(0, 0);
        let v_before = net.momentum()[0].0.get(0, 0);
        let zeros = NetGrads {
            layers: vec![(Tensor2::zeros(1, 1), Tensor2::zeros(1, 1))],
        };
        sgd_step(&mut net, &zeros, 0.1, 0.9).unwrap();
        let v_after = net.momentum()[0].0.get(0, 0);
        assert!((v_after - 0.9 * v_before).abs() < 1e-7);
        let p_after = net.layers()[0].weight.get(0, 0);
        assert!((p_after - (p_before - 0.1 * v_after)).abs() < 1e-7);
    }

    #[test]
    fn frozen_net_rejects_update() {
        let mut net = scalar_net(1.0);
        net.freeze();
        let grads = NetGrads {
            layers: vec![(Tensor2::zeros(1, 1), Tensor2::zeros(1, 1))],
        };
        assert!(matches!(
            sgd_step(&mut net, &grads, 0.1, 0.0),
            Err(DvdError::Contract(_))
        ));
    }

    struct Square;

    impl LossFunctional for Square {
        fn tape_loss(&self, net: &MlpNet, tape: &mut GradTape) -> Result<(ValueId, f64)> {
            let x = tape.constant(Tensor2::row_vector(&[1.0]));
            let y = tape.forward(net, x)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        }

        fn eval_f64(&self, params: &[(Vec<f64>, Vec<f64>)]) -> f64 {
            let w = params[0].0[0] + params[0].1[0];
            w * w
        }
    }

    #[test]
    fn quadratic_fd_error_is_tiny() {
        // f(x) = x^2 at x = 3: analytic 6 vs central difference.
        let net = scalar_net(3.0);
        let err = finite_diff_check(&net, &Square, 1e-3).unwrap();
        assert!(err < 1e-8, "fd error {err}");
    }

    struct CeHead {
        inputs: Tensor2,
        labels: Vec<u32>,
    }

    impl LossFunctional for CeHead {
        fn tape_loss(&self, net: &MlpNet, tape: &mut GradTape) -> Result<(ValueId, f64)> {
            let x = tape.constant(self.inputs.clone());
            let logits = tape.forward(net, x)?;
            tape.softmax_ce(logits, &self.labels)
        }

        fn eval_f64(&self, params: &[(Vec<f64>, Vec<f64>)]) -> f64 {
            let rows: Vec<Vec<f64>> = (0..self.inputs.rows())
                .map(|r| {
                    let (w, b) = &params[0];
                    let wo = b.len();
                    let mut out = b.clone();
                    for (i, &x) in self.inputs.row(r).iter().enumerate() {
                        for o in 0..wo {
                            out[o] += x as f64 * w[i * wo + o];
                        }
                    }
                    out
                })
                .collect();
            crate::oracle::softmax_ce_f64(&rows, &self.labels)
        }
    }

    #[test]
    fn softmax_ce_head_fd_check() {
        let mut rng = crate::rng::SeedStream::from_seed(31);
        let net = MlpNet::new(&[3, 4], &[Act::Identity], &mut rng).unwrap();
        let inputs =
            Tensor2::from_vec(3, 3, vec![0.4, -0.2, 0.8, -0.5, 0.9, 0.1, 0.3, 0.3, -0.7])
                .unwrap();
        let loss = CeHead {
            inputs,
            labels: vec![0, 3, 1],
        };
        let err = finite_diff_check(&net, &loss, 1e-3).unwrap();
        assert!(err < 1e-4, "fd error {err}");
    }

    struct DriftMse {
        inputs: Tensor2,
        targets: Tensor2,
    }

    impl LossFunctional for DriftMse {
        fn tape_loss(&self, net: &MlpNet, tape: &mut GradTape) -> Result<(ValueId, f64)> {
            let x = tape.constant(self.inputs.clone());
            let pred = tape.forward(net, x)?;
            let t = tape.constant(self.targets.clone());
            let diff = tape.sub(pred, t)?;
            let sq = tape.mul(diff, diff)?;
            let (sum, value) = tape.sum_all(sq);
            let n = self.inputs.rows() as f64;
            Ok((tape.scale(sum, 1.0 / n as f32), value / n))
        }

        fn eval_f64(&self, params: &[(Vec<f64>, Vec<f64>)]) -> f64 {
            let mut total = 0.0f64;
            for r in 0..self.inputs.rows() {
                let (w, b) = &params[0];
                let wo = b.len();
                let mut out = b.clone();
                for (i, &x) in self.inputs.row(r).iter().enumerate() {
                    for o in 0..wo {
                        out[o] += x as f64 * w[i * wo + o];
                    }
                }
                for (o, &t) in self.targets.row(r).iter().enumerate() {
                    let d = out[o] - t as f64;
                    total += d * d;
                }
            }
            total / self.inputs.rows() as f64
        }
    }

    #[test]
    fn drift_mse_fd_check() {
        // Transport regression on a random pair at eps = 1e-3.
        let mut rng = crate::rng::SeedStream::from_seed(77);
        let net = MlpNet::new(&[4, 2], &[Act::Identity], &mut rng).unwrap();
        let mut mk = |n: usize, d: usize| {
            let data: Vec<f32> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            Tensor2::from_vec(n, d, data).unwrap()
        };
        let loss = DriftMse {
            inputs: mk(3, 4),
            targets: mk(3, 2),
        };
        let err = finite_diff_check(&net, &loss, 1e-3).unwrap();
        assert!(err < 1e-4, "fd error {err}");
    }
}
