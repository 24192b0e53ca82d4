//! Straight-line 64-bit reference implementations used by the test suites
//! to validate the production paths. Deliberately naive: full sorts, plain
//! loops, no tape — these must stay independent of the engine they check.

use crate::diffcore::{Act, MlpNet, Tensor2};
use crate::featurebank::cosine_sim;

/// Exhaustive k-NN: score every entry with the shared cosine kernel, full
/// sort by (similarity desc, index asc), take k.
pub fn knn_bruteforce(
    entries: &Tensor2,
    query: &[f32],
    k: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut scored: Vec<(f32, usize)> = (0..entries.rows())
        .filter(|&i| exclude != Some(i))
        .map(|i| (cosine_sim(query, entries.row(i)).unwrap(), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Two-pass componentwise mean and population variance.
pub fn mean_var_twopass(rows: &[&[f32]]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(*r) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0f64; d];
    for r in rows {
        for c in 0..d {
            let diff = r[c] as f64 - mean[c];
            var[c] += diff * diff;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

/// Forward pass through an MLP described by `shape` (for layer activations)
/// with parameters supplied separately in f64.
pub fn mlp_forward_f64(shape: &MlpNet, params: &[(Vec<f64>, Vec<f64>)], input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for (layer, (w, b)) in shape.layers().iter().zip(params) {
        let (wi, wo) = (layer.weight.rows(), layer.weight.cols());
        let mut next = vec![0.0f64; wo];
        for (o, nx) in next.iter_mut().enumerate() {
            let mut acc = b[o];
            for (i, &hv) in h.iter().enumerate().take(wi) {
                acc += hv * w[i * wo + o];
            }
            *nx = acc;
        }
        match layer.act {
            Act::Relu => {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Act::Identity => {}
            Act::Softmax => next = softmax_f64(&next),
        }
        h = next;
    }
    h
}

pub fn softmax_f64(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy of softmax(logits) against labels.
pub fn softmax_ce_f64(logits: &[Vec<f64>], labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.iter().zip(labels) {
        let p = softmax_f64(row);
        total += -p[l as usize].ln();
    }
    total / logits.len() as f64
}

/// Mean over rows of the squared norm of (pred - target).
pub fn drift_mse_f64(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in p.iter().zip(t) {
            let d = a - b;
            total += d * d;
        }
    }
    total / pred.len() as f64
}

/// Contrastive objective over prediction vectors:
/// -sum_i log( exp(p_i . pos_i / tau) / den_i ) where den_i sums
/// exp(p_i . p_j / tau) over j != i, plus the positive term when
/// `include_positive` is set.
pub fn infonce_f64(p: &[Vec<f64>], pos: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
    let m = p.len();
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let mut loss = 0.0;
    for i in 0..m {
        let num = (dot(&p[i], &pos[i]) / tau).exp();
        let mut den = 0.0;
        for j in 0..m {
            if j != i {
                den += (dot(&p[i], &p[j]) / tau).exp();
            }
        }
        if include_positive {
            den += num;
        }
        loss += -(num / den).ln();
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twopass_matches_hand_values() {
        let (mean, var) = mean_var_twopass(&[&[0.0, 0.0], &[2.0, 0.0], &[4.0, 0.0]]);
        assert_eq!(mean, vec![2.0, 0.0]);
        assert!((var[0] - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(var[1], 0.0);
    }

    #[test]
    fn softmax_f64_normalizes() {
        let p = softmax_f64(&[1.0, 2.0, 3.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
