//! Fully connected network with per-layer activations, momentum state and a
//! freeze flag. One type serves the encoders, the classifier head and the
//! drift network.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::diffcore::tensor::Tensor2;
use crate::error::{DvdError, Result};
use crate::rng::SeedStream;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Identity,
    /// Row-wise softmax applied at the head.
    Softmax,
}

impl Act {
    pub fn tag(self) -> u8 {
        match self {
            Act::Relu => 0,
            Act::Identity => 1,
            Act::Softmax => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Act::Relu),
            1 => Ok(Act::Identity),
            2 => Ok(Act::Softmax),
            _ => Err(DvdError::Data(format!("unknown activation tag {tag}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// `in_width x out_width`; a batch row is multiplied on the left.
    pub weight: Tensor2,
    /// `1 x out_width`.
    pub bias: Tensor2,
    pub act: Act,
}

#[derive(Debug)]
pub struct MlpNet {
    id: u64,
    layers: Vec<Layer>,
    /// (weight velocity, bias velocity) per layer, congruent to parameters.
    momentum: Vec<(Tensor2, Tensor2)>,
    frozen: bool,
}

impl MlpNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(widths: &[usize], acts: &[Act], rng: &mut SeedStream) -> Result<Self> {
        if widths.len() < 2 {
            return Err(DvdError::Parameter(
                "a network needs at least input and output widths".into(),
            ));
        }
        if acts.len() != widths.len() - 1 {
            return Err(DvdError::Parameter(format!(
                "{} activations for {} layers",
                acts.len(),
                widths.len() - 1
            )));
        }
        let mut layers = Vec::with_capacity(acts.len());
        let mut momentum = Vec::with_capacity(acts.len());
        for (i, &act) in acts.iter().enumerate() {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let mut w = Tensor2::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = rng.uniform(-bound, bound);
            }
            layers.push(Layer {
                weight: w,
                bias: Tensor2::zeros(1, fan_out),
                act,
            });
            momentum.push((Tensor2::zeros(fan_in, fan_out), Tensor2::zeros(1, fan_out)));
        }
        Ok(MlpNet {
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            layers,
            momentum,
            frozen: false,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, frozen: bool) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(DvdError::Shape(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].weight.cols(),
                    pair[1].weight.rows()
                )));
            }
        }
        let momentum = layers
            .iter()
            .map(|l| {
                (
                    Tensor2::zeros(l.weight.rows(), l.weight.cols()),
                    Tensor2::zeros(1, l.bias.cols()),
                )
            })
            .collect();
        Ok(MlpNet {
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            layers,
            momentum,
            frozen,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn momentum(&self) -> &[(Tensor2, Tensor2)] {
        &self.momentum
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.data().len())
            .sum()
    }

    /// Independent copy for fine-tuning: fresh identity, cleared momentum,
    /// unfrozen. Used to initialize the target encoder from the source one.
    pub fn fork(&self) -> MlpNet {
        let layers = self.layers.clone();
        let momentum = layers
            .iter()
            .map(|l| {
                (
                    Tensor2::zeros(l.weight.rows(), l.weight.cols()),
                    Tensor2::zeros(1, l.bias.cols()),
                )
            })
            .collect();
        MlpNet {
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            layers,
            momentum,
            frozen: false,
        }
    }

    /// Plain inference pass without gradient recording.
    pub fn forward_eval(&self, batch: &Tensor2) -> Result<Tensor2> {
        if batch.cols() != self.input_width() {
            return Err(DvdError::Shape(format!(
                "batch width {} does not match net input {}",
                batch.cols(),
                self.input_width()
            )));
        }
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut z = x.matmul(&layer.weight)?;
            add_bias(&mut z, &layer.bias);
            apply_act(&mut z, layer.act);
            x = z;
        }
        Ok(x)
    }

    pub fn forward_row(&self, row: &[f32]) -> Result<Vec<f32>> {
        Ok(self
            .forward_eval(&Tensor2::row_vector(row))?
            .data()
            .to_vec())
    }

    /// Little-endian bytes of every parameter, in layer order. Two nets with
    /// equal bytes are bit-identical.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 4);
        for l in &self.layers {
            for v in l.weight.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in l.bias.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Per-layer (weights, biases) widened to f64, for finite-difference
    /// oracles.
    pub fn params_f64(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    l.weight.data().iter().map(|&v| v as f64).collect(),
                    l.bias.data().iter().map(|&v| v as f64).collect(),
                )
            })
            .collect()
    }

    pub(crate) fn layers_mut_unchecked(&mut self) -> &mut Vec<Layer> {
        &mut self.layers
    }

    pub(crate) fn momentum_mut(&mut self) -> &mut Vec<(Tensor2, Tensor2)> {
        &mut self.momentum
    }
}

pub(crate) fn add_bias(z: &mut Tensor2, bias: &Tensor2) {
    let cols = z.cols();
    debug_assert_eq!(bias.cols(), cols);
    let b = bias.data();
    for r in 0..z.rows() {
        let row = &mut z.data_mut()[r * cols..(r + 1) * cols];
        for (v, bv) in row.iter_mut().zip(b.iter()) {
            *v += bv;
        }
    }
}

pub(crate) fn apply_act(z: &mut Tensor2, act: Act) {
    match act {
        Act::Identity => {}
        Act::Relu => {
            for v in z.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Act::Softmax => softmax_rows_inplace(z),
    }
}

/// Max-subtracted softmax with f64 accumulation, applied per row.
pub(crate) fn softmax_rows_inplace(z: &mut Tensor2) {
    let cols = z.cols();
    for r in 0..z.rows() {
        let row = &mut z.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = ((*v - max) as f64).exp();
            *v = e as f32;
            sum += e;
        }
        let inv = (1.0 / sum) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net(dim: usize, act: Act) -> MlpNet {
        let mut w = Tensor2::zeros(dim, dim);
        for i in 0..dim {
            w.set(i, i, 1.0);
        }
        MlpNet::from_layers(
            vec![Layer {
                weight: w,
                bias: Tensor2::zeros(1, dim),
                act,
            }],
            false,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = identity_net(2, Act::Identity);
        let out = net.forward_row(&[1.0, 2.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = identity_net(2, Act::Relu);
        let out = net.forward_row(&[-1.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 3.0]);
    }

    #[test]
    fn softmax_head_rows_sum_to_one_and_positive() {
        let mut rng = SeedStream::from_seed(5);
        let net = MlpNet::new(&[3, 4], &[Act::Softmax], &mut rng).unwrap();
        let batch = Tensor2::from_vec(2, 3, vec![0.3, -2.0, 5.0, 1.0, 1.0, 1.0]).unwrap();
        let out = net.forward_eval(&batch).unwrap();
        for r in 0..2 {
            let s: f64 = out.row(r).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(out.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn forward_shape_error() {
        let net = identity_net(2, Act::Identity);
        let bad = Tensor2::zeros(1, 3);
        assert!(matches!(net.forward_eval(&bad), Err(DvdError::Shape(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = SeedStream::from_seed(11);
        let net = MlpNet::new(&[4, 8, 3], &[Act::Relu, Act::Identity], &mut rng).unwrap();
        let batch = Tensor2::from_vec(2, 4, vec![0.1; 8]).unwrap();
        let a = net.forward_eval(&batch).unwrap();
        let b = net.forward_eval(&batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fork_clears_momentum_and_unfreezes() {
        let mut rng = SeedStream::from_seed(2);
        let mut net = MlpNet::new(&[2, 2], &[Act::Identity], &mut rng).unwrap();
        net.freeze();
        let copy = net.fork();
        assert!(!copy.is_frozen());
        assert_ne!(copy.id(), net.id());
        assert_eq!(copy.param_bytes(), net.param_bytes());
    }
}
