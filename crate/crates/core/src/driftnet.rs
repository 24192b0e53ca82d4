//! Drift-only latent diffusion: the alpha-blend, the drift network, and the
//! deterministic sampler that walks a start state to the data manifold in T
//! uniform steps. A stochastic variant exists solely for the
//! noise-injection study.

use crate::diffcore::{Act, GradTape, MlpNet, Tensor2, ValueId};
use crate::error::{DvdError, Result};
use crate::rng::SeedStream;

/// Sinusoidal embedding of the blend scalar: sin/cos of (2^i * pi * alpha)
/// for i in 0..freqs, concatenated to the latent before the drift net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedSpec {
    pub freqs: u8,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        EmbedSpec { freqs: 4 }
    }
}

impl EmbedSpec {
    pub fn width(&self) -> usize {
        2 * self.freqs as usize
    }

    pub fn embed(&self, alpha: f32) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.width());
        for i in 0..self.freqs {
            let w = (1u32 << i) as f32 * std::f32::consts::PI * alpha;
            out.push(w.sin());
            out.push(w.cos());
        }
        out
    }
}

/// A latent caught mid-blend: z_alpha = (1 - alpha) z0 + alpha z1.
#[derive(Debug, Clone)]
pub struct BlendState {
    pub z_alpha: Vec<f32>,
    pub alpha: f32,
}

pub fn blend(z0: &[f32], z1: &[f32], alpha: f32) -> Result<BlendState> {
    if z0.len() != z1.len() {
        return Err(DvdError::Shape(format!(
            "blend over lengths {} and {}",
            z0.len(),
            z1.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DvdError::Parameter(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    let z_alpha = z0
        .iter()
        .zip(z1)
        .map(|(&a, &b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    Ok(BlendState { z_alpha, alpha })
}

/// Anything that can evaluate a drift field over a batch of blend states.
/// The trained model implements it; tests substitute analytic fields.
pub trait DriftField {
    fn dim(&self) -> usize;
    /// One drift vector per row of `states`; `alphas[i]` conditions row i.
    fn eval_batch(&self, states: &Tensor2, alphas: &[f32]) -> Result<Tensor2>;
}

/// The learned drift function: an MLP over (latent ++ alpha embedding),
/// predicting the transport vector. The step count it was trained with is
/// part of the model and travels with it through checkpoints.
#[derive(Debug)]
pub struct DriftModel {
    net: MlpNet,
    embed: EmbedSpec,
    dim: usize,
    t_steps: usize,
}

impl DriftModel {
    pub fn new(
        dim: usize,
        hidden: &[usize],
        t_steps: usize,
        rng: &mut SeedStream,
    ) -> Result<Self> {
        if t_steps == 0 {
            return Err(DvdError::Parameter("step count T must be >= 1".into()));
        }
        let embed = EmbedSpec::default();
        let mut widths = vec![dim + embed.width()];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut acts = vec![Act::Relu; hidden.len()];
        acts.push(Act::Identity);
        let net = MlpNet::new(&widths, &acts, rng)?;
        Ok(DriftModel {
            net,
            embed,
            dim,
            t_steps,
        })
    }

    /// A drift model whose field is identically zero: sampling returns the
    /// start state unchanged. Degenerate baseline, also handy in tests.
    pub fn zero_field(dim: usize, t_steps: usize, rng: &mut SeedStream) -> Result<Self> {
        let mut model = DriftModel::new(dim, &[4], t_steps, rng)?;
        for layer in model.net.layers_mut_unchecked() {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
            for v in layer.bias.data_mut() {
                *v = 0.0;
            }
        }
        Ok(model)
    }

    pub fn from_parts(net: MlpNet, embed: EmbedSpec, t_steps: usize) -> Result<Self> {
        if t_steps == 0 {
            return Err(DvdError::Parameter("step count T must be >= 1".into()));
        }
        if net.input_width() <= embed.width() {
            return Err(DvdError::Shape(format!(
                "drift net input {} cannot fit a {}-wide embedding",
                net.input_width(),
                embed.width()
            )));
        }
        let dim = net.input_width() - embed.width();
        if net.output_width() != dim {
            return Err(DvdError::Shape(format!(
                "drift net output {} must match latent dimension {}",
                net.output_width(),
                dim
            )));
        }
        Ok(DriftModel {
            net,
            embed,
            dim,
            t_steps,
        })
    }

    pub fn net(&self) -> &MlpNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpNet {
        &mut self.net
    }

    pub fn embed_spec(&self) -> EmbedSpec {
        self.embed
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn freeze(&mut self) {
        self.net.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.net.is_frozen()
    }

    /// Evaluate the drift at a single blend state.
    pub fn drift_eval(&self, state: &BlendState) -> Result<Vec<f32>> {
        if state.z_alpha.len() != self.dim {
            return Err(DvdError::Shape(format!(
                "state dimension {} does not match model {}",
                state.z_alpha.len(),
                self.dim
            )));
        }
        let mut row = state.z_alpha.clone();
        row.extend(self.embed.embed(state.alpha));
        self.net.forward_row(&row)
    }

    /// Deterministic sampling from this model's own schedule (or an
    /// override, for schedule-mismatch studies).
    pub fn sample(&self, z0: &[f32], t_override: Option<usize>) -> Result<Vec<f32>> {
        sample_drift(self, z0, t_override.unwrap_or(self.t_steps))
    }

    pub fn sample_batch(&self, z0s: &Tensor2, t_override: Option<usize>) -> Result<Tensor2> {
        sample_drift_batch(self, z0s, t_override.unwrap_or(self.t_steps))
    }

    /// Record the full sampling chain on a tape so a loss on the endpoint
    /// back-propagates through every drift application.
    pub fn sample_on_tape(
        &self,
        tape: &mut GradTape,
        z0: ValueId,
        t_steps: usize,
    ) -> Result<ValueId> {
        let rows = tape.value(z0).rows();
        let mut z = z0;
        for t in 0..t_steps {
            let (a_t, a_next) = step_alphas(t, t_steps);
            let emb_row = self.embed.embed(a_t);
            let mut emb = Tensor2::zeros(rows, emb_row.len());
            for r in 0..rows {
                emb.data_mut()[r * emb_row.len()..(r + 1) * emb_row.len()]
                    .copy_from_slice(&emb_row);
            }
            let emb_id = tape.constant(emb);
            let inp = tape.concat_cols(z, emb_id)?;
            let d = tape.forward(&self.net, inp)?;
            z = tape.axpy(z, a_next - a_t, d)?;
        }
        Ok(z)
    }
}

impl DriftField for DriftModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, states: &Tensor2, alphas: &[f32]) -> Result<Tensor2> {
        if states.cols() != self.dim {
            return Err(DvdError::Shape(format!(
                "state dimension {} does not match model {}",
                states.cols(),
                self.dim
            )));
        }
        if alphas.len() != states.rows() {
            return Err(DvdError::Shape(format!(
                "{} alphas for {} states",
                alphas.len(),
                states.rows()
            )));
        }
        let e = self.embed.width();
        let mut input = Tensor2::zeros(states.rows(), self.dim + e);
        for r in 0..states.rows() {
            let dst = &mut input.data_mut()[r * (self.dim + e)..(r + 1) * (self.dim + e)];
            dst[..self.dim].copy_from_slice(states.row(r));
            dst[self.dim..].copy_from_slice(&self.embed.embed(alphas[r]));
        }
        self.net.forward_eval(&input)
    }
}

fn step_alphas(t: usize, t_steps: usize) -> (f32, f32) {
    (
        t as f32 / t_steps as f32,
        (t + 1) as f32 / t_steps as f32,
    )
}

/// Walk z0 along the uniform schedule: z_{t+1} = z_t + (a_{t+1} - a_t) D(z_t, a_t).
pub fn sample_drift(field: &dyn DriftField, z0: &[f32], t_steps: usize) -> Result<Vec<f32>> {
    let start = Tensor2::row_vector(z0);
    let out = sample_drift_batch(field, &start, t_steps)?;
    Ok(out.row(0).to_vec())
}

pub fn sample_drift_batch(
    field: &dyn DriftField,
    z0s: &Tensor2,
    t_steps: usize,
) -> Result<Tensor2> {
    if t_steps == 0 {
        return Err(DvdError::Parameter("step count T must be >= 1".into()));
    }
    if z0s.cols() != field.dim() {
        return Err(DvdError::Shape(format!(
            "start dimension {} does not match field {}",
            z0s.cols(),
            field.dim()
        )));
    }
    let mut z = z0s.clone();
    let mut alphas = vec![0.0f32; z0s.rows()];
    for t in 0..t_steps {
        let (a_t, a_next) = step_alphas(t, t_steps);
        alphas.iter_mut().for_each(|a| *a = a_t);
        let d = field.eval_batch(&z, &alphas)?;
        let scale = a_next - a_t;
        for (zv, dv) in z.data_mut().iter_mut().zip(d.data()) {
            *zv += scale * dv;
        }
        if !z.is_finite() {
            return Err(DvdError::Numeric(format!(
                "non-finite latent at sampling step {t}"
            )));
        }
    }
    Ok(z)
}

/// Sampling with per-step Gaussian noise sigma_n * sqrt(a_{t+1} - a_t) * eps.
/// With sigma_n = 0 this is exactly the deterministic sampler.
pub fn sample_drift_stochastic(
    field: &dyn DriftField,
    z0: &[f32],
    t_steps: usize,
    noise_scale: f32,
    rng: &mut SeedStream,
) -> Result<Vec<f32>> {
    let start = Tensor2::row_vector(z0);
    let out = sample_drift_stochastic_batch(field, &start, t_steps, noise_scale, rng)?;
    Ok(out.row(0).to_vec())
}

pub fn sample_drift_stochastic_batch(
    field: &dyn DriftField,
    z0s: &Tensor2,
    t_steps: usize,
    noise_scale: f32,
    rng: &mut SeedStream,
) -> Result<Tensor2> {
    if noise_scale < 0.0 {
        return Err(DvdError::Parameter(format!(
            "noise scale {noise_scale} must be >= 0"
        )));
    }
    if t_steps == 0 {
        return Err(DvdError::Parameter("step count T must be >= 1".into()));
    }
    if z0s.cols() != field.dim() {
        return Err(DvdError::Shape(format!(
            "start dimension {} does not match field {}",
            z0s.cols(),
            field.dim()
        )));
    }
    let mut z = z0s.clone();
    let mut alphas = vec![0.0f32; z0s.rows()];
    for t in 0..t_steps {
        let (a_t, a_next) = step_alphas(t, t_steps);
        alphas.iter_mut().for_each(|a| *a = a_t);
        let d = field.eval_batch(&z, &alphas)?;
        let scale = a_next - a_t;
        let noise = noise_scale * scale.sqrt();
        for (zv, dv) in z.data_mut().iter_mut().zip(d.data()) {
            *zv += scale * dv;
            if noise > 0.0 {
                *zv += noise * rng.normal();
            }
        }
        if !z.is_finite() {
            return Err(DvdError::Numeric(format!(
                "non-finite latent at sampling step {t}"
            )));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Analytic field that always points from z0 to z1.
    struct ConstantField(Vec<f32>);

    impl DriftField for ConstantField {
        fn dim(&self) -> usize {
            self.0.len()
        }

        fn eval_batch(&self, states: &Tensor2, _alphas: &[f32]) -> Result<Tensor2> {
            let mut out = Tensor2::zeros(states.rows(), self.0.len());
            for r in 0..states.rows() {
                out.data_mut()[r * self.0.len()..(r + 1) * self.0.len()]
                    .copy_from_slice(&self.0);
            }
            Ok(out)
        }
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let z0 = [0.0, 0.0];
        let z1 = [2.0, 4.0];
        assert_eq!(blend(&z0, &z1, 0.0).unwrap().z_alpha, vec![0.0, 0.0]);
        assert_eq!(blend(&z0, &z1, 1.0).unwrap().z_alpha, vec![2.0, 4.0]);
        assert_eq!(blend(&z0, &z1, 0.25).unwrap().z_alpha, vec![0.5, 1.0]);
    }

    #[test]
    fn blend_rejects_alpha_outside_unit_interval() {
        assert!(matches!(
            blend(&[0.0], &[1.0], 1.5),
            Err(DvdError::Parameter(_))
        ));
        assert!(blend(&[0.0], &[1.0], -0.1).is_err());
    }

    #[test]
    fn zero_weight_net_drifts_nowhere() {
        let mut rng = SeedStream::from_seed(0);
        let mut model = DriftModel::new(3, &[8], 4, &mut rng).unwrap();
        for layer in model.net_mut().layers_mut_unchecked() {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
        }
        let out = model
            .drift_eval(&blend(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], 0.5).unwrap())
            .unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);
        let sampled = model.sample(&[1.0, 2.0, 3.0], None).unwrap();
        assert_eq!(sampled, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn drift_eval_deterministic() {
        let mut rng = SeedStream::from_seed(9);
        let model = DriftModel::new(2, &[16], 8, &mut rng).unwrap();
        let state = blend(&[0.3, -0.7], &[1.0, 1.0], 0.4).unwrap();
        assert_eq!(
            model.drift_eval(&state).unwrap(),
            model.drift_eval(&state).unwrap()
        );
    }

    #[test]
    fn constant_field_transports_exactly() {
        // D == (z1 - z0): the step sizes telescope to 1, landing on z1.
        for t_steps in [1usize, 3, 7, 16] {
            let field = ConstantField(vec![1.0]);
            let out = sample_drift(&field, &[0.0], t_steps).unwrap();
            assert!((out[0] - 1.0).abs() < 1e-5, "T={t_steps}: {}", out[0]);
        }
        // Constant drift c = [2] from z0 = [1] lands on [3].
        let field = ConstantField(vec![2.0]);
        let out = sample_drift(&field, &[1.0], 7).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn schedule_steps_sum_to_one_exactly() {
        for t_steps in 1usize..=100 {
            let mut sum = 0.0f64;
            for t in 0..t_steps {
                let (a_t, a_next) = step_alphas(t, t_steps);
                sum += a_next as f64 - a_t as f64;
            }
            assert_eq!(sum, 1.0, "T={t_steps}");
        }
    }

    #[test]
    fn stochastic_with_zero_noise_is_deterministic_sampler() {
        let mut rng = SeedStream::from_seed(4);
        let model = DriftModel::new(2, &[8], 6, &mut rng).unwrap();
        let z0 = [0.5, -0.5];
        let det = model.sample(&z0, None).unwrap();
        let mut noise_rng = SeedStream::from_seed(77);
        let sto = sample_drift_stochastic(&model, &z0, 6, 0.0, &mut noise_rng).unwrap();
        assert_eq!(det, sto);
    }

    #[test]
    fn stochastic_seeded_trajectory_reproducible() {
        let mut rng = SeedStream::from_seed(4);
        let model = DriftModel::new(2, &[8], 6, &mut rng).unwrap();
        let z0 = [0.5, -0.5];
        let a =
            sample_drift_stochastic(&model, &z0, 6, 0.1, &mut SeedStream::from_seed(5)).unwrap();
        let b =
            sample_drift_stochastic(&model, &z0, 6, 0.1, &mut SeedStream::from_seed(5)).unwrap();
        assert_eq!(a, b);
        let c =
            sample_drift_stochastic(&model, &z0, 6, 0.1, &mut SeedStream::from_seed(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn non_finite_intermediate_names_step() {
        struct ExplodingField;
        impl DriftField for ExplodingField {
            fn dim(&self) -> usize {
                1
            }
            fn eval_batch(&self, states: &Tensor2, _a: &[f32]) -> Result<Tensor2> {
                let mut out = Tensor2::zeros(states.rows(), 1);
                for v in out.data_mut() {
                    *v = f32::INFINITY;
                }
                Ok(out)
            }
        }
        let err = sample_drift(&ExplodingField, &[0.0], 4).unwrap_err();
        match err {
            DvdError::Numeric(msg) => assert!(msg.contains("step 0"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn blend_endpoints_exact(
            z0 in proptest::collection::vec(-5.0f32..5.0, 3),
            z1 in proptest::collection::vec(-5.0f32..5.0, 3),
        ) {
            prop_assert_eq!(blend(&z0, &z1, 0.0).unwrap().z_alpha, z0.clone());
            prop_assert_eq!(blend(&z0, &z1, 1.0).unwrap().z_alpha, z1.clone());
        }
    }
}
