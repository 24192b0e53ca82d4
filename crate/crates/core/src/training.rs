//! Source-side pipelines: classifier pre-training, and drift training that
//! stores the source label structure in the diffusion module. After this
//! stage the source data is never needed again.

use crate::diffcore::{sgd_step, Act, GradTape, MlpNet, Tensor2};
use crate::driftnet::{DriftField, DriftModel};
use crate::error::{DvdError, Result};
use crate::featurebank::{draw_start_state, EncoderContext, FeatureBank, PriorMode};
use crate::rng::SeedStream;

#[derive(Debug, Clone)]
pub struct SourceTrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Hidden widths of the encoder; the latent comes last.
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub class_count: usize,
}

impl SourceTrainConfig {
    pub fn defaults(class_count: usize, seed: u64) -> Self {
        SourceTrainConfig {
            lr: 3e-3,
            momentum: 0.9,
            batch_size: 128,
            epochs: 60,
            seed,
            encoder_hidden: vec![64],
            latent_dim: 16,
            class_count,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(DvdError::Parameter("bad lr/momentum".into()));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(DvdError::Parameter(format!(
                "batch size {} outside 1..={n}",
                self.batch_size
            )));
        }
        if self.class_count == 0 || self.latent_dim == 0 {
            return Err(DvdError::Parameter("class count and latent dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub accuracy: f64,
}

/// Encoder: relu hidden layers, identity latent output.
pub fn build_encoder(
    input_dim: usize,
    hidden: &[usize],
    latent_dim: usize,
    rng: &mut SeedStream,
) -> Result<MlpNet> {
    let mut widths = vec![input_dim];
    widths.extend_from_slice(hidden);
    widths.push(latent_dim);
    let mut acts = vec![Act::Relu; hidden.len()];
    acts.push(Act::Identity);
    MlpNet::new(&widths, &acts, rng)
}

/// Two-layer classification head emitting logits.
pub fn build_head(latent_dim: usize, classes: usize, rng: &mut SeedStream) -> Result<MlpNet> {
    MlpNet::new(&[latent_dim, 32, classes], &[Act::Relu, Act::Identity], rng)
}

/// Argmax class of head(encoder(x)) per row.
pub fn classify(encoder: &MlpNet, head: &MlpNet, features: &Tensor2) -> Result<Vec<u32>> {
    let logits = head.forward_eval(&encoder.forward_eval(features)?)?;
    Ok(argmax_rows(&logits))
}

pub fn argmax_rows(logits: &Tensor2) -> Vec<u32> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

pub fn accuracy(pred: &[u32], labels: &[u32]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Train encoder + head with cross-entropy. With zero epochs the freshly
/// initialized nets come back untrained.
pub fn train_source_classifier(
    features: &Tensor2,
    labels: &[u32],
    cfg: &SourceTrainConfig,
) -> Result<(MlpNet, MlpNet, Vec<SourceEpoch>)> {
    let n = features.rows();
    if labels.len() != n {
        return Err(DvdError::Data(format!("{} labels for {} features", labels.len(), n)));
    }
    cfg.validate(n)?;
    for &l in labels {
        if l as usize >= cfg.class_count {
            return Err(DvdError::Data(format!(
                "label {l} out of range for {} classes",
                cfg.class_count
            )));
        }
    }
    let mut init_rng = SeedStream::derive(cfg.seed, "source-init");
    let mut encoder = build_encoder(
        features.cols(),
        &cfg.encoder_hidden,
        cfg.latent_dim,
        &mut init_rng,
    )?;
    let mut head = build_head(cfg.latent_dim, cfg.class_count, &mut init_rng)?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_rng = SeedStream::derive(cfg.seed, "source-epochs");
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        epoch_rng.shuffle(&mut order);
        let mut ce_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| features.row(i)).collect();
            let batch = Tensor2::from_rows(&rows)?;
            let batch_labels: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();

            let mut tape = GradTape::new();
            let x = tape.constant(batch);
            let z = tape.forward(&encoder, x)?;
            let logits = tape.forward(&head, z)?;
            let (loss, value) = tape.softmax_ce(logits, &batch_labels)?;
            if !value.is_finite() {
                return Err(DvdError::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            tape.backward_scalar(loss)?;
            let g_enc = tape.net_grads(&encoder)?;
            let g_head = tape.net_grads(&head)?;
            sgd_step(&mut encoder, &g_enc, cfg.lr, cfg.momentum)?;
            sgd_step(&mut head, &g_head, cfg.lr, cfg.momentum)?;
            ce_sum += value;
            batches += 1;
        }
        let pred = classify(&encoder, &head, features)?;
        history.push(SourceEpoch {
            epoch,
            ce: ce_sum / batches.max(1) as f64,
            accuracy: accuracy(&pred, labels),
        });
    }
    Ok((encoder, head, history))
}

// ── diffusion losses ────────────────────────────────────────────────

/// Squared transport-prediction error at one blend scalar, averaged over the
/// batch: mean_i || D(z_alpha_i, alpha) - (z1_i - z0_i) ||^2.
pub fn dvd_loss(model: &DriftModel, z0: &Tensor2, z1: &Tensor2, alpha: f32) -> Result<f64> {
    if z0.rows() != z1.rows() || z0.cols() != z1.cols() {
        return Err(DvdError::Shape("z0/z1 batch shapes differ".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DvdError::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    let n = z0.rows();
    let mut states = Tensor2::zeros(n, z0.cols());
    for r in 0..n {
        for c in 0..z0.cols() {
            states.set(r, c, (1.0 - alpha) * z0.get(r, c) + alpha * z1.get(r, c));
        }
    }
    let pred = model.eval_batch(&states, &vec![alpha; n])?;
    let mut total = 0.0f64;
    for r in 0..n {
        for c in 0..z0.cols() {
            let diff = pred.get(r, c) as f64 - (z1.get(r, c) as f64 - z0.get(r, c) as f64);
            total += diff * diff;
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(DvdError::Numeric("non-finite drift loss".into()));
    }
    Ok(loss)
}

/// Mean cross-entropy of softmax(head(z)) against labels; the
/// differentiable stand-in for the misclassification count.
pub fn ce_loss(head: &MlpNet, z: &Tensor2, labels: &[u32]) -> Result<f64> {
    if labels.len() != z.rows() {
        return Err(DvdError::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            z.rows()
        )));
    }
    let logits = head.forward_eval(z)?;
    let classes = logits.cols();
    let mut total = 0.0f64;
    for (r, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(DvdError::Data(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
        total += -(row[l as usize] as f64 - max - sum.ln());
    }
    let loss = total / labels.len() as f64;
    if !loss.is_finite() {
        return Err(DvdError::Numeric("non-finite cross-entropy".into()));
    }
    Ok(loss)
}

// ── drift training ──────────────────────────────────────────────────

/// How the blend scalar is chosen while training the drift net.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// Every discrete schedule state t/T, t = 0..=T, per pair per epoch.
    DiscreteLoop,
    /// One uniform draw from [0, 1] per pair per epoch.
    UniformSample,
}

#[derive(Debug, Clone)]
pub struct DvdTrainConfig {
    pub k_s_dif: usize,
    pub epochs: usize,
    /// Weight of the classification term; the transport term has weight 1.
    pub ce_weight: f32,
    pub alpha_mode: AlphaMode,
    pub seed: u64,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub t_steps: usize,
    pub drift_hidden: Vec<usize>,
    pub prior_mode: PriorMode,
}

impl DvdTrainConfig {
    pub fn defaults(seed: u64) -> Self {
        DvdTrainConfig {
            k_s_dif: 15,
            epochs: 10,
            ce_weight: 1.0,
            alpha_mode: AlphaMode::DiscreteLoop,
            seed,
            lr: 3e-3,
            momentum: 0.9,
            batch_size: 128,
            t_steps: 16,
            drift_hidden: vec![256, 256],
            prior_mode: PriorMode::Vicinity,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k_s_dif == 0 {
            return Err(DvdError::Parameter("k_s_dif must be >= 1".into()));
        }
        if !self.ce_weight.is_finite() || self.ce_weight < 0.0 {
            return Err(DvdError::Parameter(format!(
                "ce weight {} must be finite and >= 0",
                self.ce_weight
            )));
        }
        if self.t_steps == 0 || self.batch_size == 0 {
            return Err(DvdError::Parameter("t_steps and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DvdEpoch {
    pub epoch: usize,
    pub l_dif: f64,
    pub l_ce: f64,
    pub drifted_accuracy: f64,
}

/// Raw-input context for the input-noise prior variant.
pub struct DvdTrainContext<'a> {
    pub encoder: &'a MlpNet,
    pub raw_inputs: &'a Tensor2,
}

/// Train the drift net on the source bank: for every source latent, fit the
/// vicinity prior of its k nearest neighbors (itself excluded), sample a
/// start state, and regress the drift toward the transport vector while the
/// frozen head classifies the sampled endpoint. Returns the trained model,
/// frozen, ready to ship. The head is never mutated.
pub fn train_dvd(
    bank: &FeatureBank,
    labels: &[u32],
    head: &MlpNet,
    cfg: &DvdTrainConfig,
    ctx: Option<&DvdTrainContext<'_>>,
) -> Result<(DriftModel, Vec<DvdEpoch>)> {
    if !head.is_frozen() {
        return Err(DvdError::Contract(
            "drift training requires a frozen classification head".into(),
        ));
    }
    if labels.len() != bank.len() {
        return Err(DvdError::Data(format!(
            "{} labels for a bank of {}",
            labels.len(),
            bank.len()
        )));
    }
    cfg.validate()?;
    if bank.len() <= cfg.k_s_dif {
        return Err(DvdError::Parameter(format!(
            "bank of {} cannot serve k_s_dif = {} with self-exclusion",
            bank.len(),
            cfg.k_s_dif
        )));
    }
    if matches!(cfg.prior_mode, PriorMode::InputNoise { .. }) && ctx.is_none() {
        return Err(DvdError::Parameter(
            "input-noise prior needs the encoder context".into(),
        ));
    }

    let mut init_rng = SeedStream::derive(cfg.seed, "drift-init");
    let mut model = DriftModel::new(bank.dim(), &cfg.drift_hidden, cfg.t_steps, &mut init_rng)?;
    let mut rng = SeedStream::derive(cfg.seed, "drift-epochs");

    let n = bank.len();
    let d = bank.dim();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut dif_sum = 0.0f64;
        let mut ce_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut z0 = Tensor2::zeros(b, d);
            let mut z1 = Tensor2::zeros(b, d);
            let mut batch_labels = Vec::with_capacity(b);
            for (r, &i) in chunk.iter().enumerate() {
                let query = bank.entry(i);
                let enc_ctx = ctx.map(|c| EncoderContext {
                    encoder: c.encoder,
                    raw_input: c.raw_inputs.row(i),
                });
                let start = draw_start_state(
                    cfg.prior_mode,
                    bank,
                    query,
                    cfg.k_s_dif,
                    Some(i),
                    enc_ctx.as_ref(),
                    &mut rng,
                )?;
                z0.data_mut()[r * d..(r + 1) * d].copy_from_slice(&start);
                z1.data_mut()[r * d..(r + 1) * d].copy_from_slice(query);
                batch_labels.push(labels[i]);
            }

            let alphas: Vec<f32> = match cfg.alpha_mode {
                AlphaMode::DiscreteLoop => {
                    (0..=cfg.t_steps).map(|t| t as f32 / cfg.t_steps as f32).collect()
                }
                AlphaMode::UniformSample => vec![rng.uniform(0.0, 1.0)],
            };

            let mut tape = GradTape::new();
            // Transport regression over every (pair, alpha) combination.
            let states = drift_inputs(&model, &z0, &z1, &alphas);
            let states_id = tape.constant(states);
            let pred = tape.forward(model.net(), states_id)?;
            let targets = transport_targets(&z0, &z1, alphas.len());
            let targets_id = tape.constant(targets);
            let diff = tape.sub(pred, targets_id)?;
            let sq = tape.mul(diff, diff)?;
            let (sum, sum_val) = tape.sum_all(sq);
            let denom = (b * alphas.len()) as f32;
            let l_dif = tape.scale(sum, 1.0 / denom);
            let l_dif_val = sum_val / denom as f64;

            // Classification of the sampled endpoint by the frozen head.
            let z0_id = tape.constant(z0.clone());
            let z_hat = model.sample_on_tape(&mut tape, z0_id, cfg.t_steps)?;
            let logits = tape.forward(head, z_hat)?;
            let (l_ce, l_ce_val) = tape.softmax_ce(logits, &batch_labels)?;

            if !l_dif_val.is_finite() || !l_ce_val.is_finite() {
                return Err(DvdError::Numeric(format!(
                    "non-finite drift-training loss at epoch {epoch}"
                )));
            }
            let weighted_ce = tape.scale(l_ce, cfg.ce_weight);
            let total = tape.add(l_dif, weighted_ce)?;
            tape.backward_scalar(total)?;
            let grads = tape.net_grads(model.net())?;
            sgd_step(model.net_mut(), &grads, cfg.lr, cfg.momentum)?;

            dif_sum += l_dif_val;
            ce_sum += l_ce_val;
            batches += 1;
        }

        let drifted_accuracy =
            drifted_accuracy(&model, bank, labels, head, cfg, ctx, &mut rng.split())?;
        history.push(DvdEpoch {
            epoch,
            l_dif: dif_sum / batches.max(1) as f64,
            l_ce: ce_sum / batches.max(1) as f64,
            drifted_accuracy,
        });
    }
    model.freeze();
    Ok((model, history))
}

/// Fraction of bank entries whose freshly sampled, drift-transported prior
/// sample the head classifies to the entry's own label.
pub fn drifted_accuracy(
    model: &DriftModel,
    bank: &FeatureBank,
    labels: &[u32],
    head: &MlpNet,
    cfg: &DvdTrainConfig,
    ctx: Option<&DvdTrainContext<'_>>,
    rng: &mut SeedStream,
) -> Result<f64> {
    let (n, d) = (bank.len(), bank.dim());
    let mut z0 = Tensor2::zeros(n, d);
    for i in 0..n {
        let enc_ctx = ctx.map(|c| EncoderContext {
            encoder: c.encoder,
            raw_input: c.raw_inputs.row(i),
        });
        let start = draw_start_state(
            cfg.prior_mode,
            bank,
            bank.entry(i),
            cfg.k_s_dif,
            Some(i),
            enc_ctx.as_ref(),
            rng,
        )?;
        z0.data_mut()[i * d..(i + 1) * d].copy_from_slice(&start);
    }
    let z_hat = model.sample_batch(&z0, None)?;
    let pred = argmax_rows(&head.forward_eval(&z_hat)?);
    Ok(accuracy(&pred, labels))
}

/// Stack the drift-net inputs for every (pair, alpha): the blend state
/// concatenated with the alpha embedding. Row-major, pair-major.
fn drift_inputs(model: &DriftModel, z0: &Tensor2, z1: &Tensor2, alphas: &[f32]) -> Tensor2 {
    let (b, d) = (z0.rows(), z0.cols());
    let e = model.embed_spec().width();
    let mut out = Tensor2::zeros(b * alphas.len(), d + e);
    for (ai, &alpha) in alphas.iter().enumerate() {
        let emb = model.embed_spec().embed(alpha);
        for r in 0..b {
            let row = ai * b + r;
            let dst = &mut out.data_mut()[row * (d + e)..(row + 1) * (d + e)];
            for c in 0..d {
                dst[c] = (1.0 - alpha) * z0.get(r, c) + alpha * z1.get(r, c);
            }
            dst[d..].copy_from_slice(&emb);
        }
    }
    out
}

/// (z1 - z0), repeated once per alpha in the same row order as
/// `drift_inputs`.
fn transport_targets(z0: &Tensor2, z1: &Tensor2, n_alphas: usize) -> Tensor2 {
    let (b, d) = (z0.rows(), z0.cols());
    let mut out = Tensor2::zeros(b * n_alphas, d);
    for ai in 0..n_alphas {
        for r in 0..b {
            let row = ai * b + r;
            for c in 0..d {
                out.set(row, c, z1.get(r, c) - z0.get(r, c));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurebank::DomainTag;
    use crate::oracle;

    #[test]
    fn ce_loss_uniform_logits_is_ln_c() {
        let mut rng = SeedStream::from_seed(1);
        let mut head = MlpNet::new(&[3, 4], &[Act::Identity], &mut rng).unwrap();
        for layer in head.layers_mut_unchecked() {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
        }
        let z = Tensor2::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let loss = ce_loss(&head, &z, &[2]).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_loss_saturated_logit_goes_to_zero() {
        let mut rng = SeedStream::from_seed(1);
        let mut head = MlpNet::new(&[2, 2], &[Act::Identity], &mut rng).unwrap();
        for layer in head.layers_mut_unchecked() {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
            layer.bias.set(0, 0, 50.0);
            layer.bias.set(0, 1, -50.0);
        }
        let z = Tensor2::from_rows(&[&[0.0, 0.0]]).unwrap();
        let loss = ce_loss(&head, &z, &[0]).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn ce_loss_matches_straight_line_oracle() {
        let mut rng = SeedStream::from_seed(6);
        let head = MlpNet::new(&[4, 8, 3], &[Act::Relu, Act::Identity], &mut rng).unwrap();
        let mut data = Vec::new();
        for _ in 0..5 * 4 {
            data.push(rng.uniform(-1.0, 1.0));
        }
        let z = Tensor2::from_vec(5, 4, data).unwrap();
        let labels = [0u32, 2, 1, 0, 2];
        let got = ce_loss(&head, &z, &labels).unwrap();

        let logits = head.forward_eval(&z).unwrap();
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|r| logits.row(r).iter().map(|&v| v as f64).collect())
            .collect();
        let want = oracle::softmax_ce_f64(&rows, &labels);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn ce_loss_label_out_of_range() {
        let mut rng = SeedStream::from_seed(1);
        let head = MlpNet::new(&[2, 2], &[Act::Identity], &mut rng).unwrap();
        let z = Tensor2::from_rows(&[&[0.0, 0.0]]).unwrap();
        assert!(matches!(ce_loss(&head, &z, &[5]), Err(DvdError::Data(_))));
    }

    #[test]
    fn dvd_loss_perfect_drift_is_zero_and_zero_drift_is_norm() {
        let mut rng = SeedStream::from_seed(2);
        let mut model = DriftModel::new(2, &[4], 4, &mut rng).unwrap();
        for layer in model.net_mut().layers_mut_unchecked() {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
        }
        let z0 = Tensor2::from_rows(&[&[0.0, 0.0]]).unwrap();
        let z1 = Tensor2::from_rows(&[&[3.0, 4.0]]).unwrap();
        // Zero net: prediction 0, residual (z1 - z0) has squared norm 25.
        let loss = dvd_loss(&model, &z0, &z1, 0.5).unwrap();
        assert!((loss - 25.0).abs() < 1e-5);

        // Bias exactly (z1 - z0): perfect drift, zero loss.
        let last = model.net_mut().layers_mut_unchecked().last_mut().unwrap();
        last.bias.set(0, 0, 3.0);
        last.bias.set(0, 1, 4.0);
        let loss = dvd_loss(&model, &z0, &z1, 0.5).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn dvd_loss_matches_straight_line_oracle() {
        let mut rng = SeedStream::from_seed(3);
        let model = DriftModel::new(3, &[8], 4, &mut rng).unwrap();
        let mut mk = |n: usize| {
            let mut data = Vec::new();
            for _ in 0..n * 3 {
                data.push(rng.uniform(-1.0, 1.0));
            }
            Tensor2::from_vec(n, 3, data).unwrap()
        };
        let z0 = mk(4);
        let z1 = mk(4);
        let alpha = 0.37;
        let got = dvd_loss(&model, &z0, &z1, alpha).unwrap();

        let mut states = Tensor2::zeros(4, 3);
        for r in 0..4 {
            for c in 0..3 {
                states.set(r, c, (1.0 - alpha) * z0.get(r, c) + alpha * z1.get(r, c));
            }
        }
        let pred = model.eval_batch(&states, &[alpha; 4]).unwrap();
        let pred_rows: Vec<Vec<f64>> = (0..4)
            .map(|r| pred.row(r).iter().map(|&v| v as f64).collect())
            .collect();
        let target_rows: Vec<Vec<f64>> = (0..4)
            .map(|r| {
                (0..3)
                    .map(|c| z1.get(r, c) as f64 - z0.get(r, c) as f64)
                    .collect()
            })
            .collect();
        let want = oracle::drift_mse_f64(&pred_rows, &target_rows);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn dvd_loss_alpha_range_checked() {
        let mut rng = SeedStream::from_seed(3);
        let model = DriftModel::new(1, &[4], 4, &mut rng).unwrap();
        let z = Tensor2::from_rows(&[&[1.0]]).unwrap();
        assert!(matches!(
            dvd_loss(&model, &z, &z, 1.5),
            Err(DvdError::Parameter(_))
        ));
    }

    fn blob_data(seed: u64) -> (Tensor2, Vec<u32>) {
        // Two well-separated 2-D blobs.
        let mut rng = SeedStream::from_seed(seed);
        let n = 80;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { [2.0, 2.0] } else { [-2.0, -2.0] };
            data.push(center[0] + 0.4 * rng.normal());
            data.push(center[1] + 0.4 * rng.normal());
            labels.push(c as u32);
        }
        (Tensor2::from_vec(n, 2, data).unwrap(), labels)
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let (feats, labels) = blob_data(11);

        // Independent check that the data is linearly separable: a tiny
        // f64 logistic regression must reach >= 0.99 as well.
        let lr_acc = logistic_oracle(&feats, &labels);
        assert!(lr_acc >= 0.99, "logistic oracle accuracy {lr_acc}");

        let mut cfg = SourceTrainConfig::defaults(2, 5);
        cfg.batch_size = 16;
        cfg.epochs = 40;
        cfg.encoder_hidden = vec![16];
        cfg.latent_dim = 8;
        let (enc, head, hist) = train_source_classifier(&feats, &labels, &cfg).unwrap();
        let acc = hist.last().unwrap().accuracy;
        assert!(acc >= 0.99, "train accuracy {acc}");
        let pred = classify(&enc, &head, &feats).unwrap();
        assert!(accuracy(&pred, &labels) >= 0.99);
    }

    /// Plain-gradient-descent logistic regression in f64; test-only.
    fn logistic_oracle(feats: &Tensor2, labels: &[u32]) -> f64 {
        let n = feats.rows();
        let mut w = [0.0f64; 3];
        for _ in 0..500 {
            let mut grad = [0.0f64; 3];
            for i in 0..n {
                let x = [feats.get(i, 0) as f64, feats.get(i, 1) as f64, 1.0];
                let z: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - labels[i] as f64;
                for k in 0..3 {
                    grad[k] += err * x[k] / n as f64;
                }
            }
            for k in 0..3 {
                w[k] -= 0.5 * grad[k];
            }
        }
        let mut hits = 0;
        for i in 0..n {
            let x = [feats.get(i, 0) as f64, feats.get(i, 1) as f64, 1.0];
            let z: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            let pred = u32::from(z > 0.0);
            hits += usize::from(pred == labels[i]);
        }
        hits as f64 / n as f64
    }

    #[test]
    fn zero_epochs_returns_untrained_nets_at_chance() {
        // Labels drawn independently of the features: any untrained (or
        // trained) classifier sits at chance level 1/C.
        let mut rng = SeedStream::from_seed(13);
        let n = 200;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            data.push(rng.uniform(-1.0, 1.0));
            data.push(rng.uniform(-1.0, 1.0));
            labels.push((rng.below(4)) as u32);
        }
        let feats = Tensor2::from_vec(n, 2, data).unwrap();
        let mut cfg = SourceTrainConfig::defaults(4, 5);
        cfg.batch_size = 16;
        cfg.epochs = 0;
        let (enc, head, hist) = train_source_classifier(&feats, &labels, &cfg).unwrap();
        assert!(hist.is_empty());
        let pred = classify(&enc, &head, &feats).unwrap();
        let acc = accuracy(&pred, &labels);
        assert!((acc - 0.25).abs() <= 0.15, "untrained accuracy {acc}");
    }

    #[test]
    fn fixed_seed_reproduces_parameters_bit_exactly() {
        let (feats, labels) = blob_data(17);
        let mut cfg = SourceTrainConfig::defaults(2, 21);
        cfg.batch_size = 16;
        cfg.epochs = 5;
        let (e1, h1, _) = train_source_classifier(&feats, &labels, &cfg).unwrap();
        let (e2, h2, _) = train_source_classifier(&feats, &labels, &cfg).unwrap();
        assert_eq!(e1.param_bytes(), e2.param_bytes());
        assert_eq!(h1.param_bytes(), h2.param_bytes());
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let (feats, mut labels) = blob_data(19);
        labels[3] = 9;
        let cfg = SourceTrainConfig {
            batch_size: 16,
            ..SourceTrainConfig::defaults(2, 5)
        };
        assert!(matches!(
            train_source_classifier(&feats, &labels, &cfg),
            Err(DvdError::Data(_))
        ));
    }

    #[test]
    fn train_dvd_rejects_unfrozen_head() {
        let (feats, labels) = blob_data(23);
        let bank = FeatureBank::build(feats, DomainTag::Source).unwrap();
        let mut rng = SeedStream::from_seed(1);
        let head = MlpNet::new(&[2, 2], &[Act::Identity], &mut rng).unwrap();
        let cfg = DvdTrainConfig {
            batch_size: 16,
            epochs: 1,
            drift_hidden: vec![8],
            t_steps: 4,
            k_s_dif: 3,
            ..DvdTrainConfig::defaults(1)
        };
        assert!(matches!(
            train_dvd(&bank, &labels, &head, &cfg, None),
            Err(DvdError::Contract(_))
        ));
    }

    #[test]
    fn train_dvd_leaves_head_bit_identical_and_learns() {
        let (feats, labels) = blob_data(29);
        let cfg_src = SourceTrainConfig {
            batch_size: 16,
            epochs: 30,
            encoder_hidden: vec![16],
            latent_dim: 8,
            ..SourceTrainConfig::defaults(2, 31)
        };
        let (enc, mut head, _) = train_source_classifier(&feats, &labels, &cfg_src).unwrap();
        head.freeze();
        let latents = enc.forward_eval(&feats).unwrap();
        let bank = FeatureBank::build(latents, DomainTag::Source).unwrap();
        let head_before = head.param_bytes();

        let cfg = DvdTrainConfig {
            batch_size: 32,
            epochs: 4,
            drift_hidden: vec![32],
            t_steps: 8,
            k_s_dif: 5,
            ..DvdTrainConfig::defaults(37)
        };
        let (model, hist) = train_dvd(&bank, &labels, &head, &cfg, None).unwrap();
        assert_eq!(head.param_bytes(), head_before, "frozen head was mutated");
        assert!(model.is_frozen());
        assert_eq!(hist.len(), 4);
        // The transport loss must drop substantially from the first epoch.
        assert!(
            hist.last().unwrap().l_dif < hist[0].l_dif,
            "l_dif did not decrease: {:?}",
            hist.iter().map(|h| h.l_dif).collect::<Vec<_>>()
        );
        // Drifted samples should be classified at least as well as raw
        // prior samples.
        let mut rng = SeedStream::from_seed(99);
        let mut raw_hits = 0usize;
        for i in 0..bank.len() {
            let start = bank
                .vicinity_prior(bank.entry(i), cfg.k_s_dif, Some(i))
                .unwrap()
                .sample(&mut rng);
            let pred = argmax_rows(&head.forward_eval(&Tensor2::row_vector(&start)).unwrap());
            raw_hits += usize::from(pred[0] == labels[i]);
        }
        let raw_acc = raw_hits as f64 / bank.len() as f64;
        let drifted = hist.last().unwrap().drifted_accuracy;
        assert!(
            drifted + 1e-9 >= raw_acc,
            "drifted {drifted} vs raw {raw_acc}"
        );
    }
}
