//! Target-side pipelines: drift-generated source cues, SiLGA positive keys,
//! the InfoNCE clustering objective, the adaptation loop, the
//! inference-only transform, and confidence-thresholded open-set filtering.
//!
//! Adaptation receives only the frozen (encoder, head, drift) triple and an
//! `UnlabeledView` of the target features; labels of any kind are out of
//! reach by construction.

use crate::databench::UnlabeledView;
use crate::diffcore::{sgd_step, GradTape, MlpNet, Tensor2, ValueId};
use crate::driftnet::{sample_drift_stochastic_batch, DriftModel};
use crate::error::{DvdError, Result};
use crate::featurebank::{draw_start_state, DomainTag, FeatureBank, PriorMode};
use crate::rng::SeedStream;
use crate::training::{accuracy, argmax_rows};

/// A probability vector over the known classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    p: Vec<f32>,
}

impl Prediction {
    pub fn new(p: Vec<f32>) -> Result<Self> {
        if p.is_empty() {
            return Err(DvdError::Data("empty prediction vector".into()));
        }
        let sum: f64 = p.iter().map(|&v| v as f64).sum();
        if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(DvdError::Data(format!(
                "prediction is not on the simplex (sum {sum})"
            )));
        }
        Ok(Prediction { p })
    }

    pub fn from_logits(logits: &[f32]) -> Self {
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Prediction {
            p: exps.into_iter().map(|e| (e / sum) as f32).collect(),
        }
    }

    pub fn probs(&self) -> &[f32] {
        &self.p
    }

    pub fn argmax(&self) -> u32 {
        let mut best = 0usize;
        for (i, &v) in self.p.iter().enumerate() {
            if v > self.p[best] {
                best = i;
            }
        }
        best as u32
    }

    pub fn max_prob(&self) -> f32 {
        self.p.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Classifier output for `z` as a prediction.
pub fn predict(head: &MlpNet, z: &[f32]) -> Result<Prediction> {
    Ok(Prediction::from_logits(&head.forward_row(z)?))
}

// ── cue generation and SiLGA ────────────────────────────────────────

/// Sample the target feature's vicinity prior and transport it through the
/// frozen drift model, yielding a source-aligned cue.
pub fn generate_source_cue(
    z_t: &[f32],
    bank: &FeatureBank,
    model: &DriftModel,
    k_t_dif: usize,
    rng: &mut SeedStream,
) -> Result<Vec<f32>> {
    if !model.is_frozen() {
        return Err(DvdError::Contract(
            "cue generation requires a frozen drift model".into(),
        ));
    }
    let z0 = draw_start_state(PriorMode::Vicinity, bank, z_t, k_t_dif, None, None, rng)?;
    model.sample(&z0, None)
}

/// Average the drift-generated cue with its k nearest bank neighbors:
/// z_pos = (z1 + sum(neighbors)) / (k + 1).
pub fn silga(z1_t: &[f32], bank: &FeatureBank, k_t: usize) -> Result<Vec<f32>> {
    let idx = bank.knn(z1_t, k_t, None)?;
    let mut acc: Vec<f64> = z1_t.iter().map(|&v| v as f64).collect();
    for &i in &idx {
        for (a, &v) in acc.iter_mut().zip(bank.entry(i)) {
            *a += v as f64;
        }
    }
    let denom = (k_t + 1) as f64;
    Ok(acc.into_iter().map(|a| (a / denom) as f32).collect())
}

// ── InfoNCE ─────────────────────────────────────────────────────────

/// Contrastive objective over prediction batches. The denominator sums the
/// negatives only (j != i); `include_positive` switches to the variant that
/// also counts the positive pair.
pub fn infonce_loss(
    p: &[Prediction],
    p_pos: &[Prediction],
    temperature: f32,
    include_positive: bool,
) -> Result<f64> {
    let m = p.len();
    if m < 2 {
        return Err(DvdError::Parameter(format!(
            "contrastive batch of {m} has no negatives"
        )));
    }
    if p_pos.len() != m {
        return Err(DvdError::Shape(format!(
            "{} positives for {} anchors",
            p_pos.len(),
            m
        )));
    }
    if !(temperature > 0.0) {
        return Err(DvdError::Parameter(format!(
            "temperature {temperature} must be > 0"
        )));
    }
    let tau = temperature as f64;
    let dot = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    };
    let mut loss = 0.0f64;
    for i in 0..m {
        let num = (dot(p[i].probs(), p_pos[i].probs()) / tau).exp();
        let mut den = 0.0f64;
        for j in 0..m {
            if j != i {
                den += (dot(p[i].probs(), p[j].probs()) / tau).exp();
            }
        }
        if include_positive {
            den += num;
        }
        loss += -(num / den).ln();
    }
    if !loss.is_finite() {
        return Err(DvdError::Numeric("non-finite contrastive loss".into()));
    }
    Ok(loss)
}

/// Tape version: `p_live` are on-tape probability rows, positives are
/// constants. The denominator's log-sum-exp is max-shifted per row (the
/// shift is detached, which leaves value and gradient unchanged). Returns
/// the scalar node and its f64 value.
pub fn infonce_on_tape(
    tape: &mut GradTape,
    p_live: ValueId,
    p_pos: Tensor2,
    temperature: f32,
    include_positive: bool,
) -> Result<(ValueId, f64)> {
    let m = tape.value(p_live).rows();
    if m < 2 {
        return Err(DvdError::Parameter(format!(
            "contrastive batch of {m} has no negatives"
        )));
    }
    let inv_tau = 1.0 / temperature;
    let pos_id = tape.constant(p_pos);
    let num_dots = tape.dot_rows(p_live, pos_id)?;
    let num_scaled = tape.scale(num_dots, inv_tau);

    let sims = tape.matmul_nt(p_live, p_live)?;
    let sims_scaled = tape.scale(sims, inv_tau);

    // Detached per-row shift keeping every exponent non-positive.
    let mut shift = Tensor2::zeros(m, 1);
    for r in 0..m {
        let mut max = f32::NEG_INFINITY;
        for c in 0..m {
            if r != c {
                max = max.max(tape.value(sims_scaled).get(r, c));
            }
        }
        if include_positive {
            max = max.max(tape.value(num_scaled).get(r, 0));
        }
        shift.set(r, 0, max);
    }
    let mut neg_shift = shift.clone();
    neg_shift.scale_assign(-1.0);
    let neg_shift_id = tape.constant(neg_shift);
    let shift_id = tape.constant(shift);

    let shifted = tape.add_col(sims_scaled, neg_shift_id)?;
    let exps = tape.exp(shifted);
    let mut mask = Tensor2::zeros(m, m);
    for r in 0..m {
        for c in 0..m {
            if r != c {
                mask.set(r, c, 1.0);
            }
        }
    }
    let mask_id = tape.constant(mask);
    let masked = tape.mul(exps, mask_id)?;
    let mut den = tape.sum_rows(masked);
    if include_positive {
        let num_shifted = tape.add_col(num_scaled, neg_shift_id)?;
        let num_exp = tape.exp(num_shifted);
        den = tape.add(den, num_exp)?;
    }
    let log_den = tape.ln(den);
    let log_den_true = tape.add_col(log_den, shift_id)?;
    let per_sample = tape.sub(log_den_true, num_scaled)?;
    let (loss, value) = tape.sum_all(per_sample);
    if !value.is_finite() {
        return Err(DvdError::Numeric("non-finite contrastive loss".into()));
    }
    Ok((loss, value))
}

// ── adaptation loop ─────────────────────────────────────────────────

/// How the positive key is built for each anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositiveMode {
    /// Drift-generated cue aggregated with its bank neighbors.
    DriftSilga,
    /// Mean of the anchor's k nearest bank neighbors; no drift call.
    MeanPool,
    /// The anchor itself under Gaussian jitter; no bank, no drift.
    Augment { sigma: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftSampling {
    Deterministic,
    Stochastic { sigma: f32 },
}

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub k_t_dif: usize,
    pub k_t: usize,
    pub temperature: f32,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Rebuild the target bank every this many epochs.
    pub refresh_period: usize,
    pub seed: u64,
    pub positive_mode: PositiveMode,
    pub drift_sampling: DriftSampling,
    pub prior_mode: PriorMode,
    /// Use a different step count than the model was trained with.
    pub infer_t_override: Option<usize>,
    /// Count the positive pair in the contrastive denominator.
    pub include_positive_in_denominator: bool,
}

impl AdaptConfig {
    pub fn defaults(seed: u64) -> Self {
        AdaptConfig {
            k_t_dif: 15,
            k_t: 6,
            temperature: 0.13,
            lr: 3e-3,
            momentum: 0.9,
            batch_size: 128,
            epochs: 15,
            refresh_period: 1,
            seed,
            positive_mode: PositiveMode::DriftSilga,
            drift_sampling: DriftSampling::Deterministic,
            prior_mode: PriorMode::Vicinity,
            infer_t_override: None,
            include_positive_in_denominator: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(DvdError::Parameter(
                "contrastive batch size must be >= 2".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(DvdError::Parameter("temperature must be > 0".into()));
        }
        if self.k_t_dif == 0 || self.k_t == 0 {
            return Err(DvdError::Parameter("neighbor counts must be >= 1".into()));
        }
        if self.refresh_period == 0 {
            return Err(DvdError::Parameter("refresh period must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(DvdError::Parameter("bad lr/momentum".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub l_cls: f64,
    /// Filled by the caller's scorer when benchmark labels exist.
    pub target_accuracy: Option<f64>,
}

/// Fine-tune a fresh copy of the source encoder against the frozen head and
/// drift model. `scorer`, when given, receives the current encoder after
/// each epoch and returns an accuracy to log; adaptation itself has no
/// access to labels.
pub fn adapt_target(
    target: UnlabeledView<'_>,
    source_encoder: &MlpNet,
    head: &MlpNet,
    model: &DriftModel,
    cfg: &AdaptConfig,
    mut scorer: Option<&mut dyn FnMut(&MlpNet) -> f64>,
) -> Result<(MlpNet, Vec<AdaptEpoch>)> {
    if !head.is_frozen() {
        return Err(DvdError::Contract(
            "adaptation requires a frozen classification head".into(),
        ));
    }
    if !model.is_frozen() {
        return Err(DvdError::Contract(
            "adaptation requires a frozen drift model".into(),
        ));
    }
    cfg.validate()?;
    let features = target.features;
    let n = features.rows();
    let needed = cfg.k_t_dif.max(cfg.k_t);
    if n <= needed {
        return Err(DvdError::Parameter(format!(
            "target set of {n} cannot serve k = {needed}"
        )));
    }

    let mut encoder = source_encoder.fork();
    let mut rng = SeedStream::derive(cfg.seed, "adapt");
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut bank: Option<FeatureBank> = None;

    for epoch in 0..cfg.epochs {
        if bank.is_none() || epoch % cfg.refresh_period == 0 {
            let latents = encoder.forward_eval(features)?;
            bank = Some(match &bank {
                Some(b) => b.refresh(&encoder, features)?,
                None => FeatureBank::build(latents, DomainTag::Target)?,
            });
        }
        let bank_ref = bank.as_ref().unwrap();

        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| features.row(i)).collect();
            let batch = Tensor2::from_rows(&rows)?;

            let mut tape = GradTape::new();
            let x = tape.constant(batch.clone());
            let z_live = tape.forward(&encoder, x)?;
            let z_vals = tape.value(z_live).clone();

            let p_pos = positive_predictions(
                &z_vals, &batch, chunk, &encoder, head, model, bank_ref, cfg, &mut rng,
            )?;

            let logits = tape.forward(head, z_live)?;
            let p = tape.softmax_rows(logits);
            let (loss, value) = infonce_on_tape(
                &mut tape,
                p,
                p_pos,
                cfg.temperature,
                cfg.include_positive_in_denominator,
            )?;
            // The objective sums per-sample terms; optimize its batch mean
            // so the step size does not scale with m.
            let mean_loss = tape.scale(loss, 1.0 / chunk.len() as f32);
            tape.backward_scalar(mean_loss)?;
            let grads = tape.net_grads(&encoder)?;
            sgd_step(&mut encoder, &grads, cfg.lr, cfg.momentum)?;
            loss_sum += value / chunk.len() as f64;
            batches += 1;
        }
        let target_accuracy = scorer.as_mut().map(|s| s(&encoder));
        history.push(AdaptEpoch {
            epoch,
            l_cls: loss_sum / batches.max(1) as f64,
            target_accuracy,
        });
    }
    Ok((encoder, history))
}

/// Build the positive-key prediction rows for a batch, off-tape: positives
/// depend on the bank snapshot, not on live encoder activations.
///
/// The prior draw for an anchor uses a stream keyed by the anchor's index,
/// so its start-state noise is frozen across epochs; the positive key then
/// moves only with the bank, which keeps the consolidation target stable.
#[allow(clippy::too_many_arguments)]
fn positive_predictions(
    z_vals: &Tensor2,
    raw_batch: &Tensor2,
    indices: &[usize],
    encoder: &MlpNet,
    head: &MlpNet,
    model: &DriftModel,
    bank: &FeatureBank,
    cfg: &AdaptConfig,
    rng: &mut SeedStream,
) -> Result<Tensor2> {
    let (b, d) = (z_vals.rows(), z_vals.cols());
    let z_pos = match cfg.positive_mode {
        PositiveMode::DriftSilga => {
            let mut z0 = Tensor2::zeros(b, d);
            for r in 0..b {
                let ctx = crate::featurebank::EncoderContext {
                    encoder,
                    raw_input: raw_batch.row(r),
                };
                let mut anchor_rng =
                    SeedStream::derive_index(cfg.seed, "cue-noise", indices[r] as u64);
                let start = draw_start_state(
                    cfg.prior_mode,
                    bank,
                    z_vals.row(r),
                    cfg.k_t_dif,
                    None,
                    Some(&ctx),
                    &mut anchor_rng,
                )?;
                z0.data_mut()[r * d..(r + 1) * d].copy_from_slice(&start);
            }
            let t = cfg.infer_t_override.unwrap_or(model.t_steps());
            let cues = match cfg.drift_sampling {
                DriftSampling::Deterministic => {
                    crate::driftnet::sample_drift_batch(model, &z0, t)?
                }
                DriftSampling::Stochastic { sigma } => {
                    sample_drift_stochastic_batch(model, &z0, t, sigma, rng)?
                }
            };
            let mut out = Tensor2::zeros(b, d);
            for r in 0..b {
                let pooled = silga(cues.row(r), bank, cfg.k_t)?;
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&pooled);
            }
            out
        }
        PositiveMode::MeanPool => {
            let mut out = Tensor2::zeros(b, d);
            for r in 0..b {
                let idx = bank.knn(z_vals.row(r), cfg.k_t, None)?;
                let mut acc = vec![0.0f64; d];
                for &i in &idx {
                    for (a, &v) in acc.iter_mut().zip(bank.entry(i)) {
                        *a += v as f64;
                    }
                }
                for (c, a) in acc.into_iter().enumerate() {
                    out.set(r, c, (a / cfg.k_t as f64) as f32);
                }
            }
            out
        }
        PositiveMode::Augment { sigma } => {
            let mut out = z_vals.clone();
            for v in out.data_mut() {
                *v += sigma * rng.normal();
            }
            out
        }
    };
    let logits = head.forward_eval(&z_pos)?;
    let mut probs = logits;
    crate::diffcore::net::softmax_rows_inplace(&mut probs);
    Ok(probs)
}

// ── inference-only transform ────────────────────────────────────────

/// Classify a feature through the drift transform without touching any
/// parameters: encode, generate a cue, aggregate with bank neighbors,
/// classify. The bank must be built over the evaluation pool with the same
/// encoder.
pub fn transform_inference(
    x: &[f32],
    encoder: &MlpNet,
    head: &MlpNet,
    model: &DriftModel,
    bank: &FeatureBank,
    k: usize,
    rng: &mut SeedStream,
) -> Result<Prediction> {
    let z = encoder.forward_row(x)?;
    let cue = generate_source_cue(&z, bank, model, k, rng)?;
    let pooled = silga(&cue, bank, k)?;
    predict(head, &pooled)
}

// ── open-set filtering and evaluation ───────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtDecision {
    Known,
    Unknown,
}

/// Confidence threshold on the maximum softmax score.
pub fn ct_filter(pred: &Prediction, confidence_threshold: f32) -> Result<CtDecision> {
    if !(0.0..=1.0).contains(&confidence_threshold) {
        return Err(DvdError::Parameter(format!(
            "confidence threshold {confidence_threshold} outside [0, 1]"
        )));
    }
    Ok(if pred.max_prob() >= confidence_threshold {
        CtDecision::Known
    } else {
        CtDecision::Unknown
    })
}

/// Confidence-thresholded rejection driven by the drift-generated feature.
pub struct CtDetector<'a> {
    pub model: &'a DriftModel,
    pub bank: &'a FeatureBank,
    pub k: usize,
    pub threshold: f32,
    pub seed: u64,
}

pub enum EvalMode<'a> {
    Closed,
    OpenSet {
        known_classes: usize,
        detector: Option<CtDetector<'a>>,
    },
}

#[derive(Debug, Clone)]
pub struct OpenSetReport {
    pub known_accuracy: f64,
    pub unknown_accuracy: f64,
    pub h_score: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// Per-class accuracy over the classes present in the labels.
    pub per_class_accuracy: Vec<f64>,
    /// Macro average of the per-class accuracies.
    pub macro_accuracy: f64,
    pub open_set: Option<OpenSetReport>,
}

pub fn h_score(known: f64, unknown: f64) -> f64 {
    if known + unknown <= 0.0 {
        0.0
    } else {
        2.0 * known * unknown / (known + unknown)
    }
}

/// Score the classifier on a labeled evaluation set. In open-set mode,
/// labels >= known_classes mark unknowns; a closed classifier never flags
/// them, so its unknown accuracy (and H-score) is zero unless a detector is
/// supplied.
pub fn evaluate(
    encoder: &MlpNet,
    head: &MlpNet,
    features: &Tensor2,
    labels: &[u32],
    mode: EvalMode<'_>,
) -> Result<EvalReport> {
    if labels.is_empty() || features.rows() == 0 {
        return Err(DvdError::Data("empty evaluation set".into()));
    }
    if labels.len() != features.rows() {
        return Err(DvdError::Data(format!(
            "{} labels for {} features",
            labels.len(),
            features.rows()
        )));
    }
    let pred = argmax_rows(&head.forward_eval(&encoder.forward_eval(features)?)?);

    match mode {
        EvalMode::Closed => {
            let overall = accuracy(&pred, labels);
            let class_count = labels.iter().copied().max().unwrap() as usize + 1;
            let mut hits = vec![0usize; class_count];
            let mut totals = vec![0usize; class_count];
            for (p, &l) in pred.iter().zip(labels) {
                totals[l as usize] += 1;
                if *p == l {
                    hits[l as usize] += 1;
                }
            }
            let per_class: Vec<f64> = hits
                .iter()
                .zip(&totals)
                .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
                .collect();
            let present = totals.iter().filter(|&&t| t > 0).count();
            let macro_acc =
                per_class.iter().sum::<f64>() / present.max(1) as f64;
            Ok(EvalReport {
                overall_accuracy: overall,
                per_class_accuracy: per_class,
                macro_accuracy: macro_acc,
                open_set: None,
            })
        }
        EvalMode::OpenSet {
            known_classes,
            detector,
        } => {
            let decisions: Vec<CtDecision> = match &detector {
                None => vec![CtDecision::Known; labels.len()],
                Some(det) => {
                    // Confidence of the drift-generated, neighbor-pooled
                    // feature: cues from unknown-class vicinities get pulled
                    // back toward their own cluster by the pooling, which
                    // keeps their softmax confidence low.
                    let mut rng = SeedStream::derive(det.seed, "ct-detector");
                    let mut out = Vec::with_capacity(labels.len());
                    for r in 0..features.rows() {
                        let p = transform_inference(
                            features.row(r),
                            encoder,
                            head,
                            det.model,
                            det.bank,
                            det.k,
                            &mut rng,
                        )?;
                        out.push(ct_filter(&p, det.threshold)?);
                    }
                    out
                }
            };
            let mut known_hits = 0usize;
            let mut known_total = 0usize;
            let mut unknown_hits = 0usize;
            let mut unknown_total = 0usize;
            for ((p, &l), dec) in pred.iter().zip(labels).zip(&decisions) {
                if (l as usize) < known_classes {
                    known_total += 1;
                    if *dec == CtDecision::Known && *p == l {
                        known_hits += 1;
                    }
                } else {
                    unknown_total += 1;
                    if *dec == CtDecision::Unknown {
                        unknown_hits += 1;
                    }
                }
            }
            let known_acc = known_hits as f64 / known_total.max(1) as f64;
            let unknown_acc = unknown_hits as f64 / unknown_total.max(1) as f64;
            let correct = pred
                .iter()
                .zip(labels)
                .zip(&decisions)
                .filter(|((p, &l), dec)| {
                    if (l as usize) < known_classes {
                        **dec == CtDecision::Known && **p == l
                    } else {
                        **dec == CtDecision::Unknown
                    }
                })
                .count();
            Ok(EvalReport {
                overall_accuracy: correct as f64 / labels.len() as f64,
                per_class_accuracy: Vec::new(),
                macro_accuracy: 0.0,
                open_set: Some(OpenSetReport {
                    known_accuracy: known_acc,
                    unknown_accuracy: unknown_acc,
                    h_score: h_score(known_acc, unknown_acc),
                }),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Act;
    use crate::oracle;
    use proptest::prelude::*;

    fn simplex(v: Vec<f32>) -> Prediction {
        let sum: f32 = v.iter().sum();
        Prediction::new(v.into_iter().map(|x| x / sum).collect()).unwrap()
    }

    #[test]
    fn silga_two_point_mean() {
        let bank = FeatureBank::build(
            Tensor2::from_rows(&[&[4.0]]).unwrap(),
            DomainTag::Target,
        )
        .unwrap();
        assert_eq!(silga(&[2.0], &bank, 1).unwrap(), vec![3.0]);
    }

    #[test]
    fn silga_arithmetic() {
        let bank = FeatureBank::build(
            Tensor2::from_rows(&[&[3.0, 0.0], &[0.0, 3.0]]).unwrap(),
            DomainTag::Target,
        )
        .unwrap();
        let pos = silga(&[0.0, 1e-7], &bank, 2).unwrap();
        assert!((pos[0] - 1.0).abs() < 1e-5 && (pos[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn silga_stays_in_convex_hull() {
        let mut rng = SeedStream::from_seed(5);
        let mut data = Vec::new();
        for _ in 0..10 * 3 {
            data.push(rng.uniform(-2.0, 2.0));
        }
        let bank = FeatureBank::build(
            Tensor2::from_vec(10, 3, data).unwrap(),
            DomainTag::Target,
        )
        .unwrap();
        let z1: Vec<f32> = (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let idx = bank.knn(&z1, 4, None).unwrap();
        let pos = silga(&z1, &bank, 4).unwrap();
        for c in 0..3 {
            let mut lo = z1[c];
            let mut hi = z1[c];
            for &i in &idx {
                lo = lo.min(bank.entry(i)[c]);
                hi = hi.max(bank.entry(i)[c]);
            }
            assert!(pos[c] >= lo - 1e-5 && pos[c] <= hi + 1e-5);
        }
    }

    #[test]
    fn infonce_rejects_tiny_batches() {
        let p = vec![simplex(vec![1.0, 1.0])];
        assert!(matches!(
            infonce_loss(&p, &p, 1.0, false),
            Err(DvdError::Parameter(_))
        ));
    }

    #[test]
    fn infonce_zero_when_positive_equals_negative() {
        // m = 2, tau = 1: each numerator equals its single-term denominator.
        let p = vec![simplex(vec![0.7, 0.3]), simplex(vec![0.7, 0.3])];
        let pos = p.clone();
        let loss = infonce_loss(&p, &pos, 1.0, false).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn infonce_decreases_when_positive_alignment_grows() {
        let p = vec![
            simplex(vec![0.9, 0.1]),
            simplex(vec![0.2, 0.8]),
            simplex(vec![0.5, 0.5]),
        ];
        let weak = vec![
            simplex(vec![0.5, 0.5]),
            simplex(vec![0.5, 0.5]),
            simplex(vec![0.5, 0.5]),
        ];
        let strong = p.clone();
        let l_weak = infonce_loss(&p, &weak, 0.5, false).unwrap();
        let l_strong = infonce_loss(&p, &strong, 0.5, false).unwrap();
        assert!(l_strong < l_weak);
    }

    #[test]
    fn infonce_matches_straight_line_oracle() {
        let mut rng = SeedStream::from_seed(8);
        let mut batch = |m: usize| -> Vec<Prediction> {
            (0..m)
                .map(|_| {
                    let raw: Vec<f32> = (0..4).map(|_| rng.uniform(0.01, 1.0)).collect();
                    simplex(raw)
                })
                .collect()
        };
        for &m in &[2usize, 4, 8] {
            let p = batch(m);
            let pos = batch(m);
            for include in [false, true] {
                let got = infonce_loss(&p, &pos, 0.13, include).unwrap();
                let p64: Vec<Vec<f64>> = p
                    .iter()
                    .map(|x| x.probs().iter().map(|&v| v as f64).collect())
                    .collect();
                let pos64: Vec<Vec<f64>> = pos
                    .iter()
                    .map(|x| x.probs().iter().map(|&v| v as f64).collect())
                    .collect();
                let want = oracle::infonce_f64(&p64, &pos64, 0.13, include);
                assert!((got - want).abs() < 1e-6, "m={m}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn tape_infonce_matches_pure_evaluation() {
        let mut rng = SeedStream::from_seed(12);
        let m = 4;
        let mk = |rng: &mut SeedStream| -> Tensor2 {
            let mut rows = Vec::new();
            for _ in 0..m {
                let raw: Vec<f32> = (0..3).map(|_| rng.uniform(0.01, 1.0)).collect();
                let sum: f32 = raw.iter().sum();
                rows.extend(raw.into_iter().map(|v| v / sum));
            }
            Tensor2::from_vec(m, 3, rows).unwrap()
        };
        let p = mk(&mut rng);
        let pos = mk(&mut rng);
        let mut tape = GradTape::new();
        let p_id = tape.constant(p.clone());
        let (_, tape_val) = infonce_on_tape(&mut tape, p_id, pos.clone(), 0.13, false).unwrap();

        let p_pred: Vec<Prediction> = (0..m)
            .map(|r| Prediction::new(p.row(r).to_vec()).unwrap())
            .collect();
        let pos_pred: Vec<Prediction> = (0..m)
            .map(|r| Prediction::new(pos.row(r).to_vec()).unwrap())
            .collect();
        let pure = infonce_loss(&p_pred, &pos_pred, 0.13, false).unwrap();
        assert!((tape_val - pure).abs() < 1e-6);
    }

    #[test]
    fn ct_filter_thresholds() {
        let high = simplex(vec![0.9, 0.1]);
        let low = simplex(vec![0.3, 0.25, 0.25, 0.2]);
        assert_eq!(ct_filter(&high, 0.5).unwrap(), CtDecision::Known);
        assert_eq!(ct_filter(&low, 0.5).unwrap(), CtDecision::Unknown);
        assert_eq!(ct_filter(&low, 0.0).unwrap(), CtDecision::Known);
        assert!(ct_filter(&low, 1.5).is_err());
    }

    #[test]
    fn h_score_values() {
        assert_eq!(h_score(1.0, 0.0), 0.0);
        assert!((h_score(0.8, 0.6) - 0.685714285).abs() < 1e-6);
    }

    #[test]
    fn prediction_simplex_validation() {
        assert!(Prediction::new(vec![0.5, 0.6]).is_err());
        assert!(Prediction::new(vec![-0.1, 1.1]).is_err());
        let p = Prediction::from_logits(&[0.0, 100.0]);
        assert_eq!(p.argmax(), 1);
        let sum: f64 = p.probs().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn ct_filter_monotone_in_threshold(
            raw in proptest::collection::vec(0.01f32..1.0, 3),
            t1 in 0.0f32..1.0,
            t2 in 0.0f32..1.0,
        ) {
            let p = simplex(raw);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let d_lo = ct_filter(&p, lo).unwrap();
            let d_hi = ct_filter(&p, hi).unwrap();
            // Raising the threshold never converts unknown into known.
            if d_lo == CtDecision::Unknown {
                prop_assert_eq!(d_hi, CtDecision::Unknown);
            }
        }
    }

    #[test]
    fn cue_with_degenerate_prior_and_zero_drift_returns_vicinity_mean() {
        use crate::driftnet::DriftModel;
        // Bank of identical entries: the vicinity prior collapses to the
        // entry; a zero-weight drift net moves nothing.
        let bank = FeatureBank::build(
            Tensor2::from_rows(&[&[2.0, -1.0], &[2.0, -1.0], &[2.0, -1.0]]).unwrap(),
            DomainTag::Target,
        )
        .unwrap();
        let mut rng = SeedStream::from_seed(1);
        let mut model = DriftModel::new(2, &[4], 4, &mut rng).unwrap();
        for layer in model.net_mut().layers_mut_unchecked() {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
        }
        model.freeze();
        let cue = generate_source_cue(&[2.0, -1.0], &bank, &model, 2, &mut rng).unwrap();
        assert_eq!(cue, vec![2.0, -1.0]);
    }

    #[test]
    fn cue_requires_frozen_drift_and_is_seed_deterministic() {
        use crate::driftnet::DriftModel;
        let mut rng = SeedStream::from_seed(2);
        let mut data = Vec::new();
        for _ in 0..20 * 3 {
            data.push(rng.uniform(-1.0, 1.0));
        }
        let bank = FeatureBank::build(
            Tensor2::from_vec(20, 3, data).unwrap(),
            DomainTag::Target,
        )
        .unwrap();
        let mut model = DriftModel::new(3, &[8], 4, &mut rng).unwrap();
        let q = [0.1f32, 0.2, 0.3];
        let err = generate_source_cue(&q, &bank, &model, 4, &mut SeedStream::from_seed(3));
        assert!(matches!(err, Err(DvdError::Contract(_))));
        model.freeze();
        let a = generate_source_cue(&q, &bank, &model, 4, &mut SeedStream::from_seed(3)).unwrap();
        let b = generate_source_cue(&q, &bank, &model, 4, &mut SeedStream::from_seed(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_all_correct_and_openset_zero_unknown() {
        let mut rng = SeedStream::from_seed(3);
        // Identity "encoder" and a head that copies feature 0/1 as logits.
        let enc = MlpNet::new(&[2, 2], &[Act::Identity], &mut rng).unwrap();
        let mut enc = enc;
        for layer in enc.layers_mut_unchecked() {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
            layer.weight.set(0, 0, 1.0);
            layer.weight.set(1, 1, 1.0);
        }
        let head = enc.fork();
        let feats = Tensor2::from_rows(&[&[5.0, 0.0], &[0.0, 5.0], &[6.0, 1.0]]).unwrap();
        let labels = [0u32, 1, 0];
        let rep = evaluate(&enc, &head, &feats, &labels, EvalMode::Closed).unwrap();
        assert_eq!(rep.overall_accuracy, 1.0);
        assert_eq!(rep.per_class_accuracy, vec![1.0, 1.0]);

        // Open-set with no detector: unknowns never flagged, H = 0.
        let labels_os = [0u32, 1, 2];
        let rep = evaluate(
            &enc,
            &head,
            &feats,
            &labels_os,
            EvalMode::OpenSet {
                known_classes: 2,
                detector: None,
            },
        )
        .unwrap();
        let os = rep.open_set.unwrap();
        assert_eq!(os.unknown_accuracy, 0.0);
        assert_eq!(os.h_score, 0.0);
    }
}
