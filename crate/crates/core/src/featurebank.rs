//! Domain feature banks with cosine k-NN queries, and the diagonal Gaussian
//! prior fitted to a query's vicinity.
//!
//! A bank is an immutable snapshot; refreshing produces a new snapshot with
//! an incremented generation, so concurrent readers never observe a partial
//! update.

use crate::diffcore::{MlpNet, Tensor2};
use crate::error::{DvdError, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub struct FeatureBank {
    entries: Tensor2,
    domain: DomainTag,
    generation: u64,
}

/// Diagonal Gaussian fitted to a vicinity: componentwise mean and
/// population variance of the k neighbors.
#[derive(Debug, Clone)]
pub struct VicinityPrior {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub k: usize,
}

fn check_entries(entries: &Tensor2) -> Result<()> {
    if entries.rows() == 0 {
        return Err(DvdError::Data("empty input: bank needs at least one feature".into()));
    }
    entries.ensure_finite("bank entries")?;
    for r in 0..entries.rows() {
        let norm: f64 = entries.row(r).iter().map(|&v| (v as f64).powi(2)).sum();
        if norm <= 0.0 {
            return Err(DvdError::Data(format!(
                "degenerate feature: entry {r} has zero norm"
            )));
        }
    }
    Ok(())
}

impl FeatureBank {
    /// Snapshot the given features, in order, as generation 0.
    pub fn build(features: Tensor2, domain: DomainTag) -> Result<Self> {
        check_entries(&features)?;
        Ok(FeatureBank {
            entries: features,
            domain,
            generation: 0,
        })
    }

    /// Re-encode `inputs` with `encoder` and replace the entries; the
    /// generation counter increments. Entry order follows input order.
    pub fn refresh(&self, encoder: &MlpNet, inputs: &Tensor2) -> Result<Self> {
        let encoded = encoder.forward_eval(inputs)?;
        if encoded.cols() != self.dim() {
            return Err(DvdError::Shape(format!(
                "encoder output width {} does not match bank dimension {}",
                encoded.cols(),
                self.dim()
            )));
        }
        check_entries(&encoded)?;
        Ok(FeatureBank {
            entries: encoded,
            domain: self.domain,
            generation: self.generation + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        self.entries.row(i)
    }

    pub fn entries(&self) -> &Tensor2 {
        &self.entries
    }

    /// Indices of the k entries most cosine-similar to `query`, sorted by
    /// descending similarity, ties broken by ascending index. `exclude`
    /// removes one entry (the query itself, when it lives in the bank).
    pub fn knn(&self, query: &[f32], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        let usable = self.len() - usize::from(exclude.map_or(false, |e| e < self.len()));
        if k == 0 || k > usable {
            return Err(DvdError::Parameter(format!(
                "k = {k} out of range for a bank of {usable} usable entries"
            )));
        }
        // Selection keeps the k best (sim desc, idx asc) seen so far; with
        // desk-scale banks a simple bounded insertion beats heap overhead.
        let mut best: Vec<(f32, usize)> = Vec::with_capacity(k + 1);
        for i in 0..self.len() {
            if exclude == Some(i) {
                continue;
            }
            let sim = cosine_sim(query, self.entry(i))?;
            let pos = best
                .iter()
                .position(|&(s, j)| sim > s || (sim == s && i < j))
                .unwrap_or(best.len());
            if pos < k {
                best.insert(pos, (sim, i));
                if best.len() > k {
                    best.pop();
                }
            }
        }
        Ok(best.into_iter().map(|(_, i)| i).collect())
    }

    /// Fit the vicinity prior from the query's k nearest neighbors:
    /// componentwise mean and population variance (divide by k).
    pub fn vicinity_prior(
        &self,
        query: &[f32],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<VicinityPrior> {
        let idx = self.knn(query, k, exclude)?;
        let d = self.dim();
        let mut mean = vec![0.0f64; d];
        for &i in &idx {
            for (m, &v) in mean.iter_mut().zip(self.entry(i)) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= k as f64;
        }
        let mut var = vec![0.0f64; d];
        for &i in &idx {
            for c in 0..d {
                let diff = self.entry(i)[c] as f64 - mean[c];
                var[c] += diff * diff;
            }
        }
        for v in var.iter_mut() {
            *v /= k as f64;
        }
        Ok(VicinityPrior {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            var: var.into_iter().map(|v| v as f32).collect(),
            k,
        })
    }
}

impl VicinityPrior {
    /// z0 = mean + sqrt(var) .* eps with eps standard normal componentwise.
    pub fn sample(&self, rng: &mut SeedStream) -> Vec<f32> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(&m, &v)| m + v.max(0.0).sqrt() * rng.normal())
            .collect()
    }
}

/// Cosine similarity, clamped to [-1, 1] against round-off. Accumulates in
/// f64 so near-unit similarities stay stable.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(DvdError::Shape(format!(
            "cosine over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na <= 0.0 || nb <= 0.0 {
        return Err(DvdError::Data("degenerate feature: zero norm in cosine".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32)
}

/// How the diffusion start state z0 is constructed. `Vicinity` is the
/// shipping configuration; the rest are study variants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorMode {
    /// Sample the k-NN Gaussian vicinity prior.
    Vicinity,
    /// Use the query feature itself as z0.
    Baseline,
    /// Perturb the raw input, then encode it.
    InputNoise { sigma: f32 },
    /// Perturb the query feature directly.
    LatentNoise { sigma: f32 },
    /// Use the vicinity mean (no sampling).
    Centroid,
}

/// Extra context needed by `PriorMode::InputNoise`: the encoder and the raw
/// input row that produced the query feature.
pub struct EncoderContext<'a> {
    pub encoder: &'a MlpNet,
    pub raw_input: &'a [f32],
}

/// Construct the diffusion start state for `query` under the given mode.
pub fn draw_start_state(
    mode: PriorMode,
    bank: &FeatureBank,
    query: &[f32],
    k: usize,
    exclude: Option<usize>,
    ctx: Option<&EncoderContext<'_>>,
    rng: &mut SeedStream,
) -> Result<Vec<f32>> {
    match mode {
        PriorMode::Vicinity => Ok(bank.vicinity_prior(query, k, exclude)?.sample(rng)),
        PriorMode::Baseline => Ok(query.to_vec()),
        PriorMode::Centroid => Ok(bank.vicinity_prior(query, k, exclude)?.mean),
        PriorMode::LatentNoise { sigma } => Ok(query
            .iter()
            .map(|&v| v + sigma * rng.normal())
            .collect()),
        PriorMode::InputNoise { sigma } => {
            let ctx = ctx.ok_or_else(|| {
                DvdError::Parameter(
                    "input-noise prior needs an encoder context".into(),
                )
            })?;
            let noisy: Vec<f32> = ctx
                .raw_input
                .iter()
                .map(|&v| v + sigma * rng.normal())
                .collect();
            ctx.encoder.forward_row(&noisy)
        }
    }
}
