//! Synthetic domain-shift benchmark data, open-set variants, and the
//! feature-file persistence layer.
//!
//! Datasets carry optional training labels and optional hidden labels; the
//! hidden ones exist only for benchmark scoring and are stored in a sidecar
//! section that scoring-mode loads alone can see. Adaptation code receives
//! an `UnlabeledView`, which cannot carry labels of either kind.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor2;
use crate::error::{DvdError, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Tensor2,
    labels: Option<Vec<u32>>,
    hidden_labels: Option<Vec<u32>>,
    name: String,
}

/// Feature-only window over a dataset: the shape handed to adaptation, which
/// must never see labels.
#[derive(Clone, Copy)]
pub struct UnlabeledView<'a> {
    pub features: &'a Tensor2,
    pub name: &'a str,
}

impl FeatureDataset {
    pub fn new(
        name: impl Into<String>,
        features: Tensor2,
        labels: Option<Vec<u32>>,
        hidden_labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(DvdError::Data("empty input: dataset has no features".into()));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(DvdError::Data(format!(
                    "{} labels for {} features",
                    l.len(),
                    features.rows()
                )));
            }
        }
        if let Some(h) = &hidden_labels {
            if h.len() != features.rows() {
                return Err(DvdError::Data(format!(
                    "{} hidden labels for {} features",
                    h.len(),
                    features.rows()
                )));
            }
        }
        Ok(FeatureDataset {
            features,
            labels,
            hidden_labels,
            name: name.into(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Benchmark-scoring labels. Never read by training or adaptation.
    pub fn hidden_labels(&self) -> Option<&[u32]> {
        self.hidden_labels.as_deref()
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            features: &self.features,
            name: &self.name,
        }
    }

    /// Copy with Gaussian noise added to every feature component; the
    /// robustness-study analogue of a harsher domain shift.
    pub fn perturbed(&self, sigma: f32, seed: u64) -> FeatureDataset {
        let mut rng = SeedStream::derive(seed, "feature-noise");
        let mut out = self.clone();
        for v in out.features.data_mut() {
            *v += sigma * rng.normal();
        }
        out
    }
}

// ── synthetic generator ─────────────────────────────────────────────

/// Geometry of the two-domain benchmark: Gaussian class clusters for the
/// source, and the same clusters pushed through a rotation/translation/scale
/// transform for the target.
#[derive(Debug, Clone)]
pub struct ShiftSpec {
    pub class_count: usize,
    /// Per-class cluster centers; all rows share one dimension.
    pub centers: Vec<Vec<f32>>,
    pub cluster_scale: f32,
    /// Rotation in degrees, applied in the plane of the first two feature
    /// components. Must lie in [0, 360).
    pub rotation_deg: f32,
    pub translation: Vec<f32>,
    pub scale_factor: f32,
    pub samples_per_class: usize,
    pub seed: u64,
}

/// Minimum samples per class: twice the largest default neighbor count.
pub const MIN_SAMPLES_PER_CLASS: usize = 30;

impl ShiftSpec {
    /// The desk benchmark: a radial ladder of four clusters along one ray.
    /// A rotation about the origin preserves each cluster's radius and the
    /// ladder's ordering, so the class structure survives the shift while
    /// the source classifier's accuracy drops sharply. Calibrated once over
    /// ten seeds and frozen.
    pub fn default_benchmark(seed: u64) -> Self {
        ShiftSpec {
            class_count: 4,
            centers: vec![
                vec![2.0, 0.0],
                vec![4.5, 0.0],
                vec![7.0, 0.0],
                vec![9.5, 0.0],
            ],
            cluster_scale: 0.5,
            rotation_deg: 45.0,
            translation: vec![0.0, 0.0],
            scale_factor: 1.0,
            samples_per_class: 200,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, |c| c.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.centers.len() != self.class_count {
            return Err(DvdError::Parameter(format!(
                "{} centers for {} classes",
                self.centers.len(),
                self.class_count
            )));
        }
        let d = self.dim();
        if d < 2 {
            return Err(DvdError::Parameter(
                "cluster centers need at least two dimensions".into(),
            ));
        }
        if self.centers.iter().any(|c| c.len() != d) {
            return Err(DvdError::Parameter("cluster centers differ in dimension".into()));
        }
        if !(0.0..360.0).contains(&self.rotation_deg) {
            return Err(DvdError::Parameter(format!(
                "rotation {} outside [0, 360)",
                self.rotation_deg
            )));
        }
        if self.translation.len() != d {
            return Err(DvdError::Parameter(format!(
                "translation has {} components for dimension {}",
                self.translation.len(),
                d
            )));
        }
        if !(self.cluster_scale > 0.0) || !(self.scale_factor > 0.0) {
            return Err(DvdError::Parameter(
                "cluster scale and scale factor must be positive".into(),
            ));
        }
        if self.samples_per_class < MIN_SAMPLES_PER_CLASS {
            return Err(DvdError::Parameter(format!(
                "samples per class {} below minimum {}",
                self.samples_per_class, MIN_SAMPLES_PER_CLASS
            )));
        }
        Ok(())
    }

    /// True when the transform is the identity (a sanity flag for logs).
    pub fn is_identity_shift(&self) -> bool {
        self.rotation_deg == 0.0
            && self.scale_factor == 1.0
            && self.translation.iter().all(|&t| t == 0.0)
    }

    fn apply_shift(&self, x: &mut [f32]) {
        let theta = (self.rotation_deg as f64).to_radians();
        let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
        let (x0, x1) = (x[0], x[1]);
        x[0] = cos * x0 - sin * x1;
        x[1] = sin * x0 + cos * x1;
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v = self.scale_factor * *v + t;
        }
    }
}

fn draw_cluster_row(center: &[f32], scale: f32, rng: &mut SeedStream) -> Vec<f32> {
    // Redraw the rare zero-norm sample; banks reject degenerate features.
    loop {
        let row: Vec<f32> = center.iter().map(|&c| c + scale * rng.normal()).collect();
        let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum();
        if norm > 1e-8 {
            return row;
        }
    }
}

/// Source = labeled Gaussian clusters at the spec centers; target = fresh
/// draws from the same clusters mapped through the shift transform, labels
/// hidden. Content is a pure function of the spec.
pub fn gen_two_domain_shift(spec: &ShiftSpec) -> Result<(FeatureDataset, FeatureDataset)> {
    spec.validate()?;
    let d = spec.dim();
    let n = spec.class_count * spec.samples_per_class;
    let mut rng = SeedStream::derive(spec.seed, "shift-benchmark");

    let mut src = Tensor2::zeros(n, d);
    let mut src_labels = Vec::with_capacity(n);
    let mut tgt = Tensor2::zeros(n, d);
    let mut tgt_hidden = Vec::with_capacity(n);
    let mut row = 0;
    for (c, center) in spec.centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let s = draw_cluster_row(center, spec.cluster_scale, &mut rng);
            src.data_mut()[row * d..(row + 1) * d].copy_from_slice(&s);
            src_labels.push(c as u32);

            let mut t = draw_cluster_row(center, spec.cluster_scale, &mut rng);
            spec.apply_shift(&mut t);
            tgt.data_mut()[row * d..(row + 1) * d].copy_from_slice(&t);
            tgt_hidden.push(c as u32);
            row += 1;
        }
    }
    let source = FeatureDataset::new("source", src, Some(src_labels), None)?;
    let target = FeatureDataset::new("target", tgt, None, Some(tgt_hidden))?;
    Ok((source, target))
}

/// Open-set variant: the last `unknown_count` classes exist only in the
/// target. Source keeps classes 0..C-unknown; target hidden labels keep the
/// original ids, so ids >= known count mark unknowns.
pub fn gen_openset_variant(
    spec: &ShiftSpec,
    unknown_count: usize,
) -> Result<(FeatureDataset, FeatureDataset)> {
    if unknown_count == 0 {
        return Err(DvdError::Parameter(
            "open-set variant needs at least one unknown class".into(),
        ));
    }
    if unknown_count >= spec.class_count {
        return Err(DvdError::Parameter(format!(
            "{} unknown classes leave no known ones out of {}",
            unknown_count, spec.class_count
        )));
    }
    let (source, target) = gen_two_domain_shift(spec)?;
    let known = spec.class_count - unknown_count;
    let keep: Vec<usize> = source
        .labels()
        .unwrap()
        .iter()
        .enumerate()
        .filter(|(_, &l)| (l as usize) < known)
        .map(|(i, _)| i)
        .collect();
    let d = source.dim();
    let mut feats = Tensor2::zeros(keep.len(), d);
    let mut labels = Vec::with_capacity(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        feats.data_mut()[r * d..(r + 1) * d].copy_from_slice(source.features().row(i));
        labels.push(source.labels().unwrap()[i]);
    }
    let source = FeatureDataset::new("source-openset", feats, Some(labels), None)?;
    Ok((source, target))
}

// ── persistence ─────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"DVDF";
const VERSION: u16 = 1;
const FLAG_LABELS: u8 = 0b01;
const FLAG_HIDDEN: u8 = 0b10;

/// Which sections of a feature file a loader may see. Adaptation paths use
/// `FeaturesOnly`; only benchmark scoring uses `Scoring`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessMode {
    FeaturesOnly,
    Labeled,
    Scoring,
}

/// Layout: magic "DVDF", version u16, flags u8, count u32, dim u32,
/// features f32 LE row-major, labels u32 LE, then the hidden-label sidecar
/// u32 LE. The name tag is not persisted; loads name the dataset after the
/// file stem.
pub fn save_feature_file(ds: &FeatureDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let mut flags = 0u8;
    if ds.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if ds.hidden_labels.is_some() {
        flags |= FLAG_HIDDEN;
    }
    buf.push(flags);
    buf.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    for v in ds.features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &ds.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    if let Some(hidden) = &ds.hidden_labels {
        for l in hidden {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    crate::checkpoint::write_atomic(path, &buf)
}

pub fn load_feature_file(path: &Path, mode: AccessMode) -> Result<FeatureDataset> {
    let bytes = fs::read(path)?;
    let fail = |pos: usize, msg: &str| -> DvdError {
        DvdError::Format {
            offset: pos as u64,
            msg: msg.to_string(),
        }
    };
    if bytes.len() < 15 {
        return Err(fail(bytes.len(), "file too short for a DVDF header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(0, "bad magic, not a DVDF feature file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(4, &format!("unsupported version {version}")));
    }
    let flags = bytes[6];
    let count = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    if count == 0 || dim == 0 {
        return Err(fail(7, "zero count or dimension"));
    }
    let mut pos = 15usize;
    let need = count * dim * 4;
    if bytes.len() < pos + need {
        return Err(fail(bytes.len(), "truncated feature section"));
    }
    let feats: Vec<f32> = bytes[pos..pos + need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    pos += need;

    let read_u32s = |present: bool, pos: &mut usize| -> Result<Option<Vec<u32>>> {
        if !present {
            return Ok(None);
        }
        let need = count * 4;
        if bytes.len() < *pos + need {
            return Err(fail(bytes.len(), "truncated label section"));
        }
        let v = bytes[*pos..*pos + need]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *pos += need;
        Ok(Some(v))
    };
    let labels = read_u32s(flags & FLAG_LABELS != 0, &mut pos)?;
    let hidden = read_u32s(flags & FLAG_HIDDEN != 0, &mut pos)?;
    if pos != bytes.len() {
        return Err(fail(pos, "trailing bytes after last section"));
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let (labels, hidden) = match mode {
        AccessMode::FeaturesOnly => (None, None),
        AccessMode::Labeled => (labels, None),
        AccessMode::Scoring => (labels, hidden),
    };
    FeatureDataset::new(name, Tensor2::from_vec(count, dim, feats)?, labels, hidden)
}

/// Import features from a plain CSV with header "f0,...,f{d-1}[,label]".
pub fn import_csv(path: &Path) -> Result<FeatureDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DvdError::Data("empty csv".into()))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let has_label = cols.last() == Some(&"label");
    let d = cols.len() - usize::from(has_label);
    for (i, c) in cols.iter().take(d).enumerate() {
        if *c != format!("f{i}") {
            return Err(DvdError::Data(format!(
                "csv header column {i} is '{c}', expected 'f{i}'"
            )));
        }
    }
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != cols.len() {
            return Err(DvdError::Data(format!(
                "csv line {} has {} fields, expected {}",
                lineno + 1,
                parts.len(),
                cols.len()
            )));
        }
        for p in parts.iter().take(d) {
            feats.push(p.parse::<f32>().map_err(|e| {
                DvdError::Data(format!("csv line {}: bad float '{p}': {e}", lineno + 1))
            })?);
        }
        if has_label {
            labels.push(parts[d].parse::<u32>().map_err(|e| {
                DvdError::Data(format!("csv line {}: bad label: {e}", lineno + 1))
            })?);
        }
        rows += 1;
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    FeatureDataset::new(
        name,
        Tensor2::from_vec(rows, d, feats)?,
        has_label.then_some(labels),
        None,
    )
}
