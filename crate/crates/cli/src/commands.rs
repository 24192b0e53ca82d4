use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dvd_core::adaptation::{
    adapt_target, transform_inference, AdaptConfig, CtDetector, EvalMode, Prediction,
};
use dvd_core::bench::{run_matrix, run_openset, BenchConfig, Variant, CT_THRESHOLD};
use dvd_core::checkpoint::{
    load_drift_model, load_net, save_drift_model, save_net, write_atomic, NetRole,
};
use dvd_core::databench::{
    gen_openset_variant, gen_two_domain_shift, import_csv, load_feature_file,
    save_feature_file, AccessMode, FeatureDataset, ShiftSpec,
};
use dvd_core::diffcore::MlpNet;
use dvd_core::driftnet::DriftModel;
use dvd_core::featurebank::{DomainTag, FeatureBank, PriorMode};
use dvd_core::rng::SeedStream;
use dvd_core::training::{
    accuracy, classify, train_dvd, train_source_classifier, AlphaMode, DvdTrainConfig,
    DvdTrainContext, SourceTrainConfig,
};
use dvd_core::{adaptation, DvdError, Result};

use crate::config::FileConfig;
use crate::Common;

fn out_dir(common: &Common) -> PathBuf {
    common
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("DVD_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run_id(prefix: &str, seed: u64) -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{prefix}-{secs}-s{seed}.csv")
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 32 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn load_dataset(path: &Path, mode: AccessMode) -> Result<FeatureDataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let ds = import_csv(path)?;
            Ok(match mode {
                AccessMode::FeaturesOnly => FeatureDataset::new(
                    ds.name().to_string(),
                    ds.features().clone(),
                    None,
                    None,
                )?,
                _ => ds,
            })
        }
        _ => load_feature_file(path, mode),
    }
}

fn parse_prior(name: &str) -> Result<PriorMode> {
    Ok(match name {
        "full" | "vicinity" => PriorMode::Vicinity,
        "prior-baseline" => PriorMode::Baseline,
        "prior-input-noise" => PriorMode::InputNoise {
            sigma: dvd_core::bench::PRIOR_NOISE_SIGMA,
        },
        "prior-latent-noise" => PriorMode::LatentNoise {
            sigma: dvd_core::bench::PRIOR_NOISE_SIGMA,
        },
        "prior-centroid" => PriorMode::Centroid,
        other => {
            return Err(DvdError::Parameter(format!(
                "unknown prior mode '{other}'"
            )))
        }
    })
}

#[allow(clippy::too_many_arguments)]
pub fn gen(
    common: &Common,
    seed: Option<u64>,
    theta: Option<f32>,
    samples_per_class: Option<usize>,
    cluster_scale: Option<f32>,
    scale_factor: Option<f32>,
    openset_unknown: Option<usize>,
) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = file.resolve("seed", seed, 0u64)?;
    let mut spec = ShiftSpec::default_benchmark(seed);
    spec.rotation_deg = file.resolve("theta", theta, spec.rotation_deg)?;
    spec.samples_per_class =
        file.resolve("samples_per_class", samples_per_class, spec.samples_per_class)?;
    spec.cluster_scale = file.resolve("cluster_scale", cluster_scale, spec.cluster_scale)?;
    spec.scale_factor = file.resolve("scale_factor", scale_factor, spec.scale_factor)?;
    let unknown = file.resolve_opt("openset_unknown", openset_unknown)?;

    let (source, target) = match unknown {
        Some(u) => gen_openset_variant(&spec, u)?,
        None => gen_two_domain_shift(&spec)?,
    };
    if spec.is_identity_shift() {
        println!("note: identity transform (no shift)");
    }
    let dir = out_dir(common);
    std::fs::create_dir_all(&dir)?;
    let src_path = dir.join("source.dvdf");
    let tgt_path = dir.join("target.dvdf");
    save_feature_file(&source, &src_path)?;
    save_feature_file(&target, &tgt_path)?;
    println!("wrote {}", src_path.display());
    println!("wrote {}", tgt_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    common: &Common,
    source: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f32>,
    momentum: Option<f32>,
    batch: Option<usize>,
    classes: Option<usize>,
    latent: Option<usize>,
    hidden: Option<String>,
    out_gs: Option<PathBuf>,
    out_f: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let ds = load_dataset(source, AccessMode::Labeled)?;
    let labels = ds
        .labels()
        .ok_or_else(|| DvdError::Data("source file carries no labels".into()))?;
    let inferred_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;

    let seed = file.resolve("seed", seed, 0u64)?;
    let mut cfg = SourceTrainConfig::defaults(
        file.resolve("classes", classes, inferred_classes)?,
        seed,
    );
    cfg.epochs = file.resolve("epochs", epochs, cfg.epochs)?;
    cfg.lr = file.resolve("lr", lr, cfg.lr)?;
    cfg.momentum = file.resolve("momentum", momentum, cfg.momentum)?;
    cfg.batch_size = file.resolve("batch", batch, cfg.batch_size)?;
    cfg.latent_dim = file.resolve("latent", latent, cfg.latent_dim)?;
    if let Some(h) = file.resolve_opt("hidden", hidden)? {
        cfg.encoder_hidden = crate::config::parse_width_list(&h)
            .map_err(|e| DvdError::Parameter(format!("bad width list '{h}': {e}")))?;
    }

    let (mut encoder, mut head, history) =
        train_source_classifier(ds.features(), labels, &cfg)?;
    encoder.freeze();
    head.freeze();

    let dir = out_dir(common);
    std::fs::create_dir_all(&dir)?;
    let gs_path = out_gs.unwrap_or_else(|| dir.join("gs.dvd1"));
    let f_path = out_f.unwrap_or_else(|| dir.join("f.dvd1"));
    save_net(&gs_path, NetRole::SourceEncoder, &encoder, None)?;
    save_net(&f_path, NetRole::Classifier, &head, None)?;

    let metrics_path = metrics.unwrap_or_else(|| dir.join(run_id("pretrain", seed)));
    let rows: Vec<String> = history
        .iter()
        .map(|h| format!("{},{:.6},{:.6}", h.epoch, h.ce, h.accuracy))
        .collect();
    write_csv(&metrics_path, "epoch,ce,accuracy", &rows)?;

    let final_acc = history.last().map(|h| h.accuracy).unwrap_or(f64::NAN);
    println!("wrote {}", gs_path.display());
    println!("wrote {}", f_path.display());
    println!("wrote {}", metrics_path.display());
    println!("source train accuracy: {final_acc:.4}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn traindvd(
    common: &Common,
    source: &Path,
    gs: &Path,
    f: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    k_s_dif: Option<usize>,
    ce_weight: Option<f32>,
    alpha_mode: Option<String>,
    t_steps: Option<usize>,
    drift_hidden: Option<String>,
    prior: Option<String>,
    out_d: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let ds = load_dataset(source, AccessMode::Labeled)?;
    let labels = ds
        .labels()
        .ok_or_else(|| DvdError::Data("source file carries no labels".into()))?;

    let encoder = load_net(gs, NetRole::SourceEncoder)?.net;
    if !encoder.is_frozen() {
        return Err(DvdError::Contract(
            "drift training requires a frozen source encoder checkpoint".into(),
        ));
    }
    let head = load_net(f, NetRole::Classifier)?.net;
    if !head.is_frozen() {
        return Err(DvdError::Contract(
            "drift training requires a frozen classifier checkpoint".into(),
        ));
    }

    let seed = file.resolve("seed", seed, 0u64)?;
    let mut cfg = DvdTrainConfig::defaults(seed);
    cfg.epochs = file.resolve("epochs", epochs, cfg.epochs)?;
    cfg.k_s_dif = file.resolve("k_s_dif", k_s_dif, cfg.k_s_dif)?;
    cfg.ce_weight = file.resolve("ce_weight", ce_weight, cfg.ce_weight)?;
    cfg.t_steps = file.resolve("t_steps", t_steps, cfg.t_steps)?;
    if let Some(h) = file.resolve_opt("drift_hidden", drift_hidden)? {
        cfg.drift_hidden = crate::config::parse_width_list(&h)
            .map_err(|e| DvdError::Parameter(format!("bad width list '{h}': {e}")))?;
    }
    let alpha = file.resolve("alpha_mode", alpha_mode, "discrete-loop".to_string())?;
    cfg.alpha_mode = match alpha.as_str() {
        "discrete-loop" => AlphaMode::DiscreteLoop,
        "uniform-sample" => AlphaMode::UniformSample,
        other => {
            return Err(DvdError::Parameter(format!(
                "unknown alpha mode '{other}'"
            )))
        }
    };
    let prior = file.resolve("prior", prior, "full".to_string())?;
    cfg.prior_mode = parse_prior(&prior)?;

    let latents = encoder.forward_eval(ds.features())?;
    let bank = FeatureBank::build(latents, DomainTag::Source)?;
    let ctx = DvdTrainContext {
        encoder: &encoder,
        raw_inputs: ds.features(),
    };
    let (model, history) = train_dvd(&bank, labels, &head, &cfg, Some(&ctx))?;

    let dir = out_dir(common);
    std::fs::create_dir_all(&dir)?;
    let d_path = out_d.unwrap_or_else(|| dir.join("d.dvd1"));
    save_drift_model(&d_path, &model)?;
    let metrics_path = metrics.unwrap_or_else(|| dir.join(run_id("traindvd", seed)));
    let rows: Vec<String> = history
        .iter()
        .map(|h| {
            format!(
                "{},{:.6},{:.6},{:.6}",
                h.epoch, h.l_dif, h.l_ce, h.drifted_accuracy
            )
        })
        .collect();
    write_csv(&metrics_path, "epoch,l_dif,l_ce,drifted_accuracy", &rows)?;
    println!("wrote {}", d_path.display());
    println!("wrote {}", metrics_path.display());
    if let Some(last) = history.last() {
        println!("drifted accuracy: {:.4}", last.drifted_accuracy);
    }
    Ok(())
}

pub struct AdaptArgs {
    pub common: Common,
    pub target: PathBuf,
    pub gs: PathBuf,
    pub f: PathBuf,
    pub d: PathBuf,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f32>,
    pub momentum: Option<f32>,
    pub batch: Option<usize>,
    pub k_t_dif: Option<usize>,
    pub k_t: Option<usize>,
    pub tau: Option<f32>,
    pub refresh_period: Option<usize>,
    pub variant: Option<String>,
    pub noise_sigma: Option<f32>,
    pub infer_t: Option<usize>,
    pub include_positive: bool,
    pub out_gt: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub dump_embeddings: Option<PathBuf>,
}

pub fn adapt(args: AdaptArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    // The adaptation path never loads label sections.
    let target = load_dataset(&args.target, AccessMode::FeaturesOnly)?;

    let encoder = load_net(&args.gs, NetRole::SourceEncoder)?.net;
    let head = load_net(&args.f, NetRole::Classifier)?.net;
    if !head.is_frozen() {
        return Err(DvdError::Contract(
            "adaptation requires a frozen classifier checkpoint".into(),
        ));
    }
    let model = load_drift_model(&args.d)?;
    if !model.is_frozen() {
        return Err(DvdError::Contract(
            "adaptation requires a frozen drift checkpoint".into(),
        ));
    }

    let seed = file.resolve("seed", args.seed, 0u64)?;
    let mut cfg = AdaptConfig::defaults(seed);
    cfg.epochs = file.resolve("epochs", args.epochs, cfg.epochs)?;
    cfg.lr = file.resolve("lr", args.lr, cfg.lr)?;
    cfg.momentum = file.resolve("momentum", args.momentum, cfg.momentum)?;
    cfg.batch_size = file.resolve("batch", args.batch, cfg.batch_size)?;
    cfg.k_t_dif = file.resolve("k_t_dif", args.k_t_dif, cfg.k_t_dif)?;
    cfg.k_t = file.resolve("k_t", args.k_t, cfg.k_t)?;
    cfg.temperature = file.resolve("tau", args.tau, cfg.temperature)?;
    cfg.refresh_period =
        file.resolve("refresh_period", args.refresh_period, cfg.refresh_period)?;
    cfg.include_positive_in_denominator = args.include_positive;
    let variant_name = file.resolve("variant", args.variant, "full".to_string())?;
    let variant: Variant = variant_name.parse()?;
    variant.apply(&mut cfg);
    if let Some(t) = file.resolve_opt("infer_t", args.infer_t)? {
        cfg.infer_t_override = Some(t);
    }

    let noise = file.resolve("noise_sigma", args.noise_sigma, 0.0f32)?;
    let target = if noise > 0.0 {
        target.perturbed(noise, seed)
    } else {
        target
    };

    let (adapted, history) = adapt_target(
        target.unlabeled(),
        &encoder,
        &head,
        &model,
        &cfg,
        None,
    )?;

    let dir = out_dir(&args.common);
    std::fs::create_dir_all(&dir)?;
    let gt_path = args.out_gt.unwrap_or_else(|| dir.join("gt.dvd1"));
    save_net(&gt_path, NetRole::TargetEncoder, &adapted, None)?;
    let metrics_path = args
        .metrics
        .unwrap_or_else(|| dir.join(run_id("adapt", seed)));
    let rows: Vec<String> = history
        .iter()
        .map(|h| {
            let acc = h
                .target_accuracy
                .map(|a| format!("{a:.6}"))
                .unwrap_or_default();
            format!("{},{:.6},{acc}", h.epoch, h.l_cls)
        })
        .collect();
    write_csv(&metrics_path, "epoch,l_cls,target_accuracy", &rows)?;

    if let Some(dump) = args.dump_embeddings {
        let latents = adapted.forward_eval(target.features())?;
        let logits = head.forward_eval(&latents)?;
        let mut rows = Vec::with_capacity(latents.rows());
        for r in 0..latents.rows() {
            let pred = Prediction::from_logits(logits.row(r));
            let z: Vec<String> = latents.row(r).iter().map(|v| format!("{v:.6}")).collect();
            let p: Vec<String> = pred.probs().iter().map(|v| format!("{v:.6}")).collect();
            rows.push(format!("{r},{},{}", z.join(","), p.join(",")));
        }
        let zh: Vec<String> = (0..latents.cols()).map(|i| format!("z{i}")).collect();
        let ph: Vec<String> = (0..logits.cols()).map(|i| format!("p{i}")).collect();
        write_csv(
            &dump,
            &format!("index,{},{}", zh.join(","), ph.join(",")),
            &rows,
        )?;
        println!("wrote {}", dump.display());
    }

    println!("wrote {}", gt_path.display());
    println!("wrote {}", metrics_path.display());
    Ok(())
}

/// Pick scoring labels: hidden benchmark labels when present, else the
/// training labels.
fn scoring_labels(ds: &FeatureDataset) -> Result<&[u32]> {
    ds.hidden_labels()
        .or_else(|| ds.labels())
        .ok_or_else(|| DvdError::Data("evaluation data carries no labels".into()))
}

fn load_encoder_any_role(path: &Path) -> Result<MlpNet> {
    let loaded = dvd_core::checkpoint::load_any_net(path)?;
    match loaded.role {
        NetRole::SourceEncoder | NetRole::TargetEncoder => Ok(loaded.net),
        other => Err(DvdError::Contract(format!(
            "checkpoint role mismatch: {} holds {}, expected an encoder",
            path.display(),
            other.name()
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    common: &Common,
    data: &Path,
    encoder: &Path,
    f: &Path,
    mode: Option<String>,
    known_classes: Option<usize>,
    ct: bool,
    d: Option<PathBuf>,
    ct_threshold: Option<f32>,
    k: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let ds = load_dataset(data, AccessMode::Scoring)?;
    let labels = scoring_labels(&ds)?;
    let encoder = load_encoder_any_role(encoder)?;
    let head = load_net(f, NetRole::Classifier)?.net;

    let mode = file.resolve("mode", mode, "closed".to_string())?;
    let seed = file.resolve("seed", seed, 0u64)?;
    match mode.as_str() {
        "closed" => {
            let rep = adaptation::evaluate(
                &encoder,
                &head,
                ds.features(),
                labels,
                EvalMode::Closed,
            )?;
            println!("overall accuracy: {:.4}", rep.overall_accuracy);
            println!("macro accuracy:   {:.4}", rep.macro_accuracy);
            for (c, a) in rep.per_class_accuracy.iter().enumerate() {
                println!("class {c} accuracy: {a:.4}");
            }
        }
        "openset" => {
            let known = file.resolve(
                "known_classes",
                known_classes,
                head.output_width(),
            )?;
            let drift_model: Option<DriftModel> = match (ct, &d) {
                (true, Some(path)) => Some(load_drift_model(path)?),
                (true, None) => {
                    return Err(DvdError::Parameter(
                        "--ct needs a drift checkpoint via --d".into(),
                    ))
                }
                _ => None,
            };
            let bank;
            let detector = match &drift_model {
                Some(m) => {
                    bank = FeatureBank::build(
                        encoder.forward_eval(ds.features())?,
                        DomainTag::Target,
                    )?;
                    Some(CtDetector {
                        model: m,
                        bank: &bank,
                        k: file.resolve("k", k, 15usize)?,
                        threshold: file.resolve("ct_threshold", ct_threshold, CT_THRESHOLD)?,
                        seed,
                    })
                }
                None => None,
            };
            let rep = adaptation::evaluate(
                &encoder,
                &head,
                ds.features(),
                labels,
                EvalMode::OpenSet {
                    known_classes: known,
                    detector,
                },
            )?;
            let os = rep.open_set.expect("openset mode");
            println!("overall accuracy:  {:.4}", rep.overall_accuracy);
            println!("known accuracy:    {:.4}", os.known_accuracy);
            println!("unknown accuracy:  {:.4}", os.unknown_accuracy);
            println!("h-score:           {:.4}", os.h_score);
        }
        other => {
            return Err(DvdError::Parameter(format!(
                "unknown eval mode '{other}' (closed|openset)"
            )))
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn transform(
    common: &Common,
    data: &Path,
    encoder: &Path,
    f: &Path,
    d: &Path,
    k: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let ds = load_dataset(data, AccessMode::Scoring)?;
    let encoder = load_encoder_any_role(encoder)?;
    let head = load_net(f, NetRole::Classifier)?.net;
    let model = load_drift_model(d)?;
    let k = file.resolve("k", k, dvd_core::bench::TRANSFORM_K)?;
    let seed = file.resolve("seed", seed, 0u64)?;

    let latents = encoder.forward_eval(ds.features())?;
    let bank = FeatureBank::build(latents, DomainTag::Target)?;
    let mut rng = SeedStream::derive(seed, "transform-cli");
    let mut preds = Vec::with_capacity(ds.len());
    let mut rows = Vec::with_capacity(ds.len());
    for r in 0..ds.len() {
        let pred = transform_inference(
            ds.features().row(r),
            &encoder,
            &head,
            &model,
            &bank,
            k,
            &mut rng,
        )?;
        let probs: Vec<String> = pred.probs().iter().map(|v| format!("{v:.6}")).collect();
        rows.push(format!("{r},{},{}", pred.argmax(), probs.join(",")));
        preds.push(pred.argmax());
    }

    if let Some(out) = out {
        let ph: Vec<String> = (0..head.output_width()).map(|i| format!("p{i}")).collect();
        write_csv(&out, &format!("index,class,{}", ph.join(",")), &rows)?;
        println!("wrote {}", out.display());
    }
    if let Ok(labels) = scoring_labels(&ds) {
        let plain = classify(&encoder, &head, ds.features())?;
        println!("plain accuracy:       {:.4}", accuracy(&plain, labels));
        println!("transformed accuracy: {:.4}", accuracy(&preds, labels));
    }
    Ok(())
}

pub fn ablate(
    common: &Common,
    suite: Option<String>,
    seeds: Option<String>,
    theta: Option<f32>,
    out: Option<PathBuf>,
    openset: bool,
) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let suite = file.resolve(
        "suite",
        suite,
        "full,mean-pool,augment-only".to_string(),
    )?;
    let variants: Vec<Variant> = suite
        .split(',')
        .map(|s| s.trim().parse::<Variant>())
        .collect::<Result<_>>()?;
    let seeds_raw = file.resolve("seeds", seeds, "1,2,3,4,5".to_string())?;
    let seeds: Vec<u64> = seeds_raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| DvdError::Parameter(format!("bad seed '{s}': {e}")))
        })
        .collect::<Result<_>>()?;

    let mut cfg = BenchConfig::desk_default(seeds.first().copied().unwrap_or(0));
    cfg.shift.rotation_deg = file.resolve("theta", theta, cfg.shift.rotation_deg)?;
    cfg.shift.validate()?;

    let outcomes = run_matrix(&seeds, &variants, &cfg)?;
    let mut rows: Vec<String> = outcomes
        .iter()
        .map(|o| {
            format!(
                "{},{},{:.6},{:.6}",
                o.variant.name(),
                o.seed,
                o.source_only_accuracy,
                o.adapted_accuracy
            )
        })
        .collect();
    if openset {
        for &seed in &seeds {
            let os = run_openset(seed, &cfg, 1, CT_THRESHOLD)?;
            rows.push(format!(
                "openset-closed,{seed},{:.6},{:.6}",
                os.closed_h_score, os.closed_h_score
            ));
            rows.push(format!(
                "openset-ct,{seed},{:.6},{:.6}",
                os.closed_h_score, os.ct_h_score
            ));
        }
    }

    let dir = out_dir(common);
    std::fs::create_dir_all(&dir)?;
    let out = out.unwrap_or_else(|| dir.join(run_id("ablate", seeds[0])));
    write_csv(&out, "variant,seed,source_only,accuracy", &rows)?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}
