mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Drift-diffusion adaptation pipelines over feature vectors: data
/// generation, source pre-training, drift training, target adaptation,
/// inference transform, evaluation and ablation suites.
#[derive(Parser)]
#[command(name = "dvd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
pub(crate) struct Common {
    /// Flat key=value config file; flags override it.
    #[arg(long, global = true)]
    pub(crate) config: Option<PathBuf>,
    /// Output directory (falls back to $DVD_OUT_DIR, then ".").
    #[arg(long, global = true)]
    pub(crate) out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain benchmark as DVDF feature files.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Rotation in degrees, in [0, 360).
        #[arg(long)]
        theta: Option<f32>,
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[arg(long)]
        cluster_scale: Option<f32>,
        #[arg(long)]
        scale_factor: Option<f32>,
        /// Hold out this many classes from the source (open-set variant).
        #[arg(long)]
        openset_unknown: Option<usize>,
    },
    /// Train the source classifier; writes Gs and F checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Labeled source feature file (DVDF or CSV).
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        momentum: Option<f32>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        latent: Option<usize>,
        /// Encoder hidden widths, comma-separated.
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        out_gs: Option<PathBuf>,
        #[arg(long)]
        out_f: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train the drift model on the source bank; writes the D checkpoint.
    Traindvd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        gs: PathBuf,
        #[arg(long, name = "f")]
        f: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        k_s_dif: Option<usize>,
        #[arg(long)]
        ce_weight: Option<f32>,
        /// "discrete-loop" or "uniform-sample".
        #[arg(long)]
        alpha_mode: Option<String>,
        #[arg(long)]
        t_steps: Option<usize>,
        /// Drift net hidden widths, comma-separated.
        #[arg(long)]
        drift_hidden: Option<String>,
        /// full | prior-baseline | prior-input-noise | prior-latent-noise |
        /// prior-centroid.
        #[arg(long)]
        prior: Option<String>,
        #[arg(long)]
        out_d: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Adapt the target encoder against frozen F and D; writes Gt.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Target feature file; loaded without any label sections.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        gs: PathBuf,
        #[arg(long, name = "f")]
        f: PathBuf,
        #[arg(long)]
        d: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        momentum: Option<f32>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        k_t_dif: Option<usize>,
        #[arg(long)]
        k_t: Option<usize>,
        #[arg(long)]
        tau: Option<f32>,
        #[arg(long)]
        refresh_period: Option<usize>,
        /// Ablation selector: full | mean-pool | augment-only |
        /// stochastic-drift | mismatched-schedule | prior-baseline |
        /// prior-input-noise | prior-latent-noise | prior-centroid.
        #[arg(long)]
        variant: Option<String>,
        /// Gaussian noise added to target features before adaptation.
        #[arg(long)]
        noise_sigma: Option<f32>,
        /// Override the sampling step count at adaptation time.
        #[arg(long)]
        infer_t: Option<usize>,
        /// Count the positive pair in the contrastive denominator.
        #[arg(long)]
        include_positive: bool,
        #[arg(long)]
        out_gt: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write per-sample (index, latent, prediction) rows after adapting.
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
    },
    /// Evaluate a checkpointed encoder + head on a labeled feature file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint (Gs or Gt).
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, name = "f")]
        f: PathBuf,
        /// "closed" or "openset".
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        known_classes: Option<usize>,
        /// Enable confidence-thresholded rejection (needs --d).
        #[arg(long)]
        ct: bool,
        #[arg(long)]
        d: Option<PathBuf>,
        #[arg(long)]
        ct_threshold: Option<f32>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify features through the drift transform without adaptation.
    Transform {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, name = "f")]
        f: PathBuf,
        #[arg(long)]
        d: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Prediction CSV (index, class, per-class probabilities).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ablation variants over shared seeds; writes a comparison CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names.
        #[arg(long)]
        suite: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        theta: Option<f32>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run the open-set comparison per seed.
        #[arg(long)]
        openset: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            common,
            seed,
            theta,
            samples_per_class,
            cluster_scale,
            scale_factor,
            openset_unknown,
        } => commands::gen(
            &common,
            seed,
            theta,
            samples_per_class,
            cluster_scale,
            scale_factor,
            openset_unknown,
        ),
        Command::Pretrain {
            common,
            source,
            seed,
            epochs,
            lr,
            momentum,
            batch,
            classes,
            latent,
            hidden,
            out_gs,
            out_f,
            metrics,
        } => commands::pretrain(
            &common,
            &source,
            seed,
            epochs,
            lr,
            momentum,
            batch,
            classes,
            latent,
            hidden,
            out_gs,
            out_f,
            metrics,
        ),
        Command::Traindvd {
            common,
            source,
            gs,
            f,
            seed,
            epochs,
            k_s_dif,
            ce_weight,
            alpha_mode,
            t_steps,
            drift_hidden,
            prior,
            out_d,
            metrics,
        } => commands::traindvd(
            &common,
            &source,
            &gs,
            &f,
            seed,
            epochs,
            k_s_dif,
            ce_weight,
            alpha_mode,
            t_steps,
            drift_hidden,
            prior,
            out_d,
            metrics,
        ),
        Command::Adapt {
            common,
            target,
            gs,
            f,
            d,
            seed,
            epochs,
            lr,
            momentum,
            batch,
            k_t_dif,
            k_t,
            tau,
            refresh_period,
            variant,
            noise_sigma,
            infer_t,
            include_positive,
            out_gt,
            metrics,
            dump_embeddings,
        } => commands::adapt(commands::AdaptArgs {
            common,
            target,
            gs,
            f,
            d,
            seed,
            epochs,
            lr,
            momentum,
            batch,
            k_t_dif,
            k_t,
            tau,
            refresh_period,
            variant,
            noise_sigma,
            infer_t,
            include_positive,
            out_gt,
            metrics,
            dump_embeddings,
        }),
        Command::Eval {
            common,
            data,
            encoder,
            f,
            mode,
            known_classes,
            ct,
            d,
            ct_threshold,
            k,
            seed,
        } => commands::eval(
            &common,
            &data,
            &encoder,
            &f,
            mode,
            known_classes,
            ct,
            d,
            ct_threshold,
            k,
            seed,
        ),
        Command::Transform {
            common,
            data,
            encoder,
            f,
            d,
            k,
            seed,
            out,
        } => commands::transform(&common, &data, &encoder, &f, &d, k, seed, out),
        Command::Ablate {
            common,
            suite,
            seeds,
            theta,
            out,
            openset,
        } => commands::ablate(&common, suite, seeds, theta, out, openset),
    };

    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
