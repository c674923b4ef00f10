//! Command-line entry points: dataset generation, prior pretraining, joint
//! training, evaluation, robustness sweeps and the four-row component sweep.

mod config;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use tamperloc_core::checkpoint::RngState;
use tamperloc_core::mae;
use tamperloc_core::nn::ParamStore;
use tamperloc_core::pipeline::{self, adopt_pretrained_prior, AblationFlags, Model};
use tamperloc_core::report::{self, AblationRow};
use tamperloc_core::robustness::{robustness_sweep, PerturbKind, PerturbSpec};
use tamperloc_core::synth::{self, Split};

#[derive(Parser)]
#[command(
    name = "tamperloc",
    about = "Image tamper localization via a frozen reconstruction prior and prompt-guided residual amplification",
    version
)]
struct Cli {
    /// TOML run configuration; CLI flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed for data order, initialization and masking.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic forgery dataset (images, masks, manifest).
    GenData(GenDataArgs),
    /// Pretrain the reconstruction prior on authentic images, then freeze it.
    PretrainMae(PretrainArgs),
    /// Joint two-stage training on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split; emits per-image metrics CSV.
    Eval(EvalArgs),
    /// JPEG / blur degradation sweep; emits CSV and an SVG plot.
    Robustness(RobustnessArgs),
    /// Train the four component configurations and tabulate validation IoU.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Fraction of records left authentic per split.
    #[arg(long)]
    authentic_frac: Option<f32>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory (must contain only authentic records in train).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained prior checkpoint from `pretrain-mae`.
    #[arg(long)]
    mae: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (default: alongside the checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Single-stream segmenter over stacked channels.
    #[arg(long)]
    no_dssn_dual: bool,
    /// Skip the prompt/FiLM second stage entirely.
    #[arg(long)]
    no_tapi: bool,
    /// Keep the frozen decoder in stage two (FiLM only).
    #[arg(long)]
    no_adaptive_decoder: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Per-image metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value = "robustness.csv")]
    out: PathBuf,
    /// F1-vs-level plot (SVG).
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    mae: PathBuf,
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
    /// Seeds per configuration.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::PretrainMae(a) => pretrain_mae(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Robustness(a) => robustness(cfg, a),
        Command::Ablate(a) => ablate(cfg, a),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse::<Split>().map_err(|e| anyhow::anyhow!("{e}"))
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<()> {
    let g = &mut cfg.gen;
    if let Some(v) = a.n_train {
        g.n_train = v;
    }
    if let Some(v) = a.n_val {
        g.n_val = v;
    }
    if let Some(v) = a.n_test {
        g.n_test = v;
    }
    if let Some(v) = a.resolution {
        g.resolution = v;
    }
    if let Some(v) = a.patch_size {
        g.patch_size = v;
    }
    if let Some(v) = a.authentic_frac {
        g.authentic_frac = v;
    }
    let manifests = synth::generate_dataset(&a.out, g)?;
    for m in &manifests {
        println!("{}: {} records", m.split.as_str(), m.records.len());
    }
    println!("dataset written to {}", a.out.display());
    Ok(())
}

fn pretrain_mae(mut cfg: RunConfig, a: PretrainArgs) -> Result<()> {
    if let Some(v) = a.epochs {
        cfg.pretrain.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.pretrain.lr = v;
    }
    let records = synth::load_dataset(&a.data, Split::Train)?;
    let mut store = ParamStore::<tamperloc_core::Real>::new();
    let model = mae::Mae::build_seeded(&mut store, cfg.pretrain.seed, cfg.mae)?;
    let stats = mae::pretrain(&mut store, &model, &records, &cfg.pretrain)?;
    println!(
        "pretrained {} epochs on {} images: loss {:.5} -> {:.5}",
        cfg.pretrain.epochs,
        records.len(),
        stats.epoch_losses.first().copied().unwrap_or(f64::NAN),
        stats.final_train_loss
    );

    let val = synth::load_dataset(&a.data, Split::Val)?;
    if !val.is_empty() {
        let mse = mae::masked_eval_mse(&store, &model, &val, cfg.pretrain.seed)?;
        let baseline = mae::mean_patch_baseline_mse(&model, &records, &val, cfg.pretrain.seed);
        println!("val masked mse {mse:.5} (mean-patch baseline {baseline:.5})");
    }

    pipeline::save_mae_checkpoint(
        &a.out,
        &store,
        cfg.mae,
        RngState {
            seed: cfg.pretrain.seed,
            next_epoch: cfg.pretrain.epochs,
        },
    )?;
    println!("prior checkpoint written to {}", a.out.display());
    Ok(())
}

fn build_model_with_prior(
    cfg: &RunConfig,
    mae_ckpt_path: &std::path::Path,
    flags: AblationFlags,
    seed: u64,
) -> Result<Model<tamperloc_core::Real>> {
    let (_, _, ckpt) = pipeline::load_mae_checkpoint::<tamperloc_core::Real>(mae_ckpt_path)
        .with_context(|| format!("loading prior checkpoint {}", mae_ckpt_path.display()))?;
    let mut model = Model::build(
        ckpt.mae,
        cfg.dssn.clone(),
        cfg.prompt.clone(),
        flags,
        cfg.train.detach_prompt,
        seed,
    )?;
    adopt_pretrained_prior(&mut model, &ckpt)?;
    Ok(model)
}

fn train_flags(cfg: &RunConfig, a: &TrainArgs) -> AblationFlags {
    let mut flags = cfg.train.flags;
    if a.no_dssn_dual {
        flags.use_dssn_dual = false;
    }
    if a.no_tapi {
        flags.use_tapi = false;
        flags.use_adaptive_decoder = false;
    }
    if a.no_adaptive_decoder {
        flags.use_adaptive_decoder = false;
    }
    flags
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    cfg.train.flags = train_flags(&cfg, &a);
    let train_cfg = cfg.train.clone();

    let train_recs = synth::load_dataset(&a.data, Split::Train)?;
    let val_recs = synth::load_dataset(&a.data, Split::Val)?;
    let mut model = build_model_with_prior(&cfg, &a.mae, train_cfg.flags, train_cfg.seed)?;
    let outcome = pipeline::train(&mut model, &train_recs, &val_recs, &train_cfg)?;
    println!(
        "trained {} epochs (best epoch {}, val refined IoU {:.4})",
        outcome.epochs_run, outcome.best_epoch, outcome.best_val_iou
    );

    let log_path = a
        .log
        .unwrap_or_else(|| a.out.with_extension("log.csv"));
    report::write_train_log(&log_path, &outcome.log)?;
    pipeline::save_model_checkpoint(
        &a.out,
        &model,
        Some(&train_cfg),
        RngState {
            seed: train_cfg.seed,
            next_epoch: outcome.epochs_run,
        },
    )?;
    println!(
        "checkpoint written to {} (log: {})",
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let (model, _) = pipeline::load_model_checkpoint::<tamperloc_core::Real>(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let records = synth::load_dataset(&a.data, split)?;
    let (coarse, refined) = pipeline::evaluate(&model, &records, cfg.train.batch_size)?;
    println!(
        "{} split ({} images): coarse IoU {:.4} F1 {:.4} | refined IoU {:.4} F1 {:.4}",
        split.as_str(),
        coarse.len(),
        coarse.iou,
        coarse.f1,
        refined.iou,
        refined.f1
    );
    if let Some(out) = a.out {
        report::write_metrics_csv(&out, &coarse, &refined)?;
        println!("metrics written to {}", out.display());
    }
    Ok(())
}

fn robustness(cfg: RunConfig, a: RobustnessArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let (model, _) = pipeline::load_model_checkpoint::<tamperloc_core::Real>(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let records = synth::load_dataset(&a.data, split)?;
    if records.is_empty() {
        bail!("split {} is empty", split.as_str());
    }
    let specs = [
        PerturbSpec {
            kind: PerturbKind::Jpeg,
            levels: cfg.jpeg_levels.clone(),
        },
        PerturbSpec {
            kind: PerturbKind::GaussianBlur,
            levels: cfg.blur_levels.clone(),
        },
    ];
    let sweep = robustness_sweep(&model, &records, &specs, cfg.train.batch_size)?;
    for row in &sweep.rows {
        println!(
            "{:>14} level {:>3}: IoU {:.4} F1 {:.4} (n={})",
            row.kind.as_str(),
            row.level,
            row.mean_iou,
            row.mean_f1,
            row.n_images
        );
    }
    report::write_robustness_csv(&a.out, &sweep)?;
    println!("sweep written to {}", a.out.display());

    if let Some(plot) = a.plot {
        let series: Vec<(String, Vec<(f64, f64)>)> = [PerturbKind::Jpeg, PerturbKind::GaussianBlur]
            .iter()
            .map(|k| {
                (
                    k.as_str().to_string(),
                    sweep
                        .rows_for(*k)
                        .iter()
                        .map(|r| (r.level as f64, r.mean_f1))
                        .collect(),
                )
            })
            .collect();
        report::svg_line_plot(&plot, "refined F1 vs distortion level", "level", "F1", &series)?;
        println!("plot written to {}", plot.display());
    }
    Ok(())
}

fn ablate(mut cfg: RunConfig, a: AblateArgs) -> Result<()> {
    if let Some(v) = a.epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    let train_recs = synth::load_dataset(&a.data, Split::Train)?;
    let val_recs = synth::load_dataset(&a.data, Split::Val)?;

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (index, flags) in AblationFlags::ablation_table() {
        let mut ious = Vec::new();
        for s in 0..a.seeds {
            let seed = cfg.train.seed.wrapping_add(s);
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            train_cfg.flags = flags;
            let mut model = build_model_with_prior(&cfg, &a.mae, flags, seed)?;
            let outcome = pipeline::train(&mut model, &train_recs, &val_recs, &train_cfg)?;
            let (_, refined) = pipeline::evaluate(&model, &val_recs, train_cfg.batch_size)?;
            println!(
                "config {index} seed {seed}: val refined IoU {:.4} F1 {:.4} ({} epochs)",
                refined.iou, refined.f1, outcome.epochs_run
            );
            rows.push(AblationRow {
                index: index.to_string(),
                use_dssn_dual: flags.use_dssn_dual,
                use_tapi: flags.use_tapi,
                use_adaptive_decoder: flags.use_adaptive_decoder,
                seed,
                val_iou_ref: refined.iou,
                val_f1_ref: refined.f1,
            });
            ious.push(refined.iou);
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        summary.push((index, mean));
    }
    report::write_ablation_csv(&a.out, &rows)?;
    println!("\nmean val refined IoU over {} seeds:", a.seeds);
    for (index, mean) in summary {
        println!("  {index}: {mean:.4}");
    }
    println!("table written to {}", a.out.display());
    Ok(())
}

