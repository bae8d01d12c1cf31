//! Command-line front end: corpus generation, training, evaluation,
//! ablation, hyperparameter sweeps and the gradient self-check.
//!
//! Every subcommand resolves its settings as flags > config file >
//! defaults, echoes the resolved `key = value` lines, and writes them to
//! `resolved.cfg` in its output directory before starting long work, so
//! a run can always be reproduced from its artifacts. Exit codes: 0 on
//! success, 1 on usage errors, 2 on data or config errors.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{parse_schedule, FileConfig};
use forecast_core::data::{
    generate_synthetic_dataset, DatasetManifest, GeneratorConfig, PROTOCOL_PAIRS,
};
use forecast_core::eval::{evaluate, run_ablation, run_sweep, SweepParam};
use forecast_core::gradcheck::{run_suite, FD_TOLERANCE};
use forecast_core::model::{ModelConfig, ModelParams, Variant};
use forecast_core::train::{train, TrainConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "forecast",
    about = "Action forecasting on per-frame feature sequences",
    version
)]
struct Cli {
    /// Config file of `key = value` lines; explicit flags win
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus with a manifest
    GenData(GenDataArgs),
    /// Train a model on a corpus manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint over the (p, q) protocol grid
    Eval(EvalArgs),
    /// Train and score all five architecture variants
    Ablate(AblateArgs),
    /// Train once per value of one hyperparameter
    Sweep(SweepArgs),
    /// Verify analytic gradients against finite differences
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// Observed-classifier loss weight [default: 0.5]
    #[arg(long)]
    beta: Option<f64>,
    /// Percent of observed frames masked during training [default: 10]
    #[arg(long)]
    mask: Option<f64>,
    /// Attention heads [default: 2]
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward width inside the attention block [default: 48]
    #[arg(long)]
    dff: Option<usize>,
    /// Encoder hidden width, split across the two directions [default: 32]
    #[arg(long)]
    dh: Option<usize>,
    /// Observed-window length after resampling [default: 24]
    #[arg(long)]
    tfixed: Option<usize>,
    /// Decoder steps per future window [default: 16]
    #[arg(long)]
    nf: Option<usize>,
    /// Dropout rate on recurrent inputs [default: 0.1]
    #[arg(long)]
    dropout: Option<f64>,
    /// Label-embedding width [default: 16]
    #[arg(long)]
    embed: Option<usize>,
    /// Architecture: gru_only | feat_attn | feat_attn_obs | full |
    /// temporal_attn [default: full]
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct TrainFlags {
    /// Maximum training epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Sequences per optimizer step [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs without validation improvement before stopping [default: 10]
    #[arg(long)]
    patience: Option<usize>,
    /// Root RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training/evaluation (p, q) schedule, e.g. `20:10,30:50`
    /// [default: the 8-cell protocol grid]
    #[arg(long)]
    pq: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory to create the corpus in
    #[arg(long)]
    out: PathBuf,
    /// Corpus profile: standard | sparse [default: standard]
    #[arg(long)]
    profile: Option<String>,
    /// Action classes [default: the profile's]
    #[arg(long)]
    classes: Option<usize>,
    /// Feature dimensions per frame [default: the profile's]
    #[arg(long)]
    dim: Option<usize>,
    /// Leading dimensions that carry class signal [default: the profile's]
    #[arg(long)]
    informative: Option<usize>,
    /// Per-frame Gaussian noise level [default: the profile's]
    #[arg(long)]
    noise: Option<f64>,
    /// Generator seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus manifest to train on
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for checkpoints and the log
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    trainer: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus manifest whose test split is scored
    #[arg(long)]
    manifest: PathBuf,
    /// Trained checkpoint (`best.fafc` or `last.fafc`)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report directory [default: the checkpoint's directory]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation threads [default: 1]
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
    /// Evaluation (p, q) schedule [default: the 8-cell protocol grid]
    #[arg(long)]
    pq: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// Corpus manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the per-variant runs and the table
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    /// Evaluation threads [default: 1]
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    trainer: TrainFlags,
}

#[derive(Args)]
struct SweepArgs {
    /// Corpus manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the per-value runs and the curve
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
    /// Hyperparameter to vary: mask | beta
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated values to sweep, e.g. `0,5,10`
    #[arg(long)]
    values: Option<String>,
    /// Evaluation threads [default: 1]
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    trainer: TrainFlags,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Base seed for the five check rounds [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; only real parse
            // failures are usage errors.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), String> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::GenData(args) => gen_data(args, &file),
        Command::Train(args) => run_train(args, &file),
        Command::Eval(args) => run_eval(args, &file),
        Command::Ablate(args) => run_ablate(args, &file),
        Command::Sweep(args) => run_sweep_cmd(args, &file),
        Command::GradCheck(args) => grad_check(args, &file),
    }
}

/// Prints the resolved lines and stores them as `resolved.cfg` in the
/// output directory, so they double as a reusable `--config` file.
fn publish_config(out_dir: &Path, header: &str, lines: &[String]) -> Result<(), String> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| format!("creating {}: {e}", out_dir.display()))?;
    let mut text = format!("# {header}\n");
    for line in lines {
        println!("{line}");
        text.push_str(line);
        text.push('\n');
    }
    let path = out_dir.join("resolved.cfg");
    std::fs::write(&path, text).map_err(|e| format!("writing {}: {e}", path.display()))
}

fn parse_variant(name: &str) -> Result<Variant, String> {
    Variant::all()
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            let names: Vec<&str> = Variant::all().into_iter().map(|v| v.name()).collect();
            format!("unknown variant `{name}` (expected one of {})", names.join(", "))
        })
}

/// Desk-scale model with the manifest's class count and feature width,
/// adjusted by variant and per-field overrides.
fn resolve_model(
    flags: &ModelFlags,
    file: &FileConfig,
    n_classes: usize,
    feature_dim: usize,
    echo: &mut Vec<String>,
) -> Result<ModelConfig, String> {
    let base = ModelConfig::desk(n_classes, feature_dim);
    let variant_name =
        file.resolve("variant", flags.variant.clone(), "full".to_string(), echo)?;
    let mut cfg = base.with_variant(parse_variant(&variant_name)?);
    cfg.hidden_dim = file.resolve("dh", flags.dh, cfg.hidden_dim, echo)?;
    cfg.t_fixed = file.resolve("tfixed", flags.tfixed, cfg.t_fixed, echo)?;
    cfg.future_steps = file.resolve("nf", flags.nf, cfg.future_steps, echo)?;
    cfg.heads = file.resolve("heads", flags.heads, cfg.heads, echo)?;
    cfg.ff_dim = file.resolve("dff", flags.dff, cfg.ff_dim, echo)?;
    cfg.embed_dim = file.resolve("embed", flags.embed, cfg.embed_dim, echo)?;
    cfg.beta = file.resolve("beta", flags.beta, cfg.beta, echo)?;
    cfg.mask_percent = file.resolve("mask", flags.mask, cfg.mask_percent, echo)?;
    // The variant decides whether masking applies at all; a zero
    // percentage then turns it off cleanly.
    cfg.masking = cfg.masking && cfg.mask_percent > 0.0;
    cfg.dropout = file.resolve("dropout", flags.dropout, cfg.dropout, echo)?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn resolve_trainer(
    flags: &TrainFlags,
    file: &FileConfig,
    echo: &mut Vec<String>,
) -> Result<TrainConfig, String> {
    let mut cfg = TrainConfig::default();
    cfg.max_epochs = file.resolve("epochs", flags.epochs, cfg.max_epochs, echo)?;
    cfg.batch_size = file.resolve("batch", flags.batch, cfg.batch_size, echo)?;
    cfg.learning_rate = file.resolve("lr", flags.lr, cfg.learning_rate, echo)?;
    cfg.patience = file.resolve("patience", flags.patience, cfg.patience, echo)?;
    cfg.seed = file.resolve("seed", flags.seed, cfg.seed, echo)?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn resolve_schedule(
    flag: &Option<String>,
    file: &FileConfig,
    echo: &mut Vec<String>,
) -> Result<Vec<(f64, f64)>, String> {
    let default = PROTOCOL_PAIRS
        .iter()
        .map(|(p, q)| format!("{p}:{q}"))
        .collect::<Vec<_>>()
        .join(",");
    let raw = file.resolve_raw("pq", flag.clone(), &default);
    echo.push(format!("pq = {raw}"));
    parse_schedule(&raw)
}

fn resolve_workers(
    flag: Option<usize>,
    file: &FileConfig,
    echo: &mut Vec<String>,
) -> Result<usize, String> {
    let workers = file.resolve("workers", flag, 1usize, echo)?;
    if workers == 0 {
        return Err("workers must be at least 1".to_string());
    }
    Ok(workers)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, String> {
    DatasetManifest::load(path).map_err(|e| e.to_string())
}

fn gen_data(args: GenDataArgs, file: &FileConfig) -> Result<(), String> {
    let mut echo = Vec::new();
    let profile = file.resolve("profile", args.profile, "standard".to_string(), &mut echo)?;
    let seed = file.resolve("seed", args.seed, 0u64, &mut echo)?;
    let mut gen = match profile.as_str() {
        "standard" => GeneratorConfig::standard(seed),
        "sparse" => GeneratorConfig::sparse(seed),
        other => return Err(format!("unknown profile `{other}` (expected standard or sparse)")),
    };
    gen.seed = seed;
    let classes = file.resolve("classes", args.classes, gen.n_classes, &mut echo)?;
    if classes != gen.n_classes {
        // Rebuild the profile's own chain family at the new class count.
        gen.transitions = match profile.as_str() {
            "standard" if classes >= 3 * gen.n_activities() => {
                GeneratorConfig::disjoint_cycles(classes, gen.n_activities(), 0.98)
            }
            "sparse" if classes >= gen.n_activities() + 2 => {
                GeneratorConfig::marker_cycles(classes, gen.n_activities(), 0.98)
            }
            _ => GeneratorConfig::cyclic_transitions(classes, gen.n_activities(), 0.9),
        };
        gen.n_classes = classes;
    }
    gen.feature_dim = file.resolve("dim", args.dim, gen.feature_dim, &mut echo)?;
    gen.informative_dims = file.resolve(
        "informative",
        args.informative,
        gen.informative_dims.min(gen.feature_dim),
        &mut echo,
    )?;
    gen.noise = file.resolve("noise", args.noise, gen.noise, &mut echo)?;
    gen.validate().map_err(|e| e.to_string())?;

    publish_config(&args.out, &format!("forecast gen-data --out {}", args.out.display()), &echo)?;
    let manifest = generate_synthetic_dataset(&gen, &args.out).map_err(|e| e.to_string())?;
    println!(
        "wrote {} sequences under {} (manifest.txt: N={}, d={})",
        manifest.entries.len(),
        args.out.display(),
        manifest.n_classes,
        manifest.feature_dim
    );
    Ok(())
}

fn run_train(args: TrainArgs, file: &FileConfig) -> Result<(), String> {
    let manifest = load_manifest(&args.manifest)?;
    let mut echo = Vec::new();
    let mcfg = resolve_model(&args.model, file, manifest.n_classes, manifest.feature_dim, &mut echo)?;
    let tcfg = resolve_trainer(&args.trainer, file, &mut echo)?;
    let schedule = resolve_schedule(&args.trainer.pq, file, &mut echo)?;
    let header = format!(
        "forecast train --manifest {} --out {}",
        args.manifest.display(),
        args.out.display()
    );
    publish_config(&args.out, &header, &echo)?;

    let outcome =
        train(&manifest, &mcfg, &tcfg, &schedule, &args.out, None).map_err(|e| e.to_string())?;
    println!(
        "done: {} epochs{}; best {} | last {}",
        outcome.log.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        outcome.best_path.display(),
        outcome.last_path.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs, file: &FileConfig) -> Result<(), String> {
    let manifest = load_manifest(&args.manifest)?;
    let mut echo = Vec::new();
    let mcfg = resolve_model(&args.model, file, manifest.n_classes, manifest.feature_dim, &mut echo)?;
    let schedule = resolve_schedule(&args.pq, file, &mut echo)?;
    let workers = resolve_workers(args.workers, file, &mut echo)?;
    let out_dir = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let header = format!(
        "forecast eval --manifest {} --checkpoint {}",
        args.manifest.display(),
        args.checkpoint.display()
    );
    publish_config(&out_dir, &header, &echo)?;

    let params = ModelParams::load(&args.checkpoint, &mcfg).map_err(|e| e.to_string())?;
    let report =
        evaluate(&params, &mcfg, &manifest, &schedule, workers).map_err(|e| e.to_string())?;
    print!("{}", report.table());
    let csv_path = out_dir.join("report.csv");
    std::fs::write(&csv_path, report.to_csv())
        .map_err(|e| format!("writing {}: {e}", csv_path.display()))?;
    println!("report: {}", csv_path.display());
    Ok(())
}

fn run_ablate(args: AblateArgs, file: &FileConfig) -> Result<(), String> {
    let manifest = load_manifest(&args.manifest)?;
    let mut echo = Vec::new();
    let mcfg = resolve_model(&args.model, file, manifest.n_classes, manifest.feature_dim, &mut echo)?;
    let tcfg = resolve_trainer(&args.trainer, file, &mut echo)?;
    let schedule = resolve_schedule(&args.trainer.pq, file, &mut echo)?;
    let workers = resolve_workers(args.workers, file, &mut echo)?;
    let header = format!(
        "forecast ablate --manifest {} --out {}",
        args.manifest.display(),
        args.out.display()
    );
    publish_config(&args.out, &header, &echo)?;

    let report = run_ablation(&manifest, &mcfg, &tcfg, &schedule, &args.out, workers)
        .map_err(|e| e.to_string())?;
    print!("{}", report.table());
    println!("table: {}", args.out.join("ablation.csv").display());
    Ok(())
}

fn run_sweep_cmd(args: SweepArgs, file: &FileConfig) -> Result<(), String> {
    let manifest = load_manifest(&args.manifest)?;
    let mut echo = Vec::new();
    let mcfg = resolve_model(&args.model, file, manifest.n_classes, manifest.feature_dim, &mut echo)?;
    let tcfg = resolve_trainer(&args.trainer, file, &mut echo)?;
    let schedule = resolve_schedule(&args.trainer.pq, file, &mut echo)?;
    let workers = resolve_workers(args.workers, file, &mut echo)?;
    let param_name = file.resolve("param", args.param, "mask".to_string(), &mut echo)?;
    let param = match param_name.as_str() {
        "mask" => SweepParam::MaskPercent,
        "beta" => SweepParam::Beta,
        other => return Err(format!("unknown sweep parameter `{other}` (expected mask or beta)")),
    };
    let raw_values = file.resolve("values", args.values, "0,5,10".to_string(), &mut echo)?;
    let values = raw_values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| format!("sweep value `{v}` is not a number"))
        })
        .collect::<Result<Vec<f64>, String>>()?;
    let header = format!(
        "forecast sweep --manifest {} --out {}",
        args.manifest.display(),
        args.out.display()
    );
    publish_config(&args.out, &header, &echo)?;

    let curve = run_sweep(&manifest, &mcfg, &tcfg, param, &values, &schedule, &args.out, workers)
        .map_err(|e| e.to_string())?;
    for (value, acc) in &curve {
        println!("{} = {value}: mean acc {acc:.4}", param.name());
    }
    println!("curve: {}", args.out.join("sweep.csv").display());
    Ok(())
}

fn grad_check(args: GradCheckArgs, file: &FileConfig) -> Result<(), String> {
    let mut echo = Vec::new();
    let seed = file.resolve("seed", args.seed, 0u64, &mut echo)?;
    for line in &echo {
        println!("{line}");
    }
    let suite = run_suite(seed).map_err(|e| e.to_string())?;
    let worst = suite.worst();
    println!(
        "checks = {}, max_rel_err = {:.3e} (worst: {}), tolerance = {FD_TOLERANCE:e}",
        suite.checks.len(),
        suite.max_rel_err,
        worst.name
    );
    if !suite.passed() {
        return Err(format!(
            "gradient check failed: {} at relative error {:.3e}",
            worst.name, worst.max_rel_err
        ));
    }
    Ok(())
}
