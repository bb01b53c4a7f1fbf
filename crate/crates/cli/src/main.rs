use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use onconet::autograd::suite::{full_suite, op_suite};
use onconet::datapipe::{dataset_checksum, synth_dataset, Manifest, Modality, Split, SynthOptions};
use onconet::metrics::{roc_curve, write_roc_csv, DEFAULT_THRESHOLD};
use onconet::models::{published_param_count, ModelConfig, Variant};
use onconet::tensor::set_deterministic;
use onconet::trainer::{
    assign_splits, evaluate_model, load_checkpoint, predict_scores, train, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "onconet", version, about = "PET-CT survival classifier: data, training, evaluation")]
struct Cli {
    /// Serial, fixed-order execution (same as ONCONET_DETERMINISTIC=1).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset and print its checksum.
    Synth(SynthArgs),
    /// Train a model from a config file or the canonical regime.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Print the per-layer parameter ledger of a canonical model.
    Params(ParamsArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
    /// Per-class fraction marked `eval` in the manifest.
    #[arg(long, default_value_t = 0.0)]
    eval_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required_unless_present = "paper_regime")]
    config: Option<PathBuf>,
    /// Start from 100 epochs, batch 8, lr 0.0006, 512×512 PET_CT, FCN + AggResCNN.
    #[arg(long, conflicts_with = "config")]
    paper_regime: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, value_name = "BOOL")]
    fcn: Option<bool>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the modality the checkpoint was trained on.
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value = "eval")]
    split: Split,
    /// Directory for metrics.txt, metrics.kv and roc.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    variant: Variant,
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long)]
    fcn: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Include the composed FCN + classifier checks.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 3)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        set_deterministic(true);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match (e.downcast_ref::<onconet::Error>(), e.downcast_ref::<std::io::Error>()) {
                (Some(e), _) => e.kind(),
                (None, Some(_)) => "io",
                (None, None) => "cli",
            };
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {kind}: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let opts = SynthOptions {
        eval_fraction: a.eval_fraction,
        positive_fraction: a.positive_fraction,
        ..SynthOptions::new(a.n, a.size, a.seed)
    };
    synth_dataset(&a.out, &opts)?;
    let manifest = a.out.join("manifest.csv");
    println!("manifest {}", manifest.display());
    println!("checksum {}", dataset_checksum(&manifest)?);
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::paper_regime(),
    };
    if let Some(m) = &a.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.max_epochs.is_some() {
        cfg.train.max_epochs = a.max_epochs;
    }
    if a.max_steps.is_some() {
        cfg.train.max_steps = a.max_steps;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(m) = a.modality {
        cfg.data.modality = m;
        cfg.model.input_channels = m.channels();
    }
    if let Some(v) = a.variant {
        let fcn = cfg.model.use_fcn;
        cfg.model = ModelConfig::canonical(v, cfg.model.input_channels)
            .with_size(cfg.model.input_size)
            .with_fcn(fcn);
    }
    if let Some(f) = a.fcn {
        cfg.model.use_fcn = f;
    }
    if let Some(s) = a.size {
        cfg.model.input_size = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&a)?;
    if a.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let Some(manifest_path) = cfg.data.manifest.clone() else {
        return Err(onconet::Error::Config("no manifest given (use --manifest or data.manifest)".into()).into());
    };
    let manifest = Manifest::read(&manifest_path)?;
    let outcome = train(&cfg, &manifest)?;
    println!("steps {}", outcome.history.len());
    if let Some(loss) = outcome.final_loss() {
        println!("final_loss {loss}");
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (cfg, model, params) = load_checkpoint(&a.checkpoint)?;
    let manifest = Manifest::read(&a.manifest)?;
    let modality = a.modality.unwrap_or(cfg.data.modality);
    let report = evaluate_model(&model, &params, &cfg, &manifest, modality, a.split, a.threshold)?;
    println!("{report}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("metrics.txt"), format!("{report}\n"))?;
        report.write_key_values(&out.join("metrics.kv"))?;
        write_roc(out, &cfg, &model, &params, &manifest, modality, a.split)?;
    }
    Ok(())
}

fn write_roc(
    out: &Path,
    cfg: &ExperimentConfig,
    model: &onconet::models::Model,
    params: &onconet::models::ParamStore,
    manifest: &Manifest,
    modality: Modality,
    which: Split,
) -> anyhow::Result<()> {
    let splits = assign_splits(manifest, &cfg.data.split)?;
    let rows: Vec<_> = manifest.rows.iter().zip(&splits).filter(|(_, &s)| s == which).map(|(r, _)| r).collect();
    let data = onconet::datapipe::Dataset::load(manifest, &rows, modality, model.config().input_size)?;
    let scores = predict_scores(model, params, &data, cfg.train.batch_size)?;
    write_roc_csv(&out.join("roc.csv"), &roc_curve(&scores, &data.labels())?)?;
    Ok(())
}

fn params(a: ParamsArgs) -> anyhow::Result<()> {
    let cfg = ModelConfig::canonical(a.variant, a.channels).with_fcn(a.fcn);
    let ledger = onconet::models::count_params(&cfg)?;
    println!("{ledger}");
    let total = ledger.total() as i64;
    match published_param_count(a.variant, a.channels, a.fcn || a.variant == Variant::FcnOnly) {
        Some(target) => {
            let target = target as i64;
            println!("published {target}");
            println!("difference {:+}", total - target);
        }
        None => println!("published n/a"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let entries = if a.all {
        full_suite(a.instances, a.seed)?
    } else {
        op_suite(a.instances, a.seed)
    };
    let mut failed = 0;
    for e in &entries {
        let r = &e.report;
        if !r.pass {
            failed += 1;
        }
        println!(
            "{:<28} {} max_rel_err={:.3e} checked={} skipped={}",
            e.name,
            if r.pass { "pass" } else { "FAIL" },
            r.max_rel_err,
            r.checked,
            r.skipped
        );
    }
    println!("gradcheck: {}/{} passed", entries.len() - failed, entries.len());
    if failed > 0 {
        bail!("{failed} gradient check(s) failed");
    }
    Ok(())
}
