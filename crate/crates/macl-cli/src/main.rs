//! Command-line entry point: dataset generation, pre-training,
//! transfer + fine-tuning, ablation sweeps, report rendering, and the
//! built-in verification suite.
//!
//! Configuration precedence: profile defaults < config file < MACL_*
//! environment overrides < flags. Exit codes: 0 success, 2 configuration
//! error, 3 numeric abort, 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use macl::ablation::{materialize_from, run_ablation};
use macl::checkpoint::{Checkpoint, RngState};
use macl::config::ExperimentConfig;
use macl::error::{Error, Result};
use macl::metrics::{comparison_table, evaluate, MetricsReport, RunMeta};
use macl::model::SegModel;
use macl::selftest::run_selftest;
use macl::synthdata::{generate_dataset, load_dataset, save_dataset, Volume};
use macl::train::{finetune, finetune_csv, loss_csv, pretrain, transfer, Provenance};
use macl::util::derive_seed;

#[derive(Parser)]
#[command(
    name = "macl",
    about = "Multi-level asymmetric contrastive pre-training for segmentation models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment config file (JSON). Defaults to the selected profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given.
    #[arg(long, value_parser = ["desk", "paper"])]
    profile: Option<String>,
    /// Master seed; overrides the config file and environment.
    #[arg(long)]
    seed: Option<u64>,
    /// Force deterministic execution (synchronous loading, sequential sweep
    /// cells).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset on disk.
    Gen {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory for the dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the two-branch model and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: CommonOpts,
        /// Dataset directory; regenerated from the seed when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a segmentation model from a checkpoint or from scratch,
    /// then evaluate on the holdout split.
    Finetune {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint directory, or the literal "scratch".
        #[arg(long)]
        init: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured ablation sweep.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a comparison table across evaluation reports.
    Report {
        /// Paths to report.json files.
        files: Vec<PathBuf>,
    },
    /// Run the built-in verification suite.
    Selftest,
}

fn resolve_config(common: &CommonOpts) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, &common.profile) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(p)) => ExperimentConfig::profile(p)?,
        (None, None) => ExperimentConfig::desk(),
    };
    cfg.apply_env_overrides(std::env::vars())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every command leaves a config snapshot and a provenance record beside its
/// outputs.
fn write_provenance(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    cfg.save(&dir.join("config_snapshot.json"))?;
    let provenance = serde_json::json!({
        "command": command,
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "deterministic": cfg.deterministic,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(
        dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance)?,
    )?;
    Ok(())
}

fn dataset_volumes(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> Result<Vec<Volume>> {
    match data {
        Some(dir) => load_dataset(dir),
        None => generate_dataset(
            derive_seed(cfg.seed, "data"),
            &cfg.data.synth(),
            cfg.data.volumes,
        ),
    }
}

fn cmd_gen(common: &CommonOpts, out: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let volumes = generate_dataset(
        derive_seed(cfg.seed, "data"),
        &cfg.data.synth(),
        cfg.data.volumes,
    )?;
    let manifest = save_dataset(out, &volumes, derive_seed(cfg.seed, "data"), &cfg.data.synth())?;
    write_provenance(out, &cfg, "gen")?;
    println!(
        "wrote {} volumes ({}x{}x{}) to {}",
        manifest.volumes.len(),
        cfg.data.depth,
        cfg.data.height,
        cfg.data.height,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(common: &CommonOpts, data: &Option<PathBuf>, out: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let volumes = dataset_volumes(&cfg, data)?;
    let split = materialize_from(&cfg, &volumes, cfg.seed);
    let result = pretrain(
        &cfg.model,
        &cfg.augment.fix,
        &cfg.augment.var,
        &cfg.pretrain,
        &split.train_slices,
        cfg.seed,
    )?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("loss.csv"), loss_csv(&result.log))?;
    let ckpt = Checkpoint::from_macl(
        &result.model,
        cfg.to_value(),
        Some(result.final_loss_scalars()),
        RngState {
            seed: cfg.seed,
            steps: result.total_steps as u64,
        },
    );
    ckpt.save(&out.join("checkpoint"))?;
    write_provenance(out, &cfg, "pretrain")?;
    println!(
        "pre-trained {} steps; final loss {:.6}; checkpoint {}",
        result.total_steps,
        result.final_loss.total,
        ckpt.params_digest()
    );
    Ok(())
}

fn cmd_finetune(
    common: &CommonOpts,
    init: &str,
    data: &Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let volumes = dataset_volumes(&cfg, data)?;
    let split = materialize_from(&cfg, &volumes, cfg.seed);
    let seg_seed = derive_seed(cfg.seed, "seg/init");
    let (model, checkpoint_id, provenance) = if init == "scratch" {
        (
            SegModel::<f32>::init(&cfg.model, cfg.data.classes, seg_seed)?,
            "scratch".to_string(),
            None,
        )
    } else {
        let dir = PathBuf::from(init);
        let ckpt_dir = if dir.join("manifest.json").exists() {
            dir
        } else {
            dir.join("checkpoint")
        };
        let ckpt = Checkpoint::load(&ckpt_dir)?;
        let digest = ckpt.params_digest();
        let outcome = transfer(&ckpt, &cfg.model, cfg.data.classes, seg_seed)?;
        (outcome.model, digest, Some(outcome.provenance))
    };
    let result = finetune(
        model,
        &split.labeled_slices,
        &split.holdout_slices,
        &cfg.finetune,
        cfg.seed,
    )?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let report = evaluate(
        &result.model,
        &split.holdout_slices,
        cfg.data.classes,
        RunMeta {
            config_hash: cfg.content_hash(),
            seed: cfg.seed,
            checkpoint_id,
        },
    )?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("finetune_loss.csv"), finetune_csv(&result.log))?;
    std::fs::write(out.join("report.json"), report.to_json()?)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    if let Some(p) = provenance {
        let rendered: std::collections::BTreeMap<String, &str> = p
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    match v {
                        Provenance::Copied => "copied",
                        Provenance::Fresh => "fresh",
                    },
                )
            })
            .collect();
        std::fs::write(
            out.join("transfer_provenance.json"),
            serde_json::to_string_pretty(&rendered)?,
        )?;
    }
    let seg_ckpt = Checkpoint::from_seg(
        &result.model,
        cfg.to_value(),
        RngState {
            seed: cfg.seed,
            steps: result.log.len() as u64,
        },
    );
    seg_ckpt.save(&out.join("model"))?;
    write_provenance(out, &cfg, "finetune")?;
    println!(
        "fine-tuned; best holdout DSC {:.4} (epoch {}); mean DSC {:.4}",
        result.best_dsc, result.best_epoch, report.mean.dsc
    );
    Ok(())
}

fn cmd_ablate(common: &CommonOpts, out: &Path) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if common.deterministic {
        cfg.ablation.parallel = false;
    }
    let outcome = run_ablation(&cfg, Some(out))?;
    write_provenance(out, &cfg, "ablate")?;
    print!("{}", macl::ablation::summary_table(&outcome.summary));
    println!("rows: {}; outputs in {}", outcome.rows.len(), out.display());
    Ok(())
}

fn cmd_report(files: &[PathBuf]) -> Result<()> {
    if files.is_empty() {
        return Err(Error::Config("report needs at least one report.json".into()));
    }
    let mut reports = Vec::new();
    for f in files {
        let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(f)?)?;
        let name = f
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| f.display().to_string());
        reports.push((name, report));
    }
    let refs: Vec<(String, &MetricsReport)> = reports
        .iter()
        .map(|(n, r)| (n.clone(), r))
        .collect();
    print!("{}", comparison_table(&refs));
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    let report = run_selftest();
    print!("{}", report.render());
    if report.all_passed() {
        Ok(())
    } else {
        Err(Error::Contract("self-test failures".into()))
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen { common, out } => cmd_gen(common, out),
        Command::Pretrain { common, data, out } => cmd_pretrain(common, data, out),
        Command::Finetune {
            common,
            init,
            data,
            out,
        } => cmd_finetune(common, init, data, out),
        Command::Ablate { common, out } => cmd_ablate(common, out),
        Command::Report { files } => cmd_report(files),
        Command::Selftest => cmd_selftest(),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
