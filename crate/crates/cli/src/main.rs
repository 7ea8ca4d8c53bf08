//! Command-line harness: dataset synthesis, training, evaluation,
//! parameter accounting, and gradient checking.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use modet_core::data::{read_scenes, write_scenes, Scene};
use modet_core::eval::{dump_predictions, evaluate, EvalOptions};
use modet_core::gradcheck::{gradcheck, DEFAULT_FAIL_THRESHOLD};
use modet_core::train::{run_paths, write_loss_curve, Trainer};
use modet_core::{checkpoint, count_params, Model, RunConfig};

#[derive(Parser)]
#[command(name = "modet", version, about = "Desk-scale modulated detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.data.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and vocabulary files.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for train.jsonl, val.jsonl, and vocab.txt.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write checkpoint plus loss curve.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train from a dataset file instead of in-memory generation.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print grounding metrics.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which generated split to use: "train" or "val".
        #[arg(long, default_value = "val")]
        split: String,
        /// Evaluate a dataset file instead of a generated split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write metrics.json (and the prediction dump) here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also write one JSON prediction record per (scene, query).
        #[arg(long)]
        dump: bool,
        /// Drop boxes below this confidence before ranking.
        #[arg(long)]
        confidence_filter: Option<f64>,
    },
    /// Enumerate parameters by group without training.
    CountParams {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference check of every trainable tensor (tiny configs).
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Relative-error threshold that counts as failure.
        #[arg(long, default_value_t = DEFAULT_FAIL_THRESHOLD)]
        threshold: f64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { config, out_dir } => cmd_synth(&config, &out_dir),
        Command::Train { config, out_dir, checkpoint, data } => {
            cmd_train(&config, &out_dir, checkpoint.as_deref(), data.as_deref())
        }
        Command::Eval { config, checkpoint, split, data, out_dir, dump, confidence_filter } => {
            cmd_eval(
                &config,
                &checkpoint,
                &split,
                data.as_deref(),
                out_dir.as_deref(),
                dump,
                confidence_filter,
            )
        }
        Command::CountParams { config } => cmd_count_params(&config),
        Command::Gradcheck { config, threshold } => cmd_gradcheck(&config, threshold),
    }
}

fn generate_split(cfg: &RunConfig, indices: std::ops::Range<u64>) -> Result<Vec<Scene>> {
    indices
        .map(|i| cfg.data.generate(i).map_err(Into::into))
        .collect()
}

fn cmd_synth(config: &ConfigArgs, out_dir: &Path) -> Result<()> {
    let cfg = config.load()?;
    fs::create_dir_all(out_dir)?;
    let train = generate_split(&cfg, cfg.data.train_indices())?;
    let val = generate_split(&cfg, cfg.data.val_indices())?;
    write_scenes(&out_dir.join("train.jsonl"), &cfg.data, &train)?;
    write_scenes(&out_dir.join("val.jsonl"), &cfg.data, &val)?;
    cfg.data.vocabulary()?.save(&out_dir.join("vocab.txt"))?;
    println!(
        "wrote {} train and {} val scenes to {}",
        train.len(),
        val.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(
    config: &ConfigArgs,
    out_dir: &Path,
    resume: Option<&Path>,
    data: Option<&Path>,
) -> Result<()> {
    let cfg = config.load()?;
    fs::create_dir_all(out_dir)?;
    let scenes = match data {
        Some(path) => read_scenes(path)?.1,
        None => generate_split(&cfg, cfg.data.train_indices())?,
    };
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg.clone(), path)
            .with_context(|| format!("resuming from {}", path.display()))?,
        None => Trainer::new(cfg.clone())?,
    };
    let steps = cfg.train.steps;
    let report_every = (steps / 20).max(1);
    trainer.run_steps(&scenes, steps, |r| {
        if r.step % report_every == 0 || r.step == 1 {
            println!(
                "step {:>6}  total {:.4}  l1 {:.4}  giou {:.4}  tok {:.4}  con {:.4}",
                r.step, r.total, r.l1, r.giou, r.soft_token, r.contrastive
            );
        }
    })?;
    let (ckpt, curve, cfg_path) = run_paths(out_dir);
    trainer.save_checkpoint(&ckpt)?;
    write_loss_curve(&curve, trainer.curve())?;
    fs::write(&cfg_path, cfg.to_toml())?;
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &ConfigArgs,
    ckpt: &Path,
    split: &str,
    data: Option<&Path>,
    out_dir: Option<&Path>,
    dump: bool,
    confidence_filter: Option<f64>,
) -> Result<()> {
    let cfg = config.load()?;
    let scenes = match data {
        Some(path) => read_scenes(path)?.1,
        None => match split {
            "train" => generate_split(&cfg, cfg.data.train_indices())?,
            "val" => generate_split(&cfg, cfg.data.val_indices())?,
            other => bail!("unknown split {other:?}; use train or val"),
        },
    };
    let mut model = Model::new(cfg)?;
    let entries = checkpoint::load(ckpt)?;
    checkpoint::apply_to_registry(&mut model.registry, &entries)?;
    let metrics = evaluate(&model, &scenes, EvalOptions { confidence_filter })?;
    print!("{}", metrics.render_table());
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
        if dump {
            let mut file = fs::File::create(dir.join("predictions.jsonl"))?;
            dump_predictions(&model, &scenes, &mut file)?;
        }
    } else if dump {
        let mut out = std::io::stdout().lock();
        dump_predictions(&model, &scenes, &mut out)?;
    }
    Ok(())
}

fn cmd_count_params(config: &ConfigArgs) -> Result<()> {
    let cfg = config.load()?;
    let report = count_params(&cfg)?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_gradcheck(config: &ConfigArgs, threshold: f64) -> Result<()> {
    let cfg = match &config.config {
        Some(_) => config.load()?,
        None => {
            let mut cfg = RunConfig::tiny();
            if let Some(seed) = config.seed {
                cfg.seed = seed;
                cfg.data.seed = seed;
            }
            cfg
        }
    };
    let report = gradcheck(&cfg, threshold)?;
    print!("{}", report.render_table());
    if !report.passed() {
        let names: Vec<&str> = report.failures().iter().map(|r| r.name.as_str()).collect();
        bail!("gradient check failed for: {}", names.join(", "));
    }
    println!("all {} trainable tensors pass at {threshold:.1e}", report.rows.len());
    Ok(())
}
