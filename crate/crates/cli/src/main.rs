use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dyntok::backbone::ViTConfig;
use dyntok::complexity::{flops_vit, throughput_bench};
use dyntok::harness::data::{read_idx_images, write_idx_dir};
use dyntok::harness::{
    backbone_only, evaluate, export_mask_viz, keep_prob_stats, load_checkpoint, load_idx_dir, pretrain_teacher,
    save_checkpoint, stage_masks, synth_splits, train_dynamic, Checkpoint, CheckpointMeta, Dataset, Normalisation,
    TrainConfig,
};
use dyntok::inference::{PruneSchedule, Strategy};
use dyntok::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Parser)]
#[command(name = "dyntok", version, about = "Dynamic token sparsification for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as IDX files.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the plain ViT teacher.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of MNIST-named IDX files; synthetic data when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a sparsified student from a teacher checkpoint.
    Train {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validation accuracy under a pruning strategy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "prediction")]
        strategy: Strategy,
        /// Keep ratio; the checkpoint's own when omitted.
        #[arg(long)]
        rho: Option<f64>,
        /// Comma-separated stage blocks.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<usize>>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic FLOPs of an architecture under a keep ratio.
    Flops {
        /// `desk`, `deit-s`, `deit-ti` or a JSON model file.
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<usize>>,
        #[arg(long)]
        csv: bool,
    },
    /// Throughput of the pruned model against the unpruned one.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long)]
        csv: bool,
    },
    /// Picture each image's kept patches after every stage.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        /// IDX image files.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Mean keep decision per patch position over the validation split.
    Stats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

/// Train and validation splits from `dir`, padded to the model size, or the
/// configured synthetic data.
fn load_splits(dir: Option<&Path>, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (train, val) = match dir {
        Some(d) => load_idx_dir(d).with_context(|| format!("loading IDX data from {}", d.display()))?,
        None => synth_splits(&cfg.data)?,
    };
    let size = cfg.model.image_size;
    Ok((train.pad_to(size)?, val.pad_to(size)?))
}

fn checkpoint_config(ck: &Checkpoint) -> TrainConfig {
    ck.manifest.meta.config.clone().unwrap_or_else(|| TrainConfig {
        model: ck.model().clone(),
        ..TrainConfig::default()
    })
}

fn validation_split(ck: &Checkpoint, data: Option<&Path>) -> Result<Dataset> {
    let (_, val) = load_splits(data, &checkpoint_config(ck))?;
    Ok(match &ck.manifest.meta.normalisation {
        Some(n) => n.apply(val),
        None => val,
    })
}

/// The checkpoint's schedule with optional overrides.
fn schedule_for(ck: &Checkpoint, strategy: Strategy, rho: Option<f64>, stages: Option<Vec<usize>>) -> Result<PruneSchedule> {
    let depth = ck.model().depth;
    let base = match &ck.manifest.meta.schedule {
        Some(s) => s.clone(),
        None => PruneSchedule::default_for_depth(depth, rho.unwrap_or(1.0))?,
    };
    let s = PruneSchedule::new(stages.unwrap_or(base.stage_blocks), rho.unwrap_or(base.rho), strategy)?;
    s.validate(depth)?;
    if strategy == Strategy::Prediction && ck.params.stages() < s.stages() {
        bail!(
            "checkpoint has {} prediction modules; use a trained student or another strategy",
            ck.params.stages()
        );
    }
    Ok(s)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn arch(name: &str) -> Result<ViTConfig> {
    if let Some(cfg) = ViTConfig::named(name) {
        return Ok(cfg);
    }
    let text = fs::read_to_string(name).with_context(|| format!("`{name}` is neither a known architecture nor a readable file"))?;
    let cfg: ViTConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (train, val) = synth_splits(&cfg.data)?;
            write_idx_dir(&out, &train, &val)?;
            print_json(&serde_json::json!({"train": train.len(), "val": val.len(), "dir": out}))
        }
        Command::Pretrain { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let (train, val) = load_splits(data.as_deref(), &cfg)?;
            let (vit, history) = pretrain_teacher(&cfg, &train)?;
            let params = backbone_only(vit, &cfg.model);
            let meta = CheckpointMeta {
                schedule: None,
                config: Some(cfg.clone()),
                normalisation: Some(Normalisation::of(&train)),
            };
            save_checkpoint(&out, &params, &cfg.model, &meta)?;
            fs::write(out.join("pretrain_history.json"), serde_json::to_string_pretty(&history)?)?;
            let plain = PruneSchedule::new(Vec::new(), 1.0, Strategy::Prediction)?;
            let report = evaluate(&params, &cfg.model, &plain, &val, 0)?;
            print_json(&serde_json::json!({
                "checkpoint": out,
                "epochs": history.len(),
                "final_loss": history.last().map(|h| h.loss),
                "val_top1": report.top1,
            }))
        }
        Command::Train { teacher, rho, config, data, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(r) = rho {
                cfg.rho = r;
            }
            let ck = load_checkpoint(&teacher)?;
            if ck.model() != &cfg.model {
                bail!("teacher architecture differs from the config's model");
            }
            let (train, val) = load_splits(data.as_deref(), &cfg)?;
            let result = train_dynamic(&ck.params.vit, &cfg, &train)?;
            let schedule = cfg.schedule()?;
            let meta = CheckpointMeta {
                schedule: Some(schedule.clone()),
                config: Some(cfg.clone()),
                normalisation: Some(Normalisation::of(&train)),
            };
            save_checkpoint(&out, &result.params, &cfg.model, &meta)?;
            fs::write(out.join("history.json"), serde_json::to_string_pretty(&result.history)?)?;
            let report = evaluate(&result.params, &cfg.model, &schedule, &val, 0)?;
            print_json(&serde_json::json!({
                "checkpoint": out,
                "final": result.history.last(),
                "warnings": result.history.warnings,
                "val_top1": report.top1,
                "kept_per_stage": report.kept_per_stage,
            }))
        }
        Command::Eval { ckpt, strategy, rho, stages, data, seed } => {
            let ck = load_checkpoint(&ckpt)?;
            let schedule = schedule_for(&ck, strategy, rho, stages)?;
            let val = validation_split(&ck, data.as_deref())?;
            print_json(&evaluate(&ck.params, ck.model(), &schedule, &val, seed)?)
        }
        Command::Flops { arch: name, rho, stages, csv } => {
            let cfg = arch(&name)?;
            let schedule = match stages {
                Some(s) => PruneSchedule::new(s, rho, Strategy::Prediction)?,
                None => PruneSchedule::default_for_depth(cfg.depth, rho)?,
            };
            let report = flops_vit(&cfg, &schedule)?;
            if csv {
                print!("{}", report.to_csv());
                Ok(())
            } else {
                print_json(&report)
            }
        }
        Command::Bench { ckpt, rho, batch, iters, warmup, csv } => {
            let ck = load_checkpoint(&ckpt)?;
            let strategy = if ck.params.stages() > 0 { Strategy::Prediction } else { Strategy::Random };
            let schedule = schedule_for(&ck, strategy, rho, None)?;
            let m = ck.model();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let shape = [batch, m.channels_in, m.image_size, m.image_size];
            let data = (0..shape.iter().product::<usize>()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let images = Tensor::new(shape, data)?;
            let report = throughput_bench(&ck.params, m, &schedule, &images, iters, warmup)?;
            if csv {
                print!("{}", report.to_csv());
                Ok(())
            } else {
                print_json(&report)
            }
        }
        Command::Viz { ckpt, images, out, limit } => {
            let ck = load_checkpoint(&ckpt)?;
            let m = ck.model().clone();
            let (mut pixels, mut count, mut dims) = (Vec::new(), 0, None);
            for path in &images {
                let (n, rows, cols, px) = read_idx_images(path)?;
                if dims.is_some_and(|d| d != (rows, cols)) {
                    bail!("{} has {rows}×{cols} images, earlier files differ", path.display());
                }
                dims = Some((rows, cols));
                let take = n.min(limit - count);
                pixels.extend_from_slice(&px[..take * rows * cols]);
                count += take;
                if count == limit {
                    break;
                }
            }
            let (rows, cols) = dims.context("no images given")?;
            let set = Dataset::new(pixels, vec![0; count], 1, rows, cols)?.pad_to(m.image_size)?;
            let set = match &ck.manifest.meta.normalisation {
                Some(n) => n.apply(set),
                None => set,
            };
            let strategy = if ck.params.stages() > 0 { Strategy::Prediction } else { Strategy::Random };
            let schedule = schedule_for(&ck, strategy, None, None)?;
            let masks = stage_masks(&ck.params, &m, &schedule, &set)?;
            let files = export_mask_viz(&set, &masks, m.patch_size, &out)?;
            print_json(&serde_json::json!({"images": count, "files": files.len(), "dir": out}))
        }
        Command::Stats { ckpt, data, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let schedule = schedule_for(&ck, Strategy::Prediction, None, None)?;
            let val = validation_split(&ck, data.as_deref())?;
            let stats = keep_prob_stats(&ck.params, ck.model(), &schedule, &val)?;
            fs::write(&out, stats.to_csv())?;
            let means: Vec<f64> = (0..stats.stages.len()).map(|s| stats.stage_mean(s)).collect();
            print_json(&serde_json::json!({"csv": out, "images": stats.images, "stage_means": means}))
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
