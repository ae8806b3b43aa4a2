use super::{load_dataset, verbose};
use crate::Failure;
use clap::Args;
use grc_core::model::{AblationFlags, ModelConfig};
use grc_core::train::{metrics_to_csv, train_loop, TrainConfig};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::time::SystemTime;

/// Training run description; every field has a default so partial files work.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFileConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (JSON); unknown keys are rejected.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured data directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ablation row: unified|gb|gb+rb|+cic|+lf|+gf|full.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Override the step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the peak learning rate.
    #[arg(long)]
    pub max_lr: Option<f64>,
}

pub fn run(args: TrainArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg: TrainFileConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::data(format!("malformed config {}: {e}", args.config.display())))?;

    if let Some(name) = &args.ablation {
        cfg.model.ablation = AblationFlags::from_name(name)?;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
        cfg.train.steps_per_epoch = cfg.train.steps_per_epoch.min(steps.max(1));
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(lr) = args.max_lr {
        cfg.train.max_lr = lr;
    }

    // validate paths before any work
    let data_dir = args
        .data
        .or_else(|| cfg.data_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Failure::data("no data directory (set data_dir in the config or pass --data)"))?;
    if !data_dir.is_dir() {
        return Err(Failure::data(format!(
            "data directory {} does not exist",
            data_dir.display()
        )));
    }
    let out_dir = args
        .out
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Failure::data("no output directory (set out_dir in the config or pass --out)"))?;
    cfg.model.validate()?;

    let (manifest, scenes) = load_dataset(&data_dir)?;
    if manifest.class_count != cfg.model.class_count {
        return Err(Failure::data(format!(
            "dataset has {} classes but the model is configured for {}",
            manifest.class_count, cfg.model.class_count
        )));
    }
    std::fs::create_dir_all(&out_dir)?;

    let mut log = std::fs::File::create(out_dir.join("run.log"))?;
    writeln!(
        log,
        "start {:?} scenes={} steps={} seed={}",
        SystemTime::now(),
        scenes.len(),
        cfg.train.steps,
        cfg.train.seed
    )?;

    let outcome = train_loop(&cfg.model, &cfg.train, &scenes, Some(&out_dir))?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_to_csv(&outcome.metrics))?;

    if verbose() {
        for m in outcome.metrics.iter().step_by(cfg.train.steps_per_epoch.max(1)) {
            eprintln!(
                "step {:>5}  loss {:.4}  ce {:.4}  cic {:.4}  lr {:.5}",
                m.step, m.loss, m.ce, m.cic, m.lr
            );
        }
    }

    if outcome.diverged {
        writeln!(log, "diverged at step {} {:?}", outcome.state.step, SystemTime::now())?;
        let last = outcome
            .last_checkpoint
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "none".into());
        eprintln!("training diverged; last good checkpoint: {last}");
        return Err(Failure {
            code: 3,
            msg: "non-finite loss".into(),
        });
    }
    writeln!(log, "end {:?} step={}", SystemTime::now(), outcome.state.step)?;

    let final_loss = outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        outcome.state.step,
        final_loss,
        out_dir.join("final.grcw").display()
    );
    Ok(())
}
