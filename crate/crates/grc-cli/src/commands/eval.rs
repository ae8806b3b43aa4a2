use super::{checkpoint_prefix, load_dataset};
use crate::Failure;
use clap::Args;
use grc_core::lidar::weather::{corrupt_weather, PresetTable};
use grc_core::lidar::PointCloud;
use grc_core::rng::derive_seed;
use grc_core::train::{evaluate, load_checkpoint, streams};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint prefix (or its .grcw/.json path).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory with generated .bin/.label pairs and manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Corruption preset name, "none" for clean, or "all".
    #[arg(long, default_value = "all")]
    pub preset: String,
    /// Preset table (JSON); defaults to the bundled presets.
    #[arg(long)]
    pub presets: Option<PathBuf>,
    /// Seed for corruption sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here as well as printing the table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct PresetReport {
    miou: f64,
    accuracy: f64,
    per_class_iou: Vec<Option<f64>>,
    scenes: usize,
    points: u64,
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    checkpoint: String,
    class_count: u32,
    seed: u64,
    results: BTreeMap<String, PresetReport>,
    /// Aggregate over the corrupted presets (absent for clean-only runs).
    all: Option<PresetReport>,
}

pub fn run(args: EvalArgs) -> Result<(), Failure> {
    let prefix = checkpoint_prefix(&args.checkpoint);
    if !prefix.with_extension("grcw").is_file() {
        return Err(Failure::data(format!(
            "checkpoint {} not found",
            prefix.with_extension("grcw").display()
        )));
    }
    if !args.data.is_dir() {
        return Err(Failure::data(format!(
            "data directory {} does not exist",
            args.data.display()
        )));
    }
    let (state, model_cfg) = load_checkpoint(&prefix)?;
    let (manifest, scenes) = load_dataset(&args.data)?;
    if manifest.class_count != model_cfg.class_count {
        return Err(Failure::data(format!(
            "dataset has {} classes but the checkpoint was trained with {}",
            manifest.class_count, model_cfg.class_count
        )));
    }

    let table = match &args.presets {
        Some(path) => PresetTable::from_json(&std::fs::read_to_string(path)?)?,
        None => PresetTable::defaults(),
    };
    let preset_names: Vec<String> = match args.preset.as_str() {
        "all" => {
            let mut names = vec!["none".to_string()];
            names.extend(table.names().cloned());
            names
        }
        name => vec![name.to_string()],
    };

    let noise_label = model_cfg.ignore_label();
    let mut results = BTreeMap::new();
    let mut all_cm: Option<grc_core::metrics::ConfusionMatrix> = None;
    for (pi, name) in preset_names.iter().enumerate() {
        let eval_scenes: Vec<PointCloud> = if name == "none" {
            scenes.clone()
        } else {
            let preset = table.get(name)?;
            let preset_root = derive_seed(args.seed, streams::CORRUPT, pi as u64);
            scenes
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    corrupt_weather(s, preset, noise_label, derive_seed(preset_root, 0, j as u64))
                })
                .collect()
        };
        let cm = evaluate(&state.store, &model_cfg, &eval_scenes)?;
        if name != "none" {
            match all_cm.as_mut() {
                Some(acc) => acc.merge(&cm),
                None => all_cm = Some(cm.clone()),
            }
        }
        let (per_class, miou) = cm.miou()?;
        results.insert(
            name.clone(),
            PresetReport {
                miou,
                accuracy: cm.accuracy(),
                per_class_iou: per_class,
                scenes: eval_scenes.len(),
                points: cm.valid_points(),
            },
        );
    }
    let all = match all_cm {
        Some(cm) => {
            let (per_class, miou) = cm.miou()?;
            Some(PresetReport {
                miou,
                accuracy: cm.accuracy(),
                per_class_iou: per_class,
                scenes: scenes.len() * (preset_names.len().saturating_sub(1)),
                points: cm.valid_points(),
            })
        }
        None => None,
    };

    let report = EvalReport {
        schema_version: 1,
        checkpoint: prefix.display().to_string(),
        class_count: model_cfg.class_count,
        seed: args.seed,
        results,
        all,
    };

    // table mirroring the per-condition column layout
    let mut header = String::from("condition      mIoU     accuracy  points");
    println!("{header}");
    header.clear();
    for (name, r) in &report.results {
        println!(
            "{name:<14} {:>7.4}  {:>8.4}  {:>7}",
            r.miou, r.accuracy, r.points
        );
    }
    if let Some(all) = &report.all {
        println!(
            "{:<14} {:>7.4}  {:>8.4}  {:>7}",
            "all", all.miou, all.accuracy, all.points
        );
    }

    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(out, &json)?;
    }
    Ok(())
}
