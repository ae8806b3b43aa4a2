use crate::Failure;
use clap::Args;
use grc_core::lidar::stats::{histogram, wasserstein1, Field};
use grc_core::lidar::weather::{corrupt_weather, PresetTable};
use grc_core::lidar::{parse_kitti_bin, parse_kitti_label};
use grc_core::range::spherical_project;
use grc_core::rng::derive_seed;
use grc_core::train::streams;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args)]
pub struct InspectArgs {
    /// KITTI velodyne .bin scan.
    #[arg(long)]
    pub scan: PathBuf,
    /// Matching .label file (optional, only checked for length).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output directory for the histograms and the range-view image.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    #[arg(long, default_value_t = 64)]
    pub h: usize,
    #[arg(long, default_value_t = 512)]
    pub w: usize,
    #[arg(long, default_value_t = 3.0)]
    pub fov_up: f64,
    #[arg(long, default_value_t = -25.0)]
    pub fov_down: f64,
    /// Also corrupt the scan with this preset and emit shift diagnostics.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub presets: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct ShiftReport {
    schema_version: u32,
    preset: String,
    /// Wasserstein-1 shifts on values normalized by the clean scan's maxima.
    distance_w1: f64,
    reflectance_w1: f64,
    ratio: f64,
}

pub fn run(args: InspectArgs) -> Result<(), Failure> {
    let bytes = std::fs::read(&args.scan)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", args.scan.display())))?;
    let (mut cloud, stats) = parse_kitti_bin(&bytes)?;
    if let Some(label_path) = &args.labels {
        let label_bytes = std::fs::read(label_path)?;
        cloud.labels = Some(parse_kitti_label(&label_bytes, cloud.len(), None)?);
    }
    std::fs::create_dir_all(&args.out)?;

    let dist_hist = histogram(&cloud, Field::Distance, args.bins)?;
    let refl_hist = histogram(&cloud, Field::Reflectance, args.bins)?;
    std::fs::write(args.out.join("distance_histogram.csv"), dist_hist.to_csv())?;
    std::fs::write(args.out.join("reflectance_histogram.csv"), refl_hist.to_csv())?;

    let img = spherical_project(&cloud, args.h, args.w, args.fov_up, args.fov_down)?;
    std::fs::write(args.out.join("range_view.pgm"), img.to_pgm())?;

    println!(
        "{} points ({} reflectance values clamped), {} valid range-view pixels",
        cloud.len(),
        stats.clamped_reflectance,
        img.mask.iter().filter(|&&m| m).count()
    );

    if let Some(name) = &args.preset {
        let table = match &args.presets {
            Some(path) => PresetTable::from_json(&std::fs::read_to_string(path)?)?,
            None => PresetTable::defaults(),
        };
        let preset = table.get(name)?;
        let noise_label = u32::MAX; // inspection has no class table; labels stay untouched
        let corrupted = corrupt_weather(
            &cloud,
            preset,
            noise_label,
            derive_seed(args.seed, streams::CORRUPT, 0),
        );
        let cd = histogram(&corrupted, Field::Distance, args.bins)?;
        let cr = histogram(&corrupted, Field::Reflectance, args.bins)?;
        std::fs::write(args.out.join("corrupted_distance_histogram.csv"), cd.to_csv())?;
        std::fs::write(
            args.out.join("corrupted_reflectance_histogram.csv"),
            cr.to_csv(),
        )?;

        let norm = |v: Vec<f64>, scale: f64| -> Vec<f64> {
            v.into_iter().map(|x| x / scale.max(1e-30)).collect()
        };
        let dscale = cloud.distances().iter().cloned().fold(0.0, f64::max);
        let rscale = cloud.reflectances().iter().cloned().fold(0.0, f64::max);
        let distance_w1 = wasserstein1(
            &norm(cloud.distances(), dscale),
            &norm(corrupted.distances(), dscale),
        );
        let reflectance_w1 = wasserstein1(
            &norm(cloud.reflectances(), rscale),
            &norm(corrupted.reflectances(), rscale),
        );
        let report = ShiftReport {
            schema_version: 1,
            preset: name.clone(),
            distance_w1,
            reflectance_w1,
            ratio: distance_w1 / reflectance_w1.max(1e-30),
        };
        std::fs::write(
            args.out.join("shift.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        println!(
            "{name}: reflectance W1 {reflectance_w1:.5}, distance W1 {distance_w1:.5}"
        );
    }
    Ok(())
}
