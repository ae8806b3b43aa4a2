use super::{Manifest, ManifestEntry};
use crate::Failure;
use clap::Args;
use grc_core::lidar::scene::{generate_scene, SceneFamily, SceneSpec};
use grc_core::lidar::{write_kitti_bin, write_kitti_label};
use grc_core::rng::derive_seed;
use grc_core::train::streams;
use std::path::PathBuf;

#[derive(Args)]
pub struct GenArgs {
    /// Scene description: a randomized scene family or a fixed scene spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Number of scans to generate.
    #[arg(long)]
    pub count: usize,
    /// Output directory for .bin/.label pairs and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed; per-scene seeds are derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

enum Generator {
    Family(SceneFamily),
    Fixed(SceneSpec),
}

pub fn run(args: GenArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.spec)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", args.spec.display())))?;
    let (generator, echo) = match serde_json::from_str::<SceneFamily>(&text) {
        Ok(family) => {
            let echo = serde_json::to_value(&family)?;
            (Generator::Family(family), echo)
        }
        Err(family_err) => match serde_json::from_str::<SceneSpec>(&text) {
            Ok(spec) => {
                let echo = serde_json::to_value(&spec)?;
                (Generator::Fixed(spec), echo)
            }
            Err(spec_err) => {
                return Err(Failure::data(format!(
                    "{} parses as neither a scene family ({family_err}) nor a scene spec ({spec_err})",
                    args.spec.display()
                )))
            }
        },
    };
    std::fs::create_dir_all(&args.out)?;

    let class_count = match &generator {
        Generator::Family(f) => f.class_count,
        Generator::Fixed(s) => s.class_count,
    };
    let mut files = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let scene_seed = derive_seed(args.seed, streams::SCENE, i as u64);
        let spec = match &generator {
            Generator::Family(f) => f.sample_spec(scene_seed),
            Generator::Fixed(s) => SceneSpec {
                seed: scene_seed,
                ..s.clone()
            },
        };
        let cloud = generate_scene(&spec)?;
        let labels = cloud.labels.as_ref().expect("generated scenes are labeled");
        let bin_name = format!("{i:06}.bin");
        let label_name = format!("{i:06}.label");
        std::fs::write(args.out.join(&bin_name), write_kitti_bin(&cloud))?;
        std::fs::write(args.out.join(&label_name), write_kitti_label(labels))?;
        files.push(ManifestEntry {
            bin: bin_name,
            label: label_name,
            seed: scene_seed,
            points: cloud.len(),
        });
    }

    let manifest = Manifest {
        schema_version: 1,
        class_count,
        count: args.count,
        seed: args.seed,
        files,
        generator: echo,
    };
    std::fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "wrote {} scans and manifest.json to {}",
        args.count,
        args.out.display()
    );
    Ok(())
}
