//! Weather-style corruption of point clouds.
//!
//! Corruption targets reflectance far more than geometry: multiplicative
//! range-dependent attenuation plus additive noise on reflectance, a point
//! drop fraction, injected near-range clutter (labeled with a reserved noise
//! class), and a small bounded geometric jitter. Parameters live in named
//! presets loaded from JSON, not in code.

use super::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Default presets shipped with the repository.
pub const DEFAULT_PRESETS_JSON: &str = include_str!("../../../../configs/corruption_presets.json");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorruptionPreset {
    /// Exponential attenuation rate per meter: r *= exp(-gamma * range).
    pub gamma: f64,
    /// Std-dev of additive Gaussian reflectance noise.
    pub noise_sigma: f64,
    /// Probability each point is dropped.
    pub drop_frac: f64,
    /// Injected clutter count as a fraction of the original point count.
    pub clutter_frac: f64,
    /// Clutter range interval, meters.
    pub clutter_range: [f64; 2],
    /// Clutter reflectance interval.
    pub clutter_reflectance: [f64; 2],
    /// Euclidean bound on the positional jitter of surviving points, meters.
    pub geo_jitter_bound: f64,
}

impl CorruptionPreset {
    /// Null corruption: the identity transform.
    pub fn none() -> Self {
        CorruptionPreset {
            gamma: 0.0,
            noise_sigma: 0.0,
            drop_frac: 0.0,
            clutter_frac: 0.0,
            clutter_range: [0.5, 5.0],
            clutter_reflectance: [0.5, 1.0],
            geo_jitter_bound: 0.0,
        }
    }
}

/// Named preset table, JSON object keyed by preset name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PresetTable(pub BTreeMap<String, CorruptionPreset>);

impl PresetTable {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn defaults() -> Self {
        Self::from_json(DEFAULT_PRESETS_JSON).expect("bundled presets parse")
    }

    pub fn get(&self, kind: &str) -> Result<&CorruptionPreset> {
        self.0.get(kind).ok_or_else(|| {
            Error::Config(format!(
                "unknown corruption kind '{kind}' (known: {})",
                self.0.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }
}

/// Apply a corruption preset. Surviving points keep their labels; injected
/// clutter is labeled `noise_label`, which downstream evaluation ignores.
/// Deterministic in (cloud, preset, seed).
pub fn corrupt_weather(
    cloud: &PointCloud,
    preset: &CorruptionPreset,
    noise_label: u32,
    seed: u64,
) -> PointCloud {
    let mut rng = SplitMix64::new(seed);
    let mut points = Vec::with_capacity(cloud.len());
    let mut labels = cloud.labels.as_ref().map(|_| Vec::with_capacity(cloud.len()));
    // per-axis bound so the Euclidean displacement stays within geo_jitter_bound
    let axis_bound = preset.geo_jitter_bound / 3f64.sqrt();

    for (i, p) in cloud.points.iter().enumerate() {
        if rng.bernoulli(preset.drop_frac) {
            continue;
        }
        let range = p.range();
        let atten = (-preset.gamma * range).exp();
        let r = (p.r * atten + rng.normal_scaled(0.0, preset.noise_sigma)).max(0.0);
        points.push(Point {
            x: p.x + rng.uniform(-axis_bound, axis_bound),
            y: p.y + rng.uniform(-axis_bound, axis_bound),
            z: p.z + rng.uniform(-axis_bound, axis_bound),
            r,
        });
        if let (Some(ls), Some(src)) = (labels.as_mut(), cloud.labels.as_ref()) {
            ls.push(src[i]);
        }
    }

    let clutter_count = (preset.clutter_frac * cloud.len() as f64).round() as usize;
    for _ in 0..clutter_count {
        // random unit direction via normalized Gaussian triple
        let (mut dx, mut dy, mut dz) = (rng.normal(), rng.normal(), rng.normal());
        let norm = (dx * dx + dy * dy + dz * dz).sqrt().max(1e-9);
        dx /= norm;
        dy /= norm;
        dz /= norm;
        let range = rng.uniform(preset.clutter_range[0], preset.clutter_range[1]);
        let r = rng.uniform(preset.clutter_reflectance[0], preset.clutter_reflectance[1]);
        points.push(Point {
            x: range * dx,
            y: range * dy,
            z: range * dz,
            r,
        });
        if let Some(ls) = labels.as_mut() {
            ls.push(noise_label);
        }
    }

    PointCloud { points, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::scene::{generate_scene, SceneSpec, SensorModel, Template};
    use crate::lidar::stats::wasserstein1;

    fn test_cloud() -> PointCloud {
        let spec = SceneSpec {
            class_count: 2,
            seed: 21,
            sensor: SensorModel {
                beams: 12,
                azimuth_steps: 128,
                fov_up_deg: 3.0,
                fov_down_deg: -25.0,
                max_range: 80.0,
                range_jitter_sigma: 0.01,
                reflectance_jitter_sigma: 0.005,
                falloff_distance: 20.0,
            },
            templates: vec![
                Template::Ground {
                    z: -1.7,
                    class: 0,
                    reflectance: 0.4,
                },
                Template::Box {
                    center: [8.0, 2.0, -0.7],
                    size: [3.0, 2.0, 2.0],
                    yaw_deg: 15.0,
                    class: 1,
                    reflectance: 0.8,
                },
            ],
        };
        generate_scene(&spec).unwrap()
    }

    #[test]
    fn null_preset_is_identity() {
        let cloud = test_cloud();
        let out = corrupt_weather(&cloud, &CorruptionPreset::none(), 2, 99);
        assert_eq!(out, cloud);
    }

    #[test]
    fn survivors_keep_labels_and_stay_within_jitter_bound() {
        let cloud = test_cloud();
        let preset = CorruptionPreset {
            gamma: 0.05,
            noise_sigma: 0.02,
            drop_frac: 0.0,
            clutter_frac: 0.0,
            clutter_range: [0.5, 5.0],
            clutter_reflectance: [0.5, 1.0],
            geo_jitter_bound: 0.01,
        };
        let out = corrupt_weather(&cloud, &preset, 2, 5);
        assert_eq!(out.len(), cloud.len());
        assert_eq!(out.labels, cloud.labels);
        for (a, b) in cloud.points.iter().zip(&out.points) {
            let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
            assert!(d <= 0.01 + 1e-12, "moved {d}");
        }
    }

    #[test]
    fn drop_half_of_10k_is_binomially_plausible() {
        // seed-averaged binomial bound from the examples in the contract
        let mut points = Vec::with_capacity(10_000);
        for i in 0..10_000 {
            points.push(Point {
                x: 1.0 + (i % 50) as f64,
                y: 0.0,
                z: 0.0,
                r: 0.5,
            });
        }
        let cloud = PointCloud {
            points,
            labels: None,
        };
        let preset = CorruptionPreset {
            drop_frac: 0.5,
            ..CorruptionPreset::none()
        };
        let mut total = 0usize;
        let seeds = 8;
        for seed in 0..seeds {
            total += corrupt_weather(&cloud, &preset, 0, seed).len();
        }
        let avg = total as f64 / seeds as f64;
        assert!((4700.0..=5300.0).contains(&avg), "avg survivors {avg}");
    }

    #[test]
    fn fog_shifts_reflectance_far_more_than_distance() {
        let cloud = test_cloud();
        let preset = CorruptionPreset {
            gamma: 0.08,
            noise_sigma: 0.02,
            drop_frac: 0.15,
            clutter_frac: 0.005,
            clutter_range: [0.5, 4.0],
            clutter_reflectance: [0.4, 1.0],
            geo_jitter_bound: 0.01,
        };
        let out = corrupt_weather(&cloud, &preset, 2, 31);

        // shifts measured on values normalized by the clean cloud's max, so
        // the two fields are comparable
        let norm = |v: Vec<f64>, scale: f64| -> Vec<f64> {
            v.into_iter().map(|x| x / scale).collect()
        };
        let dist_scale = cloud.distances().iter().cloned().fold(0.0, f64::max);
        let refl_scale = cloud.reflectances().iter().cloned().fold(0.0, f64::max);
        let w_dist = wasserstein1(
            &norm(cloud.distances(), dist_scale),
            &norm(out.distances(), dist_scale),
        );
        let w_refl = wasserstein1(
            &norm(cloud.reflectances(), refl_scale),
            &norm(out.reflectances(), refl_scale),
        );
        // reflectance moves toward zero
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&out.reflectances()) < mean(&cloud.reflectances()));
        assert!(
            w_dist < 0.1 * w_refl,
            "distance shift {w_dist} not << reflectance shift {w_refl}"
        );
    }

    #[test]
    fn clutter_gets_noise_label() {
        let cloud = test_cloud();
        let preset = CorruptionPreset {
            clutter_frac: 0.1,
            ..CorruptionPreset::none()
        };
        let out = corrupt_weather(&cloud, &preset, 7, 3);
        let labels = out.labels.as_ref().unwrap();
        let noise_count = labels.iter().filter(|&&l| l == 7).count();
        assert_eq!(noise_count, (0.1 * cloud.len() as f64).round() as usize);
        // clutter sits near the sensor
        for (p, &l) in out.points.iter().zip(labels) {
            if l == 7 {
                assert!(p.range() <= 5.0 + 1e-9);
            }
        }
    }

    #[test]
    fn default_presets_parse_and_contain_the_four_kinds() {
        let table = PresetTable::defaults();
        for kind in ["fog_dense", "fog_light", "rain", "snow"] {
            assert!(table.get(kind).is_ok(), "missing preset {kind}");
        }
        assert!(matches!(table.get("hurricane"), Err(Error::Config(_))));
    }
}
