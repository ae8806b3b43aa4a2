//! Shared fixtures for unit tests: a small model configuration and a small
//! labeled synthetic scene.

use crate::lidar::scene::{generate_scene, SceneSpec, SensorModel, Template};
use crate::lidar::PointCloud;
use crate::model::{AblationFlags, ModelConfig};
use crate::range::conv2d::{IrbSpec, RefEncoderConfig};
use crate::voxel::GeoEncoderConfig;

pub fn tiny_model_config(ablation: AblationFlags) -> ModelConfig {
    ModelConfig {
        class_count: 4,
        voxel_size: 0.2,
        range_h: 16,
        range_w: 64,
        geo: GeoEncoderConfig {
            channels: vec![3, 8, 8],
            strides: vec![1, 2],
            norm_eps: 1e-5,
        },
        ref_enc: RefEncoderConfig {
            stem_channels: 4,
            blocks: vec![
                IrbSpec {
                    c_out: 8,
                    expansion: 2,
                    stride: 2,
                },
                IrbSpec {
                    c_out: 8,
                    expansion: 2,
                    stride: 2,
                },
            ],
            norm_eps: 1e-5,
        },
        fusion_tokens: 4,
        fusion_heads: 2,
        decoder_hidden: 8,
        ablation,
        ..Default::default()
    }
}

pub fn tiny_scene(seed: u64) -> PointCloud {
    let spec = SceneSpec {
        class_count: 4,
        seed,
        sensor: SensorModel {
            beams: 10,
            azimuth_steps: 90,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
            max_range: 60.0,
            range_jitter_sigma: 0.01,
            reflectance_jitter_sigma: 0.01,
            falloff_distance: 20.0,
        },
        templates: vec![
            Template::Ground {
                z: -1.7,
                class: 0,
                reflectance: 0.4,
            },
            Template::Box {
                center: [6.0, 1.0, -0.9],
                size: [3.0, 2.0, 1.6],
                yaw_deg: 20.0,
                class: 1,
                reflectance: 0.8,
            },
            Template::Cylinder {
                center: [4.0, -3.0],
                radius: 0.4,
                z_range: [-1.7, 2.0],
                class: 2,
                reflectance: 0.9,
            },
            Template::Wall {
                from: [-8.0, -6.0],
                to: [-8.0, 6.0],
                z_range: [-1.7, 1.5],
                class: 3,
                reflectance: 0.6,
            },
        ],
    };
    generate_scene(&spec).unwrap()
}

