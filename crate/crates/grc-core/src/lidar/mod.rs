//! Point clouds, KITTI-format I/O, synthetic scenes, and weather corruption.

pub mod scene;
pub mod stats;
pub mod weather;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One LiDAR return: position in meters, unitless reflectance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl Point {
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// A LiDAR scan with optional per-point class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.range()).collect()
    }

    pub fn reflectances(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.r).collect()
    }
}

/// Counters accumulated while parsing; real exporters occasionally emit tiny
/// negative reflectances, which are clamped rather than rejected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub clamped_reflectance: usize,
}

/// Parse a KITTI velodyne `.bin` payload: packed little-endian f32 quadruples
/// (x, y, z, reflectance), widened to f64.
pub fn parse_kitti_bin(bytes: &[u8]) -> Result<(PointCloud, ParseStats)> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Truncated {
            offset: bytes.len() - bytes.len() % 16,
            msg: format!("{} bytes is not a whole number of 16-byte points", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut stats = ParseStats::default();
    for (i, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |off: usize| {
            f32::from_le_bytes([chunk[off], chunk[off + 1], chunk[off + 2], chunk[off + 3]]) as f64
        };
        let (x, y, z, mut r) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && r.is_finite()) {
            return Err(Error::Parse {
                index: i,
                msg: format!("non-finite component in ({x}, {y}, {z}, {r})"),
            });
        }
        if r < 0.0 {
            r = 0.0;
            stats.clamped_reflectance += 1;
        }
        points.push(Point { x, y, z, r });
    }
    Ok((PointCloud { points, labels: None }, stats))
}

/// Inverse of [`parse_kitti_bin`] up to f32 rounding.
pub fn write_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        out.extend_from_slice(&(p.x as f32).to_le_bytes());
        out.extend_from_slice(&(p.y as f32).to_le_bytes());
        out.extend_from_slice(&(p.z as f32).to_le_bytes());
        out.extend_from_slice(&(p.r as f32).to_le_bytes());
    }
    out
}

/// Remap table from raw KITTI semantic ids (low 16 bits of each label word)
/// to contiguous class indices. Unmapped ids become `unmapped`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMap {
    pub map: BTreeMap<u16, u32>,
    pub unmapped: u32,
}

impl ClassMap {
    pub fn remap(&self, semantic: u16) -> u32 {
        self.map.get(&semantic).copied().unwrap_or(self.unmapped)
    }
}

/// Parse a KITTI `.label` payload: packed little-endian u32 words, low 16 bits
/// semantic id, high 16 bits instance id (discarded). `map = None` passes the
/// semantic id through unchanged.
pub fn parse_kitti_label(bytes: &[u8], n: usize, map: Option<&ClassMap>) -> Result<Vec<u32>> {
    if bytes.len() != 4 * n {
        return Err(Error::Truncated {
            offset: bytes.len().min(4 * n),
            msg: format!("expected {} bytes for {n} labels, got {}", 4 * n, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| {
            let word = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let semantic = (word & 0xFFFF) as u16;
            match map {
                Some(m) => m.remap(semantic),
                None => semantic as u32,
            }
        })
        .collect())
}

/// Emit labels as KITTI `.label` words with a zero instance id.
pub fn write_kitti_label(labels: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        out.extend_from_slice(&(l & 0xFFFF).to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cloud() -> PointCloud {
        PointCloud {
            points: vec![
                Point { x: 1.0, y: 2.0, z: 3.0, r: 0.5 },
                Point { x: -1.0, y: 0.0, z: 4.0, r: 0.25 },
            ],
            labels: None,
        }
    }

    #[test]
    fn bin_roundtrip_two_points() {
        let bytes = write_kitti_bin(&sample_cloud());
        assert_eq!(bytes.len(), 32);
        let (cloud, stats) = parse_kitti_bin(&bytes).unwrap();
        assert_eq!(cloud, sample_cloud());
        assert_eq!(stats.clamped_reflectance, 0);
    }

    #[test]
    fn empty_bytes_empty_cloud() {
        let (cloud, _) = parse_kitti_bin(&[]).unwrap();
        assert!(cloud.is_empty());
        assert!(write_kitti_bin(&cloud).is_empty());
    }

    #[test]
    fn truncated_input_reports_offset() {
        let bytes = vec![0u8; 17];
        match parse_kitti_bin(&bytes) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn nonfinite_float_reports_point_index() {
        let mut bytes = write_kitti_bin(&sample_cloud());
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        match parse_kitti_bin(&bytes) {
            Err(Error::Parse { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_reflectance_clamped_and_counted() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 0.0, 0.0, -0.001] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (cloud, stats) = parse_kitti_bin(&bytes).unwrap();
        assert_eq!(cloud.points[0].r, 0.0);
        assert_eq!(stats.clamped_reflectance, 1);
    }

    #[test]
    fn label_word_masks_instance_bits() {
        let word = 0x0001_000Au32;
        let labels = parse_kitti_label(&word.to_le_bytes(), 1, None).unwrap();
        assert_eq!(labels, vec![10]);
    }

    #[test]
    fn label_empty() {
        assert!(parse_kitti_label(&[], 0, None).unwrap().is_empty());
    }

    #[test]
    fn label_length_mismatch() {
        match parse_kitti_label(&[0u8; 6], 2, None) {
            Err(Error::Truncated { msg, .. }) => {
                assert!(msg.contains("8 bytes"), "{msg}");
                assert!(msg.contains("got 6"), "{msg}");
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn label_remap_roundtrip() {
        let map = ClassMap {
            map: [(10u16, 0u32), (40, 1), (70, 2)].into_iter().collect(),
            unmapped: 99,
        };
        let raw: Vec<u32> = vec![10, 40, 70, 10, 5];
        let mut bytes = Vec::new();
        for w in &raw {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let mapped = parse_kitti_label(&bytes, raw.len(), Some(&map)).unwrap();
        // independent table-lookup oracle
        let expect: Vec<u32> = raw
            .iter()
            .map(|&w| match w {
                10 => 0,
                40 => 1,
                70 => 2,
                _ => 99,
            })
            .collect();
        assert_eq!(mapped, expect);
    }
}
