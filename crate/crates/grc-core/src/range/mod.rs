//! Spherical projection to a range image and the 2D reflectance encoder.

pub mod conv2d;

use crate::error::{Error, Result};
use crate::lidar::PointCloud;

/// Pixel with no return.
pub const NO_POINT: usize = usize::MAX;

/// Range-view image produced by spherical projection. Pixel (v, u) is stored
/// at `v * w + u`. Reflectance is standardized per image over valid pixels
/// (zero mean, unit variance), which makes everything downstream invariant to
/// positive affine rescalings of the raw reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub h: usize,
    pub w: usize,
    /// Standardized reflectance, 0 at invalid pixels.
    pub reflectance: Vec<f64>,
    pub mask: Vec<bool>,
    /// Source point index per valid pixel, `NO_POINT` elsewhere.
    pub point_index: Vec<usize>,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    /// Points skipped because they sit at the sensor origin.
    pub skipped_origin: usize,
    /// Points dropped because their pitch lies outside the vertical FOV.
    pub out_of_fov: usize,
}

/// Project one point to its pixel. `None` when the point is at the origin or
/// outside the vertical FOV.
pub fn project_pixel(
    x: f64,
    y: f64,
    z: f64,
    h: usize,
    w: usize,
    fov_up_deg: f64,
    fov_down_deg: f64,
) -> Option<(usize, usize)> {
    let range = (x * x + y * y + z * z).sqrt();
    if range < 1e-9 {
        return None;
    }
    let fov_up = fov_up_deg.to_radians();
    let fov_down = fov_down_deg.to_radians();
    let pitch = (z / range).asin();
    if pitch < fov_down || pitch > fov_up {
        return None;
    }
    let yaw = y.atan2(x);
    let u = (0.5 * (1.0 - yaw / std::f64::consts::PI) * w as f64).floor() as isize;
    let v = ((1.0 - (pitch - fov_down) / (fov_up - fov_down)) * h as f64).floor() as isize;
    let u = u.clamp(0, w as isize - 1) as usize;
    let v = v.clamp(0, h as isize - 1) as usize;
    Some((u, v))
}

/// Spherical projection with nearer-wins collision handling.
pub fn spherical_project(
    cloud: &PointCloud,
    h: usize,
    w: usize,
    fov_up_deg: f64,
    fov_down_deg: f64,
) -> Result<RangeImage> {
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("range image {h}x{w} must be >= 1x1")));
    }
    if fov_up_deg <= fov_down_deg {
        return Err(Error::Config(format!(
            "fov_up ({fov_up_deg}) must exceed fov_down ({fov_down_deg})"
        )));
    }
    let mut raw = vec![0.0f64; h * w];
    let mut ranges = vec![f64::INFINITY; h * w];
    let mut point_index = vec![NO_POINT; h * w];
    let mut skipped_origin = 0usize;
    let mut out_of_fov = 0usize;

    for (i, p) in cloud.points.iter().enumerate() {
        let range = p.range();
        if range < 1e-9 {
            skipped_origin += 1;
            continue;
        }
        match project_pixel(p.x, p.y, p.z, h, w, fov_up_deg, fov_down_deg) {
            Some((u, v)) => {
                let px = v * w + u;
                if range < ranges[px] {
                    ranges[px] = range;
                    raw[px] = p.r;
                    point_index[px] = i;
                }
            }
            None => out_of_fov += 1,
        }
    }

    let mask: Vec<bool> = point_index.iter().map(|&i| i != NO_POINT).collect();

    // Standardize over valid pixels. A zero-variance plane maps to zeros so
    // the result stays affine-invariant.
    let valid: Vec<f64> = raw
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(&r, _)| r)
        .collect();
    let mut reflectance = vec![0.0; h * w];
    if !valid.is_empty() {
        let n = valid.len() as f64;
        let mean = valid.iter().sum::<f64>() / n;
        let var = valid.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-30 {
            for (px, &m) in mask.iter().enumerate() {
                if m {
                    reflectance[px] = (raw[px] - mean) / std;
                }
            }
        }
    }

    Ok(RangeImage {
        h,
        w,
        reflectance,
        mask,
        point_index,
        fov_up_deg,
        fov_down_deg,
        skipped_origin,
        out_of_fov,
    })
}

impl RangeImage {
    /// Stored source point at (u, v): `Ok(None)` signals a masked-off pixel,
    /// distinct from the out-of-bounds error.
    pub fn unproject(&self, u: usize, v: usize) -> Result<Option<usize>> {
        if u >= self.w || v >= self.h {
            return Err(Error::Dimension {
                op: "unproject",
                msg: format!("pixel ({u}, {v}) outside {}x{}", self.w, self.h),
            });
        }
        let px = v * self.w + u;
        Ok(if self.mask[px] {
            Some(self.point_index[px])
        } else {
            None
        })
    }

    /// Validity mask pooled to the encoder's cell grid: a cell is valid when
    /// any of its `s x s` source pixels holds a return.
    pub fn cell_mask(&self, s: usize) -> Vec<bool> {
        let (hc, wc) = (self.h / s, self.w / s);
        let mut out = vec![false; hc * wc];
        for v in 0..hc * s {
            for u in 0..wc * s {
                if self.mask[v * self.w + u] {
                    out[(v / s) * wc + (u / s)] = true;
                }
            }
        }
        out
    }

    /// 16-bit P5 PGM of the reflectance plane. Valid pixels map affinely from
    /// [min, max] to [1, 65535]; invalid pixels are 0. Samples big-endian per
    /// the Netpbm convention.
    pub fn to_pgm(&self) -> Vec<u8> {
        let valid: Vec<f64> = self
            .reflectance
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&r, _)| r)
            .collect();
        let (lo, hi) = valid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
        let span = (hi - lo).max(1e-30);
        let mut out = format!("P5\n{} {}\n65535\n", self.w, self.h).into_bytes();
        for (px, &m) in self.mask.iter().enumerate() {
            let sample: u16 = if m {
                1 + ((self.reflectance[px] - lo) / span * 65534.0).round() as u16
            } else {
                0
            };
            out.extend_from_slice(&sample.to_be_bytes());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::Point;
    use crate::rng::SplitMix64;

    fn cloud_of(points: &[(f64, f64, f64, f64)]) -> PointCloud {
        PointCloud {
            points: points
                .iter()
                .map(|&(x, y, z, r)| Point { x, y, z, r })
                .collect(),
            labels: None,
        }
    }

    #[test]
    fn forward_axis_lands_mid_width() {
        // evaluated from the projection formulas: yaw 0 -> u = W/2,
        // pitch 0 at fov [3, -25] deg -> v = floor((1 - 25/28) * 64) = 6
        let (u, v) = project_pixel(1.0, 0.0, 0.0, 64, 2048, 3.0, -25.0).unwrap();
        assert_eq!((u, v), (1024, 6));
    }

    #[test]
    fn left_axis_lands_quarter_width() {
        let (u, v) = project_pixel(0.0, 1.0, 0.0, 64, 2048, 3.0, -25.0).unwrap();
        assert_eq!(u, 512);
        assert_eq!(v, 6);
    }

    #[test]
    fn nearer_point_wins_collision() {
        let cloud = cloud_of(&[(5.0, 0.0, 0.0, 0.9), (3.0, 0.0, 0.0, 0.1)]);
        let img = spherical_project(&cloud, 64, 2048, 3.0, -25.0).unwrap();
        assert_eq!(img.unproject(1024, 6).unwrap(), Some(1));
    }

    #[test]
    fn origin_point_skipped_with_counter() {
        let cloud = cloud_of(&[(0.0, 0.0, 0.0, 0.5), (1.0, 0.0, 0.0, 0.5)]);
        let img = spherical_project(&cloud, 8, 8, 3.0, -25.0).unwrap();
        assert_eq!(img.skipped_origin, 1);
        assert_eq!(img.mask.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn out_of_fov_dropped() {
        // straight up is far above fov_up
        let cloud = cloud_of(&[(0.1, 0.0, 5.0, 0.5)]);
        let img = spherical_project(&cloud, 8, 8, 3.0, -25.0).unwrap();
        assert_eq!(img.out_of_fov, 1);
        assert!(img.mask.iter().all(|&m| !m));
    }

    #[test]
    fn survivors_roundtrip_exactly() {
        let mut rng = SplitMix64::new(41);
        let mut pts = Vec::new();
        for _ in 0..1000 {
            // pitch within FOV by construction
            let yaw = rng.uniform(-3.1, 3.1);
            let pitch = rng.uniform(-24.0f64.to_radians(), 2.5f64.to_radians());
            let range = rng.uniform(2.0, 60.0);
            pts.push((
                range * pitch.cos() * yaw.cos(),
                range * pitch.cos() * yaw.sin(),
                range * pitch.sin(),
                rng.uniform(0.0, 1.0),
            ));
        }
        let cloud = cloud_of(&pts);
        let img = spherical_project(&cloud, 64, 512, 3.0, -25.0).unwrap();
        for v in 0..img.h {
            for u in 0..img.w {
                if let Some(i) = img.unproject(u, v).unwrap() {
                    let p = &cloud.points[i];
                    let (pu, pv) =
                        project_pixel(p.x, p.y, p.z, 64, 512, 3.0, -25.0).unwrap();
                    assert_eq!((pu, pv), (u, v), "pixel back-projection mismatch");
                }
            }
        }
    }

    #[test]
    fn unproject_masked_and_oob() {
        let cloud = cloud_of(&[(1.0, 0.0, 0.0, 0.5)]);
        let img = spherical_project(&cloud, 8, 8, 3.0, -25.0).unwrap();
        assert_eq!(img.unproject(0, 0).unwrap(), None);
        assert!(img.unproject(8, 0).is_err());
    }

    #[test]
    fn projection_is_pure() {
        let mut rng = SplitMix64::new(42);
        let pts: Vec<(f64, f64, f64, f64)> = (0..500)
            .map(|_| {
                (
                    rng.uniform(-20.0, 20.0),
                    rng.uniform(-20.0, 20.0),
                    rng.uniform(-3.0, 1.0),
                    rng.uniform(0.0, 1.0),
                )
            })
            .collect();
        let cloud = cloud_of(&pts);
        let a = spherical_project(&cloud, 32, 256, 3.0, -25.0).unwrap();
        let b = spherical_project(&cloud, 32, 256, 3.0, -25.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn standardization_removes_positive_affine_rescale() {
        let mut rng = SplitMix64::new(43);
        let pts: Vec<(f64, f64, f64, f64)> = (0..400)
            .map(|_| {
                (
                    rng.uniform(-20.0, 20.0),
                    rng.uniform(-20.0, 20.0),
                    rng.uniform(-3.0, 1.0),
                    rng.uniform(0.1, 0.9),
                )
            })
            .collect();
        let cloud = cloud_of(&pts);
        let rescaled = PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| Point {
                    r: 3.5 * p.r + 0.75,
                    ..*p
                })
                .collect(),
            labels: None,
        };
        let a = spherical_project(&cloud, 32, 256, 3.0, -25.0).unwrap();
        let b = spherical_project(&rescaled, 32, 256, 3.0, -25.0).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.point_index, b.point_index);
        let max_err = a
            .reflectance
            .iter()
            .zip(&b.reflectance)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12, "max err {max_err}");
    }

    #[test]
    fn constant_reflectance_standardizes_to_zeros() {
        let cloud = cloud_of(&[(1.0, 0.0, 0.0, 0.7), (2.0, 1.0, 0.0, 0.7)]);
        let img = spherical_project(&cloud, 8, 16, 3.0, -25.0).unwrap();
        assert!(img.reflectance.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn cell_mask_or_pools() {
        let cloud = cloud_of(&[(1.0, 0.0, 0.0, 0.5)]);
        let img = spherical_project(&cloud, 8, 8, 3.0, -25.0).unwrap();
        let cm = img.cell_mask(2);
        assert_eq!(cm.len(), 16);
        assert_eq!(cm.iter().filter(|&&m| m).count(), 1);
        // the valid cell covers the valid pixel
        let px = img.point_index.iter().position(|&i| i != NO_POINT).unwrap();
        let (v, u) = (px / 8, px % 8);
        assert!(cm[(v / 2) * 4 + (u / 2)]);
    }

    #[test]
    fn pgm_header_and_size() {
        let cloud = cloud_of(&[(1.0, 0.0, 0.0, 0.5), (2.0, 1.0, -0.2, 0.9)]);
        let img = spherical_project(&cloud, 16, 32, 3.0, -25.0).unwrap();
        let pgm = img.to_pgm();
        let header = b"P5\n32 16\n65535\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 16 * 32 * 2);
    }
}
