//! Voxelization and the sparse 3D convolution encoder for the geometry branch.
//!
//! Occupied voxels are kept as a sorted key list plus a feature matrix row per
//! voxel. Stride-1 convolution is submanifold: the occupied set is preserved
//! and taps only read occupied neighbors. Stride-2 convolution emits one
//! output voxel per distinct `floor(key/2)` and aggregates the taps around the
//! doubled coordinate.

use crate::error::{Error, Result};
use crate::lidar::PointCloud;
use crate::params::{Binder, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{DiffTensor, Tape, GATHER_PAD};
use std::collections::HashMap;

/// Kernel tap offsets in fixed lexicographic order over (di, dj, dk).
/// The center tap is index 13.
pub fn tap_offsets() -> [[i64; 3]; 27] {
    let mut taps = [[0i64; 3]; 27];
    let mut t = 0;
    for di in -1..=1 {
        for dj in -1..=1 {
            for dk in -1..=1 {
                taps[t] = [di, dj, dk];
                t += 1;
            }
        }
    }
    taps
}

pub const CENTER_TAP: usize = 13;

/// Hash-indexed occupied-voxel set with per-voxel features and
/// representative points. Keys are sorted, so iteration is deterministic.
#[derive(Clone)]
pub struct SparseVoxelGrid {
    pub voxel_size: f64,
    pub keys: Vec<[i64; 3]>,
    /// [V x c] feature matrix.
    pub features: DiffTensor,
    /// Centroid of member points per voxel, meters.
    pub rep_points: Vec<[f64; 3]>,
    /// Original point index -> voxel row.
    pub point_to_voxel: Vec<usize>,
    /// Member point count per voxel.
    pub counts: Vec<usize>,
}

impl SparseVoxelGrid {
    pub fn num_voxels(&self) -> usize {
        self.keys.len()
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn key_index(&self) -> HashMap<[i64; 3], usize> {
        self.keys
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i))
            .collect()
    }
}

/// Bucket points into voxels: key = floor(coord / voxel_size) per axis.
/// Initial features are the mean member offsets from the voxel center,
/// normalized to [-0.5, 0.5]; with `include_reflectance` a fourth column
/// carries the mean member reflectance (the unified-input baseline).
pub fn voxelize(
    tape: &Tape,
    cloud: &PointCloud,
    voxel_size: f64,
    include_reflectance: bool,
) -> Result<SparseVoxelGrid> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("voxelize of an empty cloud".into()));
    }
    if voxel_size <= 0.0 {
        return Err(Error::Config(format!(
            "voxel_size must be positive, got {voxel_size}"
        )));
    }
    let key_of = |p: &crate::lidar::Point| {
        [
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        ]
    };

    let mut groups: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        groups.entry(key_of(p)).or_default().push(i);
    }
    let mut keys: Vec<[i64; 3]> = groups.keys().copied().collect();
    keys.sort_unstable();

    let c = if include_reflectance { 4 } else { 3 };
    let mut features = vec![0.0; keys.len() * c];
    let mut rep_points = vec![[0.0; 3]; keys.len()];
    let mut counts = vec![0usize; keys.len()];
    let mut point_to_voxel = vec![0usize; cloud.len()];

    for (row, key) in keys.iter().enumerate() {
        let members = &groups[key];
        counts[row] = members.len();
        let inv = 1.0 / members.len() as f64;
        let center = [
            (key[0] as f64 + 0.5) * voxel_size,
            (key[1] as f64 + 0.5) * voxel_size,
            (key[2] as f64 + 0.5) * voxel_size,
        ];
        let mut centroid = [0.0; 3];
        let mut mean_r = 0.0;
        for &pi in members {
            let p = &cloud.points[pi];
            point_to_voxel[pi] = row;
            centroid[0] += p.x;
            centroid[1] += p.y;
            centroid[2] += p.z;
            mean_r += p.r;
        }
        for k in 0..3 {
            centroid[k] *= inv;
            rep_points[row][k] = centroid[k];
            features[row * c + k] = (centroid[k] - center[k]) / voxel_size;
        }
        if include_reflectance {
            features[row * c + 3] = mean_r * inv;
        }
    }

    let v = keys.len();
    Ok(SparseVoxelGrid {
        voxel_size,
        keys,
        features: tape.leaf(features, &[v, c])?,
        rep_points,
        point_to_voxel,
        counts,
    })
}

/// Batch-free normalization parameters: learnable affine over fixed running
/// statistics that the trainer updates by exponential moving average.
pub struct NormParams {
    pub gamma: DiffTensor,
    pub beta: DiffTensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

/// One sparse Conv3D block: 3x3x3 kernel, optional normalization and ReLU.
pub struct SparseConvBlock {
    /// [27*c_in x c_out], tap-major.
    pub kernel: DiffTensor,
    /// [c_out].
    pub bias: DiffTensor,
    pub stride: usize,
    pub relu: bool,
    pub norm: Option<NormParams>,
}

/// Per-channel first/second moments of a pre-normalization activation,
/// reported so the trainer can update running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub param_prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn floor_div2(k: [i64; 3]) -> [i64; 3] {
    [k[0].div_euclid(2), k[1].div_euclid(2), k[2].div_euclid(2)]
}

/// Apply one sparse convolution block.
///
/// Stride 1 keeps the occupied set (submanifold); stride 2 emits
/// `floor(key/2)` voxels and halves the resolution, composing point and
/// representative-point bookkeeping accordingly.
pub fn sparse_conv3d(grid: &SparseVoxelGrid, block: &SparseConvBlock) -> Result<SparseVoxelGrid> {
    let c_in = grid.width();
    let kshape = block.kernel.shape().to_vec();
    if kshape.len() != 2 || kshape[0] != 27 * c_in {
        return Err(Error::Dimension {
            op: "sparse_conv3d",
            msg: format!(
                "kernel shape {kshape:?} does not match 27 taps x {c_in} input channels"
            ),
        });
    }
    if block.stride != 1 && block.stride != 2 {
        return Err(Error::Config(format!(
            "stride must be 1 or 2, got {}",
            block.stride
        )));
    }

    let in_map = grid.key_index();
    let (out_keys, out_rep, out_counts, out_p2v, out_size) = if block.stride == 1 {
        (
            grid.keys.clone(),
            grid.rep_points.clone(),
            grid.counts.clone(),
            grid.point_to_voxel.clone(),
            grid.voxel_size,
        )
    } else {
        let mut keys: Vec<[i64; 3]> = grid.keys.iter().map(|&k| floor_div2(k)).collect();
        keys.sort_unstable();
        keys.dedup();
        let new_map: HashMap<[i64; 3], usize> =
            keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let old_to_new: Vec<usize> = grid
            .keys
            .iter()
            .map(|&k| new_map[&floor_div2(k)])
            .collect();
        let mut rep = vec![[0.0; 3]; keys.len()];
        let mut counts = vec![0usize; keys.len()];
        for (old, &new) in old_to_new.iter().enumerate() {
            let w = grid.counts[old];
            counts[new] += w;
            for ax in 0..3 {
                rep[new][ax] += grid.rep_points[old][ax] * w as f64;
            }
        }
        for (r, &cnt) in rep.iter_mut().zip(&counts) {
            for v in r.iter_mut() {
                *v /= cnt.max(1) as f64;
            }
        }
        let p2v = grid
            .point_to_voxel
            .iter()
            .map(|&v| old_to_new[v])
            .collect();
        (keys, rep, counts, p2v, grid.voxel_size * 2.0)
    };

    // Sum of per-tap gathered matmuls over occupied neighbors.
    let mut acc: Option<DiffTensor> = None;
    for (t, delta) in tap_offsets().iter().enumerate() {
        let idx: Vec<usize> = out_keys
            .iter()
            .map(|k| {
                let nb = if block.stride == 1 {
                    [k[0] + delta[0], k[1] + delta[1], k[2] + delta[2]]
                } else {
                    [
                        2 * k[0] + delta[0],
                        2 * k[1] + delta[1],
                        2 * k[2] + delta[2],
                    ]
                };
                in_map.get(&nb).copied().unwrap_or(GATHER_PAD)
            })
            .collect();
        if idx.iter().all(|&i| i == GATHER_PAD) {
            continue;
        }
        let gathered = grid.features.gather_rows(&idx)?;
        let tap_k = block.kernel.slice_rows(t * c_in, c_in)?;
        let contrib = gathered.matmul(&tap_k)?;
        acc = Some(match acc {
            Some(a) => a.add(&contrib)?,
            None => contrib,
        });
    }
    let c_out = kshape[1];
    let tape = grid.features.tape().clone();
    let mut out = match acc {
        Some(a) => a,
        None => tape.zeros(&[out_keys.len(), c_out]),
    };
    out = out.add(&block.bias)?;

    if let Some(norm) = &block.norm {
        let rm = tape.vector(&norm.running_mean);
        let rv_eps: Vec<f64> = norm.running_var.iter().map(|&v| v + norm.eps).collect();
        let denom = tape.vector(&rv_eps).sqrt()?;
        out = out
            .sub(&rm)?
            .div(&denom)?
            .mul(&norm.gamma)?
            .add(&norm.beta)?;
    }
    if block.relu {
        out = out.relu();
    }

    Ok(SparseVoxelGrid {
        voxel_size: out_size,
        keys: out_keys,
        features: out,
        rep_points: out_rep,
        point_to_voxel: out_p2v,
        counts: out_counts,
    })
}

/// Per-channel moments of the pre-normalization activation of a block, for
/// running-stat updates during training.
pub fn batch_moments(values: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = values.len() / c.max(1);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    if rows == 0 {
        return (mean, vec![1.0; c]);
    }
    for row in values.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    for row in values.chunks(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);
    (mean, var)
}

/// Geometry encoder configuration: a chain of sparse conv blocks.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeoEncoderConfig {
    /// Channel chain, length = blocks + 1 (first entry is the input width).
    pub channels: Vec<usize>,
    /// Stride per block, 1 or 2.
    pub strides: Vec<usize>,
    pub norm_eps: f64,
}

impl GeoEncoderConfig {
    pub fn desk_default() -> Self {
        GeoEncoderConfig {
            channels: vec![3, 16, 16, 32, 32],
            strides: vec![1, 2, 1, 2],
            norm_eps: 1e-5,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.strides.len()
    }

    pub fn validate(&self, input_width: usize) -> Result<()> {
        if self.channels.len() != self.strides.len() + 1 {
            return Err(Error::Config(format!(
                "channel chain length {} does not match {} blocks",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.channels[0] != input_width {
            return Err(Error::Config(format!(
                "encoder expects input width {}, grid has {input_width}",
                self.channels[0]
            )));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config("strides must be 1 or 2".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Register this encoder's parameters under `prefix`.
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut SplitMix64) {
        for b in 0..self.num_blocks() {
            let (ci, co) = (self.channels[b], self.channels[b + 1]);
            let p = format!("{prefix}.block{b}");
            store.insert_uniform(&format!("{p}.kernel"), &[27 * ci, co], rng);
            store.insert_zeros(&format!("{p}.bias"), &[co], true);
            store.insert_full(&format!("{p}.gamma"), &[co], 1.0, true);
            store.insert_zeros(&format!("{p}.beta"), &[co], true);
            store.insert_zeros(&format!("{p}.running_mean"), &[co], false);
            store.insert_full(&format!("{p}.running_var"), &[co], 1.0, false);
        }
    }

    fn block(&self, binder: &Binder, prefix: &str, b: usize) -> Result<SparseConvBlock> {
        let p = format!("{prefix}.block{b}");
        let rm = binder.get(&format!("{p}.running_mean"))?.value();
        let rv = binder.get(&format!("{p}.running_var"))?.value();
        Ok(SparseConvBlock {
            kernel: binder.get(&format!("{p}.kernel"))?,
            bias: binder.get(&format!("{p}.bias"))?,
            stride: self.strides[b],
            relu: true,
            norm: Some(NormParams {
                gamma: binder.get(&format!("{p}.gamma"))?,
                beta: binder.get(&format!("{p}.beta"))?,
                running_mean: rm,
                running_var: rv,
                eps: self.norm_eps,
            }),
        })
    }
}

/// Run the geometry encoder. Returns the encoded grid plus the per-block
/// pre-normalization batch moments (for EMA updates in training).
pub fn geo_encoder_forward(
    grid: &SparseVoxelGrid,
    binder: &Binder,
    cfg: &GeoEncoderConfig,
    prefix: &str,
) -> Result<(SparseVoxelGrid, Vec<BatchStats>)> {
    cfg.validate(grid.width())?;
    let mut current = grid.clone();
    let mut stats = Vec::with_capacity(cfg.num_blocks());
    for b in 0..cfg.num_blocks() {
        let block = cfg.block(binder, prefix, b)?;
        // moments are measured on the block's pre-norm activation; rebuild the
        // conv without norm/relu cheaply by reusing the normalized output is
        // not possible, so compute them from a norm-free pass descriptor
        let pre_block = SparseConvBlock {
            kernel: block.kernel.clone(),
            bias: block.bias.clone(),
            stride: block.stride,
            relu: false,
            norm: None,
        };
        let pre = sparse_conv3d(&current, &pre_block)?;
        let c_out = pre.width();
        let (mean, var) = batch_moments(&pre.features.value(), c_out);
        stats.push(BatchStats {
            param_prefix: format!("{prefix}.block{b}"),
            mean,
            var,
        });
        // full block output derives from the pre-norm features directly so the
        // tap gathering is not recomputed
        let tape = pre.features.tape().clone();
        let norm = block.norm.as_ref().expect("encoder blocks are normalized");
        let rm = tape.vector(&norm.running_mean);
        let rv_eps: Vec<f64> = norm.running_var.iter().map(|&v| v + norm.eps).collect();
        let denom = tape.vector(&rv_eps).sqrt()?;
        let normalized = pre
            .features
            .sub(&rm)?
            .div(&denom)?
            .mul(&norm.gamma)?
            .add(&norm.beta)?
            .relu();
        current = SparseVoxelGrid {
            features: normalized,
            ..pre
        };
    }
    Ok((current, stats))
}

/// Gather per-point features from their voxel rows; gradients scatter back
/// additively.
pub fn devoxelize(grid: &SparseVoxelGrid, n: usize) -> Result<DiffTensor> {
    if grid.point_to_voxel.len() != n {
        return Err(Error::UnmappedPoint {
            index: grid.point_to_voxel.len().min(n),
        });
    }
    if let Some((i, _)) = grid
        .point_to_voxel
        .iter()
        .enumerate()
        .find(|(_, &v)| v >= grid.num_voxels())
    {
        return Err(Error::UnmappedPoint { index: i });
    }
    grid.features.gather_rows(&grid.point_to_voxel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::Point;
    use crate::verify::dense_conv3d_oracle;

    fn cloud_from(coords: &[[f64; 3]]) -> PointCloud {
        PointCloud {
            points: coords
                .iter()
                .map(|c| Point {
                    x: c[0],
                    y: c[1],
                    z: c[2],
                    r: 0.5,
                })
                .collect(),
            labels: None,
        }
    }

    fn random_grid(tape: &Tape, n_points: usize, c: usize, seed: u64) -> SparseVoxelGrid {
        let mut rng = SplitMix64::new(seed);
        let coords: Vec<[f64; 3]> = (0..n_points)
            .map(|_| {
                [
                    rng.uniform(0.05, 0.55),
                    rng.uniform(0.05, 0.55),
                    rng.uniform(0.05, 0.55),
                ]
            })
            .collect();
        let cloud = cloud_from(&coords);
        let mut grid = voxelize(tape, &cloud, 0.1, false).unwrap();
        // replace offset features with random ones of width c
        let v = grid.num_voxels();
        let data: Vec<f64> = (0..v * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        grid.features = tape.leaf(data, &[v, c]).unwrap();
        grid
    }

    fn random_block(tape: &Tape, c_in: usize, c_out: usize, stride: usize, seed: u64) -> SparseConvBlock {
        let mut rng = SplitMix64::new(seed);
        let kdata: Vec<f64> = (0..27 * c_in * c_out).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bdata: Vec<f64> = (0..c_out).map(|_| rng.uniform(-0.5, 0.5)).collect();
        SparseConvBlock {
            kernel: tape.leaf(kdata, &[27 * c_in, c_out]).unwrap(),
            bias: tape.vector(&bdata),
            stride,
            relu: false,
            norm: None,
        }
    }

    #[test]
    fn voxelize_groups_nearby_points() {
        let tape = Tape::new();
        let cloud = cloud_from(&[[0.04, 0.04, 0.04], [0.01, 0.02, 0.03]]);
        let grid = voxelize(&tape, &cloud, 0.05, false).unwrap();
        assert_eq!(grid.keys, vec![[0, 0, 0]]);
        assert_eq!(grid.counts, vec![2]);
        assert_eq!(grid.point_to_voxel, vec![0, 0]);
    }

    #[test]
    fn voxelize_floors_negative_coordinates() {
        let tape = Tape::new();
        let cloud = cloud_from(&[[-0.01, 0.0, 0.0]]);
        let grid = voxelize(&tape, &cloud, 0.05, false).unwrap();
        assert_eq!(grid.keys, vec![[-1, 0, 0]]);
    }

    #[test]
    fn voxelize_partitions_all_points() {
        let tape = Tape::new();
        let mut rng = SplitMix64::new(9);
        let coords: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    rng.uniform(-5.0, 5.0),
                    rng.uniform(-5.0, 5.0),
                    rng.uniform(-1.0, 1.0),
                ]
            })
            .collect();
        let grid = voxelize(&tape, &cloud_from(&coords), 0.25, false).unwrap();
        assert_eq!(grid.counts.iter().sum::<usize>(), 1000);
        // every rep point sits inside its voxel cube
        for (key, rep) in grid.keys.iter().zip(&grid.rep_points) {
            for ax in 0..3 {
                let lo = key[ax] as f64 * 0.25;
                assert!(rep[ax] >= lo - 1e-12 && rep[ax] <= lo + 0.25 + 1e-12);
            }
        }
        // offsets normalized
        for &f in grid.features.value().iter() {
            assert!((-0.5..=0.5).contains(&f));
        }
    }

    #[test]
    fn voxelize_empty_cloud_errors() {
        let tape = Tape::new();
        assert!(matches!(
            voxelize(&tape, &PointCloud::default(), 0.05, false),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn voxelize_is_permutation_invariant() {
        let tape = Tape::new();
        let mut rng = SplitMix64::new(31);
        let coords: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    rng.uniform(-2.0, 2.0),
                    rng.uniform(-2.0, 2.0),
                    rng.uniform(-2.0, 2.0),
                ]
            })
            .collect();
        let grid_a = voxelize(&tape, &cloud_from(&coords), 0.3, false).unwrap();
        let mut rev = coords.clone();
        rev.reverse();
        let grid_b = voxelize(&tape, &cloud_from(&rev), 0.3, false).unwrap();
        assert_eq!(grid_a.keys, grid_b.keys);
        for (a, b) in grid_a
            .features
            .value()
            .iter()
            .zip(grid_b.features.value().iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let tape = Tape::new();
        let grid = {
            let cloud = cloud_from(&[[0.02, 0.02, 0.02]]);
            let mut g = voxelize(&tape, &cloud, 0.05, false).unwrap();
            g.features = tape.leaf(vec![0.3, -0.7, 1.5], &[1, 3]).unwrap();
            g
        };
        // kernel: identity at the center tap, zero elsewhere
        let mut kdata = vec![0.0; 27 * 3 * 3];
        for ch in 0..3 {
            kdata[(CENTER_TAP * 3 + ch) * 3 + ch] = 1.0;
        }
        let block = SparseConvBlock {
            kernel: tape.leaf(kdata, &[81, 3]).unwrap(),
            bias: tape.zeros(&[3]),
            stride: 1,
            relu: false,
            norm: None,
        };
        let out = sparse_conv3d(&grid, &block).unwrap();
        assert_eq!(out.features.value(), vec![0.3, -0.7, 1.5]);
        assert_eq!(out.keys, grid.keys);
    }

    #[test]
    fn stride1_matches_dense_oracle() {
        for trial in 0..5 {
            let tape = Tape::new();
            let grid = random_grid(&tape, 40, 4, 100 + trial);
            let block = random_block(&tape, 4, 5, 1, 200 + trial);
            let out = sparse_conv3d(&grid, &block).unwrap();
            let expect = dense_conv3d_oracle(
                &grid.keys,
                &grid.features.value(),
                4,
                &block.kernel.value(),
                5,
                &block.bias.value(),
                1,
                &out.keys,
            );
            let got = out.features.value();
            let max_err = got
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-10, "trial {trial}: max err {max_err}");
        }
    }

    #[test]
    fn stride2_matches_dense_oracle_and_halves_keys() {
        for trial in 0..5 {
            let tape = Tape::new();
            let grid = random_grid(&tape, 60, 3, 300 + trial);
            let block = random_block(&tape, 3, 4, 2, 400 + trial);
            let out = sparse_conv3d(&grid, &block).unwrap();
            // output key set is exactly floor(key/2) of the inputs
            let mut expect_keys: Vec<[i64; 3]> =
                grid.keys.iter().map(|&k| floor_div2(k)).collect();
            expect_keys.sort_unstable();
            expect_keys.dedup();
            assert_eq!(out.keys, expect_keys);
            assert!(out.num_voxels() < grid.num_voxels());
            let expect = dense_conv3d_oracle(
                &grid.keys,
                &grid.features.value(),
                3,
                &block.kernel.value(),
                4,
                &block.bias.value(),
                2,
                &out.keys,
            );
            let got = out.features.value();
            let max_err = got
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-10, "trial {trial}: max err {max_err}");
        }
    }

    #[test]
    fn submanifold_preserves_occupancy() {
        let tape = Tape::new();
        let grid = random_grid(&tape, 50, 3, 77);
        let block = random_block(&tape, 3, 3, 1, 78);
        let out = sparse_conv3d(&grid, &block).unwrap();
        assert_eq!(out.keys, grid.keys);
        assert_eq!(out.point_to_voxel, grid.point_to_voxel);
    }

    #[test]
    fn kernel_gradient_matches_fd() {
        use crate::tensor::gradient_check;
        let c_in = 2;
        let c_out = 2;
        let mut rng = SplitMix64::new(55);
        let k0: Vec<f64> = (0..27 * c_in * c_out).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let report = gradient_check(
            |tape, k| {
                let coords = [
                    [0.02, 0.02, 0.02],
                    [0.08, 0.02, 0.02],
                    [0.02, 0.08, 0.08],
                    [0.14, 0.08, 0.02],
                ];
                let cloud = cloud_from(&coords);
                let mut grid = voxelize(tape, &cloud, 0.05, false).unwrap();
                let v = grid.num_voxels();
                let mut r2 = SplitMix64::new(66);
                let data: Vec<f64> = (0..v * c_in).map(|_| r2.uniform(-1.0, 1.0)).collect();
                grid.features = tape.leaf(data, &[v, c_in])?;
                let block = SparseConvBlock {
                    kernel: k.clone(),
                    bias: tape.zeros(&[c_out]),
                    stride: 1,
                    relu: false,
                    norm: None,
                };
                let out = sparse_conv3d(&grid, &block)?;
                Ok(out.features.sum_all())
            },
            &k0,
            &[27 * c_in, c_out],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn encoder_desk_config_shrinks_grid() {
        let tape = Tape::new();
        let mut rng = SplitMix64::new(8);
        let coords: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    rng.uniform(-4.0, 4.0),
                    rng.uniform(-4.0, 4.0),
                    rng.uniform(-0.5, 1.5),
                ]
            })
            .collect();
        let cloud = cloud_from(&coords);
        let grid = voxelize(&tape, &cloud, 0.05, false).unwrap();
        let cfg = GeoEncoderConfig::desk_default();
        let mut store = ParamStore::new();
        let mut prng = SplitMix64::new(1);
        cfg.init_params(&mut store, "geo", &mut prng);
        let binder = Binder::new(&tape, &store);
        let (out, stats) = geo_encoder_forward(&grid, &binder, &cfg, "geo").unwrap();
        assert_eq!(out.width(), 32);
        assert!(out.num_voxels() < grid.num_voxels());
        assert_eq!(stats.len(), 4);
        assert_eq!(out.point_to_voxel.len(), 1000);
        assert!(out.point_to_voxel.iter().all(|&v| v < out.num_voxels()));
        assert!((out.voxel_size - 0.2).abs() < 1e-12);
    }

    #[test]
    fn encoder_translation_covariance() {
        // translate by one full output-stride cell (4 voxels at stride 2x2):
        // output features must be equal up to a key shift
        let tape = Tape::new();
        let vs = 0.0625; // power of two so the shift is exact
        let shift = 4.0 * vs;
        let mut rng = SplitMix64::new(91);
        let coords: Vec<[f64; 3]> = (0..300)
            .map(|_| {
                [
                    rng.uniform(-2.0, 2.0),
                    rng.uniform(-2.0, 2.0),
                    rng.uniform(-0.5, 0.5),
                ]
            })
            .collect();
        let shifted: Vec<[f64; 3]> = coords
            .iter()
            .map(|c| [c[0] + shift, c[1], c[2]])
            .collect();

        let cfg = GeoEncoderConfig::desk_default();
        let mut store = ParamStore::new();
        let mut prng = SplitMix64::new(2);
        cfg.init_params(&mut store, "geo", &mut prng);
        let binder = Binder::new(&tape, &store);

        let g1 = voxelize(&tape, &cloud_from(&coords), vs, false).unwrap();
        let g2 = voxelize(&tape, &cloud_from(&shifted), vs, false).unwrap();
        let (o1, _) = geo_encoder_forward(&g1, &binder, &cfg, "geo").unwrap();
        let (o2, _) = geo_encoder_forward(&g2, &binder, &cfg, "geo").unwrap();

        assert_eq!(o1.num_voxels(), o2.num_voxels());
        // keys of o2 are keys of o1 shifted by +1 in x
        let shifted_keys: Vec<[i64; 3]> =
            o1.keys.iter().map(|&k| [k[0] + 1, k[1], k[2]]).collect();
        assert_eq!(o2.keys, shifted_keys);
        let (f1, f2) = (o1.features.value(), o2.features.value());
        let max_err = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-9, "max err {max_err}");
    }

    #[test]
    fn zero_features_propagate_bias_per_oracle() {
        let tape = Tape::new();
        let mut grid = random_grid(&tape, 30, 3, 500);
        let v = grid.num_voxels();
        grid.features = tape.zeros(&[v, 3]);
        let block = random_block(&tape, 3, 4, 1, 501);
        let out = sparse_conv3d(&grid, &block).unwrap();
        let expect = dense_conv3d_oracle(
            &grid.keys,
            &vec![0.0; v * 3],
            3,
            &block.kernel.value(),
            4,
            &block.bias.value(),
            1,
            &out.keys,
        );
        let bias = block.bias.value();
        for (row, exp_row) in out.features.value().chunks(4).zip(expect.chunks(4)) {
            assert_eq!(row, exp_row);
            for (a, b) in row.iter().zip(&bias) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn devoxelize_gathers_and_scatters() {
        let tape = Tape::new();
        let cloud = cloud_from(&[[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [0.30, 0.01, 0.01]]);
        let mut grid = voxelize(&tape, &cloud, 0.05, false).unwrap();
        let v = grid.num_voxels();
        assert_eq!(v, 2);
        grid.features = tape
            .leaf((0..v * 2).map(|i| i as f64).collect(), &[v, 2])
            .unwrap();
        let per_point = devoxelize(&grid, 3).unwrap();
        let vals = per_point.value();
        // first two points share a voxel
        assert_eq!(&vals[0..2], &vals[2..4]);
        // uniform upstream gradient: voxel grad = member count
        per_point.sum_all().backward().unwrap();
        let g = grid.features.grad();
        assert_eq!(g, vec![2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn devoxelize_wrong_count_errors() {
        let tape = Tape::new();
        let cloud = cloud_from(&[[0.0, 0.0, 0.0]]);
        let grid = voxelize(&tape, &cloud, 0.05, false).unwrap();
        assert!(matches!(
            devoxelize(&grid, 5),
            Err(Error::UnmappedPoint { .. })
        ));
    }
}
