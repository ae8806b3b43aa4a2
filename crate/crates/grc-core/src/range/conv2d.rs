//! 2D building blocks for the reflectance encoder: instance normalization,
//! depthwise 3x3 convolution, and inverted residual blocks.
//!
//! Feature maps are stored channels-last as [h*w x C] with pixel (v, u) at row
//! `v * w + u`. Horizontal padding is circular (azimuth wraps), vertical
//! padding is zero.

use super::RangeImage;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{DiffTensor, GATHER_PAD};

/// Per-channel instance normalization over the single image plane:
/// (x - mean) / sqrt(var + eps) * gamma + beta, statistics over all h*w rows.
pub fn instance_norm2d(
    x: &DiffTensor,
    gamma: &DiffTensor,
    beta: &DiffTensor,
    eps: f64,
) -> Result<DiffTensor> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("instance norm eps must be > 0, got {eps}")));
    }
    let mu = x.reduce_mean(0)?;
    let centered = x.sub(&mu)?;
    let var = centered.mul(&centered)?.reduce_mean(0)?;
    let denom = var.add_const(eps).sqrt()?;
    centered.div(&denom)?.mul(gamma)?.add(beta)
}

/// Depthwise 3x3 convolution. `kernel` is [C x 9], tap index (dv+1)*3+(du+1).
/// Returns the output map and its (h, w).
pub fn depthwise_conv3x3(
    x: &DiffTensor,
    kernel: &DiffTensor,
    h: usize,
    w: usize,
    stride: usize,
) -> Result<(DiffTensor, usize, usize)> {
    let c = x.shape()[1];
    if x.shape()[0] != h * w {
        return Err(Error::Dimension {
            op: "depthwise_conv3x3",
            msg: format!("{} rows for a {h}x{w} plane", x.shape()[0]),
        });
    }
    if kernel.shape() != [c, 9] {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv3x3",
            left: kernel.shape().to_vec(),
            right: vec![c, 9],
        });
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("stride must be 1 or 2, got {stride}")));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Config(format!(
            "plane {h}x{w} not divisible by stride {stride}"
        )));
    }
    let (h2, w2) = (h / stride, w / stride);
    let mut acc: Option<DiffTensor> = None;
    for dv in -1i64..=1 {
        for du in -1i64..=1 {
            let t = ((dv + 1) * 3 + (du + 1)) as usize;
            let mut idx = Vec::with_capacity(h2 * w2);
            for vo in 0..h2 {
                let sv = stride as i64 * vo as i64 + dv;
                for uo in 0..w2 {
                    if sv < 0 || sv >= h as i64 {
                        idx.push(GATHER_PAD); // zero vertical padding
                    } else {
                        let su = (stride as i64 * uo as i64 + du).rem_euclid(w as i64);
                        idx.push(sv as usize * w + su as usize);
                    }
                }
            }
            let gathered = x.gather_rows(&idx)?;
            let wcol = kernel.slice_cols(t, 1)?.reshape(&[c])?;
            let contrib = gathered.mul(&wcol)?;
            acc = Some(match acc {
                Some(a) => a.add(&contrib)?,
                None => contrib,
            });
        }
    }
    Ok((acc.expect("nine taps"), h2, w2))
}

/// 1x1 convolution: a plain matmul plus bias.
pub fn pointwise(x: &DiffTensor, weight: &DiffTensor, bias: &DiffTensor) -> Result<DiffTensor> {
    x.matmul(weight)?.add(bias)
}

/// Weights of one inverted residual block. `norm*: None` bypasses that
/// normalization stage (used in identity-composition tests).
pub struct IrbParams {
    pub expand_w: DiffTensor,
    pub expand_b: DiffTensor,
    /// [t*c_in x 9].
    pub dw_kernel: DiffTensor,
    pub norm1: Option<(DiffTensor, DiffTensor)>,
    pub proj_w: DiffTensor,
    pub proj_b: DiffTensor,
    pub norm2: Option<(DiffTensor, DiffTensor)>,
    pub stride: usize,
    pub skip: bool,
    pub eps: f64,
}

/// expand -> depthwise 3x3 -> instance norm -> ReLU6 -> project -> instance
/// norm, plus the skip connection when enabled (requires c_in = c_out and
/// stride 1).
pub fn inverted_residual_forward(
    x: &DiffTensor,
    h: usize,
    w: usize,
    p: &IrbParams,
) -> Result<(DiffTensor, usize, usize)> {
    let c_in = x.shape()[1];
    let c_out = p.proj_w.shape()[1];
    if p.skip && (p.stride != 1 || c_in != c_out) {
        return Err(Error::Config(format!(
            "skip requires stride 1 and c_in == c_out (got stride {}, {c_in} -> {c_out})",
            p.stride
        )));
    }
    let expanded = pointwise(x, &p.expand_w, &p.expand_b)?;
    let (dw, h2, w2) = depthwise_conv3x3(&expanded, &p.dw_kernel, h, w, p.stride)?;
    let n1 = match &p.norm1 {
        Some((g, b)) => instance_norm2d(&dw, g, b, p.eps)?,
        None => dw,
    };
    let act = n1.clamp(0.0, 6.0);
    let projected = pointwise(&act, &p.proj_w, &p.proj_b)?;
    let n2 = match &p.norm2 {
        Some((g, b)) => instance_norm2d(&projected, g, b, p.eps)?,
        None => projected,
    };
    let out = if p.skip { n2.add(x)? } else { n2 };
    Ok((out, h2, w2))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IrbSpec {
    pub c_out: usize,
    pub expansion: usize,
    pub stride: usize,
}

/// Reflectance encoder: pointwise stem over the (reflectance, mask) input
/// pair, then a chain of inverted residual blocks.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RefEncoderConfig {
    pub stem_channels: usize,
    pub blocks: Vec<IrbSpec>,
    pub norm_eps: f64,
}

impl RefEncoderConfig {
    pub fn desk_default() -> Self {
        RefEncoderConfig {
            stem_channels: 8,
            blocks: vec![
                IrbSpec {
                    c_out: 16,
                    expansion: 2,
                    stride: 2,
                },
                IrbSpec {
                    c_out: 32,
                    expansion: 2,
                    stride: 2,
                },
            ],
            norm_eps: 1e-5,
        }
    }

    pub fn downsample(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.c_out)
            .unwrap_or(self.stem_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::Config("stem_channels must be >= 1".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.c_out == 0 || b.expansion == 0 {
                return Err(Error::Config(format!("block {i}: zero width")));
            }
            if b.stride != 1 && b.stride != 2 {
                return Err(Error::Config(format!("block {i}: stride must be 1 or 2")));
            }
        }
        Ok(())
    }

    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut SplitMix64) {
        store.insert_uniform(&format!("{prefix}.stem.w"), &[2, self.stem_channels], rng);
        store.insert_zeros(&format!("{prefix}.stem.b"), &[self.stem_channels], true);
        store.insert_full(&format!("{prefix}.stem.gamma"), &[self.stem_channels], 1.0, true);
        store.insert_zeros(&format!("{prefix}.stem.beta"), &[self.stem_channels], true);
        let mut c_in = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            let mid = b.expansion * c_in;
            store.insert_uniform(&format!("{p}.expand_w"), &[c_in, mid], rng);
            store.insert_zeros(&format!("{p}.expand_b"), &[mid], true);
            store.insert_uniform(&format!("{p}.dw_kernel"), &[mid, 9], rng);
            store.insert_full(&format!("{p}.norm1.gamma"), &[mid], 1.0, true);
            store.insert_zeros(&format!("{p}.norm1.beta"), &[mid], true);
            store.insert_uniform(&format!("{p}.proj_w"), &[mid, b.c_out], rng);
            store.insert_zeros(&format!("{p}.proj_b"), &[b.c_out], true);
            store.insert_full(&format!("{p}.norm2.gamma"), &[b.c_out], 1.0, true);
            store.insert_zeros(&format!("{p}.norm2.beta"), &[b.c_out], true);
            c_in = b.c_out;
        }
    }
}

/// Encoder output: features on the downsampled cell grid.
pub struct RefFeatures {
    /// [(h*w) x c] on the cell grid.
    pub features: DiffTensor,
    pub h: usize,
    pub w: usize,
    pub downsample: usize,
}

/// Run the reflectance encoder over a projected image. The input plane pairs
/// the standardized reflectance with the validity mask so "no return" is
/// distinguishable from "zero reflectance".
pub fn ref_encoder_forward(
    img: &RangeImage,
    binder: &Binder,
    cfg: &RefEncoderConfig,
    prefix: &str,
) -> Result<RefFeatures> {
    cfg.validate()?;
    let s = cfg.downsample();
    if img.h % s != 0 || img.w % s != 0 {
        return Err(Error::Config(format!(
            "range image {}x{} not divisible by encoder stride {s}",
            img.h, img.w
        )));
    }
    let tape = binder.tape().clone();
    let hw = img.h * img.w;
    let mut input = vec![0.0; hw * 2];
    for px in 0..hw {
        input[px * 2] = img.reflectance[px];
        input[px * 2 + 1] = if img.mask[px] { 1.0 } else { 0.0 };
    }
    let x0 = tape.leaf(input, &[hw, 2])?;

    let stem = pointwise(
        &x0,
        &binder.get(&format!("{prefix}.stem.w"))?,
        &binder.get(&format!("{prefix}.stem.b"))?,
    )?;
    let stem = instance_norm2d(
        &stem,
        &binder.get(&format!("{prefix}.stem.gamma"))?,
        &binder.get(&format!("{prefix}.stem.beta"))?,
        cfg.norm_eps,
    )?;
    let mut x = stem.clamp(0.0, 6.0);
    let (mut h, mut w) = (img.h, img.w);
    let mut c_in = cfg.stem_channels;
    for (i, b) in cfg.blocks.iter().enumerate() {
        let p = format!("{prefix}.block{i}");
        let params = IrbParams {
            expand_w: binder.get(&format!("{p}.expand_w"))?,
            expand_b: binder.get(&format!("{p}.expand_b"))?,
            dw_kernel: binder.get(&format!("{p}.dw_kernel"))?,
            norm1: Some((
                binder.get(&format!("{p}.norm1.gamma"))?,
                binder.get(&format!("{p}.norm1.beta"))?,
            )),
            proj_w: binder.get(&format!("{p}.proj_w"))?,
            proj_b: binder.get(&format!("{p}.proj_b"))?,
            norm2: Some((
                binder.get(&format!("{p}.norm2.gamma"))?,
                binder.get(&format!("{p}.norm2.beta"))?,
            )),
            stride: b.stride,
            skip: b.stride == 1 && c_in == b.c_out,
            eps: cfg.norm_eps,
        };
        let (nx, nh, nw) = inverted_residual_forward(&x, h, w, &params)?;
        x = nx;
        h = nh;
        w = nw;
        c_in = b.c_out;
    }
    Ok(RefFeatures {
        features: x,
        h,
        w,
        downsample: s,
    })
}
