//! Complementarity-aware information constraint.
//!
//! Each paired location gets a diagonal Gaussian over its feature vector via
//! small affine heads (sigma through softplus plus a floor). The objective
//! pushes both branch distributions toward the standard-normal prior while
//! pushing the two branches apart from each other; the two negative-signed
//! divergence terms are clamped at `tau` so the objective stays bounded.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::range::RangeImage;
use crate::rng::SplitMix64;
use crate::tensor::DiffTensor;
use crate::voxel::SparseVoxelGrid;

/// Additive floor applied after softplus so sigma stays away from zero.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Diagonal Gaussian over feature vectors. `mu` and `sigma` share a shape;
/// rows are sites when rank 2. `sigma` is elementwise positive by
/// construction (softplus head plus floor).
#[derive(Clone)]
pub struct FeatureDistribution {
    pub mu: DiffTensor,
    pub sigma: DiffTensor,
}

impl FeatureDistribution {
    pub fn width(&self) -> usize {
        *self.mu.shape().last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        if self.mu.shape().len() == 2 {
            self.mu.shape()[0]
        } else {
            1
        }
    }

    fn check_same(&self, other: &FeatureDistribution, op: &'static str) -> Result<()> {
        if self.mu.shape() != other.mu.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.mu.shape().to_vec(),
                right: other.mu.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Single affine pair of heads: mu = f W_mu + b_mu, sigma =
/// softplus(f W_sigma + b_sigma) + floor. `f` is [rows x c_in].
pub fn distribution_head(
    f: &DiffTensor,
    w_mu: &DiffTensor,
    b_mu: &DiffTensor,
    w_sigma: &DiffTensor,
    b_sigma: &DiffTensor,
    sigma_floor: f64,
) -> Result<FeatureDistribution> {
    let mu = f.matmul(w_mu)?.add(b_mu)?;
    let sigma = f
        .matmul(w_sigma)?
        .add(b_sigma)?
        .softplus()
        .add_const(sigma_floor);
    Ok(FeatureDistribution { mu, sigma })
}

/// Head stack configuration. Depth 1 is a single affine layer per head;
/// deeper stacks insert width-preserving affine+ReLU layers.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub depth: usize,
}

impl HeadConfig {
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut SplitMix64) {
        for branch in ["mu", "sigma"] {
            let mut cin = self.c_in;
            for d in 0..self.depth {
                let cout = if d + 1 == self.depth { self.c_out } else { self.c_in };
                store.insert_uniform(&format!("{prefix}.{branch}.w{d}"), &[cin, cout], rng);
                store.insert_zeros(&format!("{prefix}.{branch}.b{d}"), &[cout], true);
                cin = cout;
            }
        }
    }

    pub fn forward(&self, binder: &Binder, prefix: &str, f: &DiffTensor) -> Result<FeatureDistribution> {
        let run = |branch: &str| -> Result<DiffTensor> {
            let mut x = f.clone();
            for d in 0..self.depth {
                let w = binder.get(&format!("{prefix}.{branch}.w{d}"))?;
                let b = binder.get(&format!("{prefix}.{branch}.b{d}"))?;
                x = x.matmul(&w)?.add(&b)?;
                if d + 1 < self.depth {
                    x = x.relu();
                }
            }
            Ok(x)
        };
        let mu = run("mu")?;
        let sigma = run("sigma")?.softplus().add_const(SIGMA_FLOOR);
        Ok(FeatureDistribution { mu, sigma })
    }
}

/// m = mu + eps * sigma. Gradients flow to mu directly and to sigma scaled by
/// eps; eps itself is a constant.
pub fn reparameterize(d: &FeatureDistribution, eps: &[f64]) -> Result<DiffTensor> {
    if eps.len() != d.mu.numel() {
        return Err(Error::Dimension {
            op: "reparameterize",
            msg: format!("{} noise values for {} elements", eps.len(), d.mu.numel()),
        });
    }
    let eps_t = d.mu.tape().leaf(eps.to_vec(), d.mu.shape())?;
    d.mu.add(&eps_t.mul(&d.sigma)?)
}

/// Row-wise KL divergence between diagonal Gaussians:
/// KL = sum_i [ ln(sq_i/sp_i) + (sp_i^2 + (mp_i - mq_i)^2) / (2 sq_i^2) - 1/2 ].
/// Returns one value per row.
pub fn kl_rows(p: &FeatureDistribution, q: &FeatureDistribution) -> Result<DiffTensor> {
    p.check_same(q, "kl_rows")?;
    let ln_ratio = q.sigma.div(&p.sigma)?.log()?;
    let dmu = p.mu.sub(&q.mu)?;
    let num = p.sigma.mul(&p.sigma)?.add(&dmu.mul(&dmu)?)?;
    let denom = q.sigma.mul(&q.sigma)?.mul_const(2.0);
    let terms = ln_ratio.add(&num.div(&denom)?)?.add_const(-0.5);
    let rank = terms.shape().len();
    terms.reduce_sum(rank - 1)
}

/// KL divergence between two single-site diagonal Gaussians, as a scalar.
/// Nonnegative; zero exactly when p = q elementwise.
pub fn kl_diag_gaussian(p: &FeatureDistribution, q: &FeatureDistribution) -> Result<DiffTensor> {
    Ok(kl_rows(p, q)?.sum_all())
}

/// Standard-normal distribution matching `like`'s shape, on the same tape.
pub fn standard_prior(like: &FeatureDistribution) -> FeatureDistribution {
    let tape = like.mu.tape();
    FeatureDistribution {
        mu: tape.zeros(like.mu.shape()),
        sigma: tape.full(like.sigma.shape(), 1.0),
    }
}

/// Voxel-row to reflectance-cell correspondences. Voxels whose representative
/// point leaves the FOV or lands on a fully masked cell stay unpaired and
/// carry geometric features only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairedSites {
    /// (voxel row, cell row) pairs; each voxel row appears at most once.
    pub pairs: Vec<(usize, usize)>,
    /// Voxel rows without a reflectance correspondence.
    pub unpaired: Vec<usize>,
}

impl PairedSites {
    pub fn voxel_rows(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(v, _)| v).collect()
    }

    pub fn cell_rows(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, c)| c).collect()
    }
}

/// Project each voxel's representative point onto the reflectance feature
/// grid: image pixel divided by the encoder downsample factor, floored.
pub fn pair_sites(grid: &SparseVoxelGrid, img: &RangeImage, downsample: usize) -> PairedSites {
    let (hc, wc) = (img.h / downsample, img.w / downsample);
    let cell_mask = img.cell_mask(downsample);
    let mut out = PairedSites::default();
    for (v, rep) in grid.rep_points.iter().enumerate() {
        let pixel = crate::range::project_pixel(
            rep[0],
            rep[1],
            rep[2],
            img.h,
            img.w,
            img.fov_up_deg,
            img.fov_down_deg,
        );
        match pixel {
            Some((pu, pv)) => {
                let (cu, cv) = (pu / downsample, pv / downsample);
                if cu < wc && cv < hc && cell_mask[cv * wc + cu] {
                    out.pairs.push((v, cv * wc + cu));
                } else {
                    out.unpaired.push(v);
                }
            }
            None => out.unpaired.push(v),
        }
    }
    out
}

/// Four-term objective over paired distributions (rows = pairs):
/// mean over pairs of
///   KL(p_geo || prior) + KL(p_ref || prior)
///   - clip(KL(p_geo || p_ref)) - clip(KL(p_ref || p_geo))
/// where the prior is the standard Gaussian and clip caps each negative-signed
/// term at `tau` (`tau = f64::INFINITY` reproduces the raw objective).
pub fn cic_loss(
    geo: &FeatureDistribution,
    ref_: &FeatureDistribution,
    tau: f64,
) -> Result<DiffTensor> {
    geo.check_same(ref_, "cic_loss")?;
    let prior = standard_prior(geo);
    let to_prior_geo = kl_rows(geo, &prior)?;
    let to_prior_ref = kl_rows(ref_, &prior)?;
    let apart_gr = kl_rows(geo, ref_)?.clamp(f64::NEG_INFINITY, tau);
    let apart_rg = kl_rows(ref_, geo)?.clamp(f64::NEG_INFINITY, tau);
    let per_pair = to_prior_geo
        .add(&to_prior_ref)?
        .sub(&apart_gr)?
        .sub(&apart_rg)?;
    Ok(per_pair.mean_all())
}
