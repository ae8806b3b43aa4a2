//! Multi-level feature fusion: confidence-weighted local mixing and two-stage
//! learnable-query cross-attention.
//!
//! Local fusion mixes branch means with a weight derived from channel-averaged
//! standard deviations. The weight is computed as a two-element softmax over
//! (1/sbar_geo, 1/sbar_ref) with max-subtraction, which is algebraically the
//! published form but immune to overflow when sbar sits near its floor.
//!
//! Global fusion funnels the reflectance cells through m learnable query
//! tokens, so no attention matrix ever has h*w x V extent: the cost is
//! O(h*w * m + V * m).

use crate::cic::FeatureDistribution;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::DiffTensor;

/// Mixing weight and fused features: alpha * mu_geo + (1 - alpha) * mu_ref,
/// rowwise. Returns (fused [P x c], alpha [P x 1]).
pub fn local_fuse_with_alpha(
    geo: &FeatureDistribution,
    ref_: &FeatureDistribution,
) -> Result<(DiffTensor, DiffTensor)> {
    if geo.mu.shape() != ref_.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "local_fuse",
            left: geo.mu.shape().to_vec(),
            right: ref_.mu.shape().to_vec(),
        });
    }
    let rank1 = geo.mu.shape().len() == 1;
    let c = geo.width();
    let as_rows = |d: &FeatureDistribution| -> Result<FeatureDistribution> {
        if rank1 {
            Ok(FeatureDistribution {
                mu: d.mu.reshape(&[1, c])?,
                sigma: d.sigma.reshape(&[1, c])?,
            })
        } else {
            Ok(d.clone())
        }
    };
    let g = as_rows(geo)?;
    let r = as_rows(ref_)?;
    let rows = g.rows();

    let inv_sbar = |d: &FeatureDistribution| -> Result<DiffTensor> {
        d.sigma.reduce_mean(1)?.recip()?.reshape(&[rows, 1])
    };
    let stacked = DiffTensor::concat_cols(&[&inv_sbar(&g)?, &inv_sbar(&r)?])?;
    let weights = stacked.softmax_lastaxis()?;
    let alpha = weights.slice_cols(0, 1)?;

    let ones = g.mu.tape().full(&[1, c], 1.0);
    let alpha_full = alpha.matmul(&ones)?;
    let fused = alpha_full
        .mul(&g.mu)?
        .add(&alpha_full.mul_const(-1.0).add_const(1.0).mul(&r.mu)?)?;
    let fused = if rank1 { fused.reshape(&[c])? } else { fused };
    Ok((fused, alpha))
}

/// Confidence-weighted convex combination of the branch means.
pub fn local_fuse(geo: &FeatureDistribution, ref_: &FeatureDistribution) -> Result<DiffTensor> {
    Ok(local_fuse_with_alpha(geo, ref_)?.0)
}

/// Projection weights for one cross-attention stage.
pub struct AttentionWeights {
    pub wq: DiffTensor,
    pub bq: DiffTensor,
    pub wk: DiffTensor,
    pub bk: DiffTensor,
    pub wv: DiffTensor,
    pub bv: DiffTensor,
    pub wo: DiffTensor,
    pub bo: DiffTensor,
    pub heads: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut SplitMix64) {
        let c = self.width;
        for name in ["wq", "wk", "wv", "wo"] {
            store.insert_uniform(&format!("{prefix}.{name}"), &[c, c], rng);
        }
        for name in ["bq", "bk", "bv", "bo"] {
            store.insert_zeros(&format!("{prefix}.{name}"), &[c], true);
        }
    }

    pub fn bind(&self, binder: &Binder, prefix: &str) -> Result<AttentionWeights> {
        self.validate()?;
        Ok(AttentionWeights {
            wq: binder.get(&format!("{prefix}.wq"))?,
            bq: binder.get(&format!("{prefix}.bq"))?,
            wk: binder.get(&format!("{prefix}.wk"))?,
            bk: binder.get(&format!("{prefix}.bk"))?,
            wv: binder.get(&format!("{prefix}.wv"))?,
            bv: binder.get(&format!("{prefix}.bv"))?,
            wo: binder.get(&format!("{prefix}.wo"))?,
            bo: binder.get(&format!("{prefix}.bo"))?,
            heads: self.heads,
        })
    }
}

/// Multi-head scaled dot-product cross-attention, returning the per-head
/// attention weight matrices alongside the output.
pub fn cross_attention_with_weights(
    queries: &DiffTensor,
    context: &DiffTensor,
    w: &AttentionWeights,
    mask: Option<&[bool]>,
) -> Result<(DiffTensor, Vec<DiffTensor>)> {
    let c = w.wq.shape()[0];
    if queries.shape().len() != 2 || queries.shape()[1] != c {
        return Err(Error::Dimension {
            op: "cross_attention",
            msg: format!("queries {:?} incompatible with width {c}", queries.shape()),
        });
    }
    if context.shape().len() != 2 || context.shape()[1] != c {
        return Err(Error::Dimension {
            op: "cross_attention",
            msg: format!("context {:?} incompatible with width {c}", context.shape()),
        });
    }
    let b = context.shape()[0];
    if let Some(m) = mask {
        if m.len() != b {
            return Err(Error::Dimension {
                op: "cross_attention",
                msg: format!("mask length {} for {b} context rows", m.len()),
            });
        }
        if m.iter().all(|&keep| !keep) {
            return Err(Error::DegenerateAttention);
        }
    }
    if c % w.heads != 0 {
        return Err(Error::Config(format!(
            "width {c} not divisible by {} heads",
            w.heads
        )));
    }
    let dh = c / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = queries.matmul(&w.wq)?.add(&w.bq)?;
    let kp = context.matmul(&w.wk)?.add(&w.bk)?;
    let vp = context.matmul(&w.wv)?.add(&w.bv)?;
    let mask_vec = mask.map(|m| queries.tape().attention_mask(m));

    let mut head_outputs = Vec::with_capacity(w.heads);
    let mut head_weights = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = qp.slice_cols(h * dh, dh)?;
        let kh = kp.slice_cols(h * dh, dh)?;
        let vh = vp.slice_cols(h * dh, dh)?;
        let mut scores = qh.matmul(&kh.transpose()?)?.mul_const(scale);
        if let Some(mv) = &mask_vec {
            scores = scores.add(mv)?;
        }
        let weights = scores.softmax_lastaxis()?;
        head_outputs.push(weights.matmul(&vh)?);
        head_weights.push(weights);
    }
    let refs: Vec<&DiffTensor> = head_outputs.iter().collect();
    let merged = DiffTensor::concat_cols(&refs)?;
    let out = merged.matmul(&w.wo)?.add(&w.bo)?;
    Ok((out, head_weights))
}

/// Multi-head scaled dot-product cross-attention over unmasked context rows.
pub fn cross_attention(
    queries: &DiffTensor,
    context: &DiffTensor,
    w: &AttentionWeights,
    mask: Option<&[bool]>,
) -> Result<DiffTensor> {
    Ok(cross_attention_with_weights(queries, context, w, mask)?.0)
}

/// Width-preserving learned projection plus ReLU, identity-initialized so it
/// starts as a pass-through on the nonnegative encoder outputs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub width: usize,
}

impl ProjectionConfig {
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str) {
        let c = self.width;
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        store.insert(&format!("{prefix}.w"), eye, &[c, c], true);
        store.insert_zeros(&format!("{prefix}.b"), &[c], true);
    }

    pub fn forward(&self, binder: &Binder, prefix: &str, x: &DiffTensor) -> Result<DiffTensor> {
        let w = binder.get(&format!("{prefix}.w"))?;
        let b = binder.get(&format!("{prefix}.b"))?;
        Ok(x.matmul(&w)?.add(&b)?.relu())
    }
}

/// Learnable global query bank plus the two attention stages.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GlobalFusionConfig {
    /// Query token count, m << h*w.
    pub tokens: usize,
    pub attention: AttentionConfig,
}

impl GlobalFusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 {
            return Err(Error::Config("query bank needs at least one token".into()));
        }
        self.attention.validate()
    }

    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut SplitMix64) {
        store.insert_uniform(
            &format!("{prefix}.query"),
            &[self.tokens, self.attention.width],
            rng,
        );
        self.attention.init_params(store, &format!("{prefix}.stage1"), rng);
        self.attention.init_params(store, &format!("{prefix}.stage2"), rng);
    }

    /// F_global = CA(M_geo, CA(Q, M_ref)): stage 1 compresses the masked
    /// reflectance cells into the query tokens, stage 2 distributes them to
    /// the voxels. Masked cells are excluded from stage-1 attention.
    pub fn forward(
        &self,
        binder: &Binder,
        prefix: &str,
        m_geo: &DiffTensor,
        m_ref: &DiffTensor,
        mask: &[bool],
    ) -> Result<DiffTensor> {
        self.validate()?;
        let valid = mask.iter().filter(|&&k| k).count();
        if valid == 0 {
            return Err(Error::DegenerateAttention);
        }
        if self.tokens > valid {
            return Err(Error::Config(format!(
                "{} query tokens exceed {valid} valid reflectance cells",
                self.tokens
            )));
        }
        let q = binder.get(&format!("{prefix}.query"))?;
        let s1 = self.attention.bind(binder, &format!("{prefix}.stage1"))?;
        let s2 = self.attention.bind(binder, &format!("{prefix}.stage2"))?;
        let g = cross_attention(&q, m_ref, &s1, Some(mask))?;
        cross_attention(m_geo, &g, &s2, None)
    }
}

/// Channelwise concatenation of the local and global feature maps.
pub fn concat_features(f_local: &DiffTensor, f_global: &DiffTensor) -> Result<DiffTensor> {
    if f_local.shape()[0] != f_global.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "concat_features",
            left: f_local.shape().to_vec(),
            right: f_global.shape().to_vec(),
        });
    }
    DiffTensor::concat_cols(&[f_local, f_global])
}
