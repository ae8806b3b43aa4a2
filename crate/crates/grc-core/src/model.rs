//! Full dual-branch model: geometry and reflectance encoders, the
//! complementarity constraint, local and global fusion, and a pointwise
//! decoder producing per-point logits.

use crate::cic::{cic_loss, pair_sites, reparameterize, FeatureDistribution, HeadConfig};
use crate::error::{Error, Result};
use crate::fusion::{concat_features, AttentionConfig, GlobalFusionConfig, ProjectionConfig};
use crate::lidar::PointCloud;
use crate::params::{Binder, ParamStore};
use crate::range::conv2d::{ref_encoder_forward, RefEncoderConfig};
use crate::range::spherical_project;
use crate::rng::SplitMix64;
use crate::tensor::{DiffTensor, Tape, GATHER_PAD};
use crate::voxel::{devoxelize, geo_encoder_forward, voxelize, BatchStats, GeoEncoderConfig};
use serde::{Deserialize, Serialize};

/// Ablation switches. Valid combinations form a chain: the unified baseline
/// and geometry-only configurations exclude everything else; local fusion
/// requires the constraint heads; global fusion requires local fusion.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Coordinates and reflectance concatenated into one voxel branch.
    pub unified_input: bool,
    /// Voxel branch over coordinates only.
    pub geometry_only: bool,
    /// Both branches, fused by addition at paired sites.
    pub reflectance_add_only: bool,
    pub use_cic: bool,
    pub use_local_fusion: bool,
    pub use_global_fusion: bool,
}

impl AblationFlags {
    pub fn full() -> Self {
        AblationFlags {
            use_cic: true,
            use_local_fusion: true,
            use_global_fusion: true,
            ..Default::default()
        }
    }

    /// Parse a named ablation row: unified | gb | gb+rb | +cic | +lf | +gf | full.
    pub fn from_name(name: &str) -> Result<Self> {
        let mut f = AblationFlags::default();
        match name {
            "unified" => f.unified_input = true,
            "gb" => f.geometry_only = true,
            "gb+rb" => f.reflectance_add_only = true,
            "+cic" => {
                f.reflectance_add_only = true;
                f.use_cic = true;
            }
            "+lf" => {
                f.use_cic = true;
                f.use_local_fusion = true;
            }
            "+gf" | "full" => {
                f.use_cic = true;
                f.use_local_fusion = true;
                f.use_global_fusion = true;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}' (unified|gb|gb+rb|+cic|+lf|+gf|full)"
                )))
            }
        }
        Ok(f)
    }

    pub fn has_reflectance_branch(&self) -> bool {
        !self.geometry_only && !self.unified_input
    }

    pub fn validate(&self) -> Result<()> {
        let single_branch = self.geometry_only || self.unified_input;
        if self.geometry_only && self.unified_input {
            return Err(Error::Config(
                "geometry_only and unified_input are mutually exclusive".into(),
            ));
        }
        if single_branch
            && (self.reflectance_add_only
                || self.use_cic
                || self.use_local_fusion
                || self.use_global_fusion)
        {
            return Err(Error::Config(
                "single-branch configurations cannot enable fusion or the information constraint"
                    .into(),
            ));
        }
        if self.use_global_fusion && !self.use_local_fusion {
            return Err(Error::Config("global fusion requires local fusion".into()));
        }
        if self.use_local_fusion && !self.use_cic {
            return Err(Error::Config(
                "local fusion weights come from the constraint heads; enable use_cic".into(),
            ));
        }
        if self.use_local_fusion && self.reflectance_add_only {
            return Err(Error::Config(
                "reflectance_add_only and use_local_fusion are alternative fusion modes".into(),
            ));
        }
        if !single_branch && !self.reflectance_add_only && !self.use_local_fusion {
            return Err(Error::Config(
                "dual-branch configurations need a fusion mode (addition or local fusion)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub class_count: u32,
    pub voxel_size: f64,
    pub range_h: usize,
    pub range_w: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub geo: GeoEncoderConfig,
    pub ref_enc: RefEncoderConfig,
    pub head_depth: usize,
    /// Global query token count m, m << h*w.
    pub fusion_tokens: usize,
    pub fusion_heads: usize,
    pub decoder_hidden: usize,
    /// Weight of the information-constraint term in the total loss.
    pub beta: f64,
    /// Clamp on each negative-signed divergence term.
    pub tau: f64,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            class_count: 5,
            voxel_size: 0.05,
            range_h: 64,
            range_w: 512,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
            geo: GeoEncoderConfig::desk_default(),
            ref_enc: RefEncoderConfig::desk_default(),
            head_depth: 1,
            fusion_tokens: 8,
            fusion_heads: 4,
            decoder_hidden: 32,
            beta: 0.01,
            tau: 10.0,
            ablation: AblationFlags::full(),
        }
    }
}

impl ModelConfig {
    /// Label id used for injected clutter and other ignored points: one past
    /// the last class.
    pub fn ignore_label(&self) -> u32 {
        self.class_count
    }

    pub fn feature_width(&self) -> usize {
        *self.geo.channels.last().expect("non-empty channel chain")
    }

    fn geo_input_width(&self) -> usize {
        if self.ablation.unified_input {
            4
        } else {
            3
        }
    }

    /// Geometry encoder configuration with the input width implied by the
    /// ablation flags.
    pub fn geo_config(&self) -> GeoEncoderConfig {
        let mut cfg = self.geo.clone();
        cfg.channels[0] = self.geo_input_width();
        cfg
    }

    pub fn decoder_input_width(&self) -> usize {
        if self.ablation.use_global_fusion {
            2 * self.feature_width()
        } else {
            self.feature_width()
        }
    }

    fn head_config(&self) -> HeadConfig {
        HeadConfig {
            c_in: self.feature_width(),
            c_out: self.feature_width(),
            depth: self.head_depth,
        }
    }

    fn global_fusion_config(&self) -> GlobalFusionConfig {
        GlobalFusionConfig {
            tokens: self.fusion_tokens,
            attention: AttentionConfig {
                width: self.feature_width(),
                heads: self.fusion_heads,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.voxel_size <= 0.0 {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if self.head_depth == 0 {
            return Err(Error::Config("head_depth must be >= 1".into()));
        }
        self.geo_config().validate(self.geo_input_width())?;
        if self.ablation.has_reflectance_branch() {
            self.ref_enc.validate()?;
            let s = self.ref_enc.downsample();
            if self.range_h % s != 0 || self.range_w % s != 0 {
                return Err(Error::Config(format!(
                    "range image {}x{} not divisible by encoder stride {s}",
                    self.range_h, self.range_w
                )));
            }
            if self.ref_enc.out_channels() != self.feature_width() {
                return Err(Error::Config(format!(
                    "branch widths differ: geometry {} vs reflectance {}; local fusion mixes them one-to-one",
                    self.feature_width(),
                    self.ref_enc.out_channels()
                )));
            }
            if self.ablation.use_global_fusion {
                self.global_fusion_config().validate()?;
                let cells = (self.range_h / s) * (self.range_w / s);
                if self.fusion_tokens >= cells {
                    return Err(Error::Config(format!(
                        "{} query tokens must stay well below {cells} reflectance cells",
                        self.fusion_tokens
                    )));
                }
            }
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }

    /// Register every parameter this configuration trains.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        self.geo_config().init_params(store, "geo", &mut rng);
        if self.ablation.has_reflectance_branch() {
            self.ref_enc.init_params(store, "ref", &mut rng);
            if self.ablation.use_cic {
                self.head_config().init_params(store, "cic.geo", &mut rng);
                self.head_config().init_params(store, "cic.ref", &mut rng);
            }
            if self.ablation.use_global_fusion {
                let c = self.feature_width();
                ProjectionConfig { width: c }.init_params(store, "mproj.geo");
                ProjectionConfig { width: c }.init_params(store, "mproj.ref");
                self.global_fusion_config()
                    .init_params(store, "gfuse", &mut rng);
            }
        }
        let mut dec_rng = SplitMix64::new(seed ^ 0x5EC0_DE00);
        let d_in = self.decoder_input_width();
        store.insert_uniform("dec.w1", &[d_in, self.decoder_hidden], &mut dec_rng);
        store.insert_zeros("dec.b1", &[self.decoder_hidden], true);
        store.insert_uniform(
            "dec.w2",
            &[self.decoder_hidden, self.class_count as usize],
            &mut dec_rng,
        );
        store.insert_zeros("dec.b2", &[self.class_count as usize], true);
    }
}

/// Forward mode: training samples reparameterization noise from the given
/// stream; evaluation fixes it to zero, making the pass a pure function of
/// (weights, input).
pub enum Mode<'r> {
    Train { rng: &'r mut SplitMix64 },
    Eval,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardDiag {
    pub voxels_in: usize,
    pub voxels_out: usize,
    pub pair_count: usize,
    pub unpaired_count: usize,
    pub valid_cells: usize,
    /// The reflectance path was unusable and the pass fell back to
    /// geometry-only features.
    pub degraded: bool,
    /// The constraint was configured but had no pairs to act on.
    pub cic_empty: bool,
    pub tape_cost: u64,
}

pub struct ForwardOutput<'s> {
    pub logits: DiffTensor,
    /// Information-constraint term, present when the config enables it.
    pub cic: Option<DiffTensor>,
    /// Pre-normalization batch moments for running-stat updates.
    pub stats: Vec<BatchStats>,
    pub diag: ForwardDiag,
    pub tape: Tape,
    pub binder: Binder<'s>,
}

fn decoder(binder: &Binder, x: &DiffTensor) -> Result<DiffTensor> {
    let h = x
        .matmul(&binder.get("dec.w1")?)?
        .add(&binder.get("dec.b1")?)?
        .relu();
    h.matmul(&binder.get("dec.w2")?)?.add(&binder.get("dec.b2")?)
}

/// Run the configured model over one scan.
pub fn forward<'s>(
    cloud: &PointCloud,
    store: &'s ParamStore,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ForwardOutput<'s>> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyInput("forward on an empty cloud".into()));
    }
    let mut mode = mode;
    let n = cloud.len();
    let tape = Tape::new();
    let binder = Binder::new(&tape, store);
    let mut diag = ForwardDiag::default();

    let grid0 = voxelize(&tape, cloud, cfg.voxel_size, cfg.ablation.unified_input)?;
    diag.voxels_in = grid0.num_voxels();
    let (geo_grid, stats) = geo_encoder_forward(&grid0, &binder, &cfg.geo_config(), "geo")?;
    diag.voxels_out = geo_grid.num_voxels();

    // Single-branch paths never touch the reflectance plane.
    if !cfg.ablation.has_reflectance_branch() {
        let per_point = devoxelize(&geo_grid, n)?;
        let logits = decoder(&binder, &per_point)?;
        diag.tape_cost = tape.cost();
        return Ok(ForwardOutput {
            logits,
            cic: None,
            stats,
            diag,
            tape,
            binder,
        });
    }

    let img = spherical_project(cloud, cfg.range_h, cfg.range_w, cfg.fov_up_deg, cfg.fov_down_deg)?;
    let ref_out = ref_encoder_forward(&img, &binder, &cfg.ref_enc, "ref")?;
    let pairs = pair_sites(&geo_grid, &img, ref_out.downsample);
    let cell_mask = img.cell_mask(ref_out.downsample);
    diag.pair_count = pairs.pairs.len();
    diag.unpaired_count = pairs.unpaired.len();
    diag.valid_cells = cell_mask.iter().filter(|&&m| m).count();

    let v = geo_grid.num_voxels();
    let c = cfg.feature_width();
    let need_cells = if cfg.ablation.use_global_fusion {
        cfg.fusion_tokens.max(1)
    } else {
        1
    };
    let degraded = pairs.pairs.is_empty() || diag.valid_cells < need_cells;
    diag.degraded = degraded;

    // Noise for the reparameterized features: one draw per voxel row and one
    // per paired cell, fixed to zero in eval mode.
    let mut draw = |len: usize| -> Vec<f64> {
        match &mut mode {
            Mode::Train { rng } => (0..len).map(|_| rng.normal()).collect(),
            Mode::Eval => vec![0.0; len],
        }
    };

    let mut cic_term = None;
    let fused: DiffTensor = if degraded {
        // Reflectance path unusable: geometric features stand alone, the
        // constraint reports an empty-pair zero loss.
        if cfg.ablation.use_cic {
            diag.cic_empty = true;
            cic_term = Some(tape.scalar(0.0));
        }
        let f_local = if cfg.ablation.use_cic {
            let geo_all = cfg
                .head_config()
                .forward(&binder, "cic.geo", &geo_grid.features)?;
            geo_all.mu
        } else {
            geo_grid.features.clone()
        };
        if cfg.ablation.use_global_fusion {
            concat_features(&f_local, &tape.zeros(&[v, c]))?
        } else {
            f_local
        }
    } else if cfg.ablation.use_cic {
        let geo_all = cfg
            .head_config()
            .forward(&binder, "cic.geo", &geo_grid.features)?;
        let paired_vox = pairs.voxel_rows();
        let geo_paired = FeatureDistribution {
            mu: geo_all.mu.gather_rows(&paired_vox)?,
            sigma: geo_all.sigma.gather_rows(&paired_vox)?,
        };
        let ref_cells = ref_out.features.gather_rows(&pairs.cell_rows())?;
        let ref_paired = cfg.head_config().forward(&binder, "cic.ref", &ref_cells)?;
        cic_term = Some(cic_loss(&geo_paired, &ref_paired, cfg.tau)?);

        let f_local = if cfg.ablation.use_local_fusion {
            // Eq.-style sigma-weighted mixing of the branch means at paired
            // sites; unpaired voxels pass through with mu_geo.
            let fused_paired = crate::fusion::local_fuse(&geo_paired, &ref_paired)?;
            merge_rows(&fused_paired, &geo_all.mu, &pairs.pairs, &pairs.unpaired, v)?
        } else {
            // Addition of the reparameterized features at paired sites.
            let eps_geo = draw(geo_all.mu.numel());
            let m_geo_all = reparameterize(&geo_all, &eps_geo)?;
            let eps_ref = draw(ref_paired.mu.numel());
            let m_ref_paired = reparameterize(&ref_paired, &eps_ref)?;
            let m_geo_paired = m_geo_all.gather_rows(&paired_vox)?;
            let added = m_geo_paired.add(&m_ref_paired)?;
            merge_rows(&added, &m_geo_all, &pairs.pairs, &pairs.unpaired, v)?
        };

        if cfg.ablation.use_global_fusion {
            let c_width = cfg.feature_width();
            let m_geo = ProjectionConfig { width: c_width }.forward(
                &binder,
                "mproj.geo",
                &geo_grid.features,
            )?;
            let m_ref = ProjectionConfig { width: c_width }.forward(
                &binder,
                "mproj.ref",
                &ref_out.features,
            )?;
            let f_global = cfg.global_fusion_config().forward(
                &binder,
                "gfuse",
                &m_geo,
                &m_ref,
                &cell_mask,
            )?;
            concat_features(&f_local, &f_global)?
        } else {
            f_local
        }
    } else {
        // Plain addition of raw branch features at paired sites.
        let mut cell_of_voxel = vec![GATHER_PAD; v];
        for &(vox, cell) in &pairs.pairs {
            cell_of_voxel[vox] = cell;
        }
        let ref_rows = ref_out.features.gather_rows(&cell_of_voxel)?;
        geo_grid.features.add(&ref_rows)?
    };

    let per_point = fused.gather_rows(&geo_grid.point_to_voxel)?;
    let logits = decoder(&binder, &per_point)?;
    diag.tape_cost = tape.cost();
    Ok(ForwardOutput {
        logits,
        cic: cic_term,
        stats,
        diag,
        tape,
        binder,
    })
}

/// Scatter `paired` rows and the unpaired rows of `fallback` into voxel order:
/// row v comes from `paired` when v is paired, otherwise from `fallback[v]`.
fn merge_rows(
    paired: &DiffTensor,
    fallback: &DiffTensor,
    pairs: &[(usize, usize)],
    unpaired: &[usize],
    v: usize,
) -> Result<DiffTensor> {
    let p = pairs.len();
    let fallback_rows = fallback.gather_rows(unpaired)?;
    let stacked = paired.concat_rows(&fallback_rows)?;
    let mut perm = vec![GATHER_PAD; v];
    for (i, &(vox, _)) in pairs.iter().enumerate() {
        perm[vox] = i;
    }
    for (j, &vox) in unpaired.iter().enumerate() {
        perm[vox] = p + j;
    }
    debug_assert!(perm.iter().all(|&x| x != GATHER_PAD));
    stacked.gather_rows(&perm)
}

/// Total loss: mean cross-entropy over non-ignored points plus beta times the
/// information-constraint term. Returns the components as plain values for
/// logging.
pub fn total_loss(
    logits: &DiffTensor,
    labels: &[u32],
    ignore: u32,
    cic: Option<&DiffTensor>,
    beta: f64,
) -> Result<(DiffTensor, f64, f64)> {
    let as_i64: Vec<i64> = labels
        .iter()
        .map(|&l| if l == ignore { -1 } else { l as i64 })
        .collect();
    let ce = logits.cross_entropy(&as_i64, -1)?;
    let ce_value = ce.item();
    match cic {
        Some(term) => {
            let cic_value = term.item();
            Ok((ce.add(&term.mul_const(beta))?, ce_value, cic_value))
        }
        None => Ok((ce, ce_value, 0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{tiny_model_config, tiny_scene};

    #[test]
    fn flag_chains_validate() {
        for name in ["unified", "gb", "gb+rb", "+cic", "+lf", "+gf", "full"] {
            let flags = AblationFlags::from_name(name).unwrap();
            flags.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(AblationFlags::from_name("bogus").is_err());
        // broken chains are rejected
        let bad = AblationFlags {
            use_global_fusion: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AblationFlags {
            use_local_fusion: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AblationFlags {
            geometry_only: true,
            use_cic: true,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shapes_for_every_ablation() {
        let cloud = tiny_scene(3);
        let n = cloud.len();
        for name in ["unified", "gb", "gb+rb", "+cic", "+lf", "full"] {
            let cfg = tiny_model_config(AblationFlags::from_name(name).unwrap());
            let mut store = ParamStore::new();
            cfg.init_params(&mut store, 7);
            let out = forward(&cloud, &store, &cfg, Mode::Eval)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(out.logits.shape(), &[n, 4], "{name}");
            assert_eq!(out.cic.is_some(), cfg.ablation.use_cic, "{name}");
            assert!(!out.diag.degraded, "{name} unexpectedly degraded");
        }
    }

    #[test]
    fn geometry_only_ignores_reflectance_exactly() {
        let cloud = tiny_scene(4);
        let cfg = tiny_model_config(AblationFlags::from_name("gb").unwrap());
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, 11);
        let base = forward(&cloud, &store, &cfg, Mode::Eval).unwrap().logits.value();
        let mut perturbed = cloud.clone();
        for p in perturbed.points.iter_mut() {
            p.r = p.r * 3.0 + 0.5;
        }
        let out = forward(&perturbed, &store, &cfg, Mode::Eval).unwrap().logits.value();
        assert_eq!(base, out);
    }

    #[test]
    fn unified_input_sees_reflectance() {
        let cloud = tiny_scene(5);
        let cfg = tiny_model_config(AblationFlags::from_name("unified").unwrap());
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, 13);
        let base = forward(&cloud, &store, &cfg, Mode::Eval).unwrap().logits.value();
        let mut perturbed = cloud.clone();
        for p in perturbed.points.iter_mut() {
            p.r += 0.5;
        }
        let out = forward(&perturbed, &store, &cfg, Mode::Eval).unwrap().logits.value();
        assert_ne!(base, out);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cloud = tiny_scene(6);
        let cfg = tiny_model_config(AblationFlags::full());
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, 17);
        let a = forward(&cloud, &store, &cfg, Mode::Eval).unwrap().logits.value();
        let b = forward(&cloud, &store, &cfg, Mode::Eval).unwrap().logits.value();
        assert_eq!(a, b);
    }

    #[test]
    fn train_mode_noise_changes_add_fusion_only() {
        let cloud = tiny_scene(7);
        // +cic (addition of reparameterized features) consumes noise
        let cfg = tiny_model_config(AblationFlags::from_name("+cic").unwrap());
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, 19);
        let mut rng1 = SplitMix64::new(100);
        let mut rng2 = SplitMix64::new(200);
        let a = forward(&cloud, &store, &cfg, Mode::Train { rng: &mut rng1 })
            .unwrap()
            .logits
            .value();
        let b = forward(&cloud, &store, &cfg, Mode::Train { rng: &mut rng2 })
            .unwrap()
            .logits
            .value();
        assert_ne!(a, b);
        // full config mixes means, so eval equals train-with-any-noise
        let cfg = tiny_model_config(AblationFlags::full());
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, 23);
        let mut rng3 = SplitMix64::new(300);
        let a = forward(&cloud, &store, &cfg, Mode::Train { rng: &mut rng3 })
            .unwrap()
            .logits
            .value();
        let b = forward(&cloud, &store, &cfg, Mode::Eval).unwrap().logits.value();
        assert_eq!(a, b);
    }

    #[test]
    fn all_out_of_fov_degrades_with_warning() {
        // every point far above the FOV: projection drops all of them
        let cloud = PointCloud {
            points: (0..50)
                .map(|i| crate::lidar::Point {
                    x: 1.0 + i as f64 * 0.1,
                    y: 0.0,
                    z: 10.0,
                    r: 0.5,
                })
                .collect(),
            labels: None,
        };
        let cfg = tiny_model_config(AblationFlags::full());
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, 29);
        let out = forward(&cloud, &store, &cfg, Mode::Eval).unwrap();
        assert!(out.diag.degraded);
        assert!(out.diag.cic_empty);
        assert_eq!(out.logits.shape(), &[50, 4]);
        assert_eq!(out.cic.unwrap().item(), 0.0);
    }

    #[test]
    fn total_loss_composition() {
        let t = Tape::new();
        let logits = t.matrix(4, 4, vec![0.0; 16]).unwrap();
        // beta = 0 reduces to cross-entropy
        let (l, ce, cic) = total_loss(&logits, &[0, 1, 2, 3], 4, None, 0.0).unwrap();
        assert!((l.item() - (4.0f64).ln()).abs() < 1e-12);
        assert_eq!(ce, l.item());
        assert_eq!(cic, 0.0);
        // linear combination with a hand-made cic term
        let term = t.scalar(2.0);
        let (l, ce, cic) = total_loss(&logits, &[0, 1, 2, 3], 4, Some(&term), 0.01).unwrap();
        assert!((ce - (4.0f64).ln()).abs() < 1e-12);
        assert_eq!(cic, 2.0);
        assert!((l.item() - (ce + 0.02)).abs() < 1e-12);
        // ignored labels drop out; all-ignored errors
        assert!(total_loss(&logits, &[4, 4, 4, 4], 4, None, 0.0).is_err());
    }

    #[test]
    fn gradients_reach_every_trainable_parameter() {
        let cloud = tiny_scene(8);
        let labels = cloud.labels.clone().unwrap();
        let cfg = tiny_model_config(AblationFlags::full());
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, 31);
        let out = forward(&cloud, &store, &cfg, Mode::Eval).unwrap();
        let (loss, _, _) = total_loss(
            &out.logits,
            &labels,
            cfg.ignore_label(),
            out.cic.as_ref(),
            cfg.beta,
        )
        .unwrap();
        loss.backward().unwrap();
        let grads = out.binder.grads();
        let mut missing = Vec::new();
        for (name, p) in store.iter() {
            if !p.trainable || name.contains("running_") {
                continue;
            }
            let nonzero = grads
                .get(name)
                .map(|g| g.iter().any(|&v| v != 0.0))
                .unwrap_or(false);
            if !nonzero {
                missing.push(name.clone());
            }
        }
        assert!(
            missing.is_empty(),
            "parameters with no gradient: {missing:?}"
        );
    }
}
