//! Momentum-SGD training with a one-cycle schedule, source-domain
//! augmentation, metrics logging, and checkpointing.

use crate::error::{Error, Result};
use crate::lidar::{Point, PointCloud};
use crate::metrics::{argmax_rows, ConfusionMatrix};
use crate::model::{forward, total_loss, Mode, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{derive_seed, SplitMix64};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Seed-derivation stream tags (see [`crate::rng::derive_seed`]).
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SCENE: u64 = 3;
    pub const CORRUPT: u64 = 4;
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Checkpoint cadence; also the unit for epoch numbering in filenames.
    pub steps_per_epoch: usize,
    pub max_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pct_up: f64,
    pub div: f64,
    pub final_div: f64,
    /// Scenes whose gradients are averaged per optimizer step.
    pub grad_accum: usize,
    /// EMA factor for the batch-free normalization statistics.
    pub norm_ema: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            steps_per_epoch: 100,
            max_lr: 0.24,
            momentum: 0.9,
            weight_decay: 1e-4,
            pct_up: 0.3,
            div: 25.0,
            final_div: 1e4,
            grad_accum: 1,
            norm_ema: 0.1,
            seed: 0,
        }
    }
}

/// One-cycle learning rate: cosine ramp from max_lr/div up to max_lr over the
/// first `pct_up` fraction of steps, cosine anneal down to max_lr/final_div
/// over the remainder.
pub fn onecycle_lr(
    step: usize,
    total_steps: usize,
    max_lr: f64,
    pct_up: f64,
    div: f64,
    final_div: f64,
) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    let up = ((pct_up * total_steps as f64).round() as usize).max(1);
    let start = max_lr / div;
    let floor = max_lr / final_div;
    if step <= up {
        let t = step as f64 / up as f64;
        Ok(start + (max_lr - start) * (1.0 - (std::f64::consts::PI * t).cos()) / 2.0)
    } else {
        let span = (total_steps - 1 - up).max(1);
        let t = (step - up) as f64 / span as f64;
        Ok(floor + (max_lr - floor) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
    }
}

/// Full optimizer/trainer state; serializable for exact resume.
pub struct TrainState {
    pub store: ParamStore,
    pub momentum: BTreeMap<String, Vec<f64>>,
    pub step: usize,
    pub rng: SplitMix64,
}

impl TrainState {
    pub fn new(store: ParamStore, seed: u64) -> Self {
        TrainState {
            store,
            momentum: BTreeMap::new(),
            step: 0,
            rng: SplitMix64::new(seed),
        }
    }
}

/// v <- momentum * v + (grad + wd * param); param <- param - lr * v.
/// Parameters absent from `grads` are treated as zero-gradient (weight decay
/// and momentum still apply). Non-finite gradients abort with the offending
/// parameter's name.
pub fn sgd_momentum_step(
    state: &mut TrainState,
    grads: &BTreeMap<String, Vec<f64>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let names: Vec<String> = state
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let param = state.store.get_mut(&name).expect("name from iteration");
        let zero;
        let g = match grads.get(&name) {
            Some(g) => g.as_slice(),
            None => {
                zero = vec![0.0; param.data.len()];
                &zero
            }
        };
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                name: format!("{name} (gradient {bad})"),
                stage: "sgd_momentum_step",
            });
        }
        let v = state
            .momentum
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; param.data.len()]);
        for i in 0..param.data.len() {
            v[i] = momentum * v[i] + (g[i] + weight_decay * param.data[i]);
            param.data[i] -= lr * v[i];
        }
    }
    Ok(())
}

/// Source-domain augmentation: random point drop (<= 10%), z-rotation,
/// axis flips, and uniform scaling in [0.95, 1.05].
pub fn augment(cloud: &PointCloud, rng: &mut SplitMix64) -> PointCloud {
    let drop_frac = rng.uniform(0.0, 0.10);
    let theta = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let flip_x = rng.bernoulli(0.5);
    let flip_y = rng.bernoulli(0.5);
    let scale = rng.uniform(0.95, 1.05);
    let (s, c) = (theta.sin(), theta.cos());

    let mut points = Vec::with_capacity(cloud.len());
    let mut labels = cloud.labels.as_ref().map(|_| Vec::with_capacity(cloud.len()));
    for (i, p) in cloud.points.iter().enumerate() {
        if rng.bernoulli(drop_frac) {
            continue;
        }
        let (mut x, mut y) = (p.x * c - p.y * s, p.x * s + p.y * c);
        if flip_x {
            x = -x;
        }
        if flip_y {
            y = -y;
        }
        points.push(Point {
            x: x * scale,
            y: y * scale,
            z: p.z * scale,
            r: p.r,
        });
        if let (Some(ls), Some(src)) = (labels.as_mut(), cloud.labels.as_ref()) {
            ls.push(src[i]);
        }
    }
    // never hand an empty cloud to the model
    if points.is_empty() {
        return cloud.clone();
    }
    PointCloud { points, labels }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub cic: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn metrics_to_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::from("step,loss,ce,cic,lr,grad_norm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss, r.ce, r.cic, r.lr, r.grad_norm
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub step: usize,
    pub rng: SplitMix64,
}

const MOMENTUM_PREFIX: &str = "__momentum__.";

/// Write `{prefix}.grcw` (parameters plus momentum buffers) and
/// `{prefix}.json` (model config and PRNG state). Writes are atomic
/// (temp file + rename).
pub fn save_checkpoint(prefix: &Path, state: &TrainState, model: &ModelConfig) -> Result<()> {
    let mut full = state.store.clone();
    for (name, buf) in &state.momentum {
        let shape = state.store.get(name).map(|p| p.shape.clone()).unwrap_or_else(|| vec![buf.len()]);
        full.insert(&format!("{MOMENTUM_PREFIX}{name}"), buf.clone(), &shape, false);
    }
    let grcw = prefix.with_extension("grcw");
    let tmp = prefix.with_extension("grcw.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        full.write_to(&mut f)?;
    }
    std::fs::rename(&tmp, &grcw)?;

    let meta = CheckpointMeta {
        schema_version: 1,
        model: model.clone(),
        step: state.step,
        rng: state.rng.clone(),
    };
    let json = prefix.with_extension("json");
    let tmp = prefix.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&meta)?)?;
    std::fs::rename(&tmp, &json)?;
    Ok(())
}

/// Inverse of [`save_checkpoint`].
pub fn load_checkpoint(prefix: &Path) -> Result<(TrainState, ModelConfig)> {
    let meta: CheckpointMeta =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json"))?)?;
    let mut f = std::fs::File::open(prefix.with_extension("grcw"))?;
    let full = ParamStore::read_from(&mut f)?;
    let mut store = ParamStore::new();
    let mut momentum = BTreeMap::new();
    for (name, p) in full.iter() {
        if let Some(base) = name.strip_prefix(MOMENTUM_PREFIX) {
            momentum.insert(base.to_string(), p.data.clone());
        } else {
            store.insert(name, p.data.clone(), &p.shape, p.trainable);
        }
    }
    // restore trainability flags implied by the model structure
    let mut reference = ParamStore::new();
    meta.model.init_params(&mut reference, 0);
    for (name, p) in reference.iter() {
        if let Some(q) = store.get_mut(name) {
            q.trainable = p.trainable;
        }
    }
    Ok((
        TrainState {
            store,
            momentum,
            step: meta.step,
            rng: meta.rng,
        },
        meta.model,
    ))
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub diverged: bool,
    pub last_checkpoint: Option<PathBuf>,
}

/// Train on the given labeled scenes. Fully reproducible given
/// `train_cfg.seed`; scene choice, augmentation, and reparameterization noise
/// all derive from it.
pub fn train_loop(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    scenes: &[PointCloud],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyInput("no training scenes".into()));
    }
    for (i, s) in scenes.iter().enumerate() {
        if s.labels.is_none() {
            return Err(Error::Config(format!("training scene {i} has no labels")));
        }
    }
    let mut store = ParamStore::new();
    model_cfg.init_params(&mut store, derive_seed(train_cfg.seed, streams::INIT, 0));
    let mut state = TrainState::new(store, derive_seed(train_cfg.seed, streams::TRAIN, 0));
    let mut metrics = Vec::with_capacity(train_cfg.steps);
    let mut last_checkpoint = None;
    let ignore = model_cfg.ignore_label();

    for step in 0..train_cfg.steps {
        let lr = onecycle_lr(
            step,
            train_cfg.steps,
            train_cfg.max_lr,
            train_cfg.pct_up,
            train_cfg.div,
            train_cfg.final_div,
        )?;

        let mut accum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut cic_sum = 0.0;
        let mut diverged = false;
        let micro = train_cfg.grad_accum.max(1);
        for _ in 0..micro {
            let scene = &scenes[state.rng.uniform_usize(scenes.len())];
            let cloud = augment(scene, &mut state.rng);
            let labels = cloud.labels.clone().expect("labels preserved");
            let out = forward(
                &cloud,
                &state.store,
                model_cfg,
                Mode::Train {
                    rng: &mut state.rng,
                },
            )?;
            let (loss, ce, cic) = total_loss(
                &out.logits,
                &labels,
                ignore,
                out.cic.as_ref(),
                model_cfg.beta,
            )?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                diverged = true;
                break;
            }
            loss.backward()?;
            loss_sum += loss_value;
            ce_sum += ce;
            cic_sum += cic;
            for (name, g) in out.binder.grads() {
                let slot = accum.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in slot.iter_mut().zip(&g) {
                    *a += b / micro as f64;
                }
            }
            // EMA updates of the batch-free normalization statistics
            for stat in &out.stats {
                for (suffix, values) in [("running_mean", &stat.mean), ("running_var", &stat.var)] {
                    let name = format!("{}.{suffix}", stat.param_prefix);
                    if let Some(p) = state.store.get_mut(&name) {
                        for (r, &b) in p.data.iter_mut().zip(values) {
                            *r = (1.0 - train_cfg.norm_ema) * *r + train_cfg.norm_ema * b;
                        }
                    }
                }
            }
        }
        if diverged {
            return Ok(TrainOutcome {
                state,
                metrics,
                diverged: true,
                last_checkpoint,
            });
        }

        let grad_norm = accum
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt();
        sgd_momentum_step(
            &mut state,
            &accum,
            lr,
            train_cfg.momentum,
            train_cfg.weight_decay,
        )?;
        state.step = step + 1;
        metrics.push(StepMetrics {
            step,
            loss: loss_sum / micro as f64,
            ce: ce_sum / micro as f64,
            cic: cic_sum / micro as f64,
            lr,
            grad_norm,
        });

        if let Some(dir) = checkpoint_dir {
            if (step + 1) % train_cfg.steps_per_epoch == 0 {
                let epoch = (step + 1) / train_cfg.steps_per_epoch;
                let prefix = dir.join(format!("epoch_{epoch:04}"));
                save_checkpoint(&prefix, &state, model_cfg)?;
                last_checkpoint = Some(prefix);
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        let prefix = dir.join("final");
        save_checkpoint(&prefix, &state, model_cfg)?;
        last_checkpoint = Some(prefix);
    }

    Ok(TrainOutcome {
        state,
        metrics,
        diverged: false,
        last_checkpoint,
    })
}

/// Evaluate labeled scenes in eval mode, accumulating one confusion matrix.
pub fn evaluate(
    store: &ParamStore,
    model_cfg: &ModelConfig,
    scenes: &[PointCloud],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model_cfg.class_count as usize);
    for (i, scene) in scenes.iter().enumerate() {
        let labels = scene
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config(format!("evaluation scene {i} has no labels")))?;
        let out = forward(scene, store, model_cfg, Mode::Eval)?;
        let pred = argmax_rows(&out.logits.value(), model_cfg.class_count as usize);
        cm.accumulate(labels, &pred, model_cfg.ignore_label())?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AblationFlags;

    #[test]
    fn onecycle_endpoints() {
        let (total, max_lr) = (100, 0.24);
        let lr0 = onecycle_lr(0, total, max_lr, 0.3, 25.0, 1e4).unwrap();
        assert!((lr0 - max_lr / 25.0).abs() < 1e-15);
        let peak = onecycle_lr(30, total, max_lr, 0.3, 25.0, 1e4).unwrap();
        assert!((peak - max_lr).abs() < 1e-15);
        let last = onecycle_lr(total - 1, total, max_lr, 0.3, 25.0, 1e4).unwrap();
        let floor = max_lr / 1e4;
        assert!((last - floor).abs() / floor < 0.01, "last {last} floor {floor}");
        assert!(onecycle_lr(total, total, max_lr, 0.3, 25.0, 1e4).is_err());
        // monotone up then down
        let mut prev = lr0;
        for s in 1..=30 {
            let lr = onecycle_lr(s, total, max_lr, 0.3, 25.0, 1e4).unwrap();
            assert!(lr >= prev);
            prev = lr;
        }
        for s in 31..total {
            let lr = onecycle_lr(s, total, max_lr, 0.3, 25.0, 1e4).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn single_param_state(value: f64) -> TrainState {
        let mut store = ParamStore::new();
        store.insert("p", vec![value], &[1], true);
        TrainState::new(store, 0)
    }

    fn grads_of(v: f64) -> BTreeMap<String, Vec<f64>> {
        [("p".to_string(), vec![v])].into_iter().collect()
    }

    #[test]
    fn sgd_vanilla_step() {
        let mut st = single_param_state(0.0);
        sgd_momentum_step(&mut st, &grads_of(1.0), 0.1, 0.0, 0.0).unwrap();
        assert!((st.store.get("p").unwrap().data[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_momentum_steps_hand_iterated() {
        let mut st = single_param_state(0.0);
        sgd_momentum_step(&mut st, &grads_of(1.0), 0.1, 0.9, 0.0).unwrap();
        assert!((st.momentum["p"][0] - 1.0).abs() < 1e-15);
        assert!((st.store.get("p").unwrap().data[0] + 0.1).abs() < 1e-15);
        sgd_momentum_step(&mut st, &grads_of(1.0), 0.1, 0.9, 0.0).unwrap();
        assert!((st.momentum["p"][0] - 1.9).abs() < 1e-15);
        assert!((st.store.get("p").unwrap().data[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_only_matches_iterated_rule() {
        let (lr, m, wd) = (0.1, 0.9, 0.01);
        let mut st = single_param_state(2.0);
        // independent iteration of the published update rule
        let mut p_expect = 2.0;
        let mut v_expect = 0.0;
        for _ in 0..5 {
            sgd_momentum_step(&mut st, &grads_of(0.0), lr, m, wd).unwrap();
            v_expect = m * v_expect + wd * p_expect;
            p_expect -= lr * v_expect;
            let p = st.store.get("p").unwrap().data[0];
            assert!((p - p_expect).abs() < 1e-14, "{p} vs {p_expect}");
        }
        assert!(p_expect < 2.0);
    }

    #[test]
    fn sgd_nonfinite_gradient_names_parameter() {
        let mut st = single_param_state(0.0);
        match sgd_momentum_step(&mut st, &grads_of(f64::NAN), 0.1, 0.9, 0.0) {
            Err(Error::Divergence { name, .. }) => assert!(name.contains('p')),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn augment_preserves_labels_and_count_bounds() {
        let cloud = crate::testutil::tiny_scene(40);
        let mut rng = SplitMix64::new(4);
        let aug = augment(&cloud, &mut rng);
        assert!(aug.len() <= cloud.len());
        assert!(aug.len() as f64 >= cloud.len() as f64 * 0.85);
        assert!(aug.labels.is_some());
        // rotation/flip/scale preserve range up to the scale factor
        let max_range_in = cloud.points.iter().map(|p| p.range()).fold(0.0, f64::max);
        let max_range_out = aug.points.iter().map(|p| p.range()).fold(0.0, f64::max);
        assert!(max_range_out <= max_range_in * 1.05 + 1e-9);
    }

    #[test]
    fn augment_deterministic_per_seed() {
        let cloud = crate::testutil::tiny_scene(41);
        let mut r1 = SplitMix64::new(9);
        let mut r2 = SplitMix64::new(9);
        assert_eq!(augment(&cloud, &mut r1), augment(&cloud, &mut r2));
    }

    fn smoke_train_cfg(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            steps_per_epoch: steps,
            max_lr: 0.05,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_reproducible_and_loss_drops() {
        let scenes = vec![
            crate::testutil::tiny_scene(50),
            crate::testutil::tiny_scene(51),
        ];
        let model_cfg = crate::testutil::tiny_model_config(AblationFlags::full());
        let cfg = smoke_train_cfg(30, 77);
        let a = train_loop(&model_cfg, &cfg, &scenes, None).unwrap();
        let b = train_loop(&model_cfg, &cfg, &scenes, None).unwrap();
        assert!(!a.diverged);
        let la: Vec<f64> = a.metrics.iter().map(|m| m.loss).collect();
        let lb: Vec<f64> = b.metrics.iter().map(|m| m.loss).collect();
        assert_eq!(la, lb);
        let first5: f64 = la[..5].iter().sum::<f64>() / 5.0;
        let last5: f64 = la[la.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last5 < first5, "loss did not drop: {first5} -> {last5}");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_eval() {
        let scenes = vec![crate::testutil::tiny_scene(60)];
        let model_cfg = crate::testutil::tiny_model_config(AblationFlags::full());
        let cfg = smoke_train_cfg(5, 123);
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(&model_cfg, &cfg, &scenes, Some(dir.path())).unwrap();
        let prefix = out.last_checkpoint.clone().unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&prefix).unwrap();
        assert_eq!(loaded.step, out.state.step);
        assert_eq!(loaded_cfg, model_cfg);
        assert_eq!(loaded.momentum, out.state.momentum);
        let cm_a = evaluate(&out.state.store, &model_cfg, &scenes).unwrap();
        let cm_b = evaluate(&loaded.store, &loaded_cfg, &scenes).unwrap();
        assert_eq!(cm_a, cm_b);
    }

    #[test]
    fn metrics_csv_format() {
        let rows = vec![StepMetrics {
            step: 0,
            loss: 1.5,
            ce: 1.25,
            cic: 25.0,
            lr: 0.01,
            grad_norm: 3.0,
        }];
        let csv = metrics_to_csv(&rows);
        assert_eq!(csv, "step,loss,ce,cic,lr,grad_norm\n0,1.5,1.25,25,0.01,3\n");
    }
}
