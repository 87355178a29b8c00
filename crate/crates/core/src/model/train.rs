//! Training loop: per-step supervision on sampled schedule steps, AdamW and
//! a linear-warmup cosine learning-rate schedule.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prepare_pair, sample_frame, LossWeights, ModelConfig, PoseModel};
use crate::autodiff::{Tape, Tensor};
use crate::dataset::{derive_seed, make_step_targets, sample_t_init, schedule_pose, Dataset, SceneRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{swing_twist, twist_angle, RigidTransform, UnitQuaternion};
use crate::pointcloud::PointCloud;
use crate::procgen::Symmetry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Warmup length, counted in optimizer iterations.
    pub warmup_epochs: usize,
    pub total_iterations: usize,
    pub seed: u64,
    pub schedule_steps: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 5e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            warmup_epochs: 50,
            total_iterations: 2000,
            seed: 0,
            schedule_steps: 5,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale training: batch 48 at 1e-4 for 500k iterations.
    pub fn full_scale() -> Self {
        TrainConfig { batch_size: 48, learning_rate: 1e-4, total_iterations: 500_000, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if self.batch_size == 0 || self.total_iterations == 0 || self.schedule_steps == 0 {
            return bad("batch_size, total_iterations and schedule_steps must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    /// Learning rate at zero-based iteration `i`: linear from 0 over the
    /// warmup, then a half cosine reaching 0 at the last iteration.
    pub fn lr_at(&self, i: usize) -> f64 {
        let w = self.warmup_epochs;
        if i < w {
            return self.learning_rate * i as f64 / w as f64;
        }
        let last = self.total_iterations.saturating_sub(1);
        if last <= w {
            return self.learning_rate;
        }
        let p = ((i - w) as f64 / (last - w) as f64).min(1.0);
        0.5 * self.learning_rate * (1.0 + (PI * p).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to weight matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
    step: u32,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
}

const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(model: &PoseModel, config: &TrainConfig) -> Self {
        AdamW {
            m: model.params.tensors.iter().map(|t| Tensor::zeros(t.dim())).collect(),
            v: model.params.tensors.iter().map(|t| Tensor::zeros(t.dim())).collect(),
            decay: model.params.names.iter().map(|n| n.ends_with(".weight")).collect(),
            step: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            weight_decay: config.weight_decay,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if self.decay[i] { lr * self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(&mut self.m[i]).and(&mut self.v[i]).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= decay * *p;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
        }
    }
}

/// One row of the loss curve: batch means of the unweighted terms and the
/// weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub translation: f64,
    pub rotation: f64,
    pub chamfer: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut s = String::from("iteration,translation,rotation,chamfer,total,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.iteration, r.translation, r.rotation, r.chamfer, r.total, r.lr));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Serializable state of a [`ChaCha8Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: PoseModel,
    pub train_config: TrainConfig,
    pub iteration: usize,
    pub rng: RngState,
    pub losses: Vec<LossRow>,
}

/// Per-scene data reused across iterations.
struct Prepared<'a> {
    scene: &'a SceneRecord,
    placed: PointCloud,
    crop: PointCloud,
}

/// Rotates `t_init` by a symmetry of the placed target so that its rotation
/// carries no twist about the slot axis (up to the symmetry order). The
/// perturbed cloud is unchanged as a shape, but the supervision no longer
/// asks the model to undo an unobservable spin.
pub fn canonicalize_twist(t_init: &RigidTransform, gt_crop: &RigidTransform, symmetry: Symmetry) -> RigidTransform {
    let axis = gt_crop.rotation.rotate(crate::geometry::Vec3::Z);
    let q = match symmetry {
        Symmetry::None => return *t_init,
        Symmetry::Continuous => swing_twist(&t_init.rotation, axis).1.inverse(),
        Symmetry::Discrete(n) => {
            let step = 2.0 * PI / n.max(1) as f64;
            let k = (twist_angle(&t_init.rotation, axis) / step).round();
            UnitQuaternion::from_axis_angle(axis, -k * step)
        }
    };
    let c = gt_crop.translation;
    t_init.compose(&RigidTransform::new(q, c - q.rotate(c)))
}

/// Hash of the scenes and steps making up one batch.
fn fingerprint(items: &[(usize, usize)]) -> u64 {
    items.iter().fold(0x9e37_79b9_7f4a_7c15, |h, &(s, k)| derive_seed(h, s as u64, k as u64))
}

/// Trains `model` in place on the train split. `observer` sees every loss
/// row as it is produced.
pub fn train(
    dataset: &Dataset,
    model: PoseModel,
    config: &TrainConfig,
    mut observer: impl FnMut(&LossRow),
) -> Result<TrainOutput> {
    config.validate()?;
    let mc: ModelConfig = model.config.clone();
    let prepared: Vec<Prepared> = dataset
        .split(Split::Train)
        .map(|scene| Ok(Prepared { scene, placed: scene.placed_cloud(), crop: scene.base_crop()? }))
        .collect::<Result<_>>()?;
    if prepared.is_empty() {
        return Err(Error::Invalid("dataset has no training scenes".into()));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&model, config);
    let t_max = config.schedule_steps;
    let n = mc.points_per_cloud;
    let mut losses = Vec::with_capacity(config.total_iterations);
    for iteration in 0..config.total_iterations {
        let lr = config.lr_at(iteration);
        let mut grads: Vec<Tensor> = model.params.tensors.iter().map(|t| Tensor::zeros(t.dim())).collect();
        let mut row = LossRow { iteration, translation: 0.0, rotation: 0.0, chamfer: 0.0, total: 0.0, lr };
        let mut items = Vec::with_capacity(config.batch_size);
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let p = &prepared[rng.gen_range(0..prepared.len())];
            let t_init = sample_t_init(&p.crop, &mut rng)?;
            let t_init = canonicalize_twist(&t_init, &p.scene.gt_in_crop(), p.scene.sample.symmetry);
            let k = if mc.regression_mode { t_max } else { rng.gen_range(1..=t_max) };
            items.push((p.scene.index, k));
            batch.push((p, t_init, k));
        }
        let fp = fingerprint(&items);
        let nan = || Error::NanLoss { iteration, fingerprint: fp };
        for (p, t_init, k) in batch {
            let initial = p.placed.transformed(&t_init);
            let record = sample_frame(&initial, &p.crop, n)?;
            let (current, gt) = if mc.regression_mode {
                (initial, t_init.inverse())
            } else {
                let delta = make_step_targets(&t_init, t_max)[t_max - k].delta;
                (p.placed.transformed(&schedule_pose(&t_init, k, t_max)), delta)
            };
            let pair = prepare_pair(&current, &p.crop, n, record)?;
            let gt_n = record.motion_to_normalized(&gt);
            let mut tape = Tape::new();
            let fwd = match model.forward(&mut tape, &pair, k) {
                Ok(f) => f,
                Err(Error::NonFiniteActivation { .. }) => return Err(nan()),
                Err(e) => return Err(e),
            };
            let l = model.loss(&mut tape, &pair, &fwd, &gt_n, &config.loss_weights);
            let total = tape.scalar(l.total);
            if !total.is_finite() {
                return Err(nan());
            }
            row.translation += tape.scalar(l.translation);
            row.rotation += tape.scalar(l.rotation);
            row.chamfer += tape.scalar(l.chamfer);
            row.total += total;
            let g = tape.backward(l.total);
            for (acc, v) in grads.iter_mut().zip(&fwd.params) {
                if let Some(gv) = g.get(*v) {
                    *acc += gv;
                }
            }
        }
        let b = config.batch_size as f64;
        for acc in &mut grads {
            *acc /= b;
            if acc.iter().any(|x| !x.is_finite()) {
                return Err(nan());
            }
        }
        row.translation /= b;
        row.rotation /= b;
        row.chamfer /= b;
        row.total /= b;
        opt.update(&mut model.params.tensors, &grads, lr);
        observer(&row);
        losses.push(row);
    }
    Ok(TrainOutput {
        model,
        train_config: config.clone(),
        iteration: config.total_iterations,
        rng: RngState::capture(&rng),
        losses,
    })
}
