//! The denoising engine: runs any [`Refiner`] through the schedule,
//! evaluates the per-step loss and draws multimodal placement samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{compatible_slots, ideal_pose, sample_t_init, DiffusionStepTarget, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{geodesic_distance, interpolate_transform, RigidTransform, Vec3};
use crate::pointcloud::{chamfer_distance, crop_sphere, rigid_fit, PointCloud};
use crate::procgen::ObjectSpec;

/// Everything a refiner sees at one denoising iteration. Clouds are in the
/// crop frame.
#[derive(Debug, Clone, Copy)]
pub struct RefinerInput<'a> {
    pub current: &'a PointCloud,
    /// The cloud the run started from, `P_c^(0)`.
    pub initial: &'a PointCloud,
    pub base_crop: &'a PointCloud,
    /// World position of the crop-frame origin.
    pub crop_center: Vec3,
    pub timestep: usize,
    /// Zero-based iteration count.
    pub iteration: usize,
    /// Set on the extra iterations that repeat the last timestep.
    pub repeated: bool,
}

/// A pose refiner predicts the increment that moves the current target
/// cloud one step closer to a placement.
pub trait Refiner {
    fn refine(&self, input: &RefinerInput) -> Result<RigidTransform>;

    /// Overrides the `(schedule_steps, total_steps)` of a run.
    fn schedule_override(&self) -> Option<(usize, usize)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseOptions {
    pub schedule_steps: usize,
    pub total_steps: usize,
    /// Per-step translation cap in meters; `None` disables it.
    pub max_translation: Option<f64>,
}

impl Default for DenoiseOptions {
    fn default() -> Self {
        DenoiseOptions { schedule_steps: 5, total_steps: 50, max_translation: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub timestep: usize,
    pub repeated: bool,
    pub delta: RigidTransform,
    /// Accumulated transform after this step.
    pub pose: RigidTransform,
    pub clamped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrace {
    pub steps: Vec<TraceStep>,
}

impl DenoiseTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn clamped_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.clamped).count()
    }
}

/// Runs `schedule_steps` iterations with timesteps `schedule_steps..1`, then
/// repeats timestep 1 until `total_steps` iterations have run. Returns the
/// product of all increments.
pub fn denoise(
    refiner: &dyn Refiner,
    p_c0: &PointCloud,
    base_crop: &PointCloud,
    crop_center: Vec3,
    options: &DenoiseOptions,
) -> Result<(RigidTransform, DenoiseTrace)> {
    let (schedule, total) = refiner.schedule_override().unwrap_or((options.schedule_steps, options.total_steps));
    if schedule == 0 || total < schedule {
        return Err(Error::Invalid(format!("need total_steps ({total}) >= schedule_steps ({schedule}) >= 1")));
    }
    if p_c0.is_empty() || base_crop.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut current = p_c0.clone();
    let mut pose = RigidTransform::IDENTITY;
    let mut trace = DenoiseTrace { steps: Vec::with_capacity(total) };
    for iteration in 0..total {
        let repeated = iteration >= schedule;
        let timestep = if repeated { 1 } else { schedule - iteration };
        let input = RefinerInput { current: &current, initial: p_c0, base_crop, crop_center, timestep, iteration, repeated };
        let mut delta = refiner.refine(&input)?;
        if !delta.is_finite() {
            return Err(Error::NonFiniteStep { step: iteration });
        }
        let mut clamped = false;
        if let Some(cap) = options.max_translation {
            let n = delta.translation.norm();
            if n > cap {
                delta.translation = delta.translation * (cap / n);
                clamped = true;
            }
        }
        current = current.transformed(&delta);
        pose = delta.compose(&pose);
        trace.steps.push(TraceStep { iteration, timestep, repeated, delta, pose, clamped });
    }
    Ok((pose, trace))
}

/// The three loss terms and their unit-weight sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub translation: f64,
    pub rotation: f64,
    pub chamfer: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(translation: f64, rotation: f64, chamfer: f64) -> Self {
        LossBreakdown { translation, rotation, chamfer, total: translation + rotation + chamfer }
    }
}

/// L1 translation error, geodesic rotation error, and the Chamfer distance
/// between `p_c_t` moved by the prediction and by the target increment.
pub fn diffusion_loss(pred: &RigidTransform, gt: &DiffusionStepTarget, p_c_t: &PointCloud) -> Result<LossBreakdown> {
    let d = pred.translation - gt.delta.translation;
    let translation = d.x.abs() + d.y.abs() + d.z.abs();
    let rotation = geodesic_distance(&pred.rotation, &gt.delta.rotation);
    let chamfer = chamfer_distance(&p_c_t.transformed(pred), &p_c_t.transformed(&gt.delta))?;
    Ok(LossBreakdown::new(translation, rotation, chamfer))
}

/// Always returns the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&self, _: &RefinerInput) -> Result<RigidTransform> {
        Ok(RigidTransform::IDENTITY)
    }
}

/// Replays precomputed schedule increments; repeated iterations return the
/// identity.
#[derive(Debug, Clone)]
pub struct ReplayRefiner {
    pub targets: Vec<DiffusionStepTarget>,
}

impl Refiner for ReplayRefiner {
    fn refine(&self, input: &RefinerInput) -> Result<RigidTransform> {
        if input.repeated {
            return Ok(RigidTransform::IDENTITY);
        }
        self.targets
            .iter()
            .find(|t| t.k == input.timestep)
            .map(|t| t.delta)
            .ok_or_else(|| Error::Invalid(format!("no step target for timestep {}", input.timestep)))
    }
}

/// Knows the ground truth: recovers the current pose of the target by a
/// rigid fit against its own-frame cloud, picks the slot nearest the crop
/// center and returns the schedule increment toward its ideal placement.
#[derive(Debug, Clone)]
pub struct OracleRefiner {
    own: Vec<Vec3>,
    /// `(slot center, ideal placement)` in the world frame.
    goals: Vec<(Vec3, RigidTransform)>,
}

impl OracleRefiner {
    pub fn new(base: &ObjectSpec, target: &ObjectSpec, own_cloud: &PointCloud) -> Result<Self> {
        let goals: Vec<(Vec3, RigidTransform)> = compatible_slots(base, target)
            .into_iter()
            .map(|i| Ok((base.slots[i].center, ideal_pose(base, target, i)?)))
            .collect::<Result<_>>()?;
        if goals.is_empty() {
            return Err(Error::NoPlacements);
        }
        Ok(OracleRefiner { own: own_cloud.points.clone(), goals })
    }
}

impl Refiner for OracleRefiner {
    fn refine(&self, input: &RefinerInput) -> Result<RigidTransform> {
        let goal = self
            .goals
            .iter()
            .min_by(|a, b| (a.0 - input.crop_center).norm().total_cmp(&(b.0 - input.crop_center).norm()))
            .expect("non-empty")
            .1;
        let goal = RigidTransform::from_translation(-input.crop_center).compose(&goal);
        let pose = rigid_fit(&self.own, &input.current.points)?;
        let rel = pose.compose(&goal.inverse());
        let t = input.timestep.max(1) as f64;
        Ok(interpolate_transform(&RigidTransform::IDENTITY, &rel, (t - 1.0) / t).compose(&rel.inverse()))
    }
}

/// One drawn placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub proposal_index: usize,
    pub sample_index: usize,
    pub location: Vec3,
    /// Target object frame to world.
    pub transform: RigidTransform,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<DenoiseTrace>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleOutput {
    pub samples: Vec<PoseSample>,
    pub warnings: Vec<String>,
}

/// For every proposal: crops the base there, draws `n_per_proposal` fresh
/// initial poses and denoises each. Proposals with an empty crop are
/// skipped with a warning.
pub fn sample_poses<R: Rng + ?Sized>(
    refiner: &dyn Refiner,
    scene: &SceneRecord,
    proposals: &[Vec3],
    n_per_proposal: usize,
    options: &DenoiseOptions,
    keep_trace: bool,
    rng: &mut R,
) -> Result<SampleOutput> {
    if proposals.is_empty() {
        return Err(Error::NoPlacements);
    }
    let mut out = SampleOutput::default();
    for (pi, &location) in proposals.iter().enumerate() {
        let crop = match crop_sphere(&scene.p_b, location, scene.crop_radius) {
            Ok(c) => c.translated(-location),
            Err(e) => {
                out.warnings.push(format!("scene {} proposal {pi}: {e}", scene.index));
                continue;
            }
        };
        for si in 0..n_per_proposal {
            let t0 = sample_t_init(&crop, rng)?;
            let mut p0 = scene.p_c.transformed(&t0);
            p0.frame = "crop".into();
            let (t_n, trace) = match denoise(refiner, &p0, &crop, location, options) {
                Ok(r) => r,
                Err(e @ Error::InsufficientPoints { .. }) => {
                    out.warnings.push(format!("scene {} proposal {pi}: {e}", scene.index));
                    break;
                }
                Err(e) => return Err(e),
            };
            let transform = RigidTransform::from_translation(location).compose(&t_n).compose(&t0);
            out.samples.push(PoseSample {
                proposal_index: pi,
                sample_index: si,
                location,
                transform,
                trace: keep_trace.then_some(trace),
            });
        }
    }
    Ok(out)
}
