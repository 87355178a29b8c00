//! Object pairing, ground-truth placement poses, scene records with their
//! denoising step targets, and the on-disk dataset format.
//!
//! Frames used throughout:
//! - **object**: the target's own frame, as generated.
//! - **world**: the base object's own frame (the base rests at the origin).
//! - **crop**: world translated so the crop center is the origin.
//!
//! `T_init` perturbs the placed target in the crop frame, so the initial
//! cloud is `T_init · T_gt_crop · P_c` and the schedule telescopes back to
//! the placed pose.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{interpolate_transform, sample_uniform_rotation, RigidTransform, UnitQuaternion, Vec3};
use crate::pointcloud::{crop_sphere, sample_mesh_surface, PointCloud};
use crate::procgen::{generate_object, placed_shape, Category, Mesh, ObjectSpec, ProcgenConfig, SlotType, Symmetry};

pub const DATASET_VERSION: &str = "placelab-dataset/1";

/// Ratio between a target's entering radius and the slot clearance above
/// which a pair is rejected. Keeps polygonal hole walls clear of the target.
pub const FIT_MARGIN: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Hanging,
    Stacking,
    VialInsertion,
    OtherInsertion,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Hanging, Task::Stacking, Task::VialInsertion, Task::OtherInsertion];
}

/// A supported (base, target) category combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    RingOnRack,
    RingOnRing,
    PlateOnPlate,
    LidOnPot,
    VialInVialPlate,
    PegInHolePlate,
    StickInCup,
    StickInBeaker,
    PlateInPlateRack,
}

impl PairKind {
    pub const ALL: [PairKind; 9] = [
        PairKind::RingOnRack,
        PairKind::RingOnRing,
        PairKind::PlateOnPlate,
        PairKind::LidOnPot,
        PairKind::VialInVialPlate,
        PairKind::PegInHolePlate,
        PairKind::StickInCup,
        PairKind::StickInBeaker,
        PairKind::PlateInPlateRack,
    ];

    pub fn task(self) -> Task {
        use PairKind::*;
        match self {
            RingOnRack => Task::Hanging,
            RingOnRing | PlateOnPlate | LidOnPot => Task::Stacking,
            VialInVialPlate => Task::VialInsertion,
            PegInHolePlate | StickInCup | StickInBeaker | PlateInPlateRack => Task::OtherInsertion,
        }
    }

    /// `(base, target)` categories.
    pub fn categories(self) -> (Category, Category) {
        use Category as C;
        use PairKind::*;
        match self {
            RingOnRack => (C::Rack, C::Ring),
            RingOnRing => (C::Ring, C::Ring),
            PlateOnPlate => (C::Plate, C::Plate),
            LidOnPot => (C::Pot, C::Lid),
            VialInVialPlate => (C::VialPlate, C::Vial),
            PegInHolePlate => (C::HolePlate, C::Peg),
            StickInCup => (C::Cup, C::Stick),
            StickInBeaker => (C::Beaker, C::Stick),
            PlateInPlateRack => (C::PlateRack, C::Plate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskCounts {
    pub hanging: usize,
    pub stacking: usize,
    pub vial_insertion: usize,
    pub other_insertion: usize,
}

impl TaskCounts {
    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::Hanging => self.hanging,
            Task::Stacking => self.stacking,
            Task::VialInsertion => self.vial_insertion,
            Task::OtherInsertion => self.other_insertion,
        }
    }

    pub fn get_mut(&mut self, task: Task) -> &mut usize {
        match task {
            Task::Hanging => &mut self.hanging,
            Task::Stacking => &mut self.stacking,
            Task::VialInsertion => &mut self.vial_insertion,
            Task::OtherInsertion => &mut self.other_insertion,
        }
    }

    pub fn total(&self) -> usize {
        Task::ALL.iter().map(|&t| self.get(t)).sum()
    }

    pub fn add(&self, o: &TaskCounts) -> TaskCounts {
        let mut out = *self;
        for t in Task::ALL {
            *out.get_mut(t) += o.get(t);
        }
        out
    }

    /// Scene counts of the full-scale reproduction target.
    pub fn full_scale() -> TaskCounts {
        TaskCounts { hanging: 1767, stacking: 1696, vial_insertion: 1107, other_insertion: 800 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train: TaskCounts,
    pub val: TaskCounts,
    /// Pair kinds that may be drawn; empty means all.
    pub pair_kinds: Vec<PairKind>,
    pub poses_per_pair: usize,
    pub target_points: usize,
    /// Initial base sample count, doubled until the crop is dense enough.
    pub base_points: usize,
    pub min_crop_points: usize,
    /// Crop radius as a multiple of the target's bounding-sphere radius.
    pub crop_scale: f64,
    pub t_max: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let per_task = TaskCounts { hanging: 24, stacking: 24, vial_insertion: 24, other_insertion: 24 };
        DatasetConfig {
            train: per_task,
            val: TaskCounts { hanging: 6, stacking: 6, vial_insertion: 6, other_insertion: 6 },
            pair_kinds: Vec::new(),
            poses_per_pair: 4,
            target_points: 512,
            base_points: 2048,
            min_crop_points: 256,
            crop_scale: 1.5,
            t_max: 5,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset.{m}")));
        if self.poses_per_pair == 0 {
            return bad("poses_per_pair must be at least 1");
        }
        if self.target_points < 64 {
            return bad("target_points must be at least 64");
        }
        if self.min_crop_points < 1 || self.base_points < 1 {
            return bad("base_points and min_crop_points must be positive");
        }
        if !(self.crop_scale > 0.0 && self.crop_scale.is_finite()) {
            return bad("crop_scale must be positive");
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1");
        }
        for split in [&self.train, &self.val] {
            for task in Task::ALL {
                if split.get(task) > 0 && self.kinds_for(task).is_empty() {
                    return Err(Error::Config(format!("dataset.pair_kinds: no pair kind allowed for task {task:?}")));
                }
            }
        }
        Ok(())
    }

    fn kinds_for(&self, task: Task) -> Vec<PairKind> {
        PairKind::ALL
            .into_iter()
            .filter(|k| k.task() == task && (self.pair_kinds.is_empty() || self.pair_kinds.contains(k)))
            .collect()
    }
}

/// One ground-truth placement of a target on a base slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSample {
    pub base_id: String,
    pub target_id: String,
    pub slot_index: usize,
    /// Object frame to world.
    pub t_gt: RigidTransform,
    /// World-frame slot axis the target's own `+z` is aligned with.
    pub symmetry_axis: Vec3,
    pub symmetry: Symmetry,
}

/// Checks whether `target` fits `base.slots[slot_index]`.
pub fn check_compatible(base: &ObjectSpec, target: &ObjectSpec, slot_index: usize) -> Result<()> {
    let slot = base
        .slots
        .get(slot_index)
        .ok_or_else(|| Error::PairRejected(format!("{} has no slot {slot_index}", base.id())))?;
    let shape = placed_shape(target).ok_or_else(|| Error::PairRejected(format!("{} cannot be placed", target.category)))?;
    let reject = |why: String| Err(Error::PairRejected(format!("{} on {}: {why}", target.id(), base.id())));
    match slot.slot_type {
        SlotType::Insert if base.category == Category::PlateRack => {
            let half_thickness = 0.5 * shape.height();
            if half_thickness >= FIT_MARGIN * slot.clearance {
                return reject(format!("thickness {} exceeds gap {}", shape.height(), 2.0 * slot.clearance));
            }
            if base.param("slat_height_scaled") > 2.0 * shape.max_radius() {
                return reject("slats taller than the plate".into());
            }
        }
        SlotType::Insert => {
            let entering = shape.footprint();
            if entering >= FIT_MARGIN * slot.clearance {
                return reject(format!("radius {entering} does not fit hole radius {}", slot.clearance));
            }
        }
        SlotType::Stack => {
            let opening = stack_opening(base);
            let foot = shape.footprint();
            if !(foot > opening && foot <= slot.clearance) {
                return reject(format!("footprint {foot} outside ({opening}, {}]", slot.clearance));
            }
        }
        SlotType::Hang => match shape.inner_radius {
            Some(ri) if slot.clearance < FIT_MARGIN * ri => {}
            _ => return reject(format!("no opening wider than pole radius {}", slot.clearance)),
        },
    }
    Ok(())
}

fn stack_opening(base: &ObjectSpec) -> f64 {
    match base.category {
        Category::Ring => base.param("inner_radius_scaled"),
        Category::Pot => base.param("radius_scaled") - base.param("wall"),
        _ => 0.0,
    }
}

/// Indices of the base slots `target` fits.
pub fn compatible_slots(base: &ObjectSpec, target: &ObjectSpec) -> Vec<usize> {
    (0..base.slots.len()).filter(|&i| check_compatible(base, target, i).is_ok()).collect()
}

/// Clearance-maximizing placement with zero twist about the slot axis.
///
/// Targets are centered coaxially on the slot. Along the axis, inserted
/// targets rest on the cavity floor unless a wider band catches on the rim;
/// stacked targets rest on the support face; hung rings are centered on the
/// free part of the pole.
pub fn ideal_pose(base: &ObjectSpec, target: &ObjectSpec, slot_index: usize) -> Result<RigidTransform> {
    check_compatible(base, target, slot_index)?;
    let slot = base.slots[slot_index];
    let shape = placed_shape(target).expect("checked");
    let align = UnitQuaternion::from_two_vectors(Vec3::Z, slot.axis);
    let translation = match slot.slot_type {
        SlotType::Insert if base.category == Category::PlateRack => {
            let rest = Vec3::new(0.0, 0.0, base.param("base_thickness_scaled") + shape.max_radius());
            Vec3::new(slot.center.x, slot.center.y, 0.0) - slot.axis * (0.5 * shape.height()) + rest
        }
        SlotType::Insert => {
            let depth = base.param("cavity_depth");
            let floor = slot.center - slot.axis * (0.5 * depth);
            let rest = shape
                .bands
                .iter()
                .filter(|b| b.2 >= slot.clearance)
                .map(|b| depth - b.0)
                .fold(0.0, f64::max);
            floor + slot.axis * rest
        }
        SlotType::Stack => slot.center,
        SlotType::Hang => slot.center - slot.axis * (0.5 * shape.height()),
    };
    Ok(RigidTransform::new(align, translation))
}

/// Draws a ground-truth placement: the ideal pose followed by a twist about
/// the target's own axis, uniform for continuous symmetry and one of the
/// `n` symmetric options for discrete symmetry.
pub fn generate_placement_pose<R: Rng + ?Sized>(
    base: &ObjectSpec,
    target: &ObjectSpec,
    slot_index: usize,
    rng: &mut R,
) -> Result<PlacementSample> {
    let ideal = ideal_pose(base, target, slot_index)?;
    let shape = placed_shape(target).expect("checked");
    let angle = match shape.symmetry {
        Symmetry::Continuous => rng.gen_range(0.0..TAU),
        Symmetry::Discrete(n) => TAU * rng.gen_range(0..n.max(1)) as f64 / n.max(1) as f64,
        Symmetry::None => 0.0,
    };
    let twist = RigidTransform::from_rotation(UnitQuaternion::rot_z(angle));
    Ok(PlacementSample {
        base_id: base.id(),
        target_id: target.id(),
        slot_index,
        t_gt: ideal.compose(&twist),
        symmetry_axis: base.slots[slot_index].axis,
        symmetry: shape.symmetry,
    })
}

/// A training/evaluation scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub index: usize,
    pub split: Split,
    pub task: Task,
    pub pair: PairKind,
    /// Target cloud in its own frame.
    pub p_c: PointCloud,
    /// Base cloud in the world frame.
    pub p_b: PointCloud,
    pub crop_center: Vec3,
    pub crop_radius: f64,
    /// Perturbation of the placed target in the crop frame.
    pub t_init: RigidTransform,
    pub sample: PlacementSample,
}

impl SceneRecord {
    /// Base points within the crop sphere, expressed in the crop frame.
    pub fn base_crop(&self) -> Result<PointCloud> {
        Ok(crop_sphere(&self.p_b, self.crop_center, self.crop_radius)?.translated(-self.crop_center))
    }

    /// Ground-truth pose of the target in the crop frame.
    pub fn gt_in_crop(&self) -> RigidTransform {
        RigidTransform::from_translation(-self.crop_center).compose(&self.sample.t_gt)
    }

    pub fn placed_cloud(&self) -> PointCloud {
        let mut pc = self.p_c.transformed(&self.gt_in_crop());
        pc.frame = "crop".into();
        pc
    }

    /// `P_c^(0)`: the perturbed target in the crop frame.
    pub fn initial_cloud(&self) -> PointCloud {
        self.placed_cloud().transformed(&self.t_init)
    }

    pub fn step_targets(&self, t_max: usize) -> Vec<DiffusionStepTarget> {
        make_step_targets(&self.t_init, t_max)
    }
}

/// Rotation uniform on SO(3), translation uniform in the crop bounding box.
pub fn sample_t_init<R: Rng + ?Sized>(base_crop: &PointCloud, rng: &mut R) -> Result<RigidTransform> {
    let bb = base_crop.aabb().ok_or(Error::EmptyCloud)?;
    let rotation = sample_uniform_rotation(rng);
    Ok(RigidTransform::new(rotation, bb.sample(rng)))
}

/// Knobs of [`build_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub target_points: usize,
    pub base_points: usize,
    pub min_crop_points: usize,
    pub crop_scale: f64,
}

impl From<&DatasetConfig> for SceneParams {
    fn from(c: &DatasetConfig) -> Self {
        SceneParams {
            target_points: c.target_points,
            base_points: c.base_points,
            min_crop_points: c.min_crop_points,
            crop_scale: c.crop_scale,
        }
    }
}

const MAX_BASE_POINTS: usize = 1 << 17;

/// Samples both surfaces, crops the base around the slot center and draws
/// `T_init`. Clouds are rounded to storage precision.
pub fn build_scene<R: Rng + ?Sized>(
    base: (&ObjectSpec, &Mesh),
    target: (&ObjectSpec, &Mesh),
    sample: PlacementSample,
    params: &SceneParams,
    rng: &mut R,
) -> Result<(PointCloud, PointCloud, Vec3, f64, RigidTransform)> {
    let (base_spec, base_mesh) = base;
    let (target_spec, target_mesh) = target;
    let shape = placed_shape(target_spec).ok_or_else(|| Error::PairRejected(format!("{} cannot be placed", target_spec.id())))?;
    let p_c = sample_mesh_surface(target_mesh, params.target_points, rng)?.quantized();
    let center = base_spec.slots[sample.slot_index].center;
    let radius = params.crop_scale * shape.bounding_radius();
    let mut n = params.base_points;
    let (p_b, crop) = loop {
        let mut p_b = sample_mesh_surface(base_mesh, n, rng)?.quantized();
        p_b.frame = "world".into();
        let crop = crop_sphere(&p_b, center, radius)?.translated(-center);
        if crop.len() >= params.min_crop_points {
            break (p_b, crop);
        }
        if n >= MAX_BASE_POINTS {
            return Err(Error::InsufficientPoints { needed: params.min_crop_points, available: crop.len() });
        }
        n *= 2;
    };
    let t_init = sample_t_init(&crop, rng)?;
    Ok((p_c, p_b, center, radius, t_init))
}

/// Ground-truth increment `Δ_k` of the denoising schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionStepTarget {
    pub k: usize,
    pub delta: RigidTransform,
}

/// Schedule increments in denoising order `k = t_max..1`, with
/// `Δ_k = S((k-1)/t_max) · S(k/t_max)^-1` and `S(α)` interpolating from the
/// identity to `t_init`.
pub fn make_step_targets(t_init: &RigidTransform, t_max: usize) -> Vec<DiffusionStepTarget> {
    let s = |k: usize| interpolate_transform(&RigidTransform::IDENTITY, t_init, k as f64 / t_max as f64);
    (1..=t_max).rev().map(|k| DiffusionStepTarget { k, delta: s(k - 1).compose(&s(k).inverse()) }).collect()
}

/// Pose `S(k/t_max)` of the target relative to its placed pose before step `k`.
pub fn schedule_pose(t_init: &RigidTransform, k: usize, t_max: usize) -> RigidTransform {
    interpolate_transform(&RigidTransform::IDENTITY, t_init, k as f64 / t_max as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub split: Split,
    pub task: Task,
    pub pair: PairKind,
    pub base_id: String,
    pub target_id: String,
    pub slot_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub master_seed: u64,
    pub config: DatasetConfig,
    pub procgen: ProcgenConfig,
    pub counts: TaskCounts,
    pub train_counts: TaskCounts,
    pub val_counts: TaskCounts,
    pub objects: Vec<String>,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub objects: BTreeMap<String, ObjectSpec>,
    pub meshes: BTreeMap<String, Mesh>,
    pub scenes: Vec<SceneRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn base_of(&self, scene: &SceneRecord) -> &ObjectSpec {
        &self.objects[&scene.sample.base_id]
    }

    pub fn target_of(&self, scene: &SceneRecord) -> &ObjectSpec {
        &self.objects[&scene.sample.target_id]
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of random stream `stream` under `master`; results
/// do not depend on generation order.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_mul(0x1000_0000_01B3) ^ splitmix64(index)))
}

const MAX_PAIR_ATTEMPTS: usize = 200;

/// Generates the dataset described by `config`, deterministically in
/// `master_seed`.
pub fn generate_dataset(config: &DatasetConfig, procgen: &ProcgenConfig, master_seed: u64) -> Result<Dataset> {
    config.validate()?;
    procgen.validate()?;
    let params = SceneParams::from(config);
    let mut objects = BTreeMap::new();
    let mut meshes = BTreeMap::new();
    let mut scenes = Vec::new();
    let mut used_seeds: BTreeMap<Split, BTreeSet<u64>> = BTreeMap::new();
    for (split, counts) in [(Split::Train, config.train), (Split::Val, config.val)] {
        for task in Task::ALL {
            let kinds = config.kinds_for(task);
            let wanted = counts.get(task);
            let stream = (split as u64) << 8 | task as u64;
            let mut produced = 0;
            let mut pair_index = 0u64;
            while produced < wanted {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, stream, pair_index));
                pair_index += 1;
                let scene_index = scenes.len();
                let fail = |reason: String| Error::Generation { index: scene_index, reason };
                let mut found = None;
                for _ in 0..MAX_PAIR_ATTEMPTS {
                    let kind = *kinds.choose(&mut rng).expect("validated");
                    let (bc, tc) = kind.categories();
                    let (bs, ts): (u64, u64) = (rng.gen(), rng.gen());
                    // held-out objects never share a seed with training objects
                    let other = if split == Split::Train { Split::Val } else { Split::Train };
                    let taken = used_seeds.get(&other);
                    if taken.is_some_and(|s| s.contains(&bs) || s.contains(&ts)) {
                        continue;
                    }
                    let (bm, base) = generate_object(bc, bs, procgen);
                    let (tm, target) = generate_object(tc, ts, procgen);
                    let slots = compatible_slots(&base, &target);
                    if !slots.is_empty() {
                        found = Some((kind, base, bm, target, tm, slots));
                        break;
                    }
                }
                let (kind, base, bm, target, tm, slots) =
                    found.ok_or_else(|| fail(format!("no compatible {task:?} pair in {MAX_PAIR_ATTEMPTS} attempts")))?;
                let seeds = used_seeds.entry(split).or_default();
                seeds.insert(base.seed);
                seeds.insert(target.seed);
                let poses = rng.gen_range(1..=config.poses_per_pair).min(wanted - produced);
                for _ in 0..poses {
                    let index = scenes.len();
                    let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, u64::MAX, index as u64));
                    let slot_index = *slots.choose(&mut srng).expect("non-empty");
                    let sample = generate_placement_pose(&base, &target, slot_index, &mut srng)
                        .map_err(|e| Error::Generation { index, reason: e.to_string() })?;
                    let (p_c, p_b, crop_center, crop_radius, t_init) =
                        build_scene((&base, &bm), (&target, &tm), sample.clone(), &params, &mut srng)
                            .map_err(|e| Error::Generation { index, reason: e.to_string() })?;
                    scenes.push(SceneRecord {
                        index,
                        split,
                        task,
                        pair: kind,
                        p_c,
                        p_b,
                        crop_center,
                        crop_radius,
                        t_init,
                        sample,
                    });
                }
                produced += poses;
                meshes.insert(base.id(), bm);
                meshes.insert(target.id(), tm);
                objects.insert(base.id(), base);
                objects.insert(target.id(), target);
            }
        }
    }
    let manifest = make_manifest(config, procgen, master_seed, &objects, &scenes);
    Ok(Dataset { manifest, objects, meshes, scenes })
}

fn make_manifest(
    config: &DatasetConfig,
    procgen: &ProcgenConfig,
    master_seed: u64,
    objects: &BTreeMap<String, ObjectSpec>,
    scenes: &[SceneRecord],
) -> DatasetManifest {
    let mut train_counts = TaskCounts::default();
    let mut val_counts = TaskCounts::default();
    for s in scenes {
        let c = if s.split == Split::Train { &mut train_counts } else { &mut val_counts };
        *c.get_mut(s.task) += 1;
    }
    DatasetManifest {
        version: DATASET_VERSION.to_string(),
        master_seed,
        config: config.clone(),
        procgen: procgen.clone(),
        counts: train_counts.add(&val_counts),
        train_counts,
        val_counts,
        objects: objects.keys().cloned().collect(),
        scenes: scenes.iter().map(entry_of).collect(),
    }
}

fn entry_of(s: &SceneRecord) -> SceneEntry {
    SceneEntry {
        index: s.index,
        split: s.split,
        task: s.task,
        pair: s.pair,
        base_id: s.sample.base_id.clone(),
        target_id: s.sample.target_id.clone(),
        slot_index: s.sample.slot_index,
    }
}

/// Little-endian f32 triplets, base64 encoded.
pub fn encode_cloud(pc: &PointCloud) -> String {
    let mut bytes = Vec::with_capacity(pc.len() * 12);
    for p in &pc.points {
        for v in p.to_array() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    B64.encode(bytes)
}

pub fn decode_cloud(text: &str, frame: &str) -> std::result::Result<PointCloud, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 12 != 0 {
        return Err(format!("cloud payload of {} bytes is not a multiple of 12", bytes.len()));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
    let points = bytes.chunks_exact(12).map(|c| Vec3::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]))).collect();
    Ok(PointCloud::new(points, frame))
}

#[derive(Serialize, Deserialize)]
struct SceneWire {
    index: usize,
    split: Split,
    task: Task,
    pair: PairKind,
    p_c: String,
    p_b: String,
    crop_center: Vec3,
    crop_radius: f64,
    t_init: RigidTransform,
    sample: PlacementSample,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, `objects/` and `scenes.jsonl` under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let objects_dir = dir.join("objects");
    fs::create_dir_all(&objects_dir).map_err(|e| Error::io(&objects_dir, e))?;
    for (id, spec) in &dataset.objects {
        write_file(&objects_dir.join(format!("{id}.spec.json")), serde_json::to_string_pretty(spec)?.as_bytes())?;
        if let Some(mesh) = dataset.meshes.get(id) {
            mesh.write_obj(&objects_dir.join(format!("{id}.obj")))?;
        }
    }
    let path = dir.join("scenes.jsonl");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for s in &dataset.scenes {
        let wire = SceneWire {
            index: s.index,
            split: s.split,
            task: s.task,
            pair: s.pair,
            p_c: encode_cloud(&s.p_c),
            p_b: encode_cloud(&s.p_b),
            crop_center: s.crop_center,
            crop_radius: s.crop_radius,
            t_init: s.t_init,
            sample: s.sample.clone(),
        };
        serde_json::to_writer(&mut w, &wire)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&dataset.manifest)?.as_bytes())
}

/// Reads a dataset written by [`write_dataset`]. Meshes are not loaded.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != DATASET_VERSION {
        return Err(Error::VersionMismatch { expected: DATASET_VERSION.into(), found: found.into() });
    }
    let manifest: DatasetManifest = serde_json::from_value(value)?;
    let mut objects = BTreeMap::new();
    for id in &manifest.objects {
        let p = dir.join("objects").join(format!("{id}.spec.json"));
        let t = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        objects.insert(id.clone(), serde_json::from_str::<ObjectSpec>(&t)?);
    }
    let spath = dir.join("scenes.jsonl");
    let file = fs::File::open(&spath).map_err(|e| Error::io(&spath, e))?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&spath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |reason: String| Error::CorruptRecord { index, reason };
        let w: SceneWire = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        let mut p_c = decode_cloud(&w.p_c, "object").map_err(corrupt)?;
        let p_b = decode_cloud(&w.p_b, "world").map_err(corrupt)?;
        p_c.frame = "object".into();
        if w.index != index {
            return Err(corrupt(format!("record carries index {}", w.index)));
        }
        let rec = SceneRecord {
            index: w.index,
            split: w.split,
            task: w.task,
            pair: w.pair,
            p_c,
            p_b,
            crop_center: w.crop_center,
            crop_radius: w.crop_radius,
            t_init: w.t_init,
            sample: w.sample,
        };
        if manifest.scenes.get(index) != Some(&entry_of(&rec)) {
            return Err(corrupt("record disagrees with the manifest".into()));
        }
        if !objects.contains_key(&rec.sample.base_id) || !objects.contains_key(&rec.sample.target_id) {
            return Err(corrupt("record references an unknown object".into()));
        }
        scenes.push(rec);
    }
    if scenes.len() != manifest.scenes.len() {
        return Err(Error::CorruptRecord {
            index: scenes.len(),
            reason: format!("manifest lists {} scenes, file holds {}", manifest.scenes.len(), scenes.len()),
        });
    }
    let recount = make_manifest(&manifest.config, &manifest.procgen, manifest.master_seed, &objects, &scenes);
    if recount.counts != manifest.counts || recount.train_counts != manifest.train_counts {
        return Err(Error::Invalid("manifest counts disagree with its records".into()));
    }
    Ok(Dataset { manifest, objects, meshes: BTreeMap::new(), scenes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{geodesic_distance, transform_error};

    fn spec_with(category: Category, params: &[(&str, f64)], slots: Vec<crate::procgen::PlacementSlot>) -> ObjectSpec {
        ObjectSpec {
            category,
            seed: 0,
            params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            slots,
        }
    }

    fn hole_plate(radius: f64) -> ObjectSpec {
        let (t, depth) = (0.02, 0.015);
        spec_with(
            Category::HolePlate,
            &[("thickness_scaled", t), ("cavity_depth", depth)],
            vec![crate::procgen::PlacementSlot {
                center: Vec3::new(0.0, 0.0, t - 0.5 * depth),
                axis: Vec3::Z,
                slot_type: SlotType::Insert,
                clearance: radius,
            }],
        )
    }

    fn vial(radius: f64) -> ObjectSpec {
        spec_with(
            Category::Vial,
            &[
                ("radius_scaled", radius),
                ("body_height_scaled", 0.04),
                ("neck_radius_scaled", 0.7 * radius),
                ("neck_height_scaled", 0.004),
                ("cap_radius_scaled", 0.9 * radius),
                ("cap_height_scaled", 0.005),
            ],
            vec![],
        )
    }

    #[test]
    fn vial_in_hole_is_coaxial_on_the_floor() {
        let base = hole_plate(0.007);
        let target = vial(0.005);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_placement_pose(&base, &target, 0, &mut rng).unwrap();
        let axis = s.t_gt.rotation.rotate(Vec3::Z);
        assert!(axis.cross(Vec3::Z).norm() < 1e-6);
        // radial gap between coaxial cylinders
        let lateral = Vec3::new(s.t_gt.translation.x, s.t_gt.translation.y, 0.0).norm();
        assert!((0.007 - (0.005 + lateral) - 0.002).abs() < 1e-12);
        assert!((s.t_gt.translation.z - (0.02 - 0.015)).abs() < 1e-12);
    }

    #[test]
    fn oversized_vial_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = generate_placement_pose(&hole_plate(0.007), &vial(0.008), 0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::PairRejected(_)));
    }

    #[test]
    fn ring_stacks_on_identical_ring() {
        let (_, ring) = generate_object(Category::Ring, 7, &ProcgenConfig::default());
        let pose = ideal_pose(&ring, &ring, 0).unwrap();
        assert_eq!(pose.translation, Vec3::new(0.0, 0.0, ring.param("height_scaled")));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = generate_placement_pose(&ring, &ring, 0, &mut rng).unwrap();
        assert_eq!(s.t_gt.translation, pose.translation);
    }

    #[test]
    fn step_target_examples() {
        let t = RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let steps = make_step_targets(&t, 5);
        assert_eq!(steps.iter().map(|s| s.k).collect::<Vec<_>>(), vec![5, 4, 3, 2, 1]);
        for s in &steps {
            assert!((s.delta.translation - Vec3::new(-0.2, 0.0, 0.0)).norm() < 1e-15);
            assert_eq!(s.delta.rotation, UnitQuaternion::IDENTITY);
        }
        let r = RigidTransform::from_rotation(UnitQuaternion::rot_z(90f64.to_radians()));
        for s in make_step_targets(&r, 3) {
            assert!(geodesic_distance(&s.delta.rotation, &UnitQuaternion::rot_z(-30f64.to_radians())) < 1e-12);
        }
    }

    #[test]
    fn step_targets_telescope() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let t = RigidTransform::new(sample_uniform_rotation(&mut rng), Vec3::new(rng.gen(), rng.gen(), rng.gen()));
            let prod = make_step_targets(&t, 5).iter().fold(RigidTransform::IDENTITY, |acc, s| s.delta.compose(&acc));
            let (r, tr) = transform_error(&prod, &t.inverse());
            assert!(r < 1e-9 && tr < 1e-9);
        }
    }

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            train: TaskCounts { hanging: 3, stacking: 3, vial_insertion: 3, other_insertion: 3 },
            val: TaskCounts { hanging: 1, stacking: 1, vial_insertion: 1, other_insertion: 1 },
            target_points: 128,
            base_points: 1024,
            min_crop_points: 128,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn dataset_counts_and_invariants() {
        let cfg = small_config();
        let ds = generate_dataset(&cfg, &ProcgenConfig::default(), 5).unwrap();
        assert_eq!(ds.manifest.train_counts, cfg.train);
        assert_eq!(ds.manifest.val_counts, cfg.val);
        let train: BTreeSet<&String> = ds.split(Split::Train).flat_map(|s| [&s.sample.base_id, &s.sample.target_id]).collect();
        for s in ds.split(Split::Val) {
            assert!(!train.contains(&s.sample.base_id) && !train.contains(&s.sample.target_id));
        }
        for s in &ds.scenes {
            let crop = s.base_crop().unwrap();
            assert!(crop.len() >= cfg.min_crop_points);
            assert!(crop.aabb().unwrap().contains(s.t_init.translation));
            let axis = s.sample.t_gt.rotation.rotate(Vec3::Z);
            assert!(axis.cross(s.sample.symmetry_axis).norm() < 1e-6 && axis.dot(s.sample.symmetry_axis) > 0.0);
            let prod = s.step_targets(5).iter().fold(RigidTransform::IDENTITY, |acc, st| st.delta.compose(&acc));
            let (r, t) = transform_error(&prod, &s.t_init.inverse());
            assert!(r < 1e-9 && t < 1e-9);
        }
    }

    #[test]
    fn dataset_round_trips_and_is_deterministic() {
        let cfg = small_config();
        let a = generate_dataset(&cfg, &ProcgenConfig::default(), 11).unwrap();
        let b = generate_dataset(&cfg, &ProcgenConfig::default(), 11).unwrap();
        assert_eq!(a.scenes, b.scenes);
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(&a, d1.path()).unwrap();
        write_dataset(&b, d2.path()).unwrap();
        for f in ["manifest.json", "scenes.jsonl"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
        let back = read_dataset(d1.path()).unwrap();
        assert_eq!(back.manifest, a.manifest);
        assert_eq!(back.scenes, a.scenes);
        assert_eq!(back.objects, a.objects);
    }

    #[test]
    fn corrupt_and_mismatched_datasets_are_reported() {
        let ds = generate_dataset(&small_config(), &ProcgenConfig::default(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let scenes = dir.path().join("scenes.jsonl");
        let text = fs::read_to_string(&scenes).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"index\": 2, \"oops\": true}";
        fs::write(&scenes, lines.join("\n")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::CorruptRecord { index: 2, .. })));
        let m = dir.path().join("manifest.json");
        let t = fs::read_to_string(&m).unwrap().replace(DATASET_VERSION, "placelab-dataset/0");
        fs::write(&m, t).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn t_init_rotation_is_uniform() {
        let (bm, base) = generate_object(Category::HolePlate, 4, &ProcgenConfig::default());
        let (tm, target) = generate_object(Category::Peg, 4, &ProcgenConfig::default());
        let params = SceneParams { target_points: 64, base_points: 512, min_crop_points: 16, crop_scale: 1.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut angles = Vec::new();
        for _ in 0..1000 {
            let s = generate_placement_pose(&base, &target, 0, &mut rng).unwrap();
            let (.., t_init) = build_scene((&base, &bm), (&target, &tm), s, &params, &mut rng).unwrap();
            angles.push(t_init.rotation.angle());
        }
        angles.sort_by(f64::total_cmp);
        let n = angles.len() as f64;
        let ks = angles
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let cdf = (a - a.sin()) / std::f64::consts::PI;
                (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "{ks}");
    }

    /// Analytic solid test for the axisymmetric and slab bases.
    fn inside_base(base: &ObjectSpec, p: Vec3) -> bool {
        let rho = (p.x * p.x + p.y * p.y).sqrt();
        let eps = 1e-9;
        match base.category {
            Category::HolePlate | Category::VialPlate => {
                let t = base.param("thickness_scaled");
                if !(p.z > eps && p.z < t - eps) {
                    return false;
                }
                !base.slots.iter().any(|s| {
                    let d = ((p.x - s.center.x).powi(2) + (p.y - s.center.y).powi(2)).sqrt();
                    d < s.clearance && p.z > t - base.param("cavity_depth") - eps
                })
            }
            Category::Cup | Category::Pot | Category::Beaker => {
                let (r, h, f) = (base.param("radius_scaled"), base.param("height_scaled"), base.param("floor_scaled"));
                let inner = r - base.param("wall");
                p.z > eps && p.z < h - eps && rho < r - eps && (p.z < f - eps || rho > inner + eps)
            }
            Category::Ring => {
                let h = base.param("height_scaled");
                p.z > eps && p.z < h - eps && rho > base.param("inner_radius_scaled") + eps && rho < base.param("outer_radius_scaled") - eps
            }
            Category::Plate => p.z > eps && p.z < base.param("thickness_scaled") - eps && rho < base.param("radius_scaled") - eps,
            _ => false,
        }
    }

    #[test]
    fn placed_targets_do_not_penetrate_bases() {
        let cfg = ProcgenConfig::default();
        let kinds = [
            PairKind::PegInHolePlate,
            PairKind::VialInVialPlate,
            PairKind::StickInCup,
            PairKind::RingOnRing,
            PairKind::LidOnPot,
            PairKind::PlateOnPlate,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in kinds {
            let (bc, tc) = kind.categories();
            let mut placed = 0;
            while placed < 5 {
                let (_, base) = generate_object(bc, rng.gen(), &cfg);
                let (tm, target) = generate_object(tc, rng.gen(), &cfg);
                for slot in compatible_slots(&base, &target) {
                    let s = generate_placement_pose(&base, &target, slot, &mut rng).unwrap();
                    let pc = sample_mesh_surface(&tm, 2000, &mut rng).unwrap().transformed(&s.t_gt);
                    assert!(pc.points.iter().all(|p| !inside_base(&base, *p)), "{kind:?}");
                    // any rotation about the slot axis keeps the placement valid
                    for i in 0..8 {
                        let twist = RigidTransform::from_rotation(UnitQuaternion::rot_z(TAU * i as f64 / 8.0));
                        let t = s.t_gt.compose(&twist);
                        let axis = t.rotation.rotate(Vec3::Z);
                        assert!(axis.cross(s.symmetry_axis).norm() < 1e-9);
                        assert!((t.translation - s.t_gt.translation).norm() < 1e-15);
                    }
                    placed += 1;
                }
            }
        }
    }
}
