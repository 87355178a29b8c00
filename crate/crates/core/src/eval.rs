//! Scoring of predicted placements: success, mode coverage and precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{compatible_slots, ideal_pose, Dataset, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{swing_twist, RigidTransform, UnitQuaternion, Vec3};

/// One viable placement of the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotPose {
    pub slot_index: usize,
    /// Target object frame to world at the ideal placement.
    pub ideal: RigidTransform,
    pub clearance: f64,
}

/// All viable placements of one scene's target on its base.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    pub slots: Vec<SlotPose>,
}

impl EvalContext {
    pub fn for_scene(dataset: &Dataset, scene: &SceneRecord) -> Result<Self> {
        let (base, target) = (dataset.base_of(scene), dataset.target_of(scene));
        let slots = compatible_slots(base, target)
            .into_iter()
            .map(|i| Ok(SlotPose { slot_index: i, ideal: ideal_pose(base, target, i)?, clearance: base.slots[i].clearance }))
            .collect::<Result<Vec<_>>>()?;
        if slots.is_empty() {
            return Err(Error::NoPlacements);
        }
        Ok(EvalContext { slots })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Meters; `None` uses the matched slot's clearance.
    pub translation: Option<f64>,
    /// Radians.
    pub axis: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { translation: None, axis: 10f64.to_radians() }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        if self.translation.is_some_and(|t| !(t > 0.0)) || !(self.axis > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn translation_for(&self, slot: &SlotPose) -> f64 {
        self.translation.unwrap_or(slot.clearance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation_error: f64,
    pub rotation_error: f64,
    /// Position in [`EvalContext::slots`].
    pub nearest: usize,
}

/// Errors against the slot whose ideal placed origin is nearest (ties go
/// to the lower index). With `exclude_twist` the rotation error ignores
/// spin about the target's own axis.
pub fn pose_error(pred: &RigidTransform, ctx: &EvalContext, exclude_twist: bool) -> PoseError {
    let mut nearest = 0;
    let mut best = f64::INFINITY;
    for (i, s) in ctx.slots.iter().enumerate() {
        let d = s.ideal.translation.distance(pred.translation);
        if d < best {
            best = d;
            nearest = i;
        }
    }
    PoseError { translation_error: best, rotation_error: rotation_error(&ctx.slots[nearest].ideal.rotation, &pred.rotation, exclude_twist), nearest }
}

fn rotation_error(ideal: &UnitQuaternion, pred: &UnitQuaternion, exclude_twist: bool) -> f64 {
    let rel = ideal.inverse().compose(pred);
    if exclude_twist {
        swing_twist(&rel, Vec3::Z).0.angle()
    } else {
        rel.angle()
    }
}

/// Closed boundary: errors equal to the tolerances succeed.
pub fn judge_success(translation_error: f64, rotation_error: f64, translation_tol: f64, axis_tol: f64) -> bool {
    translation_error <= translation_tol && rotation_error <= axis_tol
}

/// Match radius of a slot; `None` means twice its clearance.
fn radius_for(slot: &SlotPose, match_radius: Option<f64>) -> f64 {
    match_radius.unwrap_or(2.0 * slot.clearance)
}

/// The slot a prediction claims, if any: nearest within the match radius,
/// and judged a success against it.
pub fn claimed_slot(
    pred: &RigidTransform,
    ctx: &EvalContext,
    tol: &Tolerances,
    match_radius: Option<f64>,
    exclude_twist: bool,
) -> Option<usize> {
    let e = pose_error(pred, ctx, exclude_twist);
    let slot = &ctx.slots[e.nearest];
    (e.translation_error <= radius_for(slot, match_radius)
        && judge_success(e.translation_error, e.rotation_error, tol.translation_for(slot), tol.axis))
    .then_some(e.nearest)
}

/// `(samples_used, coverage)` with coverage the fraction of slots claimed by
/// the first `samples_used` predictions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub points: Vec<(usize, f64)>,
}

impl CoverageCurve {
    pub fn final_coverage(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.1)
    }

    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].1 >= w[0].1) && self.points.iter().all(|p| (0.0..=1.0).contains(&p.1))
    }
}

/// Coverage from per-prediction claims (slot positions or `None`).
pub fn coverage_from_claims(claims: &[Option<usize>], total_slots: usize) -> CoverageCurve {
    let mut seen = std::collections::BTreeSet::new();
    let points = claims
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if let Some(s) = c {
                seen.insert(*s);
            }
            (i + 1, seen.len() as f64 / total_slots as f64)
        })
        .collect();
    CoverageCurve { points }
}

pub fn coverage_curve(
    predictions: &[RigidTransform],
    ctx: &EvalContext,
    tol: &Tolerances,
    match_radius: Option<f64>,
    exclude_twist: bool,
) -> CoverageCurve {
    let claims: Vec<Option<usize>> = predictions.iter().map(|p| claimed_slot(p, ctx, tol, match_radius, exclude_twist)).collect();
    coverage_from_claims(&claims, ctx.slots.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prediction_id: usize,
    pub scene_index: usize,
    /// Base slot index, set when the prediction lies within the match radius.
    pub matched_slot: Option<usize>,
    pub translation_error: f64,
    pub rotation_error: f64,
    pub success: bool,
}

/// Equal-width bins on `[0, max)`; the last bin also takes overflow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub count: usize,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub q90: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Histogram {
    pub fn new(values: &[f64], bins: BinSpec) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("histogram of no values".into()));
        }
        if bins.count == 0 || !(bins.max > 0.0) {
            return Err(Error::Invalid("bins need a positive count and range".into()));
        }
        let width = bins.max / bins.count as f64;
        let edges = (0..=bins.count).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; bins.count];
        for &v in values {
            counts[((v / width).floor().max(0.0) as usize).min(bins.count - 1)] += 1;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Histogram {
            edges,
            counts,
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: quantile(&sorted, 0.5),
            q25: quantile(&sorted, 0.25),
            q75: quantile(&sorted, 0.75),
            q90: quantile(&sorted, 0.9),
            max: sorted[sorted.len() - 1],
        })
    }

    /// Summary rows after the bin rows.
    pub const SUMMARY_ROWS: usize = 6;

    /// `kind,lower,upper,value`: one `bin` row per bin, then the summary.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,lower,upper,value\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("bin,{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        for (k, v) in [("mean", self.mean), ("median", self.median), ("q25", self.q25), ("q75", self.q75), ("q90", self.q90), ("max", self.max)] {
            s.push_str(&format!("{k},,,{v}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub translation: Histogram,
    pub rotation: Histogram,
}

pub fn precision_report(records: &[EvalRecord], translation_bins: BinSpec, rotation_bins: BinSpec) -> Result<PrecisionReport> {
    let t: Vec<f64> = records.iter().map(|r| r.translation_error).collect();
    let r: Vec<f64> = records.iter().map(|r| r.rotation_error).collect();
    Ok(PrecisionReport { translation: Histogram::new(&t, translation_bins)?, rotation: Histogram::new(&r, rotation_bins)? })
}

/// One predicted placement as written by inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scene_index: usize,
    pub proposal_index: usize,
    pub sample_index: usize,
    pub location: Vec3,
    /// Target object frame to world.
    pub transform: RigidTransform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<crate::diffusion::DenoiseTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub seed: u64,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Meters; `None` is twice the slot clearance.
    pub match_radius: Option<f64>,
    pub exclude_twist: bool,
    pub translation_bins: BinSpec,
    pub rotation_bins: BinSpec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            match_radius: None,
            exclude_twist: true,
            translation_bins: BinSpec { count: 20, max: 0.05 },
            rotation_bins: BinSpec { count: 18, max: std::f64::consts::FRAC_PI_2 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub predictions: usize,
    pub scenes: usize,
    pub success_rate: f64,
    /// Mean over scenes of their final coverage.
    pub final_coverage: f64,
    pub median_translation_error: f64,
    pub median_rotation_error: f64,
    pub tolerances: Tolerances,
    pub options: EvalOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub records: Vec<EvalRecord>,
    /// Scene-averaged coverage; scenes with fewer predictions hold their
    /// final value.
    pub coverage: CoverageCurve,
    pub precision: PrecisionReport,
    pub summary: Summary,
}

/// Scores predictions grouped by scene, in file order.
pub fn evaluate(predictions: &[Prediction], dataset: &Dataset, tolerances: &Tolerances, options: &EvalOptions) -> Result<EvalOutput> {
    tolerances.validate()?;
    if predictions.is_empty() {
        return Err(Error::Invalid("no predictions".into()));
    }
    let mut scene_order: Vec<usize> = Vec::new();
    let mut by_scene: std::collections::BTreeMap<usize, Vec<(usize, &Prediction)>> = Default::default();
    for (id, p) in predictions.iter().enumerate() {
        if dataset.scenes.get(p.scene_index).is_none_or(|s| s.index != p.scene_index) {
            return Err(Error::Invalid(format!("prediction {id} references missing scene {}", p.scene_index)));
        }
        if !by_scene.contains_key(&p.scene_index) {
            scene_order.push(p.scene_index);
        }
        by_scene.entry(p.scene_index).or_default().push((id, p));
    }
    let mut records = Vec::with_capacity(predictions.len());
    let mut curves = Vec::new();
    for si in &scene_order {
        let scene = &dataset.scenes[*si];
        let ctx = EvalContext::for_scene(dataset, scene)?;
        let mut claims = Vec::new();
        for &(id, p) in &by_scene[si] {
            let e = pose_error(&p.transform, &ctx, options.exclude_twist);
            let slot = &ctx.slots[e.nearest];
            let matched = e.translation_error <= radius_for(slot, options.match_radius);
            let success = matched
                && judge_success(e.translation_error, e.rotation_error, tolerances.translation_for(slot), tolerances.axis);
            claims.push(success.then_some(e.nearest));
            records.push(EvalRecord {
                prediction_id: id,
                scene_index: *si,
                matched_slot: matched.then_some(slot.slot_index),
                translation_error: e.translation_error,
                rotation_error: e.rotation_error,
                success,
            });
        }
        curves.push(coverage_from_claims(&claims, ctx.slots.len()));
    }
    let longest = curves.iter().map(|c| c.points.len()).max().unwrap_or(0);
    let coverage = CoverageCurve {
        points: (0..longest)
            .map(|i| {
                let sum: f64 = curves.iter().map(|c| c.points[i.min(c.points.len() - 1)].1).sum();
                (i + 1, sum / curves.len() as f64)
            })
            .collect(),
    };
    let precision = precision_report(&records, options.translation_bins, options.rotation_bins)?;
    let summary = Summary {
        predictions: records.len(),
        scenes: curves.len(),
        success_rate: records.iter().filter(|r| r.success).count() as f64 / records.len() as f64,
        final_coverage: curves.iter().map(|c| c.final_coverage()).sum::<f64>() / curves.len() as f64,
        median_translation_error: precision.translation.median,
        median_rotation_error: precision.rotation.median,
        tolerances: *tolerances,
        options: *options,
    };
    Ok(EvalOutput { records, coverage, precision, summary })
}

/// Writes `report.csv`, `coverage.csv`, `precision_translation.csv`,
/// `precision_rotation.csv` and `summary.json` into `dir`.
pub fn write_reports(out: &EvalOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let mut report = String::from("prediction_id,scene_index,matched_slot,translation_error,rotation_error,success\n");
    for r in &out.records {
        let slot = r.matched_slot.map(|s| s.to_string()).unwrap_or_default();
        report.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.prediction_id, r.scene_index, slot, r.translation_error, r.rotation_error, r.success
        ));
    }
    write("report.csv", report)?;
    let mut cov = String::from("samples_used,coverage\n");
    for (n, c) in &out.coverage.points {
        cov.push_str(&format!("{n},{c}\n"));
    }
    write("coverage.csv", cov)?;
    write("precision_translation.csv", out.precision.translation.to_csv())?;
    write("precision_rotation.csv", out.precision.rotation.to_csv())?;
    write("summary.json", serde_json::to_string_pretty(&out.summary)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_uniform_rotation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx_with(n: usize) -> EvalContext {
        EvalContext {
            slots: (0..n)
                .map(|i| SlotPose {
                    slot_index: i,
                    ideal: RigidTransform::new(UnitQuaternion::rot_x(0.3 * i as f64), Vec3::new(0.05 * i as f64, 0.0, 0.01)),
                    clearance: 0.005,
                })
                .collect(),
        }
    }

    #[test]
    fn pose_error_examples() {
        let ctx = ctx_with(3);
        let gt = ctx.slots[1].ideal.compose(&RigidTransform::from_rotation(UnitQuaternion::rot_z(0.4)));
        let e = pose_error(&gt, &ctx, true);
        assert_eq!((e.translation_error, e.nearest), (0.0, 1));
        assert!(e.rotation_error < 1e-12);
        let spun = gt.compose(&RigidTransform::from_rotation(UnitQuaternion::rot_z(73f64.to_radians())));
        assert!(pose_error(&spun, &ctx, true).rotation_error < 1e-12);
        assert!(pose_error(&spun, &ctx, false).rotation_error > 1.0);
        let tilted = gt.compose(&RigidTransform::from_rotation(UnitQuaternion::rot_x(20f64.to_radians())));
        assert!((pose_error(&tilted, &ctx, true).rotation_error - 20f64.to_radians()).abs() < 1e-9);
    }

    #[test]
    fn success_boundaries() {
        assert!(judge_success(0.0, 0.0, 0.01, 0.1));
        assert!(!judge_success(1.01 * 0.01, 0.0, 0.01, 0.1));
        assert!(judge_success(0.01, 0.1, 0.01, 0.1));
    }

    #[test]
    fn coverage_hand_count() {
        let ctx = ctx_with(10);
        let at = |i: usize| ctx.slots[i].ideal;
        let tol = Tolerances::default();
        let c = coverage_curve(&[at(1), at(1), at(3)], &ctx, &tol, None, true);
        assert_eq!(c.points, vec![(1, 0.1), (2, 0.1), (3, 0.2)]);
        let miss = RigidTransform::from_translation(Vec3::new(5.0, 5.0, 5.0));
        let c = coverage_curve(&[miss, miss], &ctx, &tol, None, true);
        assert_eq!(c.points, vec![(1, 0.0), (2, 0.0)]);
        let all: Vec<RigidTransform> = (0..10).map(at).collect();
        assert_eq!(coverage_curve(&all, &ctx, &tol, None, true).final_coverage(), 1.0);
    }

    #[test]
    fn nearer_slot_wins_and_ties_go_low() {
        let ctx = EvalContext {
            slots: vec![
                SlotPose { slot_index: 4, ideal: RigidTransform::from_translation(Vec3::new(-0.004, 0.0, 0.0)), clearance: 0.005 },
                SlotPose { slot_index: 7, ideal: RigidTransform::from_translation(Vec3::new(0.004, 0.0, 0.0)), clearance: 0.005 },
            ],
        };
        assert_eq!(pose_error(&RigidTransform::IDENTITY, &ctx, true).nearest, 0);
        let right = RigidTransform::from_translation(Vec3::new(0.001, 0.0, 0.0));
        assert_eq!(pose_error(&right, &ctx, true).nearest, 1);
    }

    #[test]
    fn histogram_examples() {
        let zero = Histogram::new(&[0.0; 5], BinSpec { count: 4, max: 1.0 }).unwrap();
        assert_eq!(zero.counts, vec![5, 0, 0, 0]);
        assert_eq!(zero.to_csv().lines().count(), 1 + 4 + Histogram::SUMMARY_ROWS);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let vals: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let h = Histogram::new(&vals, BinSpec { count: 10, max: 1.0 }).unwrap();
        let (p, nf) = (0.1, n as f64);
        let sigma = (nf * p * (1.0 - p)).sqrt();
        assert!(h.counts.iter().all(|&c| (c as f64 - nf * p).abs() <= 3.0 * sigma), "{:?}", h.counts);
        assert!(Histogram::new(&[], BinSpec { count: 3, max: 1.0 }).is_err());
    }

    proptest! {
        #[test]
        fn twist_invariance(theta in -3.0f64..3.0, seed in 0u64..1000) {
            let ctx = ctx_with(4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = RigidTransform::new(sample_uniform_rotation(&mut rng), Vec3::new(rng.gen(), rng.gen(), rng.gen()));
            let spun = pred.compose(&RigidTransform::from_rotation(UnitQuaternion::rot_z(theta)));
            let (a, b) = (pose_error(&pred, &ctx, true), pose_error(&spun, &ctx, true));
            prop_assert!((a.rotation_error - b.rotation_error).abs() < 1e-9);
            prop_assert_eq!(a.nearest, b.nearest);
        }

        #[test]
        fn success_is_monotone(t in 0.0f64..0.02, r in 0.0f64..0.3, s in 0.0f64..1.0) {
            if judge_success(t, r, 0.01, 0.17) {
                prop_assert!(judge_success(t * s, r, 0.01, 0.17));
                prop_assert!(judge_success(t, r * s, 0.01, 0.17));
            }
        }

        #[test]
        fn coverage_is_monotone_and_order_free_at_the_end(claims in proptest::collection::vec(proptest::option::of(0usize..6), 1..30)) {
            let c = coverage_from_claims(&claims, 6);
            prop_assert!(c.is_monotone());
            let mut rev = claims.clone();
            rev.reverse();
            prop_assert_eq!(coverage_from_claims(&rev, 6).final_coverage(), c.final_coverage());
        }
    }
}
