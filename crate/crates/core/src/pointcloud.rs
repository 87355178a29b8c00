//! Point-cloud primitives: farthest point sampling, joint unit-cube
//! normalization, Chamfer distance, spherical crops and area-uniform
//! surface sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::procgen::Mesh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame: String,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: impl Into<String>) -> Self {
        Self { points, frame: frame.into() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::ZERO, |a, p| a + *p);
        Some(sum / self.points.len() as f64)
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(&self.points)
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| t.apply(*p)).collect(), frame: self.frame.clone() }
    }

    pub fn translated(&self, offset: Vec3) -> PointCloud {
        PointCloud { points: self.points.iter().map(|p| *p + offset).collect(), frame: self.frame.clone() }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud { points: indices.iter().map(|&i| self.points[i]).collect(), frame: self.frame.clone() }
    }

    /// Rounds every coordinate to single precision, the storage precision of
    /// serialized clouds.
    pub fn quantized(&self) -> PointCloud {
        let q = |v: f64| v as f32 as f64;
        PointCloud {
            points: self.points.iter().map(|p| Vec3::new(q(p.x), q(p.y), q(p.z))).collect(),
            frame: self.frame.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite())
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points(points: &[Vec3]) -> Option<Aabb> {
        let first = *points.first()?;
        let (min, max) = points.iter().fold((first, first), |(lo, hi), p| (lo.component_min(*p), hi.component_max(*p)));
        Some(Aabb { min, max })
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn longest_edge(&self) -> f64 {
        let e = self.extent();
        e.x.max(e.y).max(e.z)
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb { min: self.min.component_min(o.min), max: self.max.component_max(o.max) }
    }

    /// Grows every side by `margin`.
    pub fn inflated(&self, margin: f64) -> Aabb {
        let m = Vec3::new(margin, margin, margin);
        Aabb { min: self.min - m, max: self.max + m }
    }

    /// Grows every side by `fraction` of the corresponding extent.
    pub fn inflated_relative(&self, fraction: f64) -> Aabb {
        let e = self.extent() * fraction;
        Aabb { min: self.min - e, max: self.max + e }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.y >= self.min.y
            && p.z >= self.min.z
            && p.x <= self.max.x
            && p.y <= self.max.y
            && p.z <= self.max.z
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        let w: f64 = rng.gen();
        Vec3::new(
            self.min.x + u * (self.max.x - self.min.x),
            self.min.y + v * (self.max.y - self.min.y),
            self.min.z + w * (self.max.z - self.min.z),
        )
    }
}

/// Shared affine map into the unit cube: `q = (p - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub scale: f64,
    pub offset: Vec3,
}

impl NormalizationRecord {
    pub const IDENTITY: NormalizationRecord = NormalizationRecord { scale: 1.0, offset: Vec3::ZERO };

    pub fn normalize(&self, p: Vec3) -> Vec3 {
        (p - self.offset) * self.scale
    }

    pub fn denormalize(&self, q: Vec3) -> Vec3 {
        q / self.scale + self.offset
    }

    /// Expresses a metric-frame motion `p ↦ R p + t` in normalized coordinates.
    pub fn motion_to_normalized(&self, m: &RigidTransform) -> RigidTransform {
        let o = self.offset;
        let t = (m.translation + m.rotation.rotate(o) - o) * self.scale;
        RigidTransform::new(m.rotation, t)
    }

    /// Inverse of [`NormalizationRecord::motion_to_normalized`].
    pub fn motion_to_metric(&self, m: &RigidTransform) -> RigidTransform {
        let o = self.offset;
        let t = m.translation / self.scale - m.rotation.rotate(o) + o;
        RigidTransform::new(m.rotation, t)
    }
}

/// Index of the point nearest the centroid (lowest index on ties).
pub fn centroid_nearest_index(pc: &PointCloud) -> Result<usize> {
    let c = pc.centroid().ok_or(Error::EmptyCloud)?;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in pc.points.iter().enumerate() {
        let d = (*p - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Greedy farthest point sampling starting from `start_index`.
///
/// Every pick maximizes the distance to the already picked set; ties go to
/// the lowest index.
pub fn farthest_point_sample(pc: &PointCloud, k: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if k > n || k == 0 {
        return Err(Error::InsufficientPoints { needed: k.max(1), available: n });
    }
    if start_index >= n {
        return Err(Error::Invalid(format!("start index {start_index} out of range for {n} points")));
    }
    let pts = &pc.points;
    let mut picked = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start_index;
    picked.push(current);
    while picked.len() < k {
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, p) in pts.iter().enumerate() {
            let d = (*p - c).norm_squared();
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        min_d[current] = 0.0;
        picked.push(current);
    }
    Ok(picked)
}

/// Maps all clouds with one shared transform so their joint bounding box is
/// centered at the origin with longest edge 1.
pub fn normalize_unit_cube(pcs: &[&PointCloud]) -> Result<(Vec<PointCloud>, NormalizationRecord)> {
    let joint = pcs
        .iter()
        .filter_map(|pc| pc.aabb())
        .reduce(|a, b| a.union(&b))
        .ok_or(Error::EmptyCloud)?;
    let edge = joint.longest_edge();
    if !(edge > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    let record = NormalizationRecord { scale: 1.0 / edge, offset: joint.center() };
    let out = pcs
        .iter()
        .map(|pc| PointCloud {
            points: pc.points.iter().map(|p| record.normalize(*p)).collect(),
            frame: pc.frame.clone(),
        })
        .collect();
    Ok((out, record))
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.iter().map(|q| (*p - *q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .sum();
    total / from.len() as f64
}

/// Symmetric mean Chamfer distance with Euclidean (not squared) terms.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(mean_nearest(&a.points, &b.points) + mean_nearest(&b.points, &a.points))
}

/// All points within `radius` of `center`, in input order.
pub fn crop_sphere(pc: &PointCloud, center: Vec3, radius: f64) -> Result<PointCloud> {
    if !(radius > 0.0) {
        return Err(Error::Invalid(format!("crop radius must be positive, got {radius}")));
    }
    let r2 = radius * radius;
    let points: Vec<Vec3> = pc.points.iter().copied().filter(|p| (*p - center).norm_squared() <= r2).collect();
    if points.is_empty() {
        return Err(Error::EmptyCrop { center: center.to_array(), radius });
    }
    Ok(PointCloud::new(points, "crop"))
}

/// Area-uniform random points on a triangle mesh.
pub fn sample_mesh_surface<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::ZeroArea);
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let t = cumulative.partition_point(|c| *c <= u).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle_vertices(t);
        let r1: f64 = rng.gen::<f64>().sqrt();
        let r2: f64 = rng.gen();
        points.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
    }
    Ok(PointCloud::new(points, "object"))
}

/// Least-squares rigid motion taking `from[i]` onto `to[i]` (Kabsch).
pub fn rigid_fit(from: &[Vec3], to: &[Vec3]) -> Result<RigidTransform> {
    if from.len() != to.len() || from.is_empty() {
        return Err(Error::Invalid(format!("rigid fit needs equal non-empty sets, got {} and {}", from.len(), to.len())));
    }
    let n = from.len() as f64;
    let ca = from.iter().fold(Vec3::ZERO, |s, p| s + *p) / n;
    let cb = to.iter().fold(Vec3::ZERO, |s, p| s + *p) / n;
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    for (a, b) in from.iter().zip(to) {
        let (a, b) = (*a - ca, *b - cb);
        h += nalgebra::Vector3::new(a.x, a.y, a.z) * nalgebra::Vector3::new(b.x, b.y, b.z).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(Error::DegenerateCloud)?, svd.v_t.ok_or(Error::DegenerateCloud)?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d)) * u.transpose();
    let m = [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]];
    let rotation = crate::geometry::UnitQuaternion::from_matrix(&m);
    Ok(RigidTransform::new(rotation, cb - rotation.rotate(ca)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Vec3::from_array(*p)).collect(), "world")
    }

    /// Exhaustive greedy reference: recomputes every distance to the picked
    /// set from scratch at each step.
    fn fps_oracle(pts: &[Vec3], k: usize, start: usize) -> Vec<usize> {
        let mut picked = vec![start];
        while picked.len() < k {
            let mut best = None;
            let mut best_d = -1.0;
            for i in 0..pts.len() {
                let d = picked.iter().map(|&j| pts[i].distance(pts[j])).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(i);
                }
            }
            picked.push(best.unwrap());
        }
        picked
    }

    #[test]
    fn fps_example() {
        let pc = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&pc, 2, 0).unwrap(), vec![0, 3]);
        let mut all = farthest_point_sample(&pc, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(matches!(farthest_point_sample(&pc, 5, 0), Err(Error::InsufficientPoints { .. })));
    }

    #[test]
    fn fps_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let n = rng.gen_range(1..=64);
            // coarse grid coordinates force plenty of distance ties
            let pts: Vec<Vec3> = (0..n)
                .map(|_| {
                    if trial % 2 == 0 {
                        Vec3::new(rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64, rng.gen_range(0..2) as f64)
                    } else {
                        Vec3::new(rng.gen(), rng.gen(), rng.gen())
                    }
                })
                .collect();
            let k = rng.gen_range(1..=n);
            let start = rng.gen_range(0..n);
            let pc = PointCloud::new(pts.clone(), "world");
            assert_eq!(farthest_point_sample(&pc, k, start).unwrap(), fps_oracle(&pts, k, start));
        }
    }

    #[test]
    fn normalize_examples() {
        let (out, rec) = normalize_unit_cube(&[&cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])]).unwrap();
        assert_eq!(out[0].points, vec![Vec3::new(-0.5, 0.0, 0.0), Vec3::new(0.5, 0.0, 0.0)]);
        assert_eq!(rec.scale, 0.5);
        let corners: Vec<[f64; 3]> = (0..8)
            .map(|i| [(i & 1) as f64 - 0.5, ((i >> 1) & 1) as f64 - 0.5, ((i >> 2) & 1) as f64 - 0.5])
            .collect();
        let (_, rec) = normalize_unit_cube(&[&cloud(&corners)]).unwrap();
        assert_eq!(rec, NormalizationRecord::IDENTITY);
        assert!(matches!(normalize_unit_cube(&[&cloud(&[[1.0, 1.0, 1.0]])]), Err(Error::DegenerateCloud)));
    }

    #[test]
    fn normalization_is_joint() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[3.0, 0.0, 0.0]]);
        let (out, rec) = normalize_unit_cube(&[&a, &b]).unwrap();
        assert_eq!(rec.scale, 1.0 / 3.0);
        assert_eq!(out[1].points[0], Vec3::new(0.5, 0.0, 0.0));
    }

    #[test]
    fn motion_conversion_commutes_with_normalization() {
        let rec = NormalizationRecord { scale: 3.7, offset: Vec3::new(0.2, -1.0, 0.5) };
        let m = RigidTransform::new(crate::geometry::UnitQuaternion::rot_y(0.8), Vec3::new(0.1, 0.3, -0.2));
        let p = Vec3::new(0.4, 0.9, -0.3);
        let n = rec.motion_to_normalized(&m);
        assert!((n.apply(rec.normalize(p)) - rec.normalize(m.apply(p))).norm() < 1e-12);
        let back = rec.motion_to_metric(&n);
        assert!((back.translation - m.translation).norm() < 1e-12);
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 2.0);
        let c = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&c, &b).unwrap(), 2.0);
        assert!(chamfer_distance(&a, &cloud(&[])).is_err());
    }

    #[test]
    fn crop_examples() {
        let mut grid = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..5 {
                    grid.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let pc = cloud(&grid);
        let cross = crop_sphere(&pc, Vec3::new(2.0, 2.0, 2.0), 1.0).unwrap();
        assert_eq!(cross.len(), 7);
        assert_eq!(cross.frame, "crop");
        assert!(matches!(crop_sphere(&pc, Vec3::new(100.0, 0.0, 0.0), 1.0), Err(Error::EmptyCrop { .. })));
        let full = crop_sphere(&pc, pc.centroid().unwrap(), 10.0).unwrap();
        assert_eq!(full.points, pc.points);
    }

    fn unit_square() -> Mesh {
        Mesh {
            vertices: vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn surface_sampling_is_area_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pc = sample_mesh_surface(&unit_square(), 100_000, &mut rng).unwrap();
        let c = pc.centroid().unwrap();
        assert!((c - Vec3::new(0.5, 0.5, 0.0)).norm() < 0.01);
        let left = pc.points.iter().filter(|p| p.x < 0.5).count() as f64 / 1e5;
        assert!((left - 0.5).abs() < 0.01);
    }

    #[test]
    fn degenerate_mesh_is_rejected() {
        let m = Mesh { vertices: vec![Vec3::ZERO, Vec3::X, Vec3::X * 2.0], triangles: vec![[0, 1, 2]] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_mesh_surface(&m, 10, &mut rng), Err(Error::ZeroArea)));
    }

    fn arb_cloud(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
        prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 2..max)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
    }

    proptest! {
        #[test]
        fn fps_prefix_property(pts in arb_cloud(40), k in 1usize..40) {
            let pc = PointCloud::new(pts, "w");
            let k = k.min(pc.len());
            let full = farthest_point_sample(&pc, k, 0).unwrap();
            for j in 1..=k {
                prop_assert_eq!(&farthest_point_sample(&pc, j, 0).unwrap()[..], &full[..j]);
            }
        }

        #[test]
        fn chamfer_is_symmetric(a in arb_cloud(20), b in arb_cloud(20)) {
            let (a, b) = (PointCloud::new(a, "w"), PointCloud::new(b, "w"));
            prop_assert!((chamfer_distance(&a, &b).unwrap() - chamfer_distance(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn normalization_round_trips(pts in arb_cloud(30)) {
            let pc = PointCloud::new(pts, "w");
            let (out, rec) = normalize_unit_cube(&[&pc]).unwrap();
            for (p, q) in pc.points.iter().zip(&out[0].points) {
                prop_assert!(q.x.abs() <= 0.5 + 1e-12 && q.y.abs() <= 0.5 + 1e-12 && q.z.abs() <= 0.5 + 1e-12);
                prop_assert!((rec.denormalize(*q) - *p).norm() < 1e-12);
            }
        }

        #[test]
        fn crop_is_order_independent(pts in arb_cloud(40), r in 0.3..1.5f64) {
            let pc = PointCloud::new(pts.clone(), "w");
            let mut rev = pts;
            rev.reverse();
            let a = crop_sphere(&pc, Vec3::ZERO, r);
            let b = crop_sphere(&PointCloud::new(rev, "w"), Vec3::ZERO, r);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    let mut x: Vec<[u64; 3]> = a.points.iter().map(|p| p.to_array().map(f64::to_bits)).collect();
                    let mut y: Vec<[u64; 3]> = b.points.iter().map(|p| p.to_array().map(f64::to_bits)).collect();
                    x.sort();
                    y.sort();
                    prop_assert_eq!(x, y);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "crop results disagree"),
            }
        }
    }

    #[test]
    fn rigid_fit_recovers_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..50).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        for _ in 0..20 {
            let t = RigidTransform::new(crate::geometry::sample_uniform_rotation(&mut rng), Vec3::new(rng.gen(), rng.gen(), rng.gen()));
            let moved: Vec<Vec3> = pts.iter().map(|p| t.apply(*p)).collect();
            let fit = rigid_fit(&pts, &moved).unwrap();
            let (r, tr) = crate::geometry::transform_error(&fit, &t);
            assert!(r < 1e-9 && tr < 1e-12, "{r} {tr}");
        }
    }
}
