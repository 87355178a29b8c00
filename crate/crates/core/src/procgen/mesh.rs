//! Triangle meshes and the primitive builders used by the object generators.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::pointcloud::Aabb;

/// Triangles with an area below this are never emitted.
const MIN_TRIANGLE_AREA: f64 = 1e-14;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn triangle_vertices(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(&self.vertices)
    }

    pub fn push_vertex(&mut self, v: Vec3) -> usize {
        self.vertices.push(v);
        self.vertices.len() - 1
    }

    /// Adds a triangle unless it is degenerate.
    pub fn push_triangle(&mut self, a: usize, b: usize, c: usize) {
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        if 0.5 * (pb - pa).cross(pc - pa).norm() > MIN_TRIANGLE_AREA {
            self.triangles.push([a, b, c]);
        }
    }

    pub fn push_quad(&mut self, a: usize, b: usize, c: usize, d: usize) {
        self.push_triangle(a, b, c);
        self.push_triangle(a, c, d);
    }

    pub fn append(&mut self, other: &Mesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(other.triangles.iter().map(|t| t.map(|i| i + base)));
    }

    pub fn transformed(&self, t: &RigidTransform) -> Mesh {
        Mesh { vertices: self.vertices.iter().map(|v| t.apply(*v)).collect(), triangles: self.triangles.clone() }
    }

    pub fn scaled(&self, s: Vec3) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| Vec3::new(v.x * s.x, v.y * s.y, v.z * s.z)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Wavefront OBJ text with 1-based triangle indices.
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 20);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    /// Parses triangle-only OBJ text. Texture/normal indices are ignored.
    pub fn from_obj(text: &str) -> Result<Mesh> {
        let mut mesh = Mesh::new();
        for (line_no, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Invalid(format!("obj line {}: {e}", line_no + 1)))?;
                    if c.len() != 3 {
                        return Err(Error::Invalid(format!("obj line {}: vertex needs 3 coordinates", line_no + 1)));
                    }
                    mesh.vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Invalid(format!("obj line {}: {e}", line_no + 1)))?;
                    if idx.len() != 3 {
                        return Err(Error::Invalid(format!("obj line {}: only triangles are supported", line_no + 1)));
                    }
                    if idx.iter().any(|&i| i == 0 || i > mesh.vertices.len()) {
                        return Err(Error::Invalid(format!("obj line {}: vertex index out of range", line_no + 1)));
                    }
                    mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                _ => {}
            }
        }
        Ok(mesh)
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    pub fn read_obj(path: &Path) -> Result<Mesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::from_obj(&text)
    }
}

/// Surface of revolution about +z of a closed `(radius, z)` profile loop.
///
/// Profile vertices with zero radius collapse to a single axis vertex.
pub fn revolve(profile: &[(f64, f64)], segments: usize) -> Mesh {
    let mut mesh = Mesh::new();
    let rings: Vec<Vec<usize>> = profile
        .iter()
        .map(|&(r, z)| {
            if r <= 0.0 {
                vec![mesh.push_vertex(Vec3::new(0.0, 0.0, z))]
            } else {
                (0..segments)
                    .map(|j| {
                        let a = TAU * j as f64 / segments as f64;
                        mesh.push_vertex(Vec3::new(r * a.cos(), r * a.sin(), z))
                    })
                    .collect()
            }
        })
        .collect();
    for i in 0..profile.len() {
        let (a, b) = (&rings[i], &rings[(i + 1) % profile.len()]);
        match (a.len(), b.len()) {
            (1, 1) => {}
            (1, _) => {
                for j in 0..segments {
                    mesh.push_triangle(a[0], b[(j + 1) % segments], b[j]);
                }
            }
            (_, 1) => {
                for j in 0..segments {
                    mesh.push_triangle(a[j], a[(j + 1) % segments], b[0]);
                }
            }
            _ => {
                for j in 0..segments {
                    let k = (j + 1) % segments;
                    mesh.push_quad(a[j], a[k], b[k], b[j]);
                }
            }
        }
    }
    mesh
}

/// Axis-aligned box between `min` and `max`.
pub fn cuboid(min: Vec3, max: Vec3) -> Mesh {
    let mut m = Mesh::new();
    for i in 0..8 {
        m.push_vertex(Vec3::new(
            if i & 1 == 0 { min.x } else { max.x },
            if i & 2 == 0 { min.y } else { max.y },
            if i & 4 == 0 { min.z } else { max.z },
        ));
    }
    for [a, b, c, d] in [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]] {
        m.push_quad(a, b, c, d);
    }
    m
}

/// Closed cylinder of `radius` from `a` to `b`.
pub fn cylinder_between(a: Vec3, b: Vec3, radius: f64, segments: usize) -> Mesh {
    let len = (b - a).norm();
    let m = revolve(&[(0.0, 0.0), (radius, 0.0), (radius, len), (0.0, len)], segments);
    let rot = crate::geometry::UnitQuaternion::from_two_vectors(Vec3::Z, b - a);
    m.transformed(&RigidTransform::new(rot, a))
}

/// One cell of a [`holed_slab`]: a rectangle on the top face with an
/// optional blind circular hole at its center.
#[derive(Debug, Clone, Copy)]
pub struct SlabCell {
    pub center: (f64, f64),
    pub half_size: (f64, f64),
    pub hole: Option<HoleSpec>,
}

#[derive(Debug, Clone, Copy)]
pub struct HoleSpec {
    pub radius: f64,
    pub depth: f64,
}

/// Slab from `z = 0` to `z = thickness` whose top face is tiled by `cells`.
///
/// Holes are cut without booleans: the annulus between each hole rim and
/// its cell rectangle is triangulated ring by ring, then the hole wall and
/// floor are added.
pub fn holed_slab(cells: &[SlabCell], thickness: f64, segments: usize) -> Mesh {
    let mut m = Mesh::new();
    let top = thickness;
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for cell in cells {
        let (cx, cy) = cell.center;
        let (hw, hh) = cell.half_size;
        lo = (lo.0.min(cx - hw), lo.1.min(cy - hh));
        hi = (hi.0.max(cx + hw), hi.1.max(cy + hh));
        let corner = |sx: f64, sy: f64| Vec3::new(cx + sx * hw, cy + sy * hh, top);
        let Some(hole) = cell.hole else {
            let a = m.push_vertex(corner(-1.0, -1.0));
            let b = m.push_vertex(corner(1.0, -1.0));
            let c = m.push_vertex(corner(1.0, 1.0));
            let d = m.push_vertex(corner(-1.0, 1.0));
            m.push_quad(a, b, c, d);
            continue;
        };
        let phase = PI / 4.0;
        let angles: Vec<f64> = (0..segments).map(|j| phase + TAU * j as f64 / segments as f64).collect();
        let rim: Vec<usize> = angles
            .iter()
            .map(|a| m.push_vertex(Vec3::new(cx + hole.radius * a.cos(), cy + hole.radius * a.sin(), top)))
            .collect();
        let outer: Vec<usize> = angles
            .iter()
            .map(|a| {
                let (s, c) = a.sin_cos();
                let d = (hw / c.abs().max(1e-300)).min(hh / s.abs().max(1e-300));
                m.push_vertex(Vec3::new(cx + d * c, cy + d * s, top))
            })
            .collect();
        let corner_angles: Vec<(f64, Vec3)> = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .iter()
            .map(|&(sx, sy)| {
                let mut a = (sy * hh).atan2(sx * hw);
                while a < phase {
                    a += TAU;
                }
                (a, corner(sx, sy))
            })
            .collect();
        for j in 0..segments {
            let k = (j + 1) % segments;
            m.push_quad(rim[j], rim[k], outer[k], outer[j]);
            let a0 = angles[j];
            let a1 = if k == 0 { phase + TAU } else { angles[k] };
            for &(ca, cp) in &corner_angles {
                if ca > a0 + 1e-12 && ca < a1 - 1e-12 {
                    let ci = m.push_vertex(cp);
                    m.push_triangle(outer[j], ci, outer[k]);
                }
            }
        }
        // wall and floor
        let floor_z = top - hole.depth;
        let floor: Vec<usize> = angles
            .iter()
            .map(|a| m.push_vertex(Vec3::new(cx + hole.radius * a.cos(), cy + hole.radius * a.sin(), floor_z)))
            .collect();
        for j in 0..segments {
            let k = (j + 1) % segments;
            m.push_quad(rim[j], floor[j], floor[k], rim[k]);
        }
        let fc = m.push_vertex(Vec3::new(cx, cy, floor_z));
        for j in 0..segments {
            m.push_triangle(fc, floor[(j + 1) % segments], floor[j]);
        }
    }
    // sides and bottom
    let v = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    let quads = [
        [v(lo.0, lo.1, 0.0), v(hi.0, lo.1, 0.0), v(hi.0, hi.1, 0.0), v(lo.0, hi.1, 0.0)],
        [v(lo.0, lo.1, 0.0), v(lo.0, lo.1, top), v(hi.0, lo.1, top), v(hi.0, lo.1, 0.0)],
        [v(hi.0, lo.1, 0.0), v(hi.0, lo.1, top), v(hi.0, hi.1, top), v(hi.0, hi.1, 0.0)],
        [v(hi.0, hi.1, 0.0), v(hi.0, hi.1, top), v(lo.0, hi.1, top), v(lo.0, hi.1, 0.0)],
        [v(lo.0, hi.1, 0.0), v(lo.0, hi.1, top), v(lo.0, lo.1, top), v(lo.0, lo.1, 0.0)],
    ];
    for q in quads {
        let idx = q.map(|p| m.push_vertex(p));
        m.push_quad(idx[0], idx[1], idx[2], idx[3]);
    }
    m
}
