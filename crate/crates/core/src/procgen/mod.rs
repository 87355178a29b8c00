//! Parametric object generators with placement slots annotated at
//! generation time.
//!
//! Every object lives in its own frame: resting on the `z = 0` plane,
//! centered on the `z` axis. Axisymmetric objects have their symmetry axis
//! along `+z`.

pub mod mesh;

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
pub use mesh::Mesh;
use mesh::{cuboid, cylinder_between, holed_slab, revolve, HoleSpec, SlabCell};

/// Angular resolution of round features.
pub const ROUND_SEGMENTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Peg,
    HolePlate,
    Cup,
    Rack,
    Beaker,
    Vial,
    VialPlate,
    Ring,
    Lid,
    Pot,
    Plate,
    PlateRack,
    Stick,
}

impl Category {
    pub const ALL: [Category; 13] = [
        Category::Peg,
        Category::HolePlate,
        Category::Cup,
        Category::Rack,
        Category::Beaker,
        Category::Vial,
        Category::VialPlate,
        Category::Ring,
        Category::Lid,
        Category::Pot,
        Category::Plate,
        Category::PlateRack,
        Category::Stick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Peg => "peg",
            Category::HolePlate => "hole_plate",
            Category::Cup => "cup",
            Category::Rack => "rack",
            Category::Beaker => "beaker",
            Category::Vial => "vial",
            Category::VialPlate => "vial_plate",
            Category::Ring => "ring",
            Category::Lid => "lid",
            Category::Pot => "pot",
            Category::Plate => "plate",
            Category::PlateRack => "plate_rack",
            Category::Stick => "stick",
        }
    }

    /// Whether the generator builds a surface of revolution about `+z`.
    pub fn is_axisymmetric(self) -> bool {
        !matches!(self, Category::HolePlate | Category::VialPlate | Category::Rack | Category::PlateRack)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotType {
    Insert,
    Stack,
    Hang,
}

impl FromStr for SlotType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "insert" => Ok(SlotType::Insert),
            "stack" => Ok(SlotType::Stack),
            "hang" => Ok(SlotType::Hang),
            _ => Err(Error::Config(format!("unknown slot type `{s}`"))),
        }
    }
}

/// A location on a base object where another object can be placed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementSlot {
    /// Base-object frame, meters.
    pub center: Vec3,
    /// Unit symmetry/approach axis.
    pub axis: Vec3,
    pub slot_type: SlotType,
    /// Critical radius of the slot in meters: hole radius for inserts,
    /// support-face radius for stacks, pole radius for hangs.
    pub clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub category: Category,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub slots: Vec<PlacementSlot>,
}

impl ObjectSpec {
    pub fn id(&self) -> String {
        format!("{}-{:016x}", self.category, self.seed)
    }

    pub fn param(&self, name: &str) -> f64 {
        *self.params.get(name).unwrap_or_else(|| panic!("{} spec lacks parameter `{name}`", self.category))
    }
}

/// Inclusive `[low, high]` parameter ranges per category, plus the per-axis
/// scale interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcgenConfig {
    pub scale_range: [f64; 2],
    pub ranges: BTreeMap<Category, BTreeMap<String, [f64; 2]>>,
}

fn ranges(entries: &[(&str, f64, f64)]) -> BTreeMap<String, [f64; 2]> {
    entries.iter().map(|&(k, lo, hi)| (k.to_string(), [lo, hi])).collect()
}

impl Default for ProcgenConfig {
    fn default() -> Self {
        use Category::*;
        let mut m = BTreeMap::new();
        m.insert(
            Peg,
            ranges(&[
                ("shaft_radius", 0.003, 0.0055),
                ("shaft_length", 0.025, 0.045),
                ("head_ratio", 1.5, 1.9),
                ("head_height", 0.005, 0.009),
                ("edge_count", 5.0, 12.0),
            ]),
        );
        m.insert(
            HolePlate,
            ranges(&[
                ("width", 0.05, 0.08),
                ("length", 0.05, 0.08),
                ("thickness", 0.016, 0.025),
                ("hole_radius", 0.007, 0.011),
                ("depth_ratio", 0.5, 0.8),
            ]),
        );
        m.insert(
            VialPlate,
            ranges(&[
                ("hole_count", 2.0, 12.0),
                ("hole_radius", 0.0055, 0.009),
                ("wall", 0.005, 0.008),
                ("thickness", 0.016, 0.025),
                ("depth_ratio", 0.5, 0.8),
            ]),
        );
        m.insert(
            Vial,
            ranges(&[
                ("radius", 0.004, 0.0065),
                ("body_height", 0.03, 0.05),
                ("neck_ratio", 0.6, 0.8),
                ("neck_height", 0.003, 0.006),
                ("cap_ratio", 0.85, 1.0),
                ("cap_height", 0.004, 0.008),
            ]),
        );
        m.insert(Stick, ranges(&[("radius", 0.002, 0.004), ("length", 0.06, 0.12), ("tip_ratio", 0.4, 0.7)]));
        m.insert(
            Cup,
            ranges(&[("radius", 0.03, 0.045), ("height", 0.07, 0.11), ("wall", 0.003, 0.005), ("floor", 0.004, 0.008)]),
        );
        m.insert(
            Beaker,
            ranges(&[
                ("radius", 0.025, 0.04),
                ("height", 0.06, 0.1),
                ("wall", 0.0015, 0.003),
                ("floor", 0.003, 0.006),
                ("lip", 0.002, 0.004),
                ("lip_height", 0.002, 0.004),
            ]),
        );
        m.insert(
            Ring,
            ranges(&[("inner_radius", 0.007, 0.012), ("width", 0.003, 0.006), ("height", 0.004, 0.008)]),
        );
        m.insert(
            Lid,
            ranges(&[
                ("radius", 0.035, 0.055),
                ("thickness", 0.003, 0.006),
                ("knob_radius", 0.006, 0.01),
                ("knob_height", 0.006, 0.012),
            ]),
        );
        m.insert(
            Pot,
            ranges(&[("radius", 0.035, 0.06), ("height", 0.05, 0.09), ("wall", 0.003, 0.006), ("floor", 0.004, 0.008)]),
        );
        m.insert(Plate, ranges(&[("radius", 0.05, 0.08), ("thickness", 0.004, 0.008)]));
        m.insert(
            PlateRack,
            ranges(&[
                ("slat_count", 3.0, 6.0),
                ("slat_gap", 0.012, 0.02),
                ("slat_thickness", 0.003, 0.005),
                ("slat_height", 0.04, 0.07),
                ("depth", 0.08, 0.12),
                ("base_thickness", 0.008, 0.015),
            ]),
        );
        m.insert(
            Rack,
            ranges(&[
                ("pole_count", 1.0, 6.0),
                ("pole_radius", 0.003, 0.005),
                ("pole_length", 0.045, 0.07),
                ("post_width", 0.016, 0.024),
                ("post_height", 0.12, 0.2),
                ("base_width", 0.08, 0.12),
                ("base_thickness", 0.008, 0.015),
            ]),
        );
        ProcgenConfig { scale_range: [0.8, 1.25], ranges: m }
    }
}

impl ProcgenConfig {
    /// Checks ordering of every interval and that categories keep all the
    /// parameters their generator needs.
    pub fn validate(&self) -> Result<()> {
        let defaults = ProcgenConfig::default();
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return Err(Error::Config("procgen.scale_range must satisfy 0 < low <= high".into()));
        }
        for (cat, r) in &self.ranges {
            let known = &defaults.ranges[cat];
            for (k, [lo, hi]) in r {
                if !known.contains_key(k) {
                    return Err(Error::Config(format!("procgen.{cat}.{k}: unknown parameter")));
                }
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::Config(format!("procgen.{cat}.{k}: invalid range [{lo}, {hi}]")));
                }
            }
            if r.len() != known.len() {
                return Err(Error::Config(format!("procgen.{cat}: missing parameters")));
            }
        }
        Ok(())
    }

    /// Overrides single ranges, rejecting unknown categories and keys.
    pub fn set_range(&mut self, category: &str, key: &str, range: [f64; 2]) -> Result<()> {
        let cat: Category = category.parse().map_err(|_| Error::Config(format!("procgen.{category}: unknown category")))?;
        let entry = self.ranges.get_mut(&cat).ok_or_else(|| Error::Config(format!("procgen.{category}")))?;
        match entry.get_mut(key) {
            Some(r) => {
                *r = range;
                Ok(())
            }
            None => Err(Error::Config(format!("procgen.{category}.{key}: unknown parameter"))),
        }
    }
}

struct Draw<'a> {
    rng: ChaCha8Rng,
    ranges: &'a BTreeMap<String, [f64; 2]>,
    params: BTreeMap<String, f64>,
}

impl Draw<'_> {
    fn real(&mut self, k: &str) -> f64 {
        let [lo, hi] = self.ranges[k];
        let v = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
        self.params.insert(k.to_string(), v);
        v
    }

    fn count(&mut self, k: &str) -> usize {
        let [lo, hi] = self.ranges[k];
        let (lo, hi) = (lo.round() as i64, hi.round() as i64);
        let v = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
        self.params.insert(k.to_string(), v as f64);
        v.max(0) as usize
    }

    fn set(&mut self, k: &str, v: f64) {
        self.params.insert(k.to_string(), v);
    }
}

/// Generates the mesh and spec of one object. Identical `(category, seed,
/// config)` reproduce bit-identical results.
pub fn generate_object(category: Category, seed: u64, config: &ProcgenConfig) -> (Mesh, ObjectSpec) {
    let mut d = Draw { rng: ChaCha8Rng::seed_from_u64(seed), ranges: &config.ranges[&category], params: BTreeMap::new() };
    let [slo, shi] = config.scale_range;
    let scale = |d: &mut Draw| if shi > slo { d.rng.gen_range(slo..=shi) } else { slo };
    let sx = scale(&mut d);
    let sy = if category.is_axisymmetric() { sx } else { scale(&mut d) };
    let sz = scale(&mut d);
    d.set("scale_x", sx);
    d.set("scale_y", sy);
    d.set("scale_z", sz);
    let (mesh, slots) = build(category, &mut d, sx, sy, sz);
    (mesh, ObjectSpec { category, seed, params: d.params, slots })
}

/// Draws a seed from `rng` and generates from it.
pub fn generate_object_with_rng<R: Rng + ?Sized>(category: Category, rng: &mut R, config: &ProcgenConfig) -> (Mesh, ObjectSpec) {
    generate_object(category, rng.gen(), config)
}

/// Rebuilds the mesh for a stored spec.
pub fn regenerate_mesh(spec: &ObjectSpec, config: &ProcgenConfig) -> Mesh {
    generate_object(spec.category, spec.seed, config).0
}

/// All placement slots annotated on the object.
pub fn enumerate_slots(spec: &ObjectSpec) -> Vec<PlacementSlot> {
    spec.slots.clone()
}

fn open_container_profile(r: f64, h: f64, wall: f64, floor: f64) -> Vec<(f64, f64)> {
    vec![(0.0, 0.0), (r, 0.0), (r, h), (r - wall, h), (r - wall, floor), (0.0, floor)]
}

fn build(category: Category, d: &mut Draw, sx: f64, sy: f64, sz: f64) -> (Mesh, Vec<PlacementSlot>) {
    use Category::*;
    let up = Vec3::Z;
    match category {
        Peg => {
            let rs = d.real("shaft_radius") * sx;
            let len = d.real("shaft_length") * sz;
            let rh = rs * d.real("head_ratio");
            let hh = d.real("head_height") * sz;
            let n = d.count("edge_count").max(3);
            d.set("shaft_radius_scaled", rs);
            d.set("shaft_length_scaled", len);
            d.set("head_radius_scaled", rh);
            d.set("head_height_scaled", hh);
            let m = revolve(&[(0.0, 0.0), (rs, 0.0), (rs, len), (rh, len), (rh, len + hh), (0.0, len + hh)], n);
            (m, vec![])
        }
        Vial => {
            let r = d.real("radius") * sx;
            let h = d.real("body_height") * sz;
            let rn = r * d.real("neck_ratio");
            let hn = d.real("neck_height") * sz;
            let rc = r * d.real("cap_ratio");
            let hc = d.real("cap_height") * sz;
            for (k, v) in [("radius_scaled", r), ("body_height_scaled", h), ("neck_radius_scaled", rn)] {
                d.set(k, v);
            }
            d.set("neck_height_scaled", hn);
            d.set("cap_radius_scaled", rc);
            d.set("cap_height_scaled", hc);
            let m = revolve(
                &[(0.0, 0.0), (r, 0.0), (r, h), (rn, h), (rn, h + hn), (rc, h + hn), (rc, h + hn + hc), (0.0, h + hn + hc)],
                ROUND_SEGMENTS,
            );
            (m, vec![])
        }
        Stick => {
            let r = d.real("radius") * sx;
            let len = d.real("length") * sz;
            let rt = r * d.real("tip_ratio");
            d.set("radius_scaled", r);
            d.set("length_scaled", len);
            d.set("tip_radius_scaled", rt);
            let m = revolve(&[(0.0, 0.0), (r, 0.0), (r, 0.9 * len), (rt, len), (0.0, len)], ROUND_SEGMENTS);
            (m, vec![])
        }
        Ring => {
            let ri = d.real("inner_radius") * sx;
            let ro = ri + d.real("width") * sx;
            let h = d.real("height") * sz;
            d.set("inner_radius_scaled", ri);
            d.set("outer_radius_scaled", ro);
            d.set("height_scaled", h);
            let m = revolve(&[(ri, 0.0), (ro, 0.0), (ro, h), (ri, h)], ROUND_SEGMENTS);
            let slot = PlacementSlot { center: Vec3::new(0.0, 0.0, h), axis: up, slot_type: SlotType::Stack, clearance: ro };
            (m, vec![slot])
        }
        Lid => {
            let r = d.real("radius") * sx;
            let t = d.real("thickness") * sz;
            let rk = d.real("knob_radius") * sx;
            let kh = d.real("knob_height") * sz;
            d.set("radius_scaled", r);
            d.set("thickness_scaled", t);
            d.set("knob_radius_scaled", rk);
            d.set("knob_height_scaled", kh);
            let m = revolve(&[(0.0, 0.0), (r, 0.0), (r, t), (rk, t), (rk, t + kh), (0.0, t + kh)], ROUND_SEGMENTS);
            (m, vec![])
        }
        Plate => {
            let r = d.real("radius") * sx;
            let t = d.real("thickness") * sz;
            d.set("radius_scaled", r);
            d.set("thickness_scaled", t);
            let m = revolve(&[(0.0, 0.0), (r, 0.0), (r, t), (0.0, t)], ROUND_SEGMENTS);
            let slot = PlacementSlot { center: Vec3::new(0.0, 0.0, t), axis: up, slot_type: SlotType::Stack, clearance: r };
            (m, vec![slot])
        }
        Pot => {
            let r = d.real("radius") * sx;
            let h = d.real("height") * sz;
            let w = d.real("wall");
            let f = d.real("floor") * sz;
            d.set("radius_scaled", r);
            d.set("height_scaled", h);
            d.set("floor_scaled", f);
            let m = revolve(&open_container_profile(r, h, w, f), ROUND_SEGMENTS);
            let slot = PlacementSlot { center: Vec3::new(0.0, 0.0, h), axis: up, slot_type: SlotType::Stack, clearance: r };
            (m, vec![slot])
        }
        Cup => {
            let r = d.real("radius") * sx;
            let h = d.real("height") * sz;
            let w = d.real("wall");
            let f = d.real("floor") * sz;
            d.set("radius_scaled", r);
            d.set("height_scaled", h);
            d.set("floor_scaled", f);
            d.set("cavity_depth", h - f);
            let m = revolve(&open_container_profile(r, h, w, f), ROUND_SEGMENTS);
            let slot = PlacementSlot {
                center: Vec3::new(0.0, 0.0, 0.5 * (f + h)),
                axis: up,
                slot_type: SlotType::Insert,
                clearance: r - w,
            };
            (m, vec![slot])
        }
        Beaker => {
            let r = d.real("radius") * sx;
            let h = d.real("height") * sz;
            let w = d.real("wall");
            let f = d.real("floor") * sz;
            let lip = d.real("lip");
            let lh = d.real("lip_height") * sz;
            d.set("radius_scaled", r);
            d.set("height_scaled", h + lh);
            d.set("floor_scaled", f);
            d.set("cavity_depth", h + lh - f);
            let m = revolve(
                &[(0.0, 0.0), (r, 0.0), (r, h), (r + lip, h), (r + lip, h + lh), (r - w, h + lh), (r - w, f), (0.0, f)],
                ROUND_SEGMENTS,
            );
            let slot = PlacementSlot {
                center: Vec3::new(0.0, 0.0, 0.5 * (f + h + lh)),
                axis: up,
                slot_type: SlotType::Insert,
                clearance: r - w,
            };
            (m, vec![slot])
        }
        HolePlate => {
            let w = d.real("width") * sx;
            let l = d.real("length") * sy;
            let t = d.real("thickness") * sz;
            let r = d.real("hole_radius");
            let depth = t * d.real("depth_ratio");
            d.set("width_scaled", w);
            d.set("length_scaled", l);
            d.set("thickness_scaled", t);
            d.set("cavity_depth", depth);
            let cell = SlabCell { center: (0.0, 0.0), half_size: (0.5 * w, 0.5 * l), hole: Some(HoleSpec { radius: r, depth }) };
            let m = holed_slab(&[cell], t, ROUND_SEGMENTS);
            let slot = PlacementSlot {
                center: Vec3::new(0.0, 0.0, t - 0.5 * depth),
                axis: up,
                slot_type: SlotType::Insert,
                clearance: r,
            };
            (m, vec![slot])
        }
        VialPlate => {
            let n = d.count("hole_count").max(1);
            let r = d.real("hole_radius");
            let wall = d.real("wall");
            let t = d.real("thickness") * sz;
            let depth = t * d.real("depth_ratio");
            let cols = (n as f64).sqrt().ceil() as usize;
            let rows = n.div_ceil(cols);
            let min_pitch = 2.0 * r + wall;
            let (px, py) = ((min_pitch * sx).max(min_pitch), (min_pitch * sy).max(min_pitch));
            d.set("pitch_x", px);
            d.set("pitch_y", py);
            d.set("rows", rows as f64);
            d.set("cols", cols as f64);
            d.set("thickness_scaled", t);
            d.set("cavity_depth", depth);
            let mut cells = Vec::with_capacity(rows * cols);
            let mut slots = Vec::with_capacity(n);
            for i in 0..rows * cols {
                let (row, col) = (i / cols, i % cols);
                let cx = (col as f64 - 0.5 * (cols as f64 - 1.0)) * px;
                let cy = (row as f64 - 0.5 * (rows as f64 - 1.0)) * py;
                let hole = (i < n).then_some(HoleSpec { radius: r, depth });
                if hole.is_some() {
                    slots.push(PlacementSlot {
                        center: Vec3::new(cx, cy, t - 0.5 * depth),
                        axis: up,
                        slot_type: SlotType::Insert,
                        clearance: r,
                    });
                }
                cells.push(SlabCell { center: (cx, cy), half_size: (0.5 * px, 0.5 * py), hole });
            }
            (holed_slab(&cells, t, ROUND_SEGMENTS), slots)
        }
        Rack => {
            let n = d.count("pole_count").max(1);
            let pr = d.real("pole_radius");
            let pl = d.real("pole_length") * sx;
            let pw = d.real("post_width") * sx;
            let ph = d.real("post_height") * sz;
            let bw = d.real("base_width") * sx;
            let bl = bw * sy / sx;
            let bt = d.real("base_thickness") * sz;
            let phase = d.rng.gen_range(0.0..TAU);
            d.set("phase", phase);
            d.set("post_height_scaled", ph);
            d.set("base_thickness_scaled", bt);
            d.set("pole_length_scaled", pl);
            d.set("post_width_scaled", pw);
            let mut m = cuboid(Vec3::new(-0.5 * bw, -0.5 * bl, 0.0), Vec3::new(0.5 * bw, 0.5 * bl, bt));
            m.append(&cuboid(Vec3::new(-0.5 * pw, -0.5 * pw, bt), Vec3::new(0.5 * pw, 0.5 * pw, bt + ph)));
            let mut slots = Vec::with_capacity(n);
            for i in 0..n {
                let az = phase + TAU * i as f64 / n as f64;
                let dir = Vec3::new(az.cos(), az.sin(), 0.0);
                // poles spread over the upper half of the post
                let frac = if n == 1 { 0.75 } else { 0.5 + 0.45 * i as f64 / (n - 1) as f64 };
                let z = bt + ph * frac;
                let root = Vec3::new(0.0, 0.0, z) + dir * (0.25 * pw);
                let attach = 0.5 * pw;
                let tip = Vec3::new(0.0, 0.0, z) + dir * (attach + pl);
                m.append(&cylinder_between(root, tip, pr, 16));
                slots.push(PlacementSlot {
                    center: Vec3::new(0.0, 0.0, z) + dir * (attach + 0.5 * pl),
                    axis: dir,
                    slot_type: SlotType::Hang,
                    clearance: pr,
                });
            }
            (m, slots)
        }
        PlateRack => {
            let n = d.count("slat_count").max(2);
            let gap = d.real("slat_gap");
            let st = d.real("slat_thickness");
            let sh = d.real("slat_height") * sz;
            let depth = d.real("depth") * sy;
            let bt = d.real("base_thickness") * sz;
            let margin = 0.01 * sx;
            let span = n as f64 * st + (n - 1) as f64 * gap;
            let width = span + 2.0 * margin;
            d.set("width", width);
            d.set("base_thickness_scaled", bt);
            d.set("slat_height_scaled", sh);
            let mut m = cuboid(Vec3::new(-0.5 * width, -0.5 * depth, 0.0), Vec3::new(0.5 * width, 0.5 * depth, bt));
            let mut slots = Vec::with_capacity(n - 1);
            let x0 = -0.5 * span;
            for i in 0..n {
                let xs = x0 + i as f64 * (st + gap);
                m.append(&cuboid(Vec3::new(xs, -0.5 * depth, bt), Vec3::new(xs + st, 0.5 * depth, bt + sh)));
                if i + 1 < n {
                    slots.push(PlacementSlot {
                        center: Vec3::new(xs + st + 0.5 * gap, 0.0, bt + 0.5 * sh),
                        axis: Vec3::X,
                        slot_type: SlotType::Insert,
                        clearance: 0.5 * gap,
                    });
                }
            }
            (m, slots)
        }
    }
}

/// Rotational symmetry of a placed object about its own `+z` axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Continuous,
    Discrete(u32),
    None,
}

/// Radial profile of a placeable axisymmetric object, bottom to top.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    /// `(z_from, z_to, radius)` bands along the own `+z` axis.
    pub bands: Vec<(f64, f64, f64)>,
    pub symmetry: Symmetry,
    /// Free inner radius for objects that can be threaded onto a pole.
    pub inner_radius: Option<f64>,
}

impl PlacedShape {
    pub fn height(&self) -> f64 {
        self.bands.last().map_or(0.0, |b| b.1)
    }

    pub fn max_radius(&self) -> f64 {
        self.bands.iter().map(|b| b.2).fold(0.0, f64::max)
    }

    pub fn footprint(&self) -> f64 {
        self.bands.first().map_or(0.0, |b| b.2)
    }

    /// Radius of the smallest sphere about the band-stack midpoint that
    /// encloses the object.
    pub fn bounding_radius(&self) -> f64 {
        let h = self.height();
        (self.max_radius().powi(2) + (0.5 * h).powi(2)).sqrt()
    }
}

/// Profile of an object that can be placed, or `None` for base-only
/// categories.
pub fn placed_shape(spec: &ObjectSpec) -> Option<PlacedShape> {
    use Category::*;
    let p = |k: &str| spec.param(k);
    Some(match spec.category {
        Peg => {
            let (l, hh) = (p("shaft_length_scaled"), p("head_height_scaled"));
            PlacedShape {
                bands: vec![(0.0, l, p("shaft_radius_scaled")), (l, l + hh, p("head_radius_scaled"))],
                symmetry: Symmetry::Discrete(p("edge_count") as u32),
                inner_radius: None,
            }
        }
        Vial => {
            let (h, hn, hc) = (p("body_height_scaled"), p("neck_height_scaled"), p("cap_height_scaled"));
            PlacedShape {
                bands: vec![
                    (0.0, h, p("radius_scaled")),
                    (h, h + hn, p("neck_radius_scaled")),
                    (h + hn, h + hn + hc, p("cap_radius_scaled")),
                ],
                symmetry: Symmetry::Continuous,
                inner_radius: None,
            }
        }
        Stick => PlacedShape {
            bands: vec![(0.0, p("length_scaled"), p("radius_scaled"))],
            symmetry: Symmetry::Continuous,
            inner_radius: None,
        },
        Ring => PlacedShape {
            bands: vec![(0.0, p("height_scaled"), p("outer_radius_scaled"))],
            symmetry: Symmetry::Continuous,
            inner_radius: Some(p("inner_radius_scaled")),
        },
        Lid => {
            let t = p("thickness_scaled");
            PlacedShape {
                bands: vec![(0.0, t, p("radius_scaled")), (t, t + p("knob_height_scaled"), p("knob_radius_scaled"))],
                symmetry: Symmetry::Continuous,
                inner_radius: None,
            }
        }
        Plate => PlacedShape {
            bands: vec![(0.0, p("thickness_scaled"), p("radius_scaled"))],
            symmetry: Symmetry::Continuous,
            inner_radius: None,
        },
        HolePlate | Cup | Rack | Beaker | VialPlate | Pot | PlateRack => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{crop_sphere, sample_mesh_surface};

    fn cfg() -> ProcgenConfig {
        ProcgenConfig::default()
    }

    #[test]
    fn vial_plate_slots_match_hole_count() {
        for seed in 0..50 {
            let (_, spec) = generate_object(Category::VialPlate, seed, &cfg());
            let n = spec.param("hole_count") as usize;
            assert!((2..=12).contains(&n));
            assert_eq!(spec.slots.len(), n);
            assert!(spec.slots.iter().all(|s| s.slot_type == SlotType::Insert));
            for (i, a) in spec.slots.iter().enumerate() {
                for b in &spec.slots[i + 1..] {
                    assert!(a.center.distance(b.center) >= 2.0 * a.clearance);
                }
            }
        }
    }

    #[test]
    fn rack_has_one_hang_slot_per_pole() {
        for seed in 0..30 {
            let (_, spec) = generate_object(Category::Rack, seed, &cfg());
            let n = spec.param("pole_count") as usize;
            assert!((1..=6).contains(&n));
            assert_eq!(spec.slots.len(), n);
            assert!(spec.slots.iter().all(|s| s.slot_type == SlotType::Hang && (s.axis.norm() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for cat in Category::ALL {
            let (m1, s1) = generate_object(cat, 42, &cfg());
            let (m2, s2) = generate_object(cat, 42, &cfg());
            assert_eq!(m1, m2);
            assert_eq!(s1, s2);
            assert_eq!(regenerate_mesh(&s1, &cfg()), m1);
        }
    }

    #[test]
    fn placed_objects_own_no_slots() {
        for cat in [Category::Peg, Category::Vial, Category::Stick, Category::Lid] {
            let (_, spec) = generate_object(cat, 1, &cfg());
            assert!(enumerate_slots(&spec).is_empty());
        }
        let (_, ring) = generate_object(Category::Ring, 1, &cfg());
        let slots = enumerate_slots(&ring);
        assert_eq!(slots.len(), 1);
        assert_eq!(slots[0].slot_type, SlotType::Stack);
        assert_eq!(slots[0].center, Vec3::new(0.0, 0.0, ring.param("height_scaled")));
    }

    #[test]
    fn meshes_are_clean_and_slots_inside_bounds() {
        for cat in Category::ALL {
            for seed in 0..10 {
                let (m, spec) = generate_object(cat, seed, &cfg());
                assert!(m.triangles.iter().flatten().all(|&i| i < m.vertices.len()));
                assert!((0..m.triangles.len()).all(|t| m.triangle_area(t) > 0.0), "{cat}");
                let bb = m.aabb().unwrap();
                for s in &spec.slots {
                    assert!(s.clearance > 0.0);
                    assert!(bb.inflated(s.clearance).contains(s.center), "{cat} seed {seed}");
                }
                let sx = spec.param("scale_x");
                assert!((0.8..=1.25).contains(&sx));
            }
        }
    }

    #[test]
    fn insert_slots_are_empty_cavities() {
        for cat in [Category::HolePlate, Category::VialPlate, Category::Cup, Category::Beaker, Category::PlateRack] {
            for seed in 0..5 {
                let (m, spec) = generate_object(cat, seed, &cfg());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pc = sample_mesh_surface(&m, 40_000, &mut rng).unwrap();
                for s in &spec.slots {
                    let half_depth = if cat == Category::PlateRack { s.clearance } else { 0.5 * spec.param("cavity_depth") };
                    let Ok(crop) = crop_sphere(&pc, s.center, s.clearance.max(half_depth)) else { continue };
                    for p in &crop.points {
                        let rel = *p - s.center;
                        let along = rel.dot(s.axis);
                        let radial = (rel - s.axis * along).norm();
                        if along.abs() < half_depth - 1e-6 {
                            assert!(radial >= 0.9 * s.clearance, "{cat} seed {seed}: point {p:?} inside cavity");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let mut c = cfg();
        assert!(c.set_range("peg", "shaft_radius", [0.004, 0.005]).is_ok());
        assert!(c.set_range("peg", "bogus", [0.0, 1.0]).is_err());
        assert!(c.set_range("teapot", "radius", [0.0, 1.0]).is_err());
        assert!(c.validate().is_ok());
    }
}
