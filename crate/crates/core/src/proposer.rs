//! Placement-location proposals: an oracle reading the generator's slot
//! annotations and a geometric heuristic working on the base cloud alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::pointcloud::PointCloud;
use crate::procgen::{ObjectSpec, SlotType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Oracle,
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// World frame, meters.
    pub location: Vec3,
    pub score: f64,
    pub source: ProposalSource,
}

/// What a proposer may look at.
#[derive(Debug, Clone, Copy)]
pub struct ProposalScene<'a> {
    pub base: &'a ObjectSpec,
    pub base_pose: RigidTransform,
    /// Base cloud, world frame.
    pub cloud: &'a PointCloud,
    pub slot_type: SlotType,
}

/// Proposal contract. `query` carries a free-text description of the
/// desired placement; the shipped proposers ignore it.
pub trait Proposer {
    fn propose(&self, scene: &ProposalScene, query: &str) -> Result<Vec<Proposal>>;
}

/// One proposal per unblocked slot at its world-frame center.
pub fn propose_oracle(base: &ObjectSpec, base_pose: &RigidTransform, blocked: &[usize]) -> Result<Vec<Proposal>> {
    let out: Vec<Proposal> = base
        .slots
        .iter()
        .enumerate()
        .filter(|(i, _)| !blocked.contains(i))
        .map(|(_, s)| Proposal { location: base_pose.apply(s.center), score: 1.0, source: ProposalSource::Oracle })
        .collect();
    if out.is_empty() {
        return Err(Error::NoPlacements);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleProposer {
    pub blocked: Vec<usize>,
}

impl Proposer for OracleProposer {
    fn propose(&self, scene: &ProposalScene, _query: &str) -> Result<Vec<Proposal>> {
        propose_oracle(scene.base, &scene.base_pose, &self.blocked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicConfig {
    /// Horizontal grid cell edge, meters.
    pub grid_cell: f64,
    /// Minimum drop below the surrounding ring for a cavity, meters.
    pub depth_threshold: f64,
    /// Height band that counts as "the same level", meters.
    pub level_tolerance: f64,
    /// Widest cavity mouth searched for, meters.
    pub max_mouth_radius: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig { grid_cell: 0.003, depth_threshold: 0.003, level_tolerance: 0.002, max_mouth_radius: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeuristicProposer {
    pub config: HeuristicConfig,
}

impl Proposer for HeuristicProposer {
    fn propose(&self, scene: &ProposalScene, _query: &str) -> Result<Vec<Proposal>> {
        propose_heuristic(scene.cloud, scene.slot_type, &self.config)
    }
}

type Cell = (i64, i64);

/// Max height per occupied cell of a horizontal grid.
struct HeightGrid {
    cell: f64,
    heights: BTreeMap<Cell, f64>,
}

impl HeightGrid {
    fn new(pc: &PointCloud, cell: f64) -> Self {
        let mut heights: BTreeMap<Cell, f64> = BTreeMap::new();
        for p in &pc.points {
            let key = ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
            let h = heights.entry(key).or_insert(f64::NEG_INFINITY);
            *h = h.max(p.z);
        }
        HeightGrid { cell, heights }
    }

    fn center(&self, c: Cell) -> (f64, f64) {
        ((c.0 as f64 + 0.5) * self.cell, (c.1 as f64 + 0.5) * self.cell)
    }

    fn ring(&self, c: Cell, radius: i64) -> impl Iterator<Item = (Cell, f64)> + '_ {
        (-radius..=radius)
            .flat_map(move |dx| (-radius..=radius).map(move |dy| (dx, dy)))
            .filter(|&(dx, dy)| (dx, dy) != (0, 0))
            .filter_map(move |(dx, dy)| {
                let n = (c.0 + dx, c.1 + dy);
                self.heights.get(&n).map(|&h| (n, h))
            })
    }
}

/// Groups 8-connected cells, in sorted order.
fn components(cells: &BTreeSet<Cell>) -> Vec<Vec<Cell>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &start in cells {
        if !seen.insert(start) {
            continue;
        }
        let mut group = vec![start];
        let mut i = 0;
        while i < group.len() {
            let c = group[i];
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let n = (c.0 + dx, c.1 + dy);
                    if cells.contains(&n) && seen.insert(n) {
                        group.push(n);
                    }
                }
            }
            i += 1;
        }
        group.sort_unstable();
        out.push(group);
    }
    out
}

/// Grid heuristic over the gravity-aligned height map of `pc`.
///
/// * insert: cells with a wall at least `depth_threshold` higher in all
///   eight grid directions (cavity mouths), located at mid-depth.
/// * stack: plateaus of local maxima, located on the plateau.
/// * hang: the free ends of thin elevated runs, away from the cloud center.
///
/// Adjacent detections merge into one proposal at their centroid. Scores
/// are prominences normalized by the largest one.
pub fn propose_heuristic(pc: &PointCloud, hint: SlotType, config: &HeuristicConfig) -> Result<Vec<Proposal>> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(config.grid_cell > 0.0) {
        return Err(Error::Invalid(format!("grid_cell must be positive, got {}", config.grid_cell)));
    }
    let grid = HeightGrid::new(pc, config.grid_cell);
    let raw = match hint {
        SlotType::Insert | SlotType::Stack => cell_detections(&grid, hint, config),
        SlotType::Hang => {
            let c = pc.centroid().expect("non-empty");
            hang_tips(&grid, (c.x, c.y), config)
        }
    };
    let best = raw.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(raw
        .into_iter()
        .map(|(location, p)| Proposal {
            location,
            score: if best > 0.0 { (p / best).clamp(0.0, 1.0) } else { 1.0 },
            source: ProposalSource::Heuristic,
        })
        .collect())
}

const DIRECTIONS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

fn cell_detections(grid: &HeightGrid, hint: SlotType, config: &HeuristicConfig) -> Vec<(Vec3, f64)> {
    let mut detected = BTreeSet::new();
    for (&c, &h) in &grid.heights {
        let hit = if hint == SlotType::Insert {
            let reach = (config.max_mouth_radius / grid.cell).ceil() as i64 + 1;
            DIRECTIONS.iter().all(|&(dx, dy)| {
                (1..=reach).any(|k| grid.heights.get(&(c.0 + k * dx, c.1 + k * dy)).is_some_and(|&r| r - h >= config.depth_threshold))
            })
        } else {
            grid.ring(c, 1).all(|(_, r)| r <= h + config.level_tolerance)
        };
        if hit {
            detected.insert(c);
        }
    }
    let mut raw = Vec::new();
    // a lone low cell is more likely a sampling gap than a cavity
    let min_cells = if hint == SlotType::Insert { 2 } else { 1 };
    for group in components(&detected).into_iter().filter(|g| g.len() >= min_cells) {
        let n = group.len() as f64;
        let (sx, sy) = group.iter().map(|&c| grid.center(c)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        let members: BTreeSet<Cell> = group.iter().copied().collect();
        let surround: Vec<f64> = group
            .iter()
            .flat_map(|&c| grid.ring(c, 1))
            .filter(|(n, _)| !members.contains(n))
            .map(|(_, h)| h)
            .collect();
        let inner_max = group.iter().map(|c| grid.heights[c]).fold(f64::NEG_INFINITY, f64::max);
        let inner_min = group.iter().map(|c| grid.heights[c]).fold(f64::INFINITY, f64::min);
        let (z, prominence) = if hint == SlotType::Insert {
            let rim = surround.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0.5 * (rim + inner_min), rim - inner_min)
        } else {
            let low = surround.iter().copied().fold(inner_max, f64::min);
            (inner_max, inner_max - low)
        };
        raw.push((Vec3::new(sx / n, sy / n, z), prominence));
    }
    raw
}

/// Minimum length-to-width ratio of a run that counts as a protrusion.
const MIN_ELONGATION: f64 = 2.5;

fn hang_tips(grid: &HeightGrid, center: (f64, f64), config: &HeuristicConfig) -> Vec<(Vec3, f64)> {
    // level sets: 8-connected cells whose heights step by at most the tolerance
    let mut seen = BTreeSet::new();
    let mut raw = Vec::new();
    for &start in grid.heights.keys() {
        if !seen.insert(start) {
            continue;
        }
        let mut group = vec![start];
        let mut i = 0;
        while i < group.len() {
            let c = group[i];
            let h = grid.heights[&c];
            for (n, hn) in grid.ring(c, 1) {
                if (hn - h).abs() <= config.level_tolerance && seen.insert(n) {
                    group.push(n);
                }
            }
            i += 1;
        }
        if group.len() < 3 {
            continue;
        }
        let members: BTreeSet<Cell> = group.iter().copied().collect();
        let top = group.iter().map(|c| grid.heights[c]).fold(f64::NEG_INFINITY, f64::max);
        // elevated: most outside neighbors are empty or clearly lower
        let (mut outside, mut below) = (0usize, 0usize);
        for &c in &group {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let n = (c.0 + dx, c.1 + dy);
                    if members.contains(&n) {
                        continue;
                    }
                    outside += 1;
                    if grid.heights.get(&n).is_none_or(|&h| h < grid.heights[&c] - config.depth_threshold) {
                        below += 1;
                    }
                }
            }
        }
        if 2 * below < outside {
            continue;
        }
        let pts: Vec<(f64, f64)> = group.iter().map(|&c| grid.center(c)).collect();
        let n = pts.len() as f64;
        let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for p in &pts {
            let (dx, dy) = (p.0 - mx, p.1 - my);
            sxx += dx * dx;
            sxy += dx * dy;
            syy += dy * dy;
        }
        let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        let (ux, uy) = (theta.cos(), theta.sin());
        let along: Vec<f64> = pts.iter().map(|p| (p.0 - mx) * ux + (p.1 - my) * uy).collect();
        let across: Vec<f64> = pts.iter().map(|p| -(p.0 - mx) * uy + (p.1 - my) * ux).collect();
        let span = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
        let length = span(&along) + grid.cell;
        let width = span(&across) + grid.cell;
        if length < MIN_ELONGATION * width {
            continue;
        }
        // the free end is the one farther from the cloud center
        let lo = along.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = along.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let end_dist = |a: f64| ((mx + a * ux - center.0).powi(2) + (my + a * uy - center.1).powi(2)).sqrt();
        let tip = if end_dist(hi) >= end_dist(lo) { hi } else { lo };
        let near: Vec<&(f64, f64)> = pts.iter().zip(&along).filter(|(_, &a)| (a - tip).abs() <= grid.cell).map(|(p, _)| p).collect();
        let k = near.len() as f64;
        let (tx, ty) = near.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / k, a.1 + p.1 / k));
        raw.push((Vec3::new(tx, ty, top), length));
    }
    raw
}

pub fn proposals_to_json(proposals: &[Proposal]) -> Result<String> {
    Ok(serde_json::to_string_pretty(proposals)?)
}
