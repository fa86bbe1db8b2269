//! Procedural rooms with box furniture, goal-directed walking episodes with
//! gaze, and the on-disk dataset format.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json                  format version, seed, horizon, file list + SHA-256
//! scenes/scene_000.cloud         binary point cloud (header + x[n], y[n], z[n] as f64 LE)
//! scenes/scene_000.spec.json     SceneSpec
//! episodes/episode_00000.json    EpisodeRecord
//! ```

use std::collections::BinaryHeap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::{BodyModel, HEAD_JOINT, PELVIS_HEIGHT};
use crate::error::{Error, Result};
use crate::rotation::yaw_quaternion;
use crate::types::{GazeSequence, HorizonConfig, MotionSequence, PoseState, ScenePointCloud, EMBEDDING_DIM};

pub const MIN_SCENE_POINTS: usize = 512;
pub const GRID_CELL: f64 = 0.1;
pub const AGENT_RADIUS: f64 = 0.3;
pub const GAZE_NOISE: f64 = 0.05;
pub const MAX_START_ATTEMPTS: usize = 20;
const SMOOTH_WINDOW: usize = 5;

/// Axis-aligned box standing on the floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    /// Footprint center (x, y).
    pub center: [f64; 2],
    /// Extents (x, y, z), meters.
    pub size: [f64; 3],
}

impl BoxObject {
    /// Horizontal distance from `p` to the footprint (0 inside).
    pub fn footprint_distance(&self, p: [f64; 2]) -> f64 {
        let dx = ((p[0] - self.center[0]).abs() - self.size[0] / 2.0).max(0.0);
        let dy = ((p[1] - self.center[1]).abs() - self.size[1] / 2.0).max(0.0);
        dx.hypot(dy)
    }

    fn gap(&self, other: &BoxObject) -> f64 {
        let dx = ((self.center[0] - other.center[0]).abs() - (self.size[0] + other.size[0]) / 2.0).max(0.0);
        let dy = ((self.center[1] - other.center[1]).abs() - (self.size[1] + other.size[1]) / 2.0).max(0.0);
        if dx == 0.0 && dy == 0.0 {
            // Overlapping footprints report a negative gap.
            -1.0
        } else {
            dx.hypot(dy)
        }
    }

    pub fn center3(&self) -> [f64; 3] {
        [self.center[0], self.center[1], self.size[2] / 2.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalObject {
    pub label: String,
    pub bounds: BoxObject,
}

/// Room `[-x/2, x/2] × [-y/2, y/2] × [0, z]` with furniture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: [f64; 3],
    pub obstacles: Vec<BoxObject>,
    pub goals: Vec<GoalObject>,
    pub point_count: usize,
}

const LABELS: [&str; 7] = ["table", "chair", "sofa", "cabinet", "bed", "desk", "shelf"];

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("room extents must be positive"));
        }
        if self.point_count < MIN_SCENE_POINTS {
            return Err(Error::invalid(format!(
                "scene needs at least {MIN_SCENE_POINTS} points, got {}",
                self.point_count
            )));
        }
        if self.goals.is_empty() {
            return Err(Error::invalid("scene has no goal objects"));
        }
        let boxes: Vec<&BoxObject> = self.all_boxes().collect();
        for b in &boxes {
            let inside = (b.center[0].abs() + b.size[0] / 2.0) <= self.room[0] / 2.0
                && (b.center[1].abs() + b.size[1] / 2.0) <= self.room[1] / 2.0
                && b.size[2] <= self.room[2]
                && b.size.iter().all(|&s| s > 0.0);
            if !inside {
                return Err(Error::invalid("object lies outside the room"));
            }
        }
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if boxes[i].gap(boxes[j]) < 0.0 {
                    return Err(Error::invalid("objects overlap"));
                }
            }
        }
        Ok(())
    }

    /// Obstacles followed by goal boxes.
    pub fn all_boxes(&self) -> impl Iterator<Item = &BoxObject> {
        self.obstacles.iter().chain(self.goals.iter().map(|g| &g.bounds))
    }

    /// Random furnished room: three goal objects and two or three obstacles,
    /// separated by at least one meter, with every goal approachable from the
    /// main free-space region.
    pub fn random(seed: u64, point_count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let spec = Self::random_layout(&mut rng, point_count);
            if spec.is_navigable() {
                return spec;
            }
        }
    }

    /// True when every goal has approach cells in the largest free region.
    pub fn is_navigable(&self) -> bool {
        let grid = Grid::new(self);
        let (labels, largest) = grid.components();
        let Some(largest) = largest else { return false };
        self.goals
            .iter()
            .all(|g| grid.approach_cells(g).iter().any(|&i| labels[i] == Some(largest)))
    }

    fn random_layout(rng: &mut ChaCha8Rng, point_count: usize) -> Self {
        let room = [rng.random_range(7.0..9.0), rng.random_range(5.5..7.0), 2.6];
        let n_obstacles = rng.random_range(2..=3);
        let mut boxes: Vec<BoxObject> = Vec::new();
        let total = 3 + n_obstacles;
        let mut guard = 0;
        while boxes.len() < total {
            guard += 1;
            let scale = if guard > 2000 { 0.5 } else { 1.0 };
            let size = [
                rng.random_range(0.5..1.6) * scale,
                rng.random_range(0.5..1.6) * scale,
                rng.random_range(0.4..1.8),
            ];
            let hx = room[0] / 2.0 - size[0] / 2.0 - 0.1;
            let hy = room[1] / 2.0 - size[1] / 2.0 - 0.1;
            let b = BoxObject {
                center: [rng.random_range(-hx..hx), rng.random_range(-hy..hy)],
                size,
            };
            if boxes.iter().all(|o| o.gap(&b) >= 1.0) {
                boxes.push(b);
            }
        }
        let mut labels: Vec<&str> = LABELS.to_vec();
        let goals = (0..3)
            .map(|_| {
                let i = rng.random_range(0..labels.len());
                GoalObject {
                    label: labels.remove(i).to_string(),
                    bounds: boxes.pop().expect("enough boxes"),
                }
            })
            .collect();
        Self {
            room,
            obstacles: boxes,
            goals,
            point_count,
        }
    }
}

/// Planar rectangle `origin + a·u + b·v`, `a, b ∈ [0, 1]`, with `u ⟂ v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub origin: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl Face {
    pub fn area(&self) -> f64 {
        dot(self.u, self.u).sqrt() * dot(self.v, self.v).sqrt()
    }

    pub fn point(&self, a: f64, b: f64) -> [f64; 3] {
        std::array::from_fn(|i| self.origin[i] + a * self.u[i] + b * self.v[i])
    }

    /// Closest point of the rectangle to `p`.
    pub fn project(&self, p: [f64; 3]) -> [f64; 3] {
        let d = sub(p, self.origin);
        let a = (dot(d, self.u) / dot(self.u, self.u)).clamp(0.0, 1.0);
        let b = (dot(d, self.v) / dot(self.v, self.v)).clamp(0.0, 1.0);
        self.point(a, b)
    }

    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let q = self.project(p);
        dot(sub(p, q), sub(p, q)).sqrt()
    }

    /// Ray parameter of the intersection with `origin + t·dir`, if any.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let n = cross(self.u, self.v);
        let denom = dot(n, dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = dot(n, sub(self.origin, origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let hit: [f64; 3] = std::array::from_fn(|i| origin[i] + t * dir[i]);
        let d = sub(hit, self.origin);
        let a = dot(d, self.u) / dot(self.u, self.u);
        let b = dot(d, self.v) / dot(self.v, self.v);
        ((-1e-12..=1.0 + 1e-12).contains(&a) && (-1e-12..=1.0 + 1e-12).contains(&b)).then_some(t)
    }
}

fn box_faces(b: &BoxObject) -> [Face; 5] {
    let (x0, y0) = (b.center[0] - b.size[0] / 2.0, b.center[1] - b.size[1] / 2.0);
    let (sx, sy, sz) = (b.size[0], b.size[1], b.size[2]);
    [
        Face { origin: [x0, y0, sz], u: [sx, 0.0, 0.0], v: [0.0, sy, 0.0] },
        Face { origin: [x0, y0, 0.0], u: [sx, 0.0, 0.0], v: [0.0, 0.0, sz] },
        Face { origin: [x0, y0 + sy, 0.0], u: [sx, 0.0, 0.0], v: [0.0, 0.0, sz] },
        Face { origin: [x0, y0, 0.0], u: [0.0, sy, 0.0], v: [0.0, 0.0, sz] },
        Face { origin: [x0 + sx, y0, 0.0], u: [0.0, sy, 0.0], v: [0.0, 0.0, sz] },
    ]
}

/// Floor, four walls, then the visible faces of every box.
pub fn scene_faces(spec: &SceneSpec) -> Vec<Face> {
    let [w, d, h] = spec.room;
    let (x0, y0) = (-w / 2.0, -d / 2.0);
    let mut faces = vec![
        Face { origin: [x0, y0, 0.0], u: [w, 0.0, 0.0], v: [0.0, d, 0.0] },
        Face { origin: [x0, y0, 0.0], u: [w, 0.0, 0.0], v: [0.0, 0.0, h] },
        Face { origin: [x0, -y0, 0.0], u: [w, 0.0, 0.0], v: [0.0, 0.0, h] },
        Face { origin: [x0, y0, 0.0], u: [0.0, d, 0.0], v: [0.0, 0.0, h] },
        Face { origin: [-x0, y0, 0.0], u: [0.0, d, 0.0], v: [0.0, 0.0, h] },
    ];
    for b in spec.all_boxes() {
        faces.extend(box_faces(b));
    }
    faces
}

/// Largest-remainder split of `total` proportional to `weights`; ties go to
/// the lower index.
fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Uniform surface samples with exactly `spec.point_count` points.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<ScenePointCloud> {
    spec.validate()?;
    let faces = scene_faces(spec);
    let areas: Vec<f64> = faces.iter().map(Face::area).collect();
    let counts = allocate(spec.point_count, &areas);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(spec.point_count);
    for (face, &count) in faces.iter().zip(&counts) {
        for _ in 0..count {
            points.push(face.point(rng.random(), rng.random()));
        }
    }
    ScenePointCloud::new(points)
}

/// One training/evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: u32,
    pub scene_id: String,
    pub observed: MotionSequence,
    pub gaze: GazeSequence,
    pub future: MotionSequence,
    pub goal_label: String,
}

impl EpisodeRecord {
    /// Observed followed by future translations.
    pub fn translations(&self) -> Vec<[f64; 3]> {
        self.observed
            .frames
            .iter()
            .chain(&self.future.frames)
            .map(|p| {
                let t = p.translation();
                [t.x, t.y, t.z]
            })
            .collect()
    }
}

/// Clearance of a floor position to every box footprint and wall.
pub fn clearance(spec: &SceneSpec, p: [f64; 2]) -> f64 {
    let walls = (spec.room[0] / 2.0 - p[0].abs()).min(spec.room[1] / 2.0 - p[1].abs());
    spec.all_boxes().map(|b| b.footprint_distance(p)).fold(walls, f64::min)
}

/// Minimum horizontal distance from any trajectory point to any object.
pub fn obstacle_clearance(spec: &SceneSpec, episode: &EpisodeRecord) -> f64 {
    episode
        .translations()
        .iter()
        .flat_map(|t| spec.all_boxes().map(move |b| b.footprint_distance([t[0], t[1]])))
        .fold(f64::INFINITY, f64::min)
}

/// Distance from `p` to the nearest scene surface.
pub fn surface_distance(faces: &[Face], p: [f64; 3]) -> f64 {
    faces.iter().map(|f| f.distance(p)).fold(f64::INFINITY, f64::min)
}

struct Grid {
    nx: usize,
    ny: usize,
    x0: f64,
    y0: f64,
    free: Vec<bool>,
}

impl Grid {
    fn new(spec: &SceneSpec) -> Self {
        let nx = (spec.room[0] / GRID_CELL).floor() as usize;
        let ny = (spec.room[1] / GRID_CELL).floor() as usize;
        let x0 = -(nx as f64) * GRID_CELL / 2.0 + GRID_CELL / 2.0;
        let y0 = -(ny as f64) * GRID_CELL / 2.0 + GRID_CELL / 2.0;
        let mut g = Self {
            nx,
            ny,
            x0,
            y0,
            free: Vec::new(),
        };
        g.free = (0..nx * ny).map(|i| clearance(spec, g.center(i)) >= AGENT_RADIUS).collect();
        g
    }

    fn center(&self, i: usize) -> [f64; 2] {
        [self.x0 + (i % self.nx) as f64 * GRID_CELL, self.y0 + (i / self.nx) as f64 * GRID_CELL]
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (cx, cy) = ((i % self.nx) as i64, (i / self.nx) as i64);
        (-1i64..=1).flat_map(move |dy| {
            (-1i64..=1).filter_map(move |dx| {
                let (x, y) = (cx + dx, cy + dy);
                if (dx == 0 && dy == 0) || x < 0 || y < 0 || x >= self.nx as i64 || y >= self.ny as i64 {
                    return None;
                }
                let j = y as usize * self.nx + x as usize;
                if !self.free[j] {
                    return None;
                }
                // No corner cutting past blocked cells.
                if dx != 0 && dy != 0 {
                    let a = cy as usize * self.nx + x as usize;
                    let b = y as usize * self.nx + cx as usize;
                    if !self.free[a] || !self.free[b] {
                        return None;
                    }
                }
                Some((j, if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 }))
            })
        })
    }

    /// Connected-region label per free cell, and the label of the largest region.
    fn components(&self) -> (Vec<Option<usize>>, Option<usize>) {
        let mut labels = vec![None; self.free.len()];
        let mut sizes = Vec::new();
        for seed in 0..self.free.len() {
            if !self.free[seed] || labels[seed].is_some() {
                continue;
            }
            let label = sizes.len();
            labels[seed] = Some(label);
            let mut stack = vec![seed];
            let mut size = 0;
            while let Some(i) = stack.pop() {
                size += 1;
                for (j, _) in self.neighbors(i) {
                    if labels[j].is_none() {
                        labels[j] = Some(label);
                        stack.push(j);
                    }
                }
            }
            sizes.push(size);
        }
        let largest = (0..sizes.len()).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)));
        (labels, largest)
    }

    /// Free cells within a short step of the goal's footprint.
    fn approach_cells(&self, goal: &GoalObject) -> Vec<usize> {
        (0..self.free.len())
            .filter(|&i| self.free[i] && goal.bounds.footprint_distance(self.center(i)) <= AGENT_RADIUS + 0.15)
            .collect()
    }

    /// A* with the octile heuristic; returns cell indices from start to goal.
    fn astar(&self, start: usize, goal: usize) -> Option<Vec<usize>> {
        #[derive(PartialEq)]
        struct Entry(f64, usize);
        impl Eq for Entry {}
        impl PartialOrd for Entry {
            fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Entry {
            fn cmp(&self, o: &Self) -> std::cmp::Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
            }
        }
        let h = |i: usize| {
            let (dx, dy) = (
                ((i % self.nx) as f64 - (goal % self.nx) as f64).abs(),
                ((i / self.nx) as f64 - (goal / self.nx) as f64).abs(),
            );
            dx.max(dy) + (std::f64::consts::SQRT_2 - 1.0) * dx.min(dy)
        };
        let mut cost = vec![f64::INFINITY; self.free.len()];
        let mut prev = vec![usize::MAX; self.free.len()];
        let mut heap = BinaryHeap::new();
        cost[start] = 0.0;
        heap.push(Entry(h(start), start));
        while let Some(Entry(_, i)) = heap.pop() {
            if i == goal {
                let mut path = vec![goal];
                let mut c = goal;
                while c != start {
                    c = prev[c];
                    path.push(c);
                }
                path.reverse();
                return Some(path);
            }
            for (j, w) in self.neighbors(i) {
                let nc = cost[i] + w;
                if nc < cost[j] {
                    cost[j] = nc;
                    prev[j] = i;
                    heap.push(Entry(nc + h(j), j));
                }
            }
        }
        None
    }
}

fn segment_clear(spec: &SceneSpec, a: [f64; 2], b: [f64; 2]) -> bool {
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let steps = (len / 0.02).ceil().max(1.0) as usize;
    (0..=steps).all(|s| {
        let t = s as f64 / steps as f64;
        clearance(spec, [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]) >= AGENT_RADIUS
    })
}

/// Greedy line-of-sight shortcutting of a grid path.
fn shortcut(spec: &SceneSpec, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i + 1 < pts.len() {
        let mut j = pts.len() - 1;
        while j > i + 1 && !segment_clear(spec, pts[i], pts[j]) {
            j -= 1;
        }
        out.push(pts[j]);
        i = j;
    }
    out
}

fn resample(poly: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    let mut out = vec![poly[0]];
    for w in poly.windows(2) {
        let len = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        let n = (len / step).ceil().max(1.0) as usize;
        for s in 1..=n {
            let t = s as f64 / n as f64;
            out.push([w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])]);
        }
    }
    out
}

/// Centered moving average with a window that shrinks at the ends; points
/// that lose clearance fall back to the unsmoothed position.
fn smooth(spec: &SceneSpec, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let half = SMOOTH_WINDOW / 2;
    let n = pts.len();
    (0..n)
        .map(|i| {
            let r = half.min(i).min(n - 1 - i);
            let window = &pts[i - r..=i + r];
            let k = window.len() as f64;
            let p = [
                window.iter().map(|p| p[0]).sum::<f64>() / k,
                window.iter().map(|p| p[1]).sum::<f64>() / k,
            ];
            if clearance(spec, p) >= AGENT_RADIUS {
                p
            } else {
                pts[i]
            }
        })
        .collect()
}

struct Path2 {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Path2 {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let l = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(cum.last().expect("nonempty") + l);
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().expect("nonempty")
    }

    fn at(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, self.length());
        let k = self.cum.partition_point(|&c| c < s).max(1).min(self.pts.len() - 1);
        let (a, b) = (self.pts[k - 1], self.pts[k]);
        let seg = self.cum[k] - self.cum[k - 1];
        let t = if seg > 0.0 { (s - self.cum[k - 1]) / seg } else { 1.0 };
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }
}

/// Fixed directions in embedding space driving the gait cycle.
fn gait_basis() -> [[f64; EMBEDDING_DIM]; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A17_5EED);
    std::array::from_fn(|_| {
        std::array::from_fn(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.8 * z
        })
    })
}

const STRIDE: f64 = 1.3;

fn gait_embedding(basis: &[[f64; EMBEDDING_DIM]; 3], distance: f64, amplitude: f64) -> Vec<f64> {
    let phase = std::f64::consts::TAU * distance / STRIDE;
    (0..EMBEDDING_DIM)
        .map(|k| amplitude * (phase.sin() * basis[0][k] + phase.cos() * basis[1][k] + 0.5 * basis[2][k]))
        .collect()
}

/// Nearest hit of a ray with any face.
fn cast(faces: &[Face], origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, usize)> {
    faces
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.intersect(origin, dir).map(|t| (t, i)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
}

/// Goal-directed walk with gaze toward the goal, split into observed and future frames.
pub fn generate_episode(
    spec: &SceneSpec,
    scene_id: &str,
    episode_id: u32,
    seed: u64,
    horizon: HorizonConfig,
) -> Result<EpisodeRecord> {
    spec.validate()?;
    horizon.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(spec);
    let goal = &spec.goals[rng.random_range(0..spec.goals.len())];
    let (labels, _) = grid.components();
    let approach = grid.approach_cells(goal);
    let unreachable = |attempts, detail: &str| Error::UnreachableGoal {
        attempts,
        detail: format!("goal '{}': {detail}", goal.label),
    };
    // Each start walks to the nearest approach cell in its own free region.
    let nearest = |i: usize| -> Option<(usize, f64)> {
        let c = grid.center(i);
        approach
            .iter()
            .filter(|&&a| labels[a].is_some() && labels[a] == labels[i])
            .map(|&a| {
                let p = grid.center(a);
                (a, (p[0] - c[0]).hypot(p[1] - c[1]))
            })
            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
    };
    let reachable: Vec<(usize, usize, f64)> = (0..grid.free.len())
        .filter(|&i| grid.free[i])
        .filter_map(|i| nearest(i).map(|(a, d)| (i, a, d)))
        .collect();
    let mut starts: Vec<(usize, usize)> = reachable
        .iter()
        .filter(|r| (2.5..=8.0).contains(&r.2))
        .map(|r| (r.0, r.1))
        .collect();
    if starts.is_empty() {
        starts = reachable.iter().filter(|r| r.2 >= 1.0).map(|r| (r.0, r.1)).collect();
    }
    if starts.is_empty() {
        return Err(unreachable(0, "no free start region connects to the goal"));
    }
    let frames = horizon.total();
    let duration = (frames - 1) as f64 / horizon.frame_rate;
    for _attempt in 0..MAX_START_ATTEMPTS {
        let (start, dest) = starts[rng.random_range(0..starts.len())];
        let Some(cells) = grid.astar(start, dest) else {
            continue;
        };
        let raw: Vec<[f64; 2]> = cells.iter().map(|&c| grid.center(c)).collect();
        let dense = resample(&shortcut(spec, &raw), GRID_CELL);
        let path = Path2::new(smooth(spec, &dense));
        let speed = rng.random_range(0.8..1.2);
        let (observed, future, gaze) = walk(spec, &path, goal, speed, horizon, duration, &mut rng)?;
        let ep = EpisodeRecord {
            id: episode_id,
            scene_id: scene_id.to_string(),
            observed,
            gaze,
            future,
            goal_label: goal.label.clone(),
        };
        if obstacle_clearance(spec, &ep) >= AGENT_RADIUS - 0.05 {
            return Ok(ep);
        }
    }
    Err(unreachable(MAX_START_ATTEMPTS, "no valid path"))
}

type Walk = (MotionSequence, MotionSequence, GazeSequence);

fn walk(
    spec: &SceneSpec,
    path: &Path2,
    goal: &GoalObject,
    speed: f64,
    horizon: HorizonConfig,
    duration: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Walk> {
    let basis = gait_basis();
    let body = BodyModel::standard();
    let faces = scene_faces(spec);
    let noise = Normal::new(0.0, GAZE_NOISE).expect("valid sigma");
    let frames = horizon.total();
    let length = path.length();
    let target = goal.bounds.center3();
    let mut poses = Vec::with_capacity(frames);
    let mut gaze = Vec::with_capacity(horizon.observed_frames);
    for k in 0..frames {
        let t = k as f64 * duration / (frames - 1) as f64;
        let s = (speed * t).min(length);
        let p = path.at(s);
        let remaining = length - s;
        let yaw = if remaining > 1e-6 {
            let (a, b) = (path.at(s - 0.2), path.at(s + 0.2));
            (b[1] - a[1]).atan2(b[0] - a[0])
        } else {
            (target[1] - p[1]).atan2(target[0] - p[0])
        };
        let amplitude = (remaining / 0.5).min(1.0);
        let bob = 0.01 * amplitude * (2.0 * std::f64::consts::TAU * s / STRIDE).cos();
        let pose = PoseState::new(
            nalgebra::Vector3::new(p[0], p[1], PELVIS_HEIGHT + bob),
            yaw_quaternion(yaw),
            gait_embedding(&basis, s, amplitude),
        )?;
        if k < horizon.observed_frames {
            let head = body.body_joints(&pose)?.joints[HEAD_JOINT];
            let dir = sub(target, head);
            let (tt, face) = cast(&faces, head, dir).ok_or_else(|| Error::UnreachableGoal {
                attempts: 1,
                detail: "gaze ray left the room".into(),
            })?;
            let hit: [f64; 3] = std::array::from_fn(|i| head[i] + tt * dir[i]);
            let noisy: [f64; 3] = std::array::from_fn(|i| hit[i] + noise.sample(rng));
            gaze.push(faces[face].project(noisy));
        }
        poses.push(pose);
    }
    let future = poses.split_off(horizon.observed_frames);
    Ok((
        MotionSequence::new(poses, horizon.frame_rate)?,
        MotionSequence::new(future, horizon.frame_rate)?,
        GazeSequence { points: gaze },
    ))
}

/// Sub-seed for stream `tag`, item `index`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(tag);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

const SCENE_STREAM: u64 = 1;
const SPEC_STREAM: u64 = 2;
const EPISODE_STREAM: u64 = 3;

/// Benchmark generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub episodes_per_scene: usize,
    pub point_count: usize,
    pub horizon: HorizonConfig,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scenes: 8,
            episodes_per_scene: 50,
            point_count: 4096,
            horizon: HorizonConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntry {
    pub id: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub cloud: ScenePointCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub horizon: HorizonConfig,
    pub scenes: Vec<SceneEntry>,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&SceneEntry> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn scene_index(&self, id: &str) -> Option<usize> {
        self.scenes.iter().position(|s| s.id == id)
    }

    /// Per scene, the last `round(n · test_fraction)` episodes (by id) are held out.
    pub fn split(&self, test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for scene in &self.scenes {
            let mut idx: Vec<usize> = (0..self.episodes.len())
                .filter(|&i| self.episodes[i].scene_id == scene.id)
                .collect();
            idx.sort_by_key(|&i| self.episodes[i].id);
            let n_test = (idx.len() as f64 * test_fraction).round() as usize;
            let cut = idx.len() - n_test.min(idx.len());
            train.extend_from_slice(&idx[..cut]);
            test.extend_from_slice(&idx[cut..]);
        }
        (train, test)
    }
}

pub fn scene_name(i: usize) -> String {
    format!("scene_{i:03}")
}

/// Deterministic benchmark: a pure function of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.horizon.validate()?;
    let mut scenes = Vec::with_capacity(spec.scenes);
    let mut episodes = Vec::with_capacity(spec.scenes * spec.episodes_per_scene);
    for i in 0..spec.scenes {
        let scene_seed = derive_seed(spec.seed, SCENE_STREAM, i as u64);
        let scene_spec = SceneSpec::random(derive_seed(spec.seed, SPEC_STREAM, i as u64), spec.point_count);
        let cloud = generate_scene(&scene_spec, scene_seed)?;
        let id = scene_name(i);
        for j in 0..spec.episodes_per_scene {
            let global = (i * spec.episodes_per_scene + j) as u64;
            let seed = derive_seed(spec.seed, EPISODE_STREAM, global);
            episodes.push(generate_episode(&scene_spec, &id, global as u32, seed, spec.horizon)?);
        }
        scenes.push(SceneEntry {
            id,
            seed: scene_seed,
            spec: scene_spec,
            cloud,
        });
    }
    Ok(Dataset {
        seed: spec.seed,
        horizon: spec.horizon,
        scenes,
        episodes,
    })
}

pub const DATASET_FORMAT_VERSION: u32 = 1;
const CLOUD_MAGIC: &[u8; 8] = b"SMCLOUD\0";
const CLOUD_VERSION: u32 = 1;
const CLOUD_HEADER: usize = 8 + 4 + 8 + 8 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub id: String,
    pub seed: u64,
    pub points: usize,
    pub cloud: String,
    pub cloud_sha256: String,
    pub spec: String,
    pub spec_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEpisode {
    pub id: u32,
    pub scene_id: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub horizon: HorizonConfig,
    pub scenes: Vec<ManifestScene>,
    pub episodes: Vec<ManifestEpisode>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Binary cloud: magic, version, point count, units, seed, then x, y, z planes.
pub fn encode_cloud(cloud: &ScenePointCloud, seed: u64) -> Vec<u8> {
    let n = cloud.len();
    let mut out = Vec::with_capacity(CLOUD_HEADER + 24 * n);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(b"m\0\0\0\0\0\0\0");
    out.extend_from_slice(&seed.to_le_bytes());
    for axis in 0..3 {
        for p in &cloud.points {
            out.extend_from_slice(&p[axis].to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<(ScenePointCloud, u64)> {
    let corrupt = |m: &str| Error::CorruptDataset(format!("cloud file: {m}"));
    if bytes.len() < CLOUD_HEADER || &bytes[..8] != CLOUD_MAGIC {
        return Err(corrupt("bad header"));
    }
    let word = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CLOUD_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let n = word(12) as usize;
    let seed = word(28);
    if bytes.len() != CLOUD_HEADER + 24 * n {
        return Err(corrupt("length does not match point count"));
    }
    let f = |i: usize| f64::from_le_bytes(bytes[CLOUD_HEADER + 8 * i..CLOUD_HEADER + 8 * i + 8].try_into().expect("8"));
    let points = (0..n).map(|i| [f(i), f(n + i), f(2 * n + i)]).collect();
    let cloud = ScenePointCloud::new(points).map_err(|e| corrupt(&e.to_string()))?;
    Ok((cloud, seed))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io("writing dataset file", path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io("reading dataset file", path, e))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Writes the dataset and returns the manifest's SHA-256, which covers every file.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<String> {
    for sub in ["scenes", "episodes"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io("creating dataset directory", &p, e))?;
    }
    let mut scenes = Vec::new();
    for s in &dataset.scenes {
        let cloud = format!("scenes/{}.cloud", s.id);
        let spec = format!("scenes/{}.spec.json", s.id);
        let cb = encode_cloud(&s.cloud, s.seed);
        let sb = json_bytes(&s.spec);
        write_file(&dir.join(&cloud), &cb)?;
        write_file(&dir.join(&spec), &sb)?;
        scenes.push(ManifestScene {
            id: s.id.clone(),
            seed: s.seed,
            points: s.cloud.len(),
            cloud,
            cloud_sha256: sha256_hex(&cb),
            spec,
            spec_sha256: sha256_hex(&sb),
        });
    }
    let mut episodes = Vec::new();
    for e in &dataset.episodes {
        let file = format!("episodes/episode_{:05}.json", e.id);
        let b = json_bytes(e);
        write_file(&dir.join(&file), &b)?;
        episodes.push(ManifestEpisode {
            id: e.id,
            scene_id: e.scene_id.clone(),
            file,
            sha256: sha256_hex(&b),
        });
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        seed: dataset.seed,
        horizon: dataset.horizon,
        scenes,
        episodes,
    };
    let mb = json_bytes(&manifest);
    write_file(&dir.join("manifest.json"), &mb)?;
    Ok(sha256_hex(&mb))
}

fn checked(dir: &Path, file: &str, expected: &str) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(file);
    let bytes = read_file(&path)?;
    if sha256_hex(&bytes) != expected {
        return Err(Error::CorruptDataset(format!("hash mismatch for {file}")));
    }
    Ok(bytes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_file(&dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::CorruptDataset(format!("manifest: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::CorruptDataset(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// SHA-256 of the manifest file.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(&dir.join("manifest.json"))?))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for s in &manifest.scenes {
        let (cloud, seed) = decode_cloud(&checked(dir, &s.cloud, &s.cloud_sha256)?)?;
        let spec: SceneSpec = serde_json::from_slice(&checked(dir, &s.spec, &s.spec_sha256)?)
            .map_err(|e| Error::CorruptDataset(format!("{}: {e}", s.spec)))?;
        if cloud.len() != s.points || seed != s.seed {
            return Err(Error::CorruptDataset(format!("{} disagrees with the manifest", s.cloud)));
        }
        scenes.push(SceneEntry {
            id: s.id.clone(),
            seed,
            spec,
            cloud,
        });
    }
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for e in &manifest.episodes {
        let record: EpisodeRecord = serde_json::from_slice(&checked(dir, &e.file, &e.sha256)?)
            .map_err(|err| Error::CorruptDataset(format!("{}: {err}", e.file)))?;
        if record.id != e.id || record.scene_id != e.scene_id || !scenes.iter().any(|s| s.id == e.scene_id) {
            return Err(Error::CorruptDataset(format!("{} disagrees with the manifest", e.file)));
        }
        episodes.push(record);
    }
    Ok(Dataset {
        seed: manifest.seed,
        horizon: manifest.horizon,
        scenes,
        episodes,
    })
}
