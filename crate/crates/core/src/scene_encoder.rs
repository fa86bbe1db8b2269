//! Hierarchical point-cloud encoder: set abstraction (sample, group, shared
//! point MLP, max-pool) down to a single global vector, then feature
//! propagation back to full resolution.
//!
//! Sampling and grouping depend only on coordinates, so they are computed once
//! per cloud into a [`SceneGeometry`] and reused across forward passes. Point
//! features and grouping offsets are expressed in a caller-chosen
//! [`LocalFrame`] (the episode anchor), which ties the scene to the agent.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mlp, PointMlp};
use crate::params::{Init, ParamStore};
use crate::types::{LocalFrame, ScenePointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAbstractionLevel {
    pub centroids: usize,
    /// Ball radius in meters; `None` groups every point around the cloud mean.
    pub radius: Option<f64>,
    /// Neighbors per ball; ignored for the global level.
    pub neighbors: usize,
    pub mlp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAbstractionSpec {
    pub levels: Vec<SetAbstractionLevel>,
    pub fp_widths: Vec<usize>,
}

impl Default for SetAbstractionSpec {
    fn default() -> Self {
        Self {
            levels: vec![
                SetAbstractionLevel {
                    centroids: 512,
                    radius: Some(0.2),
                    neighbors: 32,
                    mlp: vec![64, 64, 128],
                },
                SetAbstractionLevel {
                    centroids: 128,
                    radius: Some(0.4),
                    neighbors: 64,
                    mlp: vec![128, 128, 256],
                },
                SetAbstractionLevel {
                    centroids: 1,
                    radius: None,
                    neighbors: 0,
                    mlp: vec![256, 256, 256],
                },
            ],
            fp_widths: vec![256, 256],
        }
    }
}

impl SetAbstractionSpec {
    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.levels.last() else {
            return Err(Error::invalid("set abstraction spec has no levels"));
        };
        if last.radius.is_some() || last.centroids != 1 {
            return Err(Error::invalid(
                "the last set abstraction level must be a single global pool",
            ));
        }
        for w in self.levels.windows(2) {
            if w[1].centroids >= w[0].centroids {
                return Err(Error::invalid("centroid counts must strictly decrease"));
            }
            if let (Some(a), Some(b)) = (w[0].radius, w[1].radius) {
                if b <= a {
                    return Err(Error::invalid("ball radii must strictly increase"));
                }
            }
        }
        for l in &self.levels {
            if l.mlp.is_empty() {
                return Err(Error::invalid("set abstraction MLP needs at least one layer"));
            }
            if l.radius.is_some_and(|r| !(r > 0.0)) || (l.radius.is_some() && l.neighbors == 0) {
                return Err(Error::invalid("ball radius and neighbor count must be positive"));
            }
        }
        if self.fp_widths.is_empty() {
            return Err(Error::invalid("feature propagation MLP needs at least one layer"));
        }
        Ok(())
    }

    /// Smallest cloud the spec can encode.
    pub fn min_points(&self) -> usize {
        self.levels.first().map(|l| l.centroids).unwrap_or(1)
    }

    pub fn global_dim(&self) -> usize {
        *self.levels.last().and_then(|l| l.mlp.last()).unwrap_or(&0)
    }

    pub fn point_dim(&self) -> usize {
        *self.fp_widths.last().unwrap_or(&0)
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn lex(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

fn mean(points: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in points {
        for i in 0..3 {
            c[i] += p[i];
        }
    }
    let n = points.len() as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

/// True when candidate `i` should replace `best` at (squared) score `s` vs `best_s`:
/// larger score wins, then lexicographically smaller coordinates, then lower index.
fn beats(points: &[[f64; 3]], i: usize, s: f64, best: usize, best_s: f64) -> bool {
    match s.total_cmp(&best_s) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match lex(&points[i], &points[best]) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => i < best,
        },
    }
}

/// Farthest point sampling. The first pick is the point farthest from the
/// cloud centroid; each further pick maximizes the distance to the chosen set.
/// Ties go to the lexicographically smallest coordinates, then the lowest index.
pub fn farthest_point_sample(points: &[[f64; 3]], m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "cannot sample {m} points from a cloud of {n}"
        )));
    }
    let c = mean(points);
    let mut first = 0;
    let mut first_s = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let s = dist2(p, &c);
        if beats(points, i, s, first, first_s) {
            first = i;
            first_s = s;
        }
    }
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = first;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == m {
            break;
        }
        let pc = points[cur];
        let mut best = usize::MAX;
        let mut best_s = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&points[i], &pc);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best == usize::MAX || beats(points, i, min_d[i], best, best_s) {
                best = i;
                best_s = min_d[i];
            }
        }
        cur = best;
    }
    Ok(chosen)
}

/// Up to `k` neighbors of each center within `radius`, ordered by distance then
/// index. Points whose coordinates duplicate an already selected neighbor are
/// skipped. Short rows repeat the nearest in-radius neighbor; empty balls fall
/// back to the globally nearest point.
pub fn ball_query(
    centers: &[[f64; 3]],
    points: &[[f64; 3]],
    radius: f64,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if points.is_empty() {
        return Err(Error::invalid("ball query on an empty cloud"));
    }
    if !(radius > 0.0) || k == 0 {
        return Err(Error::invalid("ball query needs radius > 0 and k >= 1"));
    }
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len());
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for c in centers {
        cand.clear();
        let mut nearest = (f64::INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(c, p);
            if d < nearest.0 {
                nearest = (d, i);
            }
            if d <= r2 {
                cand.push((d, i));
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut row: Vec<usize> = Vec::with_capacity(k);
        for &(_, i) in &cand {
            if row.len() == k {
                break;
            }
            if row.iter().any(|&j| points[j] == points[i]) {
                continue;
            }
            row.push(i);
        }
        let fill = row.first().copied().unwrap_or(nearest.1);
        row.resize(k, fill);
        out.push(row);
    }
    Ok(out)
}

/// Three nearest coarse points per fine point with normalized inverse-distance weights.
fn three_nn(fine: &[[f64; 3]], coarse: &[[f64; 3]]) -> (Vec<[usize; 3]>, Vec<[f64; 3]>) {
    let mut idx = Vec::with_capacity(fine.len());
    let mut wts = Vec::with_capacity(fine.len());
    for p in fine {
        let mut best = [(f64::INFINITY, 0usize); 3];
        for (i, q) in coarse.iter().enumerate() {
            let d = dist2(p, q);
            if d < best[2].0 || (d == best[2].0 && i < best[2].1) {
                best[2] = (d, i);
                best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            }
        }
        let mut w = [0.0; 3];
        let mut ids = [0usize; 3];
        for k in 0..3 {
            if best[k].0.is_finite() {
                ids[k] = best[k].1;
                w[k] = 1.0 / (best[k].0.sqrt() + 1e-8);
            }
        }
        let s: f64 = w.iter().sum();
        for wk in &mut w {
            *wk /= s;
        }
        idx.push(ids);
        wts.push(w);
    }
    (idx, wts)
}

#[derive(Debug, Clone)]
struct LevelGeometry {
    positions: Vec<[f64; 3]>,
    groups: Vec<usize>,
    group_size: usize,
    local: Mat,
}

#[derive(Debug, Clone)]
enum Upsample {
    Broadcast(usize),
    Interp(Vec<[usize; 3]>, Vec<[f64; 3]>),
}

/// Sampling, grouping and interpolation structure of one cloud under one spec.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    n: usize,
    levels: Vec<LevelGeometry>,
    /// `upsample[l]` maps features of level `l + 1` onto the points of level `l`
    /// (level 0 is the input cloud).
    upsample: Vec<Upsample>,
}

impl SceneGeometry {
    pub fn build(cloud: &ScenePointCloud, spec: &SetAbstractionSpec) -> Result<Self> {
        spec.validate()?;
        let n = cloud.len();
        if n < spec.min_points() {
            return Err(Error::invalid(format!(
                "scene has {n} points; the encoder needs at least {}",
                spec.min_points()
            )));
        }
        let mut positions: Vec<Vec<[f64; 3]>> = vec![cloud.points.clone()];
        let mut levels = Vec::with_capacity(spec.levels.len());
        for level in &spec.levels {
            let prev = positions.last().expect("level 0 present");
            let geom = match level.radius {
                Some(r) => {
                    let centers_idx = farthest_point_sample(prev, level.centroids.min(prev.len()))?;
                    let centers: Vec<[f64; 3]> = centers_idx.iter().map(|&i| prev[i]).collect();
                    let groups = ball_query(&centers, prev, r, level.neighbors)?;
                    let mut local = Mat::zeros((centers.len() * level.neighbors, 3));
                    for (ci, row) in groups.iter().enumerate() {
                        for (j, &pi) in row.iter().enumerate() {
                            for a in 0..3 {
                                local[[ci * level.neighbors + j, a]] = prev[pi][a] - centers[ci][a];
                            }
                        }
                    }
                    LevelGeometry {
                        positions: centers,
                        groups: groups.into_iter().flatten().collect(),
                        group_size: level.neighbors,
                        local,
                    }
                }
                None => {
                    let c = mean(prev);
                    let local = Mat::from_shape_fn((prev.len(), 3), |(i, a)| prev[i][a] - c[a]);
                    LevelGeometry {
                        positions: vec![c],
                        groups: (0..prev.len()).collect(),
                        group_size: prev.len(),
                        local,
                    }
                }
            };
            positions.push(geom.positions.clone());
            levels.push(geom);
        }
        let upsample = (0..levels.len())
            .map(|l| {
                let fine = &positions[l];
                let coarse = &positions[l + 1];
                if coarse.len() == 1 {
                    Upsample::Broadcast(fine.len())
                } else {
                    let (i, w) = three_nn(fine, coarse);
                    Upsample::Interp(i, w)
                }
            })
            .collect();
        Ok(Self {
            n,
            levels,
            upsample,
        })
    }

    pub fn point_count(&self) -> usize {
        self.n
    }
}

/// Set-abstraction / feature-propagation encoder weights.
#[derive(Debug, Clone)]
pub struct SetAbstractionEncoder {
    pub spec: SetAbstractionSpec,
    sa: Vec<PointMlp>,
    fp: Vec<PointMlp>,
}

impl SetAbstractionEncoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, spec: &SetAbstractionSpec) -> Result<Self> {
        spec.validate()?;
        let mut sa = Vec::new();
        let mut dims = vec![3usize];
        for (l, level) in spec.levels.iter().enumerate() {
            let d_in = 3 + dims[l];
            let mlp = PointMlp::new(init, &format!("{name}.sa{l}"), d_in, &level.mlp);
            dims.push(mlp.out_dim());
            sa.push(mlp);
        }
        // fp[l] produces level-l features from level l+1.
        let mut fp = Vec::new();
        let mut up_dim = dims[spec.levels.len()];
        let mut built: Vec<PointMlp> = Vec::new();
        for l in (0..spec.levels.len()).rev() {
            let d_in = up_dim + dims[l];
            let mlp = PointMlp::new(init, &format!("{name}.fp{l}"), d_in, &spec.fp_widths);
            up_dim = mlp.out_dim();
            built.push(mlp);
        }
        built.reverse();
        fp.extend(built);
        Ok(Self {
            spec: spec.clone(),
            sa,
            fp,
        })
    }

    /// `coords` is the n×3 cloud in the local frame, used as the input point
    /// features; `rotation` is that frame's `H` as a 3×3 matrix, applied to the
    /// cached grouping offsets. Returns `(per_point n×c_s, global 1×c_s)`.
    pub fn forward(&self, ctx: Ctx<'_>, geom: &SceneGeometry, coords: Var, rotation: Option<&Mat>) -> (Var, Var) {
        let g = ctx.g;
        let mut feats: Vec<Option<Var>> = vec![Some(coords)];
        for (l, level) in geom.levels.iter().enumerate() {
            let local = g.constant(match rotation {
                Some(h) => level.local.dot(h),
                None => level.local.clone(),
            });
            let x = match feats[l] {
                None => local,
                Some(f) => {
                    let grouped = g.gather_rows(f, &level.groups);
                    g.concat_cols(&[local, grouped])
                }
            };
            let h = self.sa[l].forward(ctx, x);
            feats.push(Some(g.group_max(h, level.group_size)));
        }
        let global = feats[geom.levels.len()].expect("global level present");
        let mut up = global;
        for l in (0..geom.levels.len()).rev() {
            let interp = match &geom.upsample[l] {
                Upsample::Broadcast(rows) => g.broadcast_row(up, *rows),
                Upsample::Interp(i, w) => g.interp_rows(up, i.clone(), w.clone()),
            };
            let x = match feats[l] {
                None => interp,
                Some(f) => g.concat_cols(&[interp, f]),
            };
            up = self.fp[l].forward(ctx, x);
        }
        (up, global)
    }
}

/// Stand-in encoder without hierarchy: a two-layer point-wise MLP on
/// origin-relative coordinates, max-pooled for the global vector.
#[derive(Debug, Clone)]
pub struct PointwiseEncoder {
    mlp: Mlp,
}

impl PointwiseEncoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize) -> Self {
        Self {
            mlp: Mlp::plain(init, &format!("{name}.pointwise"), 3, dim, dim),
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, coords: Var) -> (Var, Var) {
        let per_point = self.mlp.forward(ctx, coords);
        let global = ctx.g.max_rows(per_point);
        (per_point, global)
    }
}

#[derive(Debug, Clone)]
pub enum SceneEncoder {
    SetAbstraction(SetAbstractionEncoder),
    Pointwise(PointwiseEncoder),
}

/// Per-cloud precomputation for whichever encoder is active.
#[derive(Debug, Clone)]
pub enum SceneInput {
    Hierarchy(SceneGeometry),
    Raw,
}

impl SceneEncoder {
    pub fn prepare(&self, cloud: &ScenePointCloud) -> Result<SceneInput> {
        match self {
            SceneEncoder::SetAbstraction(e) => Ok(SceneInput::Hierarchy(SceneGeometry::build(cloud, &e.spec)?)),
            SceneEncoder::Pointwise(_) => Ok(SceneInput::Raw),
        }
    }

    /// Encodes `cloud` expressed in `frame`.
    pub fn forward(&self, ctx: Ctx<'_>, cloud: &ScenePointCloud, input: &SceneInput, frame: &LocalFrame) -> (Var, Var) {
        let coords = ctx.g.constant(relative_coords(cloud, frame));
        let h = (!frame.is_axis_aligned()).then(|| Mat::from_shape_vec((3, 3), frame.rotation.to_vec()).expect("3×3"));
        match (self, input) {
            (SceneEncoder::SetAbstraction(e), SceneInput::Hierarchy(geom)) => e.forward(ctx, geom, coords, h.as_ref()),
            (SceneEncoder::Pointwise(e), _) => e.forward(ctx, coords),
            (SceneEncoder::SetAbstraction(e), SceneInput::Raw) => {
                let geom = SceneGeometry::build(cloud, &e.spec).expect("cloud validated by caller");
                e.forward(ctx, &geom, coords, h.as_ref())
            }
        }
    }
}

/// Encoder outputs inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    /// n×c_s
    pub per_point: Var,
    /// 1×c_s
    pub global: Var,
}

impl SceneVars {
    /// All-zero features, used when the scene modality is switched off.
    pub fn zeros(g: &Graph, points: usize, dim: usize) -> Self {
        Self {
            per_point: g.constant(Mat::zeros((points, dim))),
            global: g.constant(Mat::zeros((1, dim))),
        }
    }
}

/// Encoder outputs as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    /// n×c_s
    pub per_point: Mat,
    pub global_embedding: Vec<f64>,
}

impl SceneFeatures {
    pub fn dim(&self) -> usize {
        self.global_embedding.len()
    }
}

/// The cloud as an n×3 matrix in `frame`.
pub fn relative_coords(cloud: &ScenePointCloud, frame: &LocalFrame) -> Mat {
    let mut m = Mat::zeros((cloud.len(), 3));
    for (i, &p) in cloud.points.iter().enumerate() {
        let q = frame.point_to_local(p);
        for a in 0..3 {
            m[[i, a]] = q[a];
        }
    }
    m
}

/// Runs the encoder on one cloud outside of training.
pub fn encode_scene(
    cloud: &ScenePointCloud,
    encoder: &SceneEncoder,
    store: &ParamStore,
    frame: &LocalFrame,
) -> Result<SceneFeatures> {
    let input = encoder.prepare(cloud)?;
    let g = Graph::new();
    let (per_point, global) = encoder.forward(Ctx::new(&g, store), cloud, &input, frame);
    let per_point = g.value(per_point).clone();
    let global_embedding = g.value(global).row(0).to_vec();
    Ok(SceneFeatures {
        per_point,
        global_embedding,
    })
}
