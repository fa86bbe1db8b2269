//! Semantic coherence-aware attention: per-frame salience over scene points,
//! plus an additive spatial bias computed from scene coordinates expressed in
//! the body frame of each predicted pose.

use nalgebra::UnitQuaternion;
use rand::Rng;

use crate::autograd::{Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, EncoderLayer, Linear, Mlp};
use crate::params::Init;
use crate::rotation::UNIT_TOLERANCE;
use crate::types::ScenePointCloud;

/// Scene positions in the body frame of each frame, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeScene {
    pub frames: usize,
    pub points: usize,
    pub positions: Vec<[f64; 3]>,
}

impl RelativeScene {
    pub fn get(&self, frame: usize, point: usize) -> [f64; 3] {
        self.positions[frame * self.points + point]
    }
}

/// `S_rel[k][i] = R(o_k)ᵀ (S[i] − t_k)`.
pub fn relative_normalize(
    scene: &ScenePointCloud,
    translations: &[[f64; 3]],
    orientations: &[UnitQuaternion<f64>],
) -> Result<RelativeScene> {
    if translations.len() != orientations.len() {
        return Err(Error::invalid("trajectory translation and orientation lengths differ"));
    }
    let mut positions = Vec::with_capacity(translations.len() * scene.len());
    for (t, q) in translations.iter().zip(orientations) {
        let n = q.quaternion().norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(format!("trajectory orientation has norm {n}")));
        }
        let inv = q.inverse();
        for p in &scene.points {
            let d = nalgebra::Vector3::new(p[0] - t[0], p[1] - t[1], p[2] - t[2]);
            let r = inv * d;
            positions.push([r.x, r.y, r.z]);
        }
    }
    Ok(RelativeScene {
        frames: translations.len(),
        points: scene.len(),
        positions,
    })
}

/// Graph form of [`relative_normalize`]: `scene_row` is the cloud flattened to
/// 1×3n, `translation` F×3, `rotation` F×9 row-major. Returns (F·n)×3.
pub fn relative_positions(ctx: Ctx<'_>, scene_row: Var, translation: Var, rotation: Var) -> Var {
    let g = ctx.g;
    let (frames, _) = g.shape(translation);
    let (_, cols) = g.shape(scene_row);
    let n = cols / 3;
    let diff = g.sub(g.broadcast_row(scene_row, frames), g.tile_cols(translation, n));
    let local = g.rotate_vecs(diff, rotation, true);
    g.reshape(local, frames * n, 3)
}

/// Cloud flattened to a 1×3n row, the layout expected by [`relative_positions`].
pub fn scene_row(scene: &ScenePointCloud) -> Mat {
    Mat::from_shape_fn((1, 3 * scene.len()), |(_, i)| scene.points[i / 3][i % 3])
}

#[derive(Debug, Clone)]
pub struct ScaBlock {
    encoder: EncoderLayer,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub bias: Mlp,
    mlp: Mlp,
    dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ScaStep {
    pub output: Var,
    /// F×n softmax weights.
    pub salience: Var,
    /// F×n additive bias; `None` when the spatial pathway is off.
    pub spatial_bias: Option<Var>,
}

impl ScaBlock {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        dim: usize,
        scene_dim: usize,
        heads: usize,
        ff: usize,
        hidden: usize,
        spatial_hidden: usize,
    ) -> Self {
        Self {
            encoder: EncoderLayer::new(init, &format!("{name}.encoder"), dim, heads, ff),
            query: Linear::new(init, &format!("{name}.query"), dim, dim),
            key: Linear::new(init, &format!("{name}.key"), scene_dim, dim),
            value: Linear::new(init, &format!("{name}.value"), scene_dim, dim),
            bias: Mlp::plain(init, &format!("{name}.spatial"), 3, spatial_hidden, 1),
            mlp: Mlp::new(init, &format!("{name}.mlp"), 2 * dim, hidden, dim),
            dim,
        }
    }

    /// Per-(frame, point) scalar from the relative position, F×n.
    pub fn spatial_bias(&self, ctx: Ctx<'_>, relative: Var, frames: usize) -> Var {
        let g = ctx.g;
        let (rows, _) = g.shape(relative);
        g.reshape(self.bias.forward(ctx, relative), frames, rows / frames)
    }

    /// `relative` is the (F·n)×3 output of [`relative_positions`], or `None` to
    /// drop the spatial bias.
    pub fn forward(&self, ctx: Ctx<'_>, f_in: Var, per_point: Var, relative: Option<Var>) -> ScaStep {
        let g = ctx.g;
        let (frames, _) = g.shape(f_in);
        let f_m = self.encoder.forward(ctx, f_in);
        let q = self.query.forward(ctx, f_m);
        let k = self.key.forward(ctx, per_point);
        let v = self.value.forward(ctx, per_point);
        let s_l = g.softmax_rows(g.scale(g.matmul_t(q, k), 1.0 / (self.dim as f64).sqrt()));
        let spatial = relative.map(|r| self.spatial_bias(ctx, r, frames));
        let weights = match spatial {
            Some(b) => g.add(s_l, b),
            None => s_l,
        };
        let f_sm = g.matmul(weights, v);
        let fused = self.mlp.forward(ctx, g.concat_cols(&[f_m, f_sm]));
        ScaStep {
            output: g.add(f_in, fused),
            salience: s_l,
            spatial_bias: spatial,
        }
    }
}
