//! Output heads: trajectory planner, pose predictor, joint reconstruction and
//! the graph-convolutional motion decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::body::BodyModel;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, RESIDUAL_OUT};
use crate::params::{Init, ParamId};
use crate::rotation::{quaternion_from_wxyz, quaternion_to_matrix};
use crate::types::{JointSet, LocalFrame, PoseState, EMBEDDING_DIM, JOINT_COORDS, JOINT_COUNT};

/// Rigid frame that planner outputs are expressed relative to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub translation: [f64; 3],
    /// Row-major rotation matrix.
    pub rotation: [f64; 9],
}

impl Anchor {
    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn from_pose(pose: &PoseState) -> Self {
        let t = pose.translation();
        Self {
            translation: [t.x, t.y, t.z],
            rotation: quaternion_to_matrix(pose.orientation()),
        }
    }

    /// Gravity-aligned heading frame at the anchor, in which network inputs
    /// and planner offsets are expressed.
    pub fn frame(&self) -> LocalFrame {
        LocalFrame::heading(self.translation, &self.rotation)
    }
}

/// Layer norm and a linear map per frame to a translation offset (in the
/// anchor's heading frame) and a 6D orientation; both are composed with the
/// anchor.
#[derive(Debug, Clone)]
pub struct TrajectoryPlanner {
    pub norm: LayerNorm,
    pub linear: Linear,
}

const HEAD_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct Trajectory {
    /// F×3
    pub translation: Var,
    /// F×9 row-major rotations.
    pub rotation: Var,
}

impl TrajectoryPlanner {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize) -> Self {
        let norm = LayerNorm::new(init, &format!("{name}.norm"), dim);
        let w = init.weight(format!("{name}.w"), dim, 9, HEAD_GAIN);
        let b = init.store.insert(
            format!("{name}.b"),
            Mat::from_shape_vec((1, 9), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).expect("shape"),
        );
        Self {
            norm,
            linear: Linear {
                w,
                b: Some(b),
                fan_in: dim,
                fan_out: 9,
            },
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, f: Var, anchor: &Anchor) -> Trajectory {
        let g = ctx.g;
        let (frames, _) = g.shape(f);
        let raw = self.linear.forward(ctx, self.norm.forward(ctx, f));
        let offset = g.slice_cols(raw, 0, 3);
        let sixd = g.slice_cols(raw, 3, 9);
        let origin = Mat::from_shape_fn((frames, 3), |(_, a)| anchor.translation[a]);
        let frame = Mat::from_shape_fn((frames, 9), |(_, a)| anchor.rotation[a]);
        let heading = anchor.frame();
        let offset = if heading.is_axis_aligned() {
            offset
        } else {
            let h = Mat::from_shape_fn((frames, 9), |(_, a)| heading.rotation[a]);
            g.rotate_vecs(offset, g.constant(h), false)
        };
        let translation = g.add(offset, g.constant(origin));
        let rotation = g.sixd_to_rot(g.rotate_vecs(sixd, g.constant(frame), false));
        Trajectory {
            translation,
            rotation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosePredictor {
    pub norm: LayerNorm,
    pub linear: Linear,
}

impl PosePredictor {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
            linear: Linear::with_gain(init, name, dim, EMBEDDING_DIM, HEAD_GAIN),
        }
    }

    /// F×c → F×32
    pub fn forward(&self, ctx: Ctx<'_>, f: Var) -> Var {
        self.linear.forward(ctx, self.norm.forward(ctx, f))
    }
}

/// Framewise body joints in the graph: F×3, F×9, F×32 → F×69.
pub fn reconstruct_joints(ctx: Ctx<'_>, body: &BodyModel, translation: Var, rotation: Var, embedding: Var) -> Var {
    let g = ctx.g;
    let (frames, _) = g.shape(translation);
    let rest = g.broadcast_row(g.constant(body.rest_row()), frames);
    let local = g.add(rest, g.matmul(embedding, g.constant(body.blend_matrix())));
    g.add(g.rotate_vecs(local, rotation, false), g.tile_cols(translation, JOINT_COUNT))
}

/// Framewise body joints outside the graph.
pub fn reconstruct_joint_sets(body: &BodyModel, poses: &[PoseState]) -> Result<Vec<JointSet>> {
    poses.iter().map(|p| body.body_joints(p)).collect()
}

/// Graph convolution over the skeleton, applied per frame, predicting joint
/// offsets from root-relative joint positions.
#[derive(Debug, Clone)]
pub struct MotionDecoder {
    layers: Vec<Linear>,
    pub residual_adjacency: ParamId,
    base: Mat,
}

impl MotionDecoder {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, body: &BodyModel, layers: usize, width: usize) -> Self {
        assert!(layers >= 2, "decoder needs at least two layers");
        let mut lin = Vec::with_capacity(layers);
        let mut d = 3;
        for l in 0..layers - 1 {
            lin.push(Linear::new(init, &format!("{name}.gc{l}"), d, width));
            d = width;
        }
        let out = format!("{name}.{RESIDUAL_OUT}");
        lin.push(Linear {
            w: init.zeros(format!("{out}.w"), d, 3),
            b: Some(init.zeros(format!("{out}.b"), 1, 3)),
            fan_in: d,
            fan_out: 3,
        });
        let mut base = Mat::eye(JOINT_COUNT);
        for (a, b) in body.edges() {
            base[[a, b]] = 1.0;
            base[[b, a]] = 1.0;
        }
        Self {
            layers: lin,
            residual_adjacency: init.zeros(format!("{name}.adjacency"), JOINT_COUNT, JOINT_COUNT),
            base,
        }
    }

    /// Tree + self-loops + symmetrized learned residual, rows normalized by
    /// their absolute sums.
    pub fn adjacency(&self, ctx: Ctx<'_>) -> Var {
        let g = ctx.g;
        let l = ctx.p(self.residual_adjacency);
        let sym = g.scale(g.add(l, g.transpose(l)), 0.5);
        g.row_norm_abs(g.add(g.constant(self.base.clone()), sym))
    }

    /// `joints` F×69, `root` F×3; returns refined F×69 joints.
    pub fn forward(&self, ctx: Ctx<'_>, joints: Var, root: Var) -> Var {
        let g = ctx.g;
        let (frames, _) = g.shape(joints);
        let adj = self.adjacency(ctx);
        let local = g.sub(joints, g.tile_cols(root, JOINT_COUNT));
        let mut h = g.reshape(local, frames * JOINT_COUNT, 3);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = ctx.p(layer.w);
            let mixed = g.block_left_mul(adj, g.matmul(h, w));
            h = match layer.b {
                Some(b) => g.add_row(mixed, ctx.p(b)),
                None => mixed,
            };
            if i < last {
                h = g.gelu(h);
            }
        }
        g.add(joints, g.reshape(h, frames, JOINT_COORDS))
    }
}

/// Local salience maps of the last attention block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SalienceMaps {
    /// n weights per TIA block.
    pub global: Vec<Vec<f64>>,
    /// (T+ΔT)×n softmax weights of the last SCA block.
    pub local: Vec<Vec<f64>>,
    /// (T+ΔT)×n spatial bias of the last SCA block.
    pub spatial: Vec<Vec<f64>>,
}

/// Everything the model predicts for one episode, over all T+ΔT frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub observed_frames: usize,
    pub traj_translation: Vec<[f64; 3]>,
    /// Canonical (w, x, y, z).
    pub traj_orientation: Vec<[f64; 4]>,
    pub pose_embeddings: Vec<Vec<f64>>,
    pub joints: Vec<JointSet>,
    pub decoded: Vec<JointSet>,
    #[serde(default)]
    pub salience: SalienceMaps,
}

impl PredictionBundle {
    pub fn len(&self) -> usize {
        self.traj_translation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traj_translation.is_empty()
    }

    pub fn future_frames(&self) -> usize {
        self.len() - self.observed_frames
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n <= self.observed_frames
            || self.traj_orientation.len() != n
            || self.pose_embeddings.len() != n
            || self.joints.len() != n
            || self.decoded.len() != n
        {
            return Err(Error::invalid("prediction bundle has inconsistent lengths"));
        }
        for q in &self.traj_orientation {
            quaternion_from_wxyz(*q)?;
        }
        Ok(())
    }

    /// Predicted poses, one per frame.
    pub fn poses(&self) -> Result<Vec<PoseState>> {
        (0..self.len())
            .map(|k| {
                let t = self.traj_translation[k];
                PoseState::new(
                    nalgebra::Vector3::new(t[0], t[1], t[2]),
                    quaternion_from_wxyz(self.traj_orientation[k])?,
                    self.pose_embeddings[k].clone(),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::body::BodyModel;
    use crate::nn::zero_residual_outputs;
    use crate::params::ParamStore;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn planner(seed: u64) -> (TrajectoryPlanner, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = TrajectoryPlanner::new(&mut Init { store: &mut store, rng: &mut rng }, "planner", 8);
        (p, store)
    }

    #[test]
    fn zero_planner_gives_origin_and_identity() {
        let (p, mut store) = planner(1);
        store.get_mut(p.linear.w).fill(0.0);
        store.get_mut(p.linear.b.unwrap()).fill(0.0);
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = p.forward(Ctx::new(&g, &store), g.constant(random(&mut rng, 16, 8)), &Anchor::identity());
        assert_eq!(g.shape(traj.translation), (16, 3));
        assert!(g.value(traj.translation).iter().all(|&v| v == 0.0));
        for row in g.value(traj.rotation).rows() {
            assert_eq!(row.to_vec(), Anchor::identity().rotation.to_vec());
        }
    }

    #[test]
    fn planner_ignores_feature_scale_and_offset() {
        let (p, store) = planner(3);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random(&mut rng, 4, 8);
        let a = p.forward(ctx, g.constant(f.clone()), &Anchor::identity());
        let b = p.forward(ctx, g.constant(&f * 2.5 + 0.75), &Anchor::identity());
        // Equal up to the layer-norm epsilon.
        for (x, y) in g.value(a.translation).iter().zip(g.value(b.translation).iter()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn bias_init_reproduces_anchor_orientation() {
        let (p, mut store) = planner(5);
        store.get_mut(p.linear.w).fill(0.0);
        let pose = PoseState::new(
            Vector3::new(1.0, 2.0, 0.9),
            UnitQuaternion::from_euler_angles(0.2, -0.1, 1.3),
            vec![0.0; 32],
        )
        .unwrap();
        let anchor = Anchor::from_pose(&pose);
        let g = Graph::new();
        let traj = p.forward(Ctx::new(&g, &store), g.constant(Mat::ones((2, 8))), &anchor);
        for row in g.value(traj.rotation).rows() {
            for (a, b) in row.iter().zip(anchor.rotation) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(g.value(traj.translation).row(1).to_vec(), vec![1.0, 2.0, 0.9]);
    }

    #[test]
    fn pose_predictor_zero_and_frame_local() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = PosePredictor::new(&mut Init { store: &mut store, rng: &mut rng }, "pose", 8);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = random(&mut rng, 16, 8);
        let mut y = x.clone();
        y.row_mut(3).mapv_inplace(|v| 3.0 * v - 1.0);
        let (a, b) = (p.forward(ctx, g.constant(x)), p.forward(ctx, g.constant(y)));
        assert_eq!(g.shape(a), (16, 32));
        // Each frame is decoded on its own, invariant to affine rescaling up
        // to the layer-norm epsilon.
        for (u, v) in g.value(a).iter().zip(g.value(b).iter()) {
            assert!((u - v).abs() < 1e-4);
        }
        store.get_mut(p.linear.w).fill(0.0);
        let g = Graph::new();
        let out = p.forward(Ctx::new(&g, &store), g.constant(Mat::ones((3, 8))));
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_joints_match_body_model() {
        let body = BodyModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let poses: Vec<PoseState> = (0..5)
            .map(|_| {
                PoseState::new(
                    Vector3::new(rng.random(), rng.random(), rng.random()),
                    UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random()),
                    (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let store = ParamStore::new();
        let g = Graph::new();
        let t = Mat::from_shape_fn((5, 3), |(k, a)| poses[k].translation()[a]);
        let r = Mat::from_shape_fn((5, 9), |(k, a)| quaternion_to_matrix(poses[k].orientation())[a]);
        let e = Mat::from_shape_fn((5, 32), |(k, a)| poses[k].pose_embedding()[a]);
        let j = reconstruct_joints(Ctx::new(&g, &store), body, g.constant(t), g.constant(r), g.constant(e));
        let direct = reconstruct_joint_sets(body, &poses).unwrap();
        let j = g.value(j);
        assert_eq!(j.dim(), (5, 69));
        for k in 0..5 {
            for (a, b) in j.row(k).iter().zip(direct[k].flat()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn decoder(seed: u64) -> (MotionDecoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = MotionDecoder::new(&mut Init { store: &mut store, rng: &mut rng }, "decoder", BodyModel::standard(), 6, 16);
        (d, store)
    }

    #[test]
    fn decoder_starts_as_identity() {
        let (d, store) = decoder(8);
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let j = random(&mut rng, 16, 69);
        let out = d.forward(Ctx::new(&g, &store), g.constant(j.clone()), g.constant(random(&mut rng, 16, 3)));
        assert_eq!(*g.value(out), j);
    }

    #[test]
    fn decoder_ignores_adjacency_transpose() {
        let (d, mut store) = decoder(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for id in store.ids_with_prefix("decoder.res_out").collect::<Vec<_>>() {
            let shape = store.get(id).dim();
            *store.get_mut(id) = Mat::from_shape_fn(shape, |_| rng.random_range(-0.5..0.5));
        }
        let raw = random(&mut rng, 23, 23);
        let j = random(&mut rng, 4, 69);
        let root = random(&mut rng, 4, 3);
        let run = |store: &ParamStore| {
            let g = Graph::new();
            let out = d.forward(Ctx::new(&g, store), g.constant(j.clone()), g.constant(root.clone()));
            let v = g.value(out).clone();
            v
        };
        *store.get_mut(d.residual_adjacency) = raw.clone();
        let a = run(&store);
        *store.get_mut(d.residual_adjacency) = raw.t().to_owned();
        let b = run(&store);
        assert_eq!(a, b);
        assert_ne!(a, j);
    }

    #[test]
    fn decoder_zeroing_helper_covers_output_layer() {
        let (d, mut store) = decoder(12);
        for id in store.ids_with_prefix("decoder.res_out").collect::<Vec<_>>() {
            store.get_mut(id).fill(0.3);
        }
        zero_residual_outputs(&mut store);
        let g = Graph::new();
        let j = Mat::from_elem((2, 69), 0.5);
        let out = d.forward(Ctx::new(&g, &store), g.constant(j.clone()), g.constant(Mat::zeros((2, 3))));
        assert_eq!(*g.value(out), j);
    }
}
