//! Simplified deterministic body model: a fixed 23-joint rest skeleton plus a
//! linear blend of the 32-dim pose embedding, posed rigidly by the root
//! translation and orientation.
//!
//! The canonical skeleton and blend tensor are stored in `data/body_model.json`
//! together with the seed that generated the blend tensor.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::rotation::{quaternion_from_wxyz, quaternion_to_wxyz, quaternion_to_matrix};
use crate::types::{JointSet, PoseState, EMBEDDING_DIM, JOINT_COORDS, JOINT_COUNT};

pub const BODY_MODEL_VERSION: u32 = 1;
pub const BODY_MODEL_SEED: u64 = 0x5EED_B0D7;
const BLEND_SCALE: f64 = 0.015;

pub const HEAD_JOINT: usize = 15;

const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "jaw",
];

const PARENTS: [i32; JOINT_COUNT] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 15,
];

/// Body frame: +x forward, +y left, +z up, pelvis at the origin.
const REST: [[f64; 3]; JOINT_COUNT] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.09, -0.08],
    [0.0, -0.09, -0.08],
    [-0.01, 0.0, 0.11],
    [0.01, 0.10, -0.47],
    [0.01, -0.10, -0.47],
    [-0.01, 0.0, 0.24],
    [-0.03, 0.10, -0.87],
    [-0.03, -0.10, -0.87],
    [0.0, 0.0, 0.30],
    [0.10, 0.11, -0.92],
    [0.10, -0.11, -0.92],
    [0.0, 0.0, 0.52],
    [0.0, 0.07, 0.44],
    [0.0, -0.07, 0.44],
    [0.02, 0.0, 0.62],
    [0.0, 0.18, 0.45],
    [0.0, -0.18, 0.45],
    [-0.02, 0.20, 0.20],
    [-0.02, -0.20, 0.20],
    [0.0, 0.21, -0.05],
    [0.0, -0.21, -0.05],
    [0.05, 0.0, 0.57],
];

/// Pelvis height above the floor in the rest pose.
pub const PELVIS_HEIGHT: f64 = 0.93;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    pub version: u32,
    pub seed: u64,
    pub joint_names: Vec<String>,
    pub parents: Vec<i32>,
    pub rest_skeleton: Vec<[f64; 3]>,
    /// `blend[j][axis][k]` flattened row-major: index `(3 * j + axis) * 32 + k`.
    pub blend: Vec<f64>,
}

static MODEL: OnceLock<BodyModel> = OnceLock::new();

impl BodyModel {
    /// Regenerates the model from its seed. The committed data file must equal
    /// `BodyModel::generate(BODY_MODEL_SEED)`.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blend = vec![0.0; JOINT_COORDS * EMBEDDING_DIM];
        // The root joint is the translation itself and carries no blend.
        for v in blend.iter_mut().skip(3 * EMBEDDING_DIM) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * BLEND_SCALE;
        }
        Self {
            version: BODY_MODEL_VERSION,
            seed,
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: PARENTS.to_vec(),
            rest_skeleton: REST.to_vec(),
            blend,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: BodyModel = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "body model",
            detail: e.to_string(),
        })?;
        if model.version != BODY_MODEL_VERSION
            || model.rest_skeleton.len() != JOINT_COUNT
            || model.parents.len() != JOINT_COUNT
            || model.blend.len() != JOINT_COORDS * EMBEDDING_DIM
        {
            return Err(Error::Format {
                what: "body model",
                detail: "unexpected version or tensor shape".into(),
            });
        }
        Ok(model)
    }

    /// The committed model.
    pub fn standard() -> &'static BodyModel {
        MODEL.get_or_init(|| {
            Self::from_json(include_str!("../data/body_model.json"))
                .expect("committed body model is valid")
        })
    }

    /// Rest skeleton flattened to 1×69.
    pub fn rest_row(&self) -> Mat {
        Mat::from_shape_fn((1, JOINT_COORDS), |(_, i)| self.rest_skeleton[i / 3][i % 3])
    }

    /// Blend tensor as a 32×69 matrix so that `embedding · B` gives joint offsets.
    pub fn blend_matrix(&self) -> Mat {
        Mat::from_shape_fn((EMBEDDING_DIM, JOINT_COORDS), |(k, i)| {
            self.blend[i * EMBEDDING_DIM + k]
        })
    }

    /// Undirected kinematic-tree edges.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= 0)
            .map(|(j, &p)| (p as usize, j))
            .collect()
    }

    /// Joints in the body frame (before the rigid root transform).
    pub fn local_joints(&self, embedding: &[f64]) -> Vec<[f64; 3]> {
        let mut out = self.rest_skeleton.clone();
        for (j, joint) in out.iter_mut().enumerate() {
            for (axis, v) in joint.iter_mut().enumerate() {
                let row = &self.blend[(3 * j + axis) * EMBEDDING_DIM..][..EMBEDDING_DIM];
                *v += row.iter().zip(embedding).map(|(b, p)| b * p).sum::<f64>();
            }
        }
        out
    }

    /// `translation + R(orientation) · (rest + B · embedding)`
    pub fn body_joints(&self, pose: &PoseState) -> Result<JointSet> {
        // Re-validate: the quaternion may have been built unchecked by a caller.
        quaternion_from_wxyz(quaternion_to_wxyz(pose.orientation()))?;
        let r = quaternion_to_matrix(pose.orientation());
        let t = pose.translation();
        let joints = self
            .local_joints(pose.pose_embedding())
            .into_iter()
            .map(|p| {
                let mut w = [0.0; 3];
                for (i, wi) in w.iter_mut().enumerate() {
                    *wi = t[i] + r[3 * i] * p[0] + r[3 * i + 1] * p[1] + r[3 * i + 2] * p[2];
                }
                w
            })
            .collect();
        JointSet::new(joints)
    }
}

/// Joints of `pose` under the committed body model.
pub fn body_joints(pose: &PoseState) -> Result<JointSet> {
    BodyModel::standard().body_joints(pose)
}
