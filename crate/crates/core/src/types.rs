//! Domain value types: poses, motion sequences, scene clouds, gaze tracks, joints.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{quaternion_from_wxyz, quaternion_to_wxyz};

/// Length of the per-frame body pose embedding.
pub const EMBEDDING_DIM: usize = 32;
/// Number of skeleton joints.
pub const JOINT_COUNT: usize = 23;
/// Flattened joint coordinates per frame.
pub const JOINT_COORDS: usize = JOINT_COUNT * 3;

/// Rigid frame for re-expressing world quantities: `p ↦ Hᵀ (p − origin)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: [f64; 3],
    /// Row-major `H`; its columns are the frame axes in world coordinates.
    pub rotation: [f64; 9],
}

impl LocalFrame {
    pub const IDENTITY_ROTATION: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

    /// Translation-only frame.
    pub fn at(origin: [f64; 3]) -> Self {
        Self {
            origin,
            rotation: Self::IDENTITY_ROTATION,
        }
    }

    /// Gravity-aligned frame at `origin` whose x axis is the floor projection of
    /// the x axis of `rotation` (row-major). Falls back to the world axes when
    /// that axis is vertical.
    pub fn heading(origin: [f64; 3], rotation: &[f64; 9]) -> Self {
        let (x, y) = (rotation[0], rotation[3]);
        let n = x.hypot(y);
        if n < 1e-9 {
            return Self::at(origin);
        }
        let (c, s) = (x / n, y / n);
        Self {
            origin,
            rotation: [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0],
        }
    }

    /// `Hᵀ v`
    pub fn vector_to_local(&self, v: [f64; 3]) -> [f64; 3] {
        let h = &self.rotation;
        std::array::from_fn(|j| h[j] * v[0] + h[3 + j] * v[1] + h[6 + j] * v[2])
    }

    /// `Hᵀ (p − origin)`
    pub fn point_to_local(&self, p: [f64; 3]) -> [f64; 3] {
        self.vector_to_local(std::array::from_fn(|a| p[a] - self.origin[a]))
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let h = &self.rotation;
        let m = nalgebra::Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m))
    }

    pub fn is_axis_aligned(&self) -> bool {
        self.rotation == Self::IDENTITY_ROTATION
    }
}

/// One frame of motion: global translation, orientation and pose embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseStateRepr", into = "PoseStateRepr")]
pub struct PoseState {
    translation: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
    pose_embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseStateRepr {
    translation: [f64; 3],
    /// (w, x, y, z)
    orientation: [f64; 4],
    pose_embedding: Vec<f64>,
}

impl TryFrom<PoseStateRepr> for PoseState {
    type Error = Error;

    fn try_from(r: PoseStateRepr) -> Result<Self> {
        PoseState::new(
            Vector3::from(r.translation),
            quaternion_from_wxyz(r.orientation)?,
            r.pose_embedding,
        )
    }
}

impl From<PoseState> for PoseStateRepr {
    fn from(p: PoseState) -> Self {
        PoseStateRepr {
            translation: p.translation.into(),
            orientation: quaternion_to_wxyz(&p.orientation),
            pose_embedding: p.pose_embedding,
        }
    }
}

impl PoseState {
    pub fn new(
        translation: Vector3<f64>,
        orientation: UnitQuaternion<f64>,
        pose_embedding: Vec<f64>,
    ) -> Result<Self> {
        if pose_embedding.len() != EMBEDDING_DIM {
            return Err(Error::invalid(format!(
                "pose embedding has length {}, expected {EMBEDDING_DIM}",
                pose_embedding.len()
            )));
        }
        if translation.iter().chain(&pose_embedding).any(|x| !x.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let orientation = quaternion_from_wxyz(quaternion_to_wxyz(&orientation))?;
        Ok(Self {
            translation,
            orientation,
            pose_embedding,
        })
    }

    /// Rest pose at the origin.
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
            pose_embedding: vec![0.0; EMBEDDING_DIM],
        }
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn orientation(&self) -> &UnitQuaternion<f64> {
        &self.orientation
    }

    pub fn pose_embedding(&self) -> &[f64] {
        &self.pose_embedding
    }

    /// Applies the rigid transform `x ↦ rot·x + shift` to the body root.
    pub fn transformed(&self, rot: &UnitQuaternion<f64>, shift: &Vector3<f64>) -> Self {
        Self {
            translation: rot * self.translation + shift,
            orientation: crate::rotation::canonical(rot * self.orientation),
            pose_embedding: self.pose_embedding.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub frames: Vec<PoseState>,
    /// Hz
    pub frame_rate: f64,
}

impl MotionSequence {
    pub fn new(frames: Vec<PoseState>, frame_rate: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("motion sequence is empty"));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn last(&self) -> &PoseState {
        self.frames.last().expect("motion sequence is nonempty")
    }
}

/// Extends `observed` with `future_frames` copies of its last frame.
pub fn pad_virtual_sequence(observed: &MotionSequence, future_frames: usize) -> Result<MotionSequence> {
    let last = observed
        .frames
        .last()
        .ok_or_else(|| Error::invalid("cannot pad an empty sequence"))?;
    let mut frames = observed.frames.clone();
    frames.extend(std::iter::repeat_n(last.clone(), future_frames));
    Ok(MotionSequence {
        frames,
        frame_rate: observed.frame_rate,
    })
}

/// Scene points in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePointCloud {
    pub points: Vec<[f64; 3]>,
}

impl ScenePointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("scene point cloud is empty"));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("scene point cloud has non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points as an n×3 matrix.
    pub fn to_mat(&self) -> crate::autograd::Mat {
        crate::autograd::Mat::from_shape_fn((self.points.len(), 3), |(i, j)| self.points[i][j])
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Gaze points (eye-ray/scene intersections) for the observed frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSequence {
    pub points: Vec<[f64; 3]>,
}

impl GazeSequence {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSet {
    pub joints: Vec<[f64; 3]>,
}

impl JointSet {
    pub fn new(joints: Vec<[f64; 3]>) -> Result<Self> {
        if joints.len() != JOINT_COUNT {
            return Err(Error::invalid(format!(
                "joint set has {} joints, expected {JOINT_COUNT}",
                joints.len()
            )));
        }
        if joints.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("joint set has non-finite coordinates"));
        }
        Ok(Self { joints })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != JOINT_COORDS {
            return Err(Error::invalid("flat joint vector must have 69 entries"));
        }
        Self::new(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub observed_frames: usize,
    pub future_frames: usize,
    /// Hz
    pub frame_rate: f64,
}

impl Default for HorizonConfig {
    /// 3 s observed and 5 s predicted at 2 Hz.
    fn default() -> Self {
        Self {
            observed_frames: 6,
            future_frames: 10,
            frame_rate: 2.0,
        }
    }
}

impl HorizonConfig {
    pub fn new(observed_frames: usize, future_frames: usize, frame_rate: f64) -> Result<Self> {
        let h = Self {
            observed_frames,
            future_frames,
            frame_rate,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observed_frames == 0 || self.future_frames == 0 {
            return Err(Error::invalid("horizons must be at least one frame"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.observed_frames + self.future_frames
    }
}
