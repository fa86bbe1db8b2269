//! Temporal motion encoder, gaze snapping, and the gaze encoder.

use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Ctx, EncoderLayer, Linear};
use crate::params::{Init, ParamStore};
use crate::rotation::rotation_encode;
use crate::types::{GazeSequence, LocalFrame, MotionSequence, ScenePointCloud, EMBEDDING_DIM};

/// Per-frame input width: translation (3), 6D orientation (6), pose embedding.
pub const MOTION_FEATURES: usize = 3 + 6 + EMBEDDING_DIM;

/// Frame features of a padded sequence, translations and orientations
/// expressed in `frame`.
pub fn motion_features(seq: &MotionSequence, frame: &LocalFrame) -> Result<Mat> {
    let mut m = Mat::zeros((seq.len(), MOTION_FEATURES));
    let inverse = frame.quaternion().inverse();
    for (k, f) in seq.frames.iter().enumerate() {
        if f.pose_embedding().len() != EMBEDDING_DIM {
            return Err(Error::invalid(format!(
                "frame {k} has a {}-dim pose embedding",
                f.pose_embedding().len()
            )));
        }
        let t = frame.point_to_local((*f.translation()).into());
        for i in 0..3 {
            m[[k, i]] = t[i];
        }
        for (i, v) in rotation_encode(&(inverse * f.orientation())).iter().enumerate() {
            m[[k, 3 + i]] = *v;
        }
        for (i, v) in f.pose_embedding().iter().enumerate() {
            m[[k, 9 + i]] = *v;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct MotionEncoder {
    lift: Linear,
    layers: Vec<EncoderLayer>,
    pub positional: bool,
    dim: usize,
}

impl MotionEncoder {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        ff: usize,
    ) -> Self {
        Self {
            lift: Linear::new(init, &format!("{name}.lift"), MOTION_FEATURES, dim),
            layers: (0..layers)
                .map(|l| EncoderLayer::new(init, &format!("{name}.layer{l}"), dim, heads, ff))
                .collect(),
            positional: true,
            dim,
        }
    }

    /// `features` is `(T+ΔT) × MOTION_FEATURES`; returns `(T+ΔT) × c_m`.
    pub fn forward(&self, ctx: Ctx<'_>, features: Var) -> Var {
        let g = ctx.g;
        let (len, _) = g.shape(features);
        let mut x = self.lift.forward(ctx, features);
        if self.positional {
            x = g.add(x, g.constant(positional_encoding(len, self.dim)));
        }
        for layer in &self.layers {
            x = layer.forward(ctx, x);
        }
        x
    }
}

/// Runs the motion encoder on a padded sequence outside of training.
pub fn encode_motion(padded: &MotionSequence, encoder: &MotionEncoder, store: &ParamStore) -> Result<Mat> {
    let feats = motion_features(padded, &LocalFrame::at([0.0; 3]))?;
    let g = Graph::new();
    let x = g.constant(feats);
    let out = encoder.forward(Ctx::new(&g, store), x);
    let value = g.value(out).clone();
    Ok(value)
}

/// Index of the scene point nearest to `gaze`; ties go to the lowest index.
pub fn gaze_to_scene_index(gaze: [f64; 3], scene: &ScenePointCloud) -> Result<usize> {
    if gaze.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("gaze point is not finite"));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, p) in scene.points.iter().enumerate() {
        let d = (p[0] - gaze[0]).powi(2) + (p[1] - gaze[1]).powi(2) + (p[2] - gaze[2]).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// Snapped scene indices for the observed gaze, padded with the last one.
pub fn gaze_track(
    gaze: &GazeSequence,
    scene: &ScenePointCloud,
    observed_frames: usize,
    future_frames: usize,
) -> Result<Vec<usize>> {
    if gaze.len() != observed_frames || gaze.is_empty() {
        return Err(Error::invalid(format!(
            "gaze has {} frames, expected {observed_frames}",
            gaze.len()
        )));
    }
    let mut idx = gaze
        .points
        .iter()
        .map(|&p| gaze_to_scene_index(p, scene))
        .collect::<Result<Vec<_>>>()?;
    let last = *idx.last().expect("nonempty");
    idx.resize(observed_frames + future_frames, last);
    Ok(idx)
}

/// Gaze coordinates in `frame`, padded with the last observed one.
pub fn gaze_coordinates(gaze: &GazeSequence, future_frames: usize, frame: &LocalFrame) -> Mat {
    let n = gaze.len();
    let local: Vec<[f64; 3]> = gaze.points.iter().map(|&p| frame.point_to_local(p)).collect();
    Mat::from_shape_fn((n + future_frames, 3), |(k, a)| local[k.min(n - 1)][a])
}

/// Lift of the indexed scene features (plus the gaze coordinate) followed by
/// one self-attention layer with positional encoding.
#[derive(Debug, Clone)]
pub struct GazeEncoder {
    lift: Linear,
    layer: EncoderLayer,
    dim: usize,
}

impl GazeEncoder {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        scene_dim: usize,
        dim: usize,
        heads: usize,
        ff: usize,
    ) -> Self {
        Self {
            lift: Linear::new(init, &format!("{name}.lift"), scene_dim + 3, dim),
            layer: EncoderLayer::new(init, &format!("{name}.layer"), dim, heads, ff),
            dim,
        }
    }

    /// `track` is the indexed feature track `(T+ΔT) × c_s`, `coords` the matching
    /// `(T+ΔT) × 3` gaze coordinates.
    pub fn forward(&self, ctx: Ctx<'_>, track: Var, coords: Var) -> Var {
        let g = ctx.g;
        let (len, _) = g.shape(track);
        let x = self.lift.forward(ctx, g.concat_cols(&[track, coords]));
        let x = g.add(x, g.constant(positional_encoding(len, self.dim)));
        self.layer.forward(ctx, x)
    }
}
