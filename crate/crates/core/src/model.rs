//! The full predictor: encoders, TIA and SCA stacks, heads, decoder and
//! discriminator, wired according to the model configuration and toggles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::Discriminator;
use crate::autograd::{Graph, Mat, Var};
use crate::body::BodyModel;
use crate::error::{Error, Result};
use crate::heads::{
    reconstruct_joints, Anchor, MotionDecoder, PosePredictor, PredictionBundle, SalienceMaps, TrajectoryPlanner,
};
use crate::motion_encoder::{gaze_coordinates, gaze_track, motion_features, GazeEncoder, MotionEncoder};
use crate::nn::Ctx;
use crate::params::{Init, ParamStore};
use crate::rotation::{matrix_to_quaternion, quaternion_to_matrix, quaternion_to_wxyz};
use crate::sca::{relative_positions, scene_row, ScaBlock};
use crate::scene_encoder::{
    farthest_point_sample, PointwiseEncoder, SceneEncoder, SceneInput, SceneVars, SetAbstractionEncoder,
    SetAbstractionLevel, SetAbstractionSpec,
};
use crate::synthworld::EpisodeRecord;
use crate::tia::{Aggregator, TiaBlock};
use crate::types::{pad_virtual_sequence, HorizonConfig, JointSet, LocalFrame, ScenePointCloud, JOINT_COORDS, JOINT_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// c_m
    pub motion_dim: usize,
    /// c_s
    pub scene_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Hidden width of the TIA/SCA fusion MLPs.
    pub mlp_hidden: usize,
    /// Hidden width of the per-point spatial-bias MLP in SCA.
    pub spatial_hidden: usize,
    pub motion_layers: usize,
    pub tia_blocks: usize,
    pub sca_blocks: usize,
    pub gcn_layers: usize,
    pub gcn_width: usize,
    pub disc_layers: usize,
    pub disc_dim: usize,
    /// Points fed to the scene encoder after farthest-point downsampling.
    pub scene_points: usize,
    pub set_abstraction: SetAbstractionSpec,
    pub aggregator: Aggregator,
    pub horizon: HorizonConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            motion_dim: 256,
            scene_dim: 256,
            heads: 8,
            ff_dim: 1024,
            mlp_hidden: 1024,
            spatial_hidden: 1024,
            motion_layers: 6,
            tia_blocks: 2,
            sca_blocks: 2,
            gcn_layers: 6,
            gcn_width: 64,
            disc_layers: 3,
            disc_dim: 256,
            scene_points: 4096,
            set_abstraction: SetAbstractionSpec::default(),
            aggregator: Aggregator::Last,
            horizon: HorizonConfig::default(),
        }
    }
}

fn level(centroids: usize, radius: Option<f64>, neighbors: usize, mlp: Vec<usize>) -> SetAbstractionLevel {
    SetAbstractionLevel {
        centroids,
        radius,
        neighbors,
        mlp,
    }
}

impl ModelConfig {
    /// Reduced widths and depths for CPU-scale experiments.
    pub fn small() -> Self {
        Self {
            motion_dim: 32,
            scene_dim: 32,
            heads: 4,
            ff_dim: 64,
            mlp_hidden: 64,
            spatial_hidden: 16,
            motion_layers: 3,
            tia_blocks: 2,
            sca_blocks: 2,
            gcn_layers: 3,
            gcn_width: 16,
            disc_layers: 3,
            disc_dim: 32,
            scene_points: 512,
            set_abstraction: SetAbstractionSpec {
                levels: vec![
                    level(128, Some(0.5), 16, vec![32, 32]),
                    level(32, Some(1.2), 16, vec![32, 32]),
                    level(1, None, 0, vec![32, 32]),
                ],
                fp_widths: vec![32],
            },
            aggregator: Aggregator::Last,
            horizon: HorizonConfig::default(),
        }
    }

    /// Minimal widths for gradient checks and overfitting tests.
    pub fn tiny() -> Self {
        Self {
            motion_dim: 16,
            scene_dim: 16,
            heads: 2,
            ff_dim: 16,
            mlp_hidden: 16,
            spatial_hidden: 8,
            motion_layers: 1,
            tia_blocks: 2,
            sca_blocks: 2,
            gcn_layers: 3,
            gcn_width: 8,
            disc_layers: 1,
            disc_dim: 16,
            scene_points: 32,
            set_abstraction: SetAbstractionSpec {
                levels: vec![level(8, Some(1.5), 4, vec![16]), level(1, None, 0, vec![16])],
                fp_widths: vec![16],
            },
            aggregator: Aggregator::Last,
            horizon: HorizonConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::invalid(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn validate(&self, toggles: &Toggles) -> Result<()> {
        self.horizon.validate()?;
        if self.motion_dim == 0 || self.heads == 0 || self.motion_dim % self.heads != 0 {
            return Err(Error::invalid("heads must divide the motion width"));
        }
        if self.disc_dim % self.heads != 0 {
            return Err(Error::invalid("heads must divide the discriminator width"));
        }
        if self.gcn_layers < 2 {
            return Err(Error::invalid("the motion decoder needs at least two layers"));
        }
        if toggles.scene && toggles.pointnet {
            self.set_abstraction.validate()?;
            if self.set_abstraction.global_dim() != self.scene_dim || self.set_abstraction.point_dim() != self.scene_dim {
                return Err(Error::invalid(
                    "set abstraction output widths must equal the scene width",
                ));
            }
            if self.scene_points < self.set_abstraction.min_points() {
                return Err(Error::invalid("scene point budget is below the first centroid count"));
            }
        }
        Ok(())
    }
}

/// Modality and component switches mirroring the ablation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub scene: bool,
    pub gaze: bool,
    pub tia: bool,
    pub sca: bool,
    pub decoder: bool,
    pub discriminator: bool,
    /// Hierarchical scene encoder; off selects the point-wise MLP encoder.
    pub pointnet: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            scene: true,
            gaze: true,
            tia: true,
            sca: true,
            decoder: true,
            discriminator: true,
            pointnet: true,
        }
    }
}

/// A scene cloud at model resolution plus its encoder precomputation.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub cloud: ScenePointCloud,
    input: Option<SceneInput>,
    row: Mat,
}

/// Network inputs for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeInput {
    pub motion: Mat,
    pub anchor: Anchor,
    pub gaze_index: Vec<usize>,
    pub gaze_coords: Mat,
}

/// Supervision targets for one episode (future frames unless noted).
#[derive(Debug, Clone)]
pub struct EpisodeTargets {
    pub translation: Mat,
    pub rotation: Mat,
    pub embedding: Mat,
    pub joints: Mat,
    /// Observed-frame joints, prepended as context for the discriminator.
    pub observed_joints: Mat,
}

/// Graph handles produced by one forward pass over all T+ΔT frames.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub translation: Var,
    pub rotation: Var,
    pub embedding: Var,
    pub joints: Var,
    pub decoded: Var,
    pub global_salience: Vec<Var>,
    pub local_salience: Option<Var>,
    pub spatial_bias: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub toggles: Toggles,
    scene: Option<SceneEncoder>,
    motion: MotionEncoder,
    gaze: Option<GazeEncoder>,
    tia: Vec<TiaBlock>,
    planner: TrajectoryPlanner,
    sca: Vec<ScaBlock>,
    pose: PosePredictor,
    decoder: Option<MotionDecoder>,
    discriminator: Option<Discriminator>,
    body: &'static BodyModel,
}

/// Parameter-name prefix of the discriminator.
pub const DISCRIMINATOR_PREFIX: &str = "disc.";

impl Model {
    /// Builds the model and draws its initial weights from `seed`.
    pub fn new(config: &ModelConfig, toggles: &Toggles, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate(toggles)?;
        let c = config;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let body = BodyModel::standard();
        let scene = if toggles.scene {
            Some(if toggles.pointnet {
                SceneEncoder::SetAbstraction(SetAbstractionEncoder::new(&mut init, "scene", &c.set_abstraction)?)
            } else {
                SceneEncoder::Pointwise(PointwiseEncoder::new(&mut init, "scene", c.scene_dim))
            })
        } else {
            None
        };
        let motion = MotionEncoder::new(&mut init, "motion", c.motion_dim, c.motion_layers, c.heads, c.ff_dim);
        let gaze = toggles
            .gaze
            .then(|| GazeEncoder::new(&mut init, "gaze", c.scene_dim, c.motion_dim, c.heads, c.ff_dim));
        let tia = if toggles.tia {
            (0..c.tia_blocks)
                .map(|b| {
                    TiaBlock::new(
                        &mut init,
                        &format!("tia{b}"),
                        c.motion_dim,
                        c.scene_dim,
                        c.heads,
                        c.ff_dim,
                        c.mlp_hidden,
                        c.aggregator,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let planner = TrajectoryPlanner::new(&mut init, "planner", c.motion_dim);
        let sca = if toggles.sca {
            (0..c.sca_blocks)
                .map(|b| {
                    ScaBlock::new(
                        &mut init,
                        &format!("sca{b}"),
                        c.motion_dim,
                        c.scene_dim,
                        c.heads,
                        c.ff_dim,
                        c.mlp_hidden,
                        c.spatial_hidden,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let pose = PosePredictor::new(&mut init, "pose", c.motion_dim);
        let decoder = toggles
            .decoder
            .then(|| MotionDecoder::new(&mut init, "decoder", body, c.gcn_layers, c.gcn_width));
        let discriminator = toggles.discriminator.then(|| {
            Discriminator::new(
                &mut init,
                DISCRIMINATOR_PREFIX.trim_end_matches('.'),
                c.disc_dim,
                c.scene_dim,
                c.disc_layers,
                c.heads,
                c.ff_dim,
            )
        });
        let model = Self {
            config: config.clone(),
            toggles: *toggles,
            scene,
            motion,
            gaze,
            tia,
            planner,
            sca,
            pose,
            decoder,
            discriminator,
            body,
        };
        Ok((model, store))
    }

    pub fn horizon(&self) -> HorizonConfig {
        self.config.horizon
    }

    pub fn has_discriminator(&self) -> bool {
        self.discriminator.is_some()
    }

    /// Downsamples `raw` to the configured point budget and precomputes the
    /// encoder's sampling structure.
    pub fn prepare_scene(&self, raw: &ScenePointCloud) -> Result<PreparedScene> {
        let cloud = if raw.len() > self.config.scene_points {
            let idx = farthest_point_sample(&raw.points, self.config.scene_points)?;
            ScenePointCloud::new(idx.into_iter().map(|i| raw.points[i]).collect())?
        } else {
            raw.clone()
        };
        self.prepare_scene_exact(cloud)
    }

    /// Uses `cloud` as is, without downsampling.
    pub fn prepare_scene_exact(&self, cloud: ScenePointCloud) -> Result<PreparedScene> {
        let input = match &self.scene {
            Some(enc) => Some(enc.prepare(&cloud)?),
            None => None,
        };
        let row = scene_row(&cloud);
        Ok(PreparedScene { cloud, input, row })
    }

    pub fn prepare_episode(&self, record: &EpisodeRecord, scene: &PreparedScene) -> Result<(EpisodeInput, EpisodeTargets)> {
        let h = self.config.horizon;
        if record.observed.len() != h.observed_frames || record.future.len() != h.future_frames {
            return Err(Error::invalid(format!(
                "episode {} has {}+{} frames, model expects {}+{}",
                record.id,
                record.observed.len(),
                record.future.len(),
                h.observed_frames,
                h.future_frames
            )));
        }
        let last = record.observed.last();
        let anchor = Anchor::from_pose(last);
        let padded = pad_virtual_sequence(&record.observed, h.future_frames)?;
        let input = EpisodeInput {
            motion: motion_features(&padded, &anchor.frame())?,
            anchor,
            gaze_index: gaze_track(&record.gaze, &scene.cloud, h.observed_frames, h.future_frames)?,
            gaze_coords: gaze_coordinates(&record.gaze, h.future_frames, &anchor.frame()),
        };
        let fut = &record.future.frames;
        let joints = |frames: &[crate::types::PoseState]| -> Result<Mat> {
            let mut m = Mat::zeros((frames.len(), JOINT_COORDS));
            for (k, f) in frames.iter().enumerate() {
                for (i, v) in self.body.body_joints(f)?.flat().into_iter().enumerate() {
                    m[[k, i]] = v;
                }
            }
            Ok(m)
        };
        let targets = EpisodeTargets {
            translation: Mat::from_shape_fn((fut.len(), 3), |(k, a)| fut[k].translation()[a]),
            rotation: Mat::from_shape_fn((fut.len(), 9), |(k, a)| quaternion_to_matrix(fut[k].orientation())[a]),
            embedding: Mat::from_shape_fn((fut.len(), 32), |(k, a)| fut[k].pose_embedding()[a]),
            joints: joints(fut)?,
            observed_joints: joints(&record.observed.frames)?,
        };
        Ok((input, targets))
    }

    /// Scene features in `frame`, or zeros when the scene modality is off.
    pub fn encode_scene(&self, ctx: Ctx<'_>, scene: &PreparedScene, frame: &LocalFrame) -> SceneVars {
        match (&self.scene, &scene.input) {
            (Some(enc), Some(input)) => {
                let (per_point, global) = enc.forward(ctx, &scene.cloud, input, frame);
                SceneVars { per_point, global }
            }
            _ => SceneVars::zeros(ctx.g, scene.cloud.len(), self.config.scene_dim),
        }
    }

    pub fn forward(&self, ctx: Ctx<'_>, scene: &PreparedScene, vars: SceneVars, ep: &EpisodeInput) -> ForwardPass {
        let g = ctx.g;
        let frames = ep.motion.nrows();
        let f_m = self.motion.forward(ctx, g.constant(ep.motion.clone()));
        let f_gaze = match &self.gaze {
            Some(enc) => {
                let track = g.gather_rows(vars.per_point, &ep.gaze_index);
                enc.forward(ctx, track, g.constant(ep.gaze_coords.clone()))
            }
            None => g.zeros(frames, self.config.motion_dim),
        };
        let mut f_tia = f_m;
        let mut global_salience = Vec::with_capacity(self.tia.len());
        for block in &self.tia {
            let step = block.forward(ctx, f_tia, vars, f_gaze);
            f_tia = step.output;
            global_salience.push(step.salience);
        }
        let traj = self.planner.forward(ctx, f_tia, &ep.anchor);
        let relative = (self.scene.is_some() && !self.sca.is_empty())
            .then(|| relative_positions(ctx, g.constant(scene.row.clone()), traj.translation, traj.rotation));
        let mut f_sca = f_m;
        let mut local_salience = None;
        let mut spatial_bias = None;
        for block in &self.sca {
            let step = block.forward(ctx, f_sca, vars.per_point, relative);
            f_sca = step.output;
            local_salience = Some(step.salience);
            spatial_bias = step.spatial_bias;
        }
        let embedding = self.pose.forward(ctx, f_sca);
        let joints = reconstruct_joints(ctx, self.body, traj.translation, traj.rotation, embedding);
        let decoded = match &self.decoder {
            Some(dec) => dec.forward(ctx, joints, traj.translation),
            None => joints,
        };
        ForwardPass {
            translation: traj.translation,
            rotation: traj.rotation,
            embedding,
            joints,
            decoded,
            global_salience,
            local_salience,
            spatial_bias,
        }
    }

    /// Realism logit of a full joint sequence, expressed in the anchor's
    /// heading frame. `None` when the discriminator is off.
    pub fn discriminate(&self, ctx: Ctx<'_>, joints: Var, anchor: &Anchor, scene_global: Var) -> Option<Var> {
        let disc = self.discriminator.as_ref()?;
        let g = ctx.g;
        let (frames, _) = g.shape(joints);
        let origin = Mat::from_shape_fn((frames, JOINT_COORDS), |(_, i)| anchor.translation[i % 3]);
        let heading = anchor.frame();
        let mut local = g.sub(joints, g.constant(origin));
        if !heading.is_axis_aligned() {
            let h = Mat::from_shape_fn((frames, 9), |(_, a)| heading.rotation[a]);
            local = g.rotate_vecs(local, g.constant(h), true);
        }
        Some(disc.forward(ctx, local, scene_global))
    }

    /// Inference for one episode.
    pub fn predict(&self, store: &ParamStore, scene: &PreparedScene, record: &EpisodeRecord) -> Result<PredictionBundle> {
        let (input, _) = self.prepare_episode(record, scene)?;
        let g = Graph::new();
        let ctx = Ctx::new(&g, store);
        let vars = self.encode_scene(ctx, scene, &input.anchor.frame());
        let out = self.forward(ctx, scene, vars, &input);
        Ok(self.bundle(&g, &out))
    }

    /// Reads a forward pass back into plain values.
    pub fn bundle(&self, g: &Graph, out: &ForwardPass) -> PredictionBundle {
        let t = g.value(out.translation);
        let r = g.value(out.rotation);
        let j = g.value(out.joints);
        let d = g.value(out.decoded);
        let frames = t.nrows();
        let to_sets = |m: &Mat| -> Vec<JointSet> {
            (0..frames)
                .map(|k| JointSet {
                    joints: (0..JOINT_COUNT).map(|i| [m[[k, 3 * i]], m[[k, 3 * i + 1]], m[[k, 3 * i + 2]]]).collect(),
                })
                .collect()
        };
        let rows = |v: Var| -> Vec<Vec<f64>> { g.value(v).rows().into_iter().map(|r| r.to_vec()).collect() };
        PredictionBundle {
            observed_frames: self.config.horizon.observed_frames,
            traj_translation: (0..frames).map(|k| [t[[k, 0]], t[[k, 1]], t[[k, 2]]]).collect(),
            traj_orientation: (0..frames)
                .map(|k| {
                    let m: Vec<f64> = r.row(k).to_vec();
                    let m: [f64; 9] = m.try_into().expect("9 entries");
                    quaternion_to_wxyz(&matrix_to_quaternion(&m))
                })
                .collect(),
            pose_embeddings: rows(out.embedding),
            joints: to_sets(&j),
            decoded: to_sets(&d),
            salience: SalienceMaps {
                global: out.global_salience.iter().map(|&s| g.value(s).row(0).to_vec()).collect(),
                local: out.local_salience.map(rows).unwrap_or_default(),
                spatial: out.spatial_bias.map(rows).unwrap_or_default(),
            },
        }
    }
}
