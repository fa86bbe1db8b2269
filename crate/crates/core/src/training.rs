//! Losses, AdamW, the alternating generator/discriminator step and the epoch
//! loop with checkpointing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{adversarial_losses, discriminator_loss, generator_loss};
use crate::autograd::{Graph, Mat, Var};
use crate::body::BodyModel;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::heads::PredictionBundle;
use crate::model::{EpisodeInput, EpisodeTargets, ForwardPass, Model, ModelConfig, PreparedScene, Toggles, DISCRIMINATOR_PREFIX};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::rotation::{geodesic, quaternion_from_wxyz};
use crate::synthworld::{derive_seed, Dataset, EpisodeRecord};
use crate::types::JOINT_COUNT;

pub const SEED_ENV: &str = "SCENEMOTION_SEED";
pub const OUT_ENV: &str = "SCENEMOTION_OUT";
const BATCH_STREAM: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub traj: f64,
    pub orient: f64,
    pub pose: f64,
    pub joints: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            traj: 1.0,
            orient: 0.5,
            pose: 0.1,
            joints: 1.0,
            adv: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm bound per update.
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Share of each scene's episodes held out for evaluation.
    pub test_fraction: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub toggles: Toggles,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            decay: 0.98,
            epochs: 100,
            batch_size: 8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            test_fraction: 0.2,
            checkpoint_every: 10,
            toggles: Toggles::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-scale benchmark schedule: small model, 30 epochs at a learning
    /// rate raised to 1e-3 to suit the shortened schedule.
    pub fn benchmark() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            model: ModelConfig::small(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("decay must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("weight decay must be ≥ 0 and the clip bound positive"));
        }
        let w = &self.weights;
        if [w.traj, w.orient, w.pose, w.joints, w.adv].iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test fraction must lie in [0, 1)"));
        }
        self.model.validate(&self.toggles)
    }

    /// Parses a TOML config. A `preset` key inside `[model]` selects the base
    /// model configuration that the remaining `[model]` keys override.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Format {
            what: "training config",
            detail: e.to_string(),
        };
        let mut table: toml::Table = text.parse().map_err(|e| bad(&e))?;
        if let Some(toml::Value::Table(model)) = table.get_mut("model") {
            if let Some(preset) = model.remove("preset") {
                let name = preset.as_str().ok_or_else(|| Error::invalid("model.preset must be a string"))?;
                let base = ModelConfig::preset(name)?;
                let mut merged = toml::Table::try_from(&base).map_err(|e| bad(&e))?;
                for (k, v) in std::mem::take(model) {
                    merged.insert(k, v);
                }
                *model = merged;
            }
        }
        let config: TrainConfig = toml::Value::Table(table).try_into().map_err(|e| bad(&e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

/// Output directory override from the environment.
pub fn env_output_dir() -> Option<PathBuf> {
    std::env::var_os(OUT_ENV).map(PathBuf::from)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_traj: f64,
    pub l_orient: f64,
    pub l_pose: f64,
    pub l_joints: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_traj, self.l_orient, self.l_pose, self.l_joints, self.l_adv_g, self.l_adv_d, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of `reports`.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.l_traj += r.l_traj / n;
            m.l_orient += r.l_orient / n;
            m.l_pose += r.l_pose / n;
            m.l_joints += r.l_joints / n;
            m.l_adv_g += r.l_adv_g / n;
            m.l_adv_d += r.l_adv_d / n;
            m.total += r.total / n;
        }
        m
    }
}

/// Discriminator logits on the ground-truth and the predicted sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorScores {
    pub real: f64,
    pub fake: f64,
}

/// Scalar losses of one prediction against its episode, over the future frames.
pub fn compute_losses(
    pred: &PredictionBundle,
    truth: &EpisodeRecord,
    scores: Option<DiscriminatorScores>,
    weights: &LossWeights,
) -> Result<LossReport> {
    pred.validate()?;
    let t0 = pred.observed_frames;
    if t0 != truth.observed.len() || pred.future_frames() != truth.future.len() {
        return Err(Error::invalid("prediction and episode horizons differ"));
    }
    let body = BodyModel::standard();
    let n = truth.future.len() as f64;
    let mut r = LossReport::default();
    for (k, pose) in truth.future.frames.iter().enumerate() {
        let f = t0 + k;
        let t = pose.translation();
        let p = pred.traj_translation[f];
        r.l_traj += ((p[0] - t.x).powi(2) + (p[1] - t.y).powi(2) + (p[2] - t.z).powi(2)).sqrt() / n;
        r.l_orient += geodesic(&quaternion_from_wxyz(pred.traj_orientation[f])?, pose.orientation()) / n;
        r.l_pose += pred.pose_embeddings[f]
            .iter()
            .zip(pose.pose_embedding())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let j = body.body_joints(pose)?;
        let per_joint: f64 = pred.decoded[f]
            .joints
            .iter()
            .zip(&j.joints)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .sum();
        r.l_joints += per_joint / (JOINT_COUNT as f64 * n);
    }
    if let Some(s) = scores {
        let (d, g) = adversarial_losses(s.real, s.fake);
        r.l_adv_d = d;
        r.l_adv_g = g;
    }
    r.total = weights.traj * r.l_traj
        + weights.orient * r.l_orient
        + weights.pose * r.l_pose
        + weights.joints * r.l_joints
        + weights.adv * r.l_adv_g;
    Ok(r)
}

/// Graph nodes of the per-episode reconstruction losses.
#[derive(Debug, Clone, Copy)]
pub struct GraphLosses {
    pub traj: Var,
    pub orient: Var,
    pub pose: Var,
    pub joints: Var,
}

/// Reconstruction losses of a forward pass (future rows only).
pub fn graph_losses(g: &Graph, out: &ForwardPass, targets: &EpisodeTargets) -> GraphLosses {
    let (frames, _) = g.shape(out.translation);
    let future = targets.translation.nrows();
    let t0 = frames - future;
    let fut = |v: Var| g.slice_rows(v, t0, frames);
    let traj = g.mean_all(g.row_norms(g.sub(fut(out.translation), g.constant(targets.translation.clone()))));
    let orient = g.mean_all(g.geodesic_to(fut(out.rotation), targets.rotation.clone()));
    let diff = g.sub(fut(out.embedding), g.constant(targets.embedding.clone()));
    let pose = g.scale(g.sum_all(g.square(diff)), 1.0 / future as f64);
    let dj = g.sub(fut(out.decoded), g.constant(targets.joints.clone()));
    let joints = g.mean_all(g.row_norms(g.reshape(dj, future * JOINT_COUNT, 3)));
    GraphLosses {
        traj,
        orient,
        pose,
        joints,
    }
}

/// AdamW with per-tensor step counters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub steps: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, _, p)| Mat::zeros(p.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }

    /// Clips the gradients of `ids` to a global norm of `clip`, then updates.
    /// Returns the pre-clip norm. Tensors without a gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Mat>, ids: &[ParamId], lr: f64, clip: f64) -> f64 {
        let norm = ids
            .iter()
            .filter_map(|id| grads.get(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        for &id in ids {
            let Some(grad) = grads.get(&id) else { continue };
            let i = id.0;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let (eps, wd) = (self.eps, self.weight_decay);
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps) + wd * *p;
                    *p -= lr * update;
                });
        }
        norm
    }
}

/// A dataset episode with its network inputs and targets.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub scene: usize,
    pub record: EpisodeRecord,
    pub input: EpisodeInput,
    pub targets: EpisodeTargets,
}

/// Dataset converted once to model resolution.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub scenes: Vec<PreparedScene>,
    pub episodes: Vec<PreparedEpisode>,
}

impl PreparedData {
    pub fn new(model: &Model, dataset: &Dataset) -> Result<Self> {
        let scenes = dataset
            .scenes
            .iter()
            .map(|s| model.prepare_scene(&s.cloud))
            .collect::<Result<Vec<_>>>()?;
        let episodes = dataset
            .episodes
            .iter()
            .map(|e| {
                let scene = dataset
                    .scene_index(&e.scene_id)
                    .ok_or_else(|| Error::CorruptDataset(format!("episode {} names unknown scene {}", e.id, e.scene_id)))?;
                let (input, targets) = model.prepare_episode(e, &scenes[scene])?;
                Ok(PreparedEpisode {
                    scene,
                    record: e.clone(),
                    input,
                    targets,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scenes, episodes })
    }
}

/// Batches for one epoch: episodes are shuffled within their scene, chunked,
/// and the chunks shuffled, all from `(seed, epoch)`.
pub fn epoch_batches(data: &PreparedData, indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, BATCH_STREAM, epoch as u64));
    let mut batches = Vec::new();
    for s in 0..data.scenes.len() {
        let mut idx: Vec<usize> = indices.iter().copied().filter(|&i| data.episodes[i].scene == s).collect();
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Batch-mean generator loss of one training step.
#[derive(Debug)]
pub struct GeneratorObjective {
    pub loss: Var,
    /// Generator-side loss terms (`l_adv_d` is left at zero).
    pub report: LossReport,
    /// Per episode: the fake joint sequence (observed context plus decoded
    /// future) and the scene embedding, as fed to the discriminator.
    pub fakes: Vec<(Mat, Mat)>,
}

/// Builds the weighted reconstruction plus adversarial loss over `batch`.
pub fn generator_objective(
    model: &Model,
    ctx: Ctx<'_>,
    data: &PreparedData,
    batch: &[usize],
    w: LossWeights,
) -> GeneratorObjective {
    let g = ctx.g;
    let b = batch.len() as f64;
    let mut totals = Vec::with_capacity(batch.len());
    let mut report = LossReport::default();
    let mut fakes = Vec::with_capacity(batch.len());
    for &i in batch {
        let ep = &data.episodes[i];
        let vars = model.encode_scene(ctx, &data.scenes[ep.scene], &ep.input.anchor.frame());
        let out = model.forward(ctx, &data.scenes[ep.scene], vars, &ep.input);
        let l = graph_losses(g, &out, &ep.targets);
        let mut total = g.add(
            g.add(g.scale(l.traj, w.traj), g.scale(l.orient, w.orient)),
            g.add(g.scale(l.pose, w.pose), g.scale(l.joints, w.joints)),
        );
        let (frames, _) = g.shape(out.decoded);
        let t0 = frames - ep.targets.joints.nrows();
        let fake_seq = g.concat_rows(&[
            g.constant(ep.targets.observed_joints.clone()),
            g.slice_rows(out.decoded, t0, frames),
        ]);
        if let Some(score) = model.discriminate(ctx, fake_seq, &ep.input.anchor, vars.global) {
            let adv = generator_loss(g, score);
            report.l_adv_g += g.scalar(adv) / b;
            total = g.add(total, g.scale(adv, w.adv));
        }
        report.l_traj += g.scalar(l.traj) / b;
        report.l_orient += g.scalar(l.orient) / b;
        report.l_pose += g.scalar(l.pose) / b;
        report.l_joints += g.scalar(l.joints) / b;
        fakes.push((g.value(fake_seq).clone(), g.value(vars.global).clone()));
        totals.push(total);
    }
    let mut loss = totals[0];
    for &t in &totals[1..] {
        loss = g.add(loss, t);
    }
    let loss = g.scale(loss, 1.0 / b);
    report.total = g.scalar(loss);
    GeneratorObjective { loss, report, fakes }
}

/// Model, weights and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    generator_ids: Vec<ParamId>,
    discriminator_ids: Vec<ParamId>,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::new(&config.model, &config.toggles, config.seed)?;
        Ok(Self::assemble(config.clone(), model, store, None, 0, 0))
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let (model, fresh) = Model::new(&ckpt.config.model, &ckpt.config.toggles, ckpt.config.seed)?;
        if fresh.len() != ckpt.params.len()
            || fresh.iter().zip(ckpt.params.iter()).any(|(a, b)| a.1 != b.1 || a.2.dim() != b.2.dim())
        {
            return Err(Error::CorruptCheckpoint("tensors do not match the configured model".into()));
        }
        Ok(Self::assemble(ckpt.config, model, ckpt.params, ckpt.optimizer, ckpt.epoch, ckpt.step))
    }

    fn assemble(config: TrainConfig, model: Model, store: ParamStore, opt: Option<AdamW>, epoch: usize, step: u64) -> Self {
        let discriminator_ids: Vec<ParamId> = store.ids_with_prefix(DISCRIMINATOR_PREFIX).collect();
        let generator_ids = store.ids().filter(|id| !discriminator_ids.contains(id)).collect();
        let optimizer = opt.unwrap_or_else(|| AdamW::new(&store, config.weight_decay));
        Self {
            config,
            model,
            store,
            optimizer,
            epoch,
            step,
            generator_ids,
            discriminator_ids,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.store.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn prepare(&self, dataset: &Dataset) -> Result<PreparedData> {
        PreparedData::new(&self.model, dataset)
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, data: &PreparedData, batch: &[usize], lr: f64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.store);
        let GeneratorObjective { loss, mut report, fakes } =
            generator_objective(&self.model, ctx, data, batch, self.config.weights);
        let b = batch.len() as f64;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{report:?}"),
            });
        }
        let grads = g.backward(loss).into_params();
        drop(g);
        let clip = self.config.grad_clip;
        self.optimizer.step(&mut self.store, &grads, &self.generator_ids, lr, clip);

        if self.model.has_discriminator() {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.store);
            let mut losses = Vec::with_capacity(batch.len());
            for (&i, (fake, global)) in batch.iter().zip(fakes) {
                let ep = &data.episodes[i];
                let real = g.constant(ndarray::concatenate![
                    ndarray::Axis(0),
                    ep.targets.observed_joints,
                    ep.targets.joints
                ]);
                let global = g.constant(global);
                let anchor = &ep.input.anchor;
                let r = self.model.discriminate(ctx, real, anchor, global).expect("discriminator present");
                let f = self.model.discriminate(ctx, g.constant(fake), anchor, global).expect("discriminator present");
                losses.push(discriminator_loss(&g, r, f));
            }
            let mut d = losses[0];
            for &l in &losses[1..] {
                d = g.add(d, l);
            }
            let d = g.scale(d, 1.0 / b);
            report.l_adv_d = g.scalar(d);
            if !report.l_adv_d.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    detail: format!("discriminator loss {}", report.l_adv_d),
                });
            }
            let grads = g.backward(d).into_params();
            drop(g);
            self.optimizer.step(&mut self.store, &grads, &self.discriminator_ids, lr, clip);
        }
        if !self.store.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: "parameters became non-finite".into(),
            });
        }
        self.step += 1;
        Ok(report)
    }

    /// Trains one epoch over `indices` and returns the mean step report.
    pub fn train_epoch(&mut self, data: &PreparedData, indices: &[usize]) -> Result<LossReport> {
        let lr = self.config.learning_rate_at(self.epoch);
        let batches = epoch_batches(data, indices, self.config.batch_size, self.config.seed, self.epoch);
        let mut reports = Vec::with_capacity(batches.len());
        for batch in &batches {
            reports.push(self.train_step(data, batch, lr)?);
        }
        self.epoch += 1;
        Ok(LossReport::mean(&reports))
    }

    pub fn predict(&self, data: &PreparedData, episode: usize) -> Result<PredictionBundle> {
        let ep = &data.episodes[episode];
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.store);
        let scene = &data.scenes[ep.scene];
        let vars = self.model.encode_scene(ctx, scene, &ep.input.anchor.frame());
        let out = self.model.forward(ctx, scene, vars, &ep.input);
        Ok(self.model.bundle(&g, &out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub losses: LossReport,
}

/// Loss history as CSV, one row per epoch.
pub fn history_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,learning_rate,l_traj,l_orient,l_pose,l_joints,l_adv_g,l_adv_d,total\n");
    for h in history {
        let l = &h.losses;
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            h.epoch, h.learning_rate, l.l_traj, l.l_orient, l.l_pose, l.l_joints, l.l_adv_g, l.l_adv_d, l.total
        );
    }
    s
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_{epoch:04}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Trains on the dataset's training split until `config.epochs`, resuming
/// from `resume` when given. With `out`, writes periodic checkpoints, a final
/// checkpoint (when at least one epoch ran) and `losses.csv`.
pub fn run_training(
    config: &TrainConfig,
    dataset: &Dataset,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(Trainer, Vec<EpochLog>)> {
    if dataset.episodes.is_empty() {
        return Err(Error::invalid("dataset has no episodes"));
    }
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config.model != config.model || ckpt.config.toggles != config.toggles || ckpt.config.seed != config.seed {
                return Err(Error::invalid("checkpoint was trained with a different model, toggles or seed"));
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.config = config.clone();
            t
        }
        None => Trainer::new(config)?,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io("creating output directory", dir, e))?;
        if trainer.epoch == 0 {
            save_checkpoint(&checkpoint_path(dir, 0), &trainer.checkpoint())?;
        }
    }
    let data = trainer.prepare(dataset)?;
    let (train, _) = dataset.split(config.test_fraction);
    let mut history = Vec::new();
    while trainer.epoch < config.epochs {
        let lr = config.learning_rate_at(trainer.epoch);
        let losses = trainer.train_epoch(&data, &train)?;
        history.push(EpochLog {
            epoch: trainer.epoch,
            learning_rate: lr,
            losses,
        });
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && trainer.epoch % config.checkpoint_every == 0 {
                save_checkpoint(&checkpoint_path(dir, trainer.epoch), &trainer.checkpoint())?;
            }
        }
    }
    if let Some(dir) = out {
        if !history.is_empty() {
            save_checkpoint(&dir.join(FINAL_CHECKPOINT), &trainer.checkpoint())?;
        }
        let p = dir.join("losses.csv");
        fs::write(&p, history_csv(&history)).map_err(|e| Error::io("writing loss history", &p, e))?;
    }
    Ok((trainer, history))
}
