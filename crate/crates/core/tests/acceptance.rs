//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scenemotion_core::adversary::Discriminator;
use scenemotion_core::autograd::{Graph, Mat, Var};
use scenemotion_core::body::BodyModel;
use scenemotion_core::eval::{
    ablation_csv, ablation_json, compute_metrics, grid_variants, metrics_csv, run_ablation, summarize, AblationGrid, AblationRow,
    VariantSummary, CSV_HEADER, TABLE4_SIZES,
};
use scenemotion_core::heads::{MotionDecoder, PredictionBundle};
use scenemotion_core::model::{Model, ModelConfig, Toggles};
use scenemotion_core::nn::{zero_residual_outputs, Ctx};
use scenemotion_core::params::{Init, ParamStore};
use scenemotion_core::rotation::{quaternion_to_matrix, quaternion_to_wxyz};
use scenemotion_core::sca::{relative_normalize, relative_positions, scene_row, ScaBlock};
use scenemotion_core::scene_encoder::{encode_scene, SceneEncoder, SetAbstractionEncoder};
use scenemotion_core::synthworld::{
    generate_dataset, generate_episode, obstacle_clearance, scene_faces, surface_distance, write_dataset, Dataset,
    DatasetSpec, EpisodeRecord, SceneSpec,
};
use scenemotion_core::tia::{Aggregator, TiaBlock};
use scenemotion_core::training::{generator_objective, PreparedData, TrainConfig, Trainer};
use scenemotion_core::types::{
    GazeSequence, HorizonConfig, JointSet, LocalFrame, MotionSequence, PoseState, ScenePointCloud, EMBEDDING_DIM, JOINT_COORDS,
    JOINT_COUNT,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]))
}

fn random_pose(rng: &mut ChaCha8Rng) -> PoseState {
    let t = Vector3::new(uniform(rng, -5.0, 5.0), uniform(rng, -5.0, 5.0), uniform(rng, 0.5, 1.5));
    let e = (0..EMBEDDING_DIM).map(|_| uniform(rng, -0.5, 0.5)).collect();
    PoseState::new(t, random_rotation(rng), e).unwrap()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> ScenePointCloud {
    ScenePointCloud::new(
        (0..n)
            .map(|_| [uniform(rng, -3.0, 3.0), uniform(rng, -3.0, 3.0), uniform(rng, 0.0, 2.5)])
            .collect(),
    )
    .unwrap()
}

fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Small world: scenes with 512 points and episodes under `horizon`.
fn mini_world(seed: u64, scenes: usize, episodes: usize, horizon: HorizonConfig) -> Dataset {
    generate_dataset(&DatasetSpec {
        scenes,
        episodes_per_scene: episodes,
        point_count: 512,
        horizon,
        seed,
    })
    .expect("mini world")
}

fn tiny_config(horizon: HorizonConfig) -> ModelConfig {
    ModelConfig {
        horizon,
        ..ModelConfig::tiny()
    }
}

// ---------------------------------------------------------------- criterion 1

/// Straightforward per-frame loops over nalgebra vectors.
fn brute_force_metrics(pred: &PredictionBundle, truth: &EpisodeRecord) -> [f64; 4] {
    let body = BodyModel::standard();
    let t0 = truth.observed.frames.len();
    let n = truth.future.frames.len();
    let mut traj = vec![0.0; n];
    let mut mpjpe = vec![0.0; n];
    for k in 0..n {
        let pose = &truth.future.frames[k];
        traj[k] = (Vector3::from(pred.traj_translation[t0 + k]) - pose.translation()).norm();
        let gt = body.body_joints(pose).unwrap();
        let mut sum = 0.0;
        for j in 0..JOINT_COUNT {
            sum += (Vector3::from(pred.decoded[t0 + k].joints[j]) - Vector3::from(gt.joints[j])).norm();
        }
        mpjpe[k] = sum / JOINT_COUNT as f64;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    [
        mean(&traj) * 1000.0,
        traj[n - 1] * 1000.0,
        mean(&mpjpe) * 1000.0,
        mpjpe[n - 1] * 1000.0,
    ]
}

fn random_instance(rng: &mut ChaCha8Rng, id: u32) -> (PredictionBundle, EpisodeRecord) {
    let t = rng.random_range(1..=6);
    let dt = rng.random_range(1..=10);
    let observed: Vec<PoseState> = (0..t).map(|_| random_pose(rng)).collect();
    let future: Vec<PoseState> = (0..dt).map(|_| random_pose(rng)).collect();
    let truth = EpisodeRecord {
        id,
        scene_id: "random".into(),
        observed: MotionSequence::new(observed, 2.0).unwrap(),
        gaze: GazeSequence {
            points: (0..t).map(|_| [0.0, 0.0, 0.0]).collect(),
        },
        future: MotionSequence::new(future, 2.0).unwrap(),
        goal_label: "none".into(),
    };
    let frames = t + dt;
    let joints = |rng: &mut ChaCha8Rng| -> Vec<JointSet> {
        (0..frames)
            .map(|_| {
                JointSet::new((0..JOINT_COUNT).map(|_| std::array::from_fn(|_| uniform(rng, -5.0, 5.0))).collect())
                    .unwrap()
            })
            .collect()
    };
    let pred = PredictionBundle {
        observed_frames: t,
        traj_translation: (0..frames).map(|_| std::array::from_fn(|_| uniform(rng, -5.0, 5.0))).collect(),
        traj_orientation: (0..frames).map(|_| quaternion_to_wxyz(&random_rotation(rng))).collect(),
        pose_embeddings: (0..frames)
            .map(|_| (0..EMBEDDING_DIM).map(|_| uniform(rng, -0.5, 0.5)).collect())
            .collect(),
        joints: joints(rng),
        decoded: joints(rng),
        salience: Default::default(),
    };
    (pred, truth)
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let (pred, truth) = random_instance(&mut r, i);
        let m = compute_metrics(&pred, &truth).unwrap();
        let got = [m.traj_path, m.traj_dest, m.mpjpe_path, m.mpjpe_dest];
        for (a, b) in got.iter().zip(brute_force_metrics(&pred, &truth)) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-12));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst <= 1e-9 && secs < 10.0,
        format!("1000 instances, max relative error {worst:.2e} (≤1e-9), {secs:.2} s (<10 s)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn salience_normalization() -> Outcome {
    let horizon = HorizonConfig::default();
    let world = mini_world(2, 2, 5, horizon);
    let config = tiny_config(horizon);
    let mut worst_sum: f64 = 0.0;
    let mut min_weight = f64::INFINITY;
    let mut rows = 0;
    for draw in 0..100u64 {
        let (model, store) = Model::new(&config, &Toggles::default(), 1000 + draw).unwrap();
        let ep = &world.episodes[draw as usize % world.episodes.len()];
        let scene = model.prepare_scene(&world.scene(&ep.scene_id).unwrap().cloud).unwrap();
        let pred = model.predict(&store, &scene, ep).unwrap();
        for row in pred.salience.global.iter().chain(&pred.salience.local) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            min_weight = row.iter().copied().fold(min_weight, f64::min);
            rows += 1;
        }
    }
    let expected = 100 * (config.tia_blocks + horizon.total());
    Outcome::new(
        worst_sum <= 1e-6 && min_weight >= 0.0 && rows == expected,
        format!("100 draws, {rows} rows, max |sum − 1| {worst_sum:.2e} (≤1e-6), min weight {min_weight:.2e} (≥0)"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn permutation_invariance() -> Outcome {
    let config = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let mut r = rng(3);
    let (encoder, tia) = {
        let mut init = Init {
            store: &mut store,
            rng: &mut r,
        };
        let enc = SetAbstractionEncoder::new(&mut init, "scene", &config.set_abstraction).unwrap();
        let tia = TiaBlock::new(&mut init, "tia", 16, 16, 2, 16, 16, Aggregator::Last);
        (SceneEncoder::SetAbstraction(enc), tia)
    };
    let mut r = rng(33);
    let cloud = random_cloud(&mut r, 64);
    let origin = [0.4, -0.7, 0.0];
    let f_in = random_mat(&mut r, 16, 16, 1.0);
    let f_gaze = random_mat(&mut r, 16, 16, 1.0);
    let run = |cloud: &ScenePointCloud| {
        let feats = encode_scene(cloud, &encoder, &store, &LocalFrame::at(origin)).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let vars = scenemotion_core::scene_encoder::SceneVars {
            per_point: g.constant(feats.per_point.clone()),
            global: g.constant(Mat::from_shape_vec((1, 16), feats.global_embedding.clone()).unwrap()),
        };
        let step = tia.forward(ctx, g.constant(f_in.clone()), vars, g.constant(f_gaze.clone()));
        let out = g.value(step.output).clone();
        let s_g = g.value(step.salience).clone();
        (feats.global_embedding, out, s_g)
    };
    let (global, out, s_g) = run(&cloud);
    let (mut d_global, mut d_out, mut d_sal): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..20 {
        let perm = random_permutation(&mut r, cloud.len());
        let (pg, po, ps) = run(&cloud.permuted(&perm));
        d_global = pg.iter().zip(&global).map(|(a, b)| (a - b).abs()).fold(d_global, f64::max);
        d_out = d_out.max(max_abs_diff(&po, &out));
        for (new, &old) in perm.iter().enumerate() {
            d_sal = d_sal.max((ps[[0, new]] - s_g[[0, old]]).abs());
        }
    }
    Outcome::new(
        d_global <= 1e-6 && d_out <= 1e-6 && d_sal <= 1e-6,
        format!(
            "20 permutations, max abs change: global embedding {d_global:.2e}, TIA output {d_out:.2e}, permuted s_g {d_sal:.2e} (≤1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn rotation_rows(q: &[UnitQuaternion<f64>]) -> Mat {
    Mat::from_shape_fn((q.len(), 9), |(k, i)| quaternion_to_matrix(&q[k])[i])
}

fn rigid_invariance() -> Outcome {
    let mut r = rng(4);
    let frames = 16;
    let cloud = random_cloud(&mut r, 64);
    let trans: Vec<[f64; 3]> = (0..frames)
        .map(|_| [uniform(&mut r, -2.0, 2.0), uniform(&mut r, -2.0, 2.0), 0.9])
        .collect();
    let rots: Vec<UnitQuaternion<f64>> = (0..frames).map(|_| random_rotation(&mut r)).collect();
    let transform = |q: &UnitQuaternion<f64>, t: &Vector3<f64>, p: [f64; 3]| -> [f64; 3] {
        (q * Vector3::from(p) + t).into()
    };

    let base = relative_normalize(&cloud, &trans, &rots).unwrap();
    let mut d_rel: f64 = 0.0;

    let mut store = ParamStore::new();
    let block = {
        let mut init = Init {
            store: &mut store,
            rng: &mut rng(44),
        };
        ScaBlock::new(&mut init, "sca", 16, 16, 2, 16, 16, 8)
    };
    let f_in = random_mat(&mut r, frames, 16, 1.0);
    let per_point = random_mat(&mut r, cloud.len(), 16, 1.0);
    let sca = |cloud: &ScenePointCloud, trans: &[[f64; 3]], rots: &[UnitQuaternion<f64>]| {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let t = g.constant(Mat::from_shape_fn((frames, 3), |(k, a)| trans[k][a]));
        let rel = relative_positions(ctx, g.constant(scene_row(cloud)), t, g.constant(rotation_rows(rots)));
        let step = block.forward(ctx, g.constant(f_in.clone()), g.constant(per_point.clone()), Some(rel));
        let v = g.value(step.output).clone();
        v
    };
    let sca_base = sca(&cloud, &trans, &rots);
    let mut d_sca: f64 = 0.0;

    for _ in 0..20 {
        let q = random_rotation(&mut r);
        let t = Vector3::new(uniform(&mut r, -10.0, 10.0), uniform(&mut r, -10.0, 10.0), uniform(&mut r, -1.0, 1.0));
        let moved = ScenePointCloud::new(cloud.points.iter().map(|&p| transform(&q, &t, p)).collect()).unwrap();
        let moved_t: Vec<[f64; 3]> = trans.iter().map(|&p| transform(&q, &t, p)).collect();
        let moved_r: Vec<UnitQuaternion<f64>> = rots.iter().map(|o| q * o).collect();
        let rel = relative_normalize(&moved, &moved_t, &moved_r).unwrap();
        for (a, b) in rel.positions.iter().zip(&base.positions) {
            for i in 0..3 {
                d_rel = d_rel.max((a[i] - b[i]).abs());
            }
        }
        d_sca = d_sca.max(max_abs_diff(&sca(&moved, &moved_t, &moved_r), &sca_base));
    }
    Outcome::new(
        d_rel <= 1e-9 && d_sca <= 1e-5,
        format!("20 rigid transforms: relative_normalize {d_rel:.2e} (≤1e-9), SCA coordinate pathway {d_sca:.2e} (≤1e-5)"),
    )
}

// ---------------------------------------------------------------- criterion 5

/// Relative error `|a − n| / max(|a|, |n|, 1e-5)` per entry. Below the floor
/// this is an absolute error bound of 1e-9 (attention key biases, for example,
/// have an exact zero gradient and a pure round-off difference quotient).
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

const FD_STEP: f64 = 1e-5;

/// Central differences of a scalar loss with respect to every (or a sampled
/// subset of) entry of the given inputs and parameters. Returns the largest
/// relative error and the number of checked entries.
fn grad_check<F>(store: &ParamStore, inputs: &[Mat], per_tensor: Option<usize>, seed: u64, loss: F) -> (f64, usize)
where
    F: Fn(Ctx<'_>, &[Var]) -> Var,
{
    let g = Graph::new();
    let ctx = Ctx::new(&g, store);
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let l = loss(ctx, &vars);
    let grads = g.backward(l);
    let value = |store: &ParamStore, inputs: &[Mat]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let l = loss(Ctx::new(&g, store), &vars);
        g.scalar(l)
    };
    let mut r = rng(seed);
    let pick = |len: usize, r: &mut ChaCha8Rng| -> Vec<usize> {
        match per_tensor {
            Some(k) if k < len => (0..k).map(|_| r.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        }
    };
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for (k, m) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(|a| a.as_standard_layout().into_owned()).unwrap_or_else(|| Mat::zeros(m.dim()));
        for idx in pick(m.len(), &mut r) {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[idx] += FD_STEP;
            minus[k].as_slice_mut().unwrap()[idx] -= FD_STEP;
            let numeric = (value(store, &plus) - value(store, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.as_slice().unwrap()[idx], numeric));
            checked += 1;
        }
    }
    let mut work = store.clone();
    for id in store.ids() {
        let shape = store.get(id).dim();
        let analytic = grads.param(id).map(|a| a.as_standard_layout().into_owned()).unwrap_or_else(|| Mat::zeros(shape));
        for idx in pick(shape.0 * shape.1, &mut r) {
            let orig = store.get(id).as_slice().unwrap()[idx];
            work.get_mut(id).as_slice_mut().unwrap()[idx] = orig + FD_STEP;
            let up = value(&work, inputs);
            work.get_mut(id).as_slice_mut().unwrap()[idx] = orig - FD_STEP;
            let down = value(&work, inputs);
            work.get_mut(id).as_slice_mut().unwrap()[idx] = orig;
            worst = worst.max(rel_err(analytic.as_slice().unwrap()[idx], (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    (worst, checked)
}

/// `sum(out ∘ W)` for a fixed random `W`.
fn weighted_sum(ctx: Ctx<'_>, out: Var, w: &Mat) -> Var {
    ctx.g.sum_all(ctx.g.mul(out, ctx.g.constant(w.clone())))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut r = rng(5);
    let frames = 4;
    let n = 32;

    let mut tia_store = ParamStore::new();
    let tia = TiaBlock::new(
        &mut Init {
            store: &mut tia_store,
            rng: &mut rng(51),
        },
        "tia",
        16,
        16,
        2,
        16,
        16,
        Aggregator::Last,
    );
    let inputs = vec![
        random_mat(&mut r, frames, 16, 1.0),
        random_mat(&mut r, n, 16, 1.0),
        random_mat(&mut r, 1, 16, 1.0),
        random_mat(&mut r, frames, 16, 1.0),
    ];
    let w = random_mat(&mut r, frames, 16, 1.0);
    let (tia_err, tia_n) = grad_check(&tia_store, &inputs, None, 52, |ctx, v| {
        let vars = scenemotion_core::scene_encoder::SceneVars {
            per_point: v[1],
            global: v[2],
        };
        weighted_sum(ctx, tia.forward(ctx, v[0], vars, v[3]).output, &w)
    });

    let mut sca_store = ParamStore::new();
    let sca = ScaBlock::new(
        &mut Init {
            store: &mut sca_store,
            rng: &mut rng(53),
        },
        "sca",
        16,
        16,
        2,
        16,
        16,
        8,
    );
    let inputs = vec![
        random_mat(&mut r, frames, 16, 1.0),
        random_mat(&mut r, n, 16, 1.0),
        random_mat(&mut r, frames * n, 3, 2.0),
    ];
    let (sca_err, sca_n) = grad_check(&sca_store, &inputs, None, 54, |ctx, v| {
        weighted_sum(ctx, sca.forward(ctx, v[0], v[1], Some(v[2])).output, &w)
    });

    let mut disc_store = ParamStore::new();
    let disc = Discriminator::new(
        &mut Init {
            store: &mut disc_store,
            rng: &mut rng(55),
        },
        "disc",
        16,
        16,
        1,
        2,
        16,
    );
    let inputs = vec![random_mat(&mut r, frames, JOINT_COORDS, 1.0), random_mat(&mut r, 1, 16, 1.0)];
    let (disc_err, disc_n) = grad_check(&disc_store, &inputs, None, 56, |ctx, v| {
        let score = disc.forward(ctx, v[0], v[1]);
        ctx.g.square(score)
    });

    let horizon = HorizonConfig::new(2, 2, 2.0).unwrap();
    let world = mini_world(57, 1, 2, horizon);
    let config = tiny_config(horizon);
    let (model, store) = Model::new(&config, &Toggles::default(), 58).unwrap();
    let data = PreparedData::new(&model, &world).unwrap();
    let weights = TrainConfig::default().weights;
    let (full_err, full_n) = grad_check(&store, &[], Some(6), 59, |ctx, _| {
        generator_objective(&model, ctx, &data, &[0, 1], weights).loss
    });

    let secs = start.elapsed().as_secs_f64();
    let blocks = tia_err.max(sca_err).max(disc_err);
    Outcome::new(
        blocks <= 1e-4 && full_err <= 1e-3 && secs < 300.0,
        format!(
            "tia_block {tia_err:.1e} ({tia_n}), sca_block {sca_err:.1e} ({sca_n}), discriminate {disc_err:.1e} ({disc_n}) (≤1e-4); \
             full tiny pipeline {full_err:.1e} ({full_n} sampled) (≤1e-3); {secs:.0} s (<300 s)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn identity_at_init() -> Outcome {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let (tia, sca, decoder) = {
        let mut init = Init {
            store: &mut store,
            rng: &mut rng(61),
        };
        (
            TiaBlock::new(&mut init, "tia", 16, 16, 2, 16, 16, Aggregator::Transformer),
            ScaBlock::new(&mut init, "sca", 16, 16, 2, 16, 16, 8),
            MotionDecoder::new(&mut init, "decoder", BodyModel::standard(), 3, 8),
        )
    };
    zero_residual_outputs(&mut store);
    let f_in = random_mat(&mut r, 16, 16, 1.0);
    let per_point = random_mat(&mut r, 32, 16, 1.0);
    let global = random_mat(&mut r, 1, 16, 1.0);
    let joints = random_mat(&mut r, 16, JOINT_COORDS, 1.0);
    let root = random_mat(&mut r, 16, 3, 1.0);
    let g = Graph::new();
    let ctx = Ctx::new(&g, &store);
    let vars = scenemotion_core::scene_encoder::SceneVars {
        per_point: g.constant(per_point.clone()),
        global: g.constant(global),
    };
    let t = tia.forward(ctx, g.constant(f_in.clone()), vars, g.constant(random_mat(&mut r, 16, 16, 1.0)));
    let rel = g.constant(random_mat(&mut r, 16 * 32, 3, 2.0));
    let s = sca.forward(ctx, g.constant(f_in.clone()), g.constant(per_point), Some(rel));
    let d = decoder.forward(ctx, g.constant(joints.clone()), g.constant(root));
    let bits = |a: &Mat, b: &Mat| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    let (ti, si, di) = (bits(&g.value(t.output), &f_in), bits(&g.value(s.output), &f_in), bits(&g.value(d), &joints));
    Outcome::new(
        ti && si && di,
        format!("bit-exact identity: tia_block {ti}, sca_block {si}, decode_motion {di}"),
    )
}

// ---------------------------------------------------------------- criterion 7

fn overfit() -> Outcome {
    let start = Instant::now();
    let horizon = HorizonConfig::default();
    let world = mini_world(7, 1, 4, horizon);
    let config = TrainConfig {
        model: tiny_config(horizon),
        seed: 7,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&config).unwrap();
    let data = trainer.prepare(&world).unwrap();
    let batch = [0, 1, 2, 3];
    let mut initial = f64::NAN;
    for step in 0..500 {
        let report = trainer.train_step(&data, &batch, config.learning_rate).unwrap();
        if step == 0 {
            initial = report.l_joints;
        }
    }
    let g = Graph::new();
    let last = generator_objective(&trainer.model, Ctx::new(&g, &trainer.store), &data, &batch, config.weights).report;
    let ratio = last.l_joints / initial;
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        ratio <= 0.1 && secs < 300.0,
        format!(
            "l_joints {initial:.4} → {:.4} after 500 steps ({:.1}% of initial, ≤10%), {secs:.0} s (<300 s)",
            last.l_joints,
            ratio * 100.0
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn determinism() -> Outcome {
    let world = mini_world(8, 2, 6, HorizonConfig::default());
    let base = TrainConfig {
        model: ModelConfig::tiny(),
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let variants = grid_variants(AblationGrid::Full, base.toggles);
    let run = || {
        let rows = run_ablation(&base, &world, &variants, &[11]).unwrap();
        let mut csv = ablation_csv(&rows);
        for row in &rows {
            csv.push_str(&metrics_csv(&row.metrics));
        }
        (csv, ablation_json(&rows))
    };
    let (csv_a, json_a) = run();
    let (csv_b, json_b) = run();
    Outcome::new(
        csv_a == csv_b && json_a == json_b,
        format!(
            "two train+eval runs: CSV identical {} ({} bytes), JSON identical {}",
            csv_a == csv_b,
            csv_a.len(),
            json_a == json_b
        ),
    )
}

// ------------------------------------------------------------ criteria 9, 10

const BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Small dims, 30 epochs.
fn benchmark_config() -> TrainConfig {
    let config = TrainConfig::benchmark();
    assert_eq!((config.epochs, &config.model), (30, &ModelConfig::small()));
    config
}

fn summary<'a>(s: &'a [VariantSummary], name: &str) -> &'a VariantSummary {
    s.iter().find(|v| v.variant == name).unwrap()
}

fn table1(world: &Dataset, summaries: &mut BTreeMap<String, VariantSummary>) -> Outcome {
    let start = Instant::now();
    let base = benchmark_config();
    let variants: Vec<_> = grid_variants(AblationGrid::Table1, base.toggles)
        .into_iter()
        .filter(|v| ["motion-only", "gaze", "scene+gaze"].contains(&v.name.as_str()))
        .collect();
    let rows = run_ablation(&base, world, &variants, &BENCH_SEEDS).unwrap();
    let s = summarize(&rows);
    let secs = start.elapsed().as_secs_f64();
    let (m, g, f) = (summary(&s, "motion-only"), summary(&s, "gaze"), summary(&s, "scene+gaze"));
    for v in &s {
        summaries.insert(v.variant.clone(), v.clone());
    }
    Outcome::new(
        f.traj_dest < g.traj_dest && g.traj_dest < m.traj_dest && secs <= 45.0 * 60.0,
        format!(
            "median Traj-dest over 5 seeds: scene+gaze {:.1} < gaze {:.1} < motion-only {:.1} mm; {:.1} min (≤45 min)",
            f.traj_dest,
            g.traj_dest,
            m.traj_dest,
            secs / 60.0
        ),
    )
}

fn table3(world: &Dataset, summaries: &BTreeMap<String, VariantSummary>) -> Outcome {
    let start = Instant::now();
    let base = benchmark_config();
    let variants: Vec<_> = grid_variants(AblationGrid::Table3, base.toggles)
        .into_iter()
        .filter(|v| ["w/o TIA", "w/o SCA"].contains(&v.name.as_str()))
        .collect();
    let rows = run_ablation(&base, world, &variants, &BENCH_SEEDS).unwrap();
    let s = summarize(&rows);
    let secs = start.elapsed().as_secs_f64();
    // The full model is the scene+gaze row of criterion 9 (identical config and seeds).
    let full = match summaries.get("scene+gaze") {
        Some(f) => f.clone(),
        None => {
            let full = grid_variants(AblationGrid::Full, base.toggles);
            summarize(&run_ablation(&base, world, &full, &BENCH_SEEDS).unwrap()).remove(0)
        }
    };
    let (no_tia, no_sca) = (summary(&s, "w/o TIA"), summary(&s, "w/o SCA"));
    Outcome::new(
        no_tia.traj_dest > full.traj_dest && no_sca.mpjpe_dest > full.mpjpe_dest,
        format!(
            "median over 5 seeds: Traj-dest w/o TIA {:.1} vs full {:.1} mm; MPJPE-dest w/o SCA {:.1} vs full {:.1} mm; {:.1} min",
            no_tia.traj_dest,
            full.traj_dest,
            no_sca.mpjpe_dest,
            full.mpjpe_dest,
            secs / 60.0
        ),
    )
}

// --------------------------------------------------------------- criterion 11

fn well_formed(rows: &[AblationRow], expected: &[String]) -> Result<(), String> {
    let csv = ablation_csv(rows);
    let lines: Vec<&str> = csv.lines().collect();
    if lines.first() != Some(&CSV_HEADER) {
        return Err("bad CSV header".into());
    }
    if lines.len() != expected.len() + 1 {
        return Err(format!("{} CSV rows, expected {}", lines.len() - 1, expected.len()));
    }
    for (line, name) in lines[1..].iter().zip(expected) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 || fields[0] != name {
            return Err(format!("malformed row '{line}'"));
        }
        for f in &fields[1..5] {
            let v: f64 = f.parse().map_err(|_| format!("non-numeric field in '{line}'"))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("bad metric in '{line}'"));
            }
        }
    }
    let back: Vec<AblationRow> = serde_json::from_str(&ablation_json(rows)).map_err(|e| e.to_string())?;
    if back.len() != rows.len() || back.iter().any(|r| r.metrics.episodes.is_empty()) {
        return Err("JSON does not mirror the rows".into());
    }
    Ok(())
}

fn sweeps() -> Outcome {
    let start = Instant::now();
    let world = generate_dataset(&DatasetSpec {
        scenes: 1,
        episodes_per_scene: 5,
        seed: 11,
        ..DatasetSpec::default()
    })
    .unwrap();
    let base = TrainConfig {
        model: ModelConfig::small(),
        epochs: 1,
        test_fraction: 0.4,
        ..TrainConfig::default()
    };
    let mut problems = Vec::new();
    for grid in [AblationGrid::Table4, AblationGrid::Table5] {
        let variants = grid_variants(grid, base.toggles);
        let names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
        match run_ablation(&base, &world, &variants, &[0]) {
            Ok(rows) => {
                if let Err(e) = well_formed(&rows, &names) {
                    problems.push(format!("{}: {e}", grid.name()));
                }
            }
            Err(e) => problems.push(format!("{}: {e}", grid.name())),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("sizes {TABLE4_SIZES:?} and all 5 aggregators ran; reports well-formed; {secs:.0} s")
        } else {
            problems.join("; ")
        },
    )
}

// --------------------------------------------------------------- criterion 12

fn synthetic_world(world: &Dataset) -> Outcome {
    let mut clear = 0;
    let mut gaze_ok = 0;
    let mut min_clearance = f64::INFINITY;
    let mut max_gaze: f64 = 0.0;
    for ep in &world.episodes {
        let scene = world.scene(&ep.scene_id).unwrap();
        let c = obstacle_clearance(&scene.spec, ep);
        min_clearance = min_clearance.min(c);
        clear += usize::from(c >= 0.25);
        let faces = scene_faces(&scene.spec);
        let d = ep.gaze.points.iter().map(|&p| surface_distance(&faces, p)).fold(0.0, f64::max);
        max_gaze = max_gaze.max(d);
        gaze_ok += usize::from(d <= 1e-6);
    }
    let n = world.episodes.len();
    let again = generate_dataset(&DatasetSpec::default()).unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let hash_a = write_dataset(world, dir_a.path()).unwrap();
    let hash_b = write_dataset(&again, dir_b.path()).unwrap();
    let deterministic = again == *world && hash_a == hash_b;
    let single = generate_episode(&SceneSpec::random(9, 4096), "s", 0, 99, HorizonConfig::default()).unwrap()
        == generate_episode(&SceneSpec::random(9, 4096), "s", 0, 99, HorizonConfig::default()).unwrap();
    Outcome::new(
        clear == n && gaze_ok == n && deterministic && single,
        format!(
            "{clear}/{n} episodes with clearance ≥0.25 m (min {min_clearance:.3}), {gaze_ok}/{n} with gaze on a surface \
             (max {max_gaze:.1e} ≤1e-6), deterministic {}",
            deterministic && single
        ),
    )
}

// ---------------------------------------------------------------------- main

const NAMES: [&str; 12] = [
    "metric oracle equivalence",
    "salience normalization",
    "permutation invariance",
    "rigid-frame invariance",
    "gradient checks",
    "identity at init",
    "single-batch overfit",
    "train+eval determinism",
    "Table-1 modality ordering",
    "Table-3 component ablation",
    "Table-4/5 harness execution",
    "synthetic-world validity",
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |i: usize| selected.is_empty() || selected.contains(&i);
    let mut world: Option<Dataset> = None;
    let mut benchmark = || world.get_or_insert_with(|| generate_dataset(&DatasetSpec::default()).unwrap()).clone();
    let mut summaries = BTreeMap::new();
    let mut failures = 0;
    let mut total = Duration::ZERO;
    for (i, name) in NAMES.iter().enumerate() {
        let id = i + 1;
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let outcome = match id {
            1 => metric_oracle(),
            2 => salience_normalization(),
            3 => permutation_invariance(),
            4 => rigid_invariance(),
            5 => gradient_checks(),
            6 => identity_at_init(),
            7 => overfit(),
            8 => determinism(),
            9 => table1(&benchmark(), &mut summaries),
            10 => table3(&benchmark(), &summaries),
            11 => sweeps(),
            _ => synthetic_world(&benchmark()),
        };
        total += start.elapsed();
        failures += usize::from(!outcome.pass);
        println!(
            "[{}] {id:>2}. {name}: {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    println!("acceptance: {failures} failing, {:.1} min total", total.as_secs_f64() / 60.0);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
