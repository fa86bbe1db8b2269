//! Path/destination metrics, held-out evaluation and the ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::body::BodyModel;
use crate::error::{Error, Result};
use crate::heads::{PredictionBundle, SalienceMaps};
use crate::model::Toggles;
use crate::rotation::quaternion_to_wxyz;
use crate::synthworld::{Dataset, EpisodeRecord};
use crate::tia::Aggregator;
use crate::training::{run_training, PreparedData, TrainConfig, Trainer};

/// Metrics of one episode, millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u32,
    pub scene_id: String,
    pub traj_path: f64,
    pub traj_dest: f64,
    pub mpjpe_path: f64,
    pub mpjpe_dest: f64,
}

/// Unweighted means over episodes, millimeters, plus the per-episode rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub traj_path: f64,
    pub traj_dest: f64,
    pub mpjpe_path: f64,
    pub mpjpe_dest: f64,
    pub episodes: Vec<EpisodeMetrics>,
}

impl MetricReport {
    pub fn aggregate(episodes: Vec<EpisodeMetrics>) -> Self {
        let n = episodes.len().max(1) as f64;
        let mean = |f: fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / n;
        Self {
            traj_path: mean(|e| e.traj_path),
            traj_dest: mean(|e| e.traj_dest),
            mpjpe_path: mean(|e| e.mpjpe_path),
            mpjpe_dest: mean(|e| e.mpjpe_dest),
            episodes,
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Metrics over the future frames of one prediction; joints are the decoded ones.
pub fn compute_metrics(pred: &PredictionBundle, truth: &EpisodeRecord) -> Result<MetricReport> {
    let t0 = pred.observed_frames;
    if pred.len() <= t0
        || t0 != truth.observed.len()
        || pred.future_frames() != truth.future.len()
        || pred.decoded.len() != pred.len()
    {
        return Err(Error::invalid(format!(
            "prediction covers {}+{} frames, episode {} has {}+{}",
            t0,
            pred.len().saturating_sub(t0),
            truth.id,
            truth.observed.len(),
            truth.future.len()
        )));
    }
    let body = BodyModel::standard();
    let n = truth.future.len();
    let (mut traj, mut mpjpe) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (k, pose) in truth.future.frames.iter().enumerate() {
        let t = pose.translation();
        traj.push(dist(pred.traj_translation[t0 + k], [t.x, t.y, t.z]) * 1000.0);
        let joints = body.body_joints(pose)?;
        let predicted = &pred.decoded[t0 + k].joints;
        let err: f64 = predicted.iter().zip(&joints.joints).map(|(a, b)| dist(*a, *b)).sum();
        mpjpe.push(err / predicted.len() as f64 * 1000.0);
    }
    let m = EpisodeMetrics {
        episode: truth.id,
        scene_id: truth.scene_id.clone(),
        traj_path: traj.iter().sum::<f64>() / n as f64,
        traj_dest: traj[n - 1],
        mpjpe_path: mpjpe.iter().sum::<f64>() / n as f64,
        mpjpe_dest: mpjpe[n - 1],
    };
    Ok(MetricReport::aggregate(vec![m]))
}

/// The ground truth of an episode dressed as a prediction.
pub fn oracle_prediction(episode: &EpisodeRecord) -> Result<PredictionBundle> {
    let body = BodyModel::standard();
    let frames: Vec<_> = episode.observed.frames.iter().chain(&episode.future.frames).collect();
    let joints = frames.iter().map(|p| body.body_joints(p)).collect::<Result<Vec<_>>>()?;
    Ok(PredictionBundle {
        observed_frames: episode.observed.len(),
        traj_translation: frames
            .iter()
            .map(|p| {
                let t = p.translation();
                [t.x, t.y, t.z]
            })
            .collect(),
        traj_orientation: frames.iter().map(|p| quaternion_to_wxyz(p.orientation())).collect(),
        pose_embeddings: frames.iter().map(|p| p.pose_embedding().to_vec()).collect(),
        joints: joints.clone(),
        decoded: joints,
        salience: SalienceMaps::default(),
    })
}

/// Predicts and scores the given prepared episodes.
pub fn evaluate(trainer: &Trainer, data: &PreparedData, indices: &[usize]) -> Result<(MetricReport, Vec<PredictionBundle>)> {
    let mut rows = Vec::with_capacity(indices.len());
    let mut bundles = Vec::with_capacity(indices.len());
    for &i in indices {
        let pred = trainer.predict(data, i)?;
        let mut report = compute_metrics(&pred, &data.episodes[i].record)?;
        rows.append(&mut report.episodes);
        bundles.push(pred);
    }
    Ok((MetricReport::aggregate(rows), bundles))
}

/// Named ablation grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationGrid {
    /// The full model only.
    Full,
    /// Modality grid: motion only, +scene, +gaze, +scene+gaze.
    Table1,
    /// Component removals followed by the full model.
    Table3,
    /// Scene point-cloud sizes.
    Table4,
    /// Temporal aggregators of TIA.
    Table5,
}

impl AblationGrid {
    pub const ALL: [AblationGrid; 5] = [Self::Full, Self::Table1, Self::Table3, Self::Table4, Self::Table5];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Table1 => "table1",
            Self::Table3 => "table3",
            Self::Table4 => "table4",
            Self::Table5 => "table5",
        }
    }
}

impl FromStr for AblationGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation grid '{s}' (expected full, table1, table3, table4 or table5)")))
    }
}

/// Point-cloud sizes of the desk-scale Table-4 sweep.
pub const TABLE4_SIZES: [usize; 4] = [512, 1024, 2048, 4096];

/// One row of an ablation grid: a named change to the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub toggles: Toggles,
    pub scene_points: Option<usize>,
    pub aggregator: Option<Aggregator>,
}

impl Variant {
    fn toggled(name: &str, toggles: Toggles) -> Self {
        Self {
            name: name.into(),
            toggles,
            scene_points: None,
            aggregator: None,
        }
    }

    /// `base` with this variant's changes applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.toggles = self.toggles;
        if let Some(n) = self.scene_points {
            c.model.scene_points = n;
        }
        if let Some(a) = self.aggregator {
            c.model.aggregator = a;
        }
        c
    }
}

/// Rows of `grid`, in table order, starting from `base` toggles.
pub fn grid_variants(grid: AblationGrid, base: Toggles) -> Vec<Variant> {
    let with = |f: fn(&mut Toggles)| {
        let mut t = base;
        f(&mut t);
        t
    };
    match grid {
        AblationGrid::Full => vec![Variant::toggled("full", base)],
        AblationGrid::Table1 => vec![
            Variant::toggled("motion-only", with(|t| {
                t.scene = false;
                t.gaze = false;
            })),
            Variant::toggled("scene", with(|t| t.gaze = false)),
            Variant::toggled("gaze", with(|t| t.scene = false)),
            Variant::toggled("scene+gaze", with(|t| {
                t.scene = true;
                t.gaze = true;
            })),
        ],
        AblationGrid::Table3 => vec![
            Variant::toggled("w/o TIA", with(|t| t.tia = false)),
            Variant::toggled("w/o SCA", with(|t| t.sca = false)),
            Variant::toggled("w/o MotionDecoder", with(|t| t.decoder = false)),
            Variant::toggled("w/o Discriminator", with(|t| t.discriminator = false)),
            Variant::toggled("w/o PointNet++", with(|t| t.pointnet = false)),
            Variant::toggled("full", base),
        ],
        AblationGrid::Table4 => TABLE4_SIZES
            .iter()
            .map(|&n| Variant {
                name: format!("points={n}"),
                toggles: base,
                scene_points: Some(n),
                aggregator: None,
            })
            .collect(),
        AblationGrid::Table5 => Aggregator::ALL
            .iter()
            .map(|&a| Variant {
                name: a.name().to_string(),
                toggles: base,
                scene_points: None,
                aggregator: Some(a),
            })
            .collect(),
    }
}

/// One trained and evaluated (variant, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub metrics: MetricReport,
}

/// Trains every variant under every seed and evaluates on the held-out split.
pub fn run_ablation(base: &TrainConfig, dataset: &Dataset, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let min_points = dataset.scenes.iter().map(|s| s.cloud.len()).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for v in variants {
        let config = v.apply(base);
        if config.model.scene_points > min_points {
            return Err(Error::invalid(format!(
                "variant '{}' needs {} scene points, dataset clouds have {min_points}",
                v.name, config.model.scene_points
            )));
        }
        config.validate()?;
        for &seed in seeds {
            let config = TrainConfig { seed, ..config.clone() };
            let (trainer, _) = run_training(&config, dataset, None, None)?;
            let data = trainer.prepare(dataset)?;
            let (_, test) = dataset.split(config.test_fraction);
            let (metrics, _) = evaluate(&trainer, &data, &test)?;
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                epochs: config.epochs,
                metrics,
            });
        }
    }
    Ok(rows)
}

/// Median of each metric over the seeds of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub traj_path: f64,
    pub traj_dest: f64,
    pub mpjpe_path: f64,
    pub mpjpe_dest: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-variant medians, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let runs: Vec<&MetricReport> = rows.iter().filter(|r| r.variant == name).map(|r| &r.metrics).collect();
            let med = |f: fn(&MetricReport) -> f64| median(&mut runs.iter().map(|m| f(m)).collect::<Vec<_>>());
            VariantSummary {
                variant: name.to_string(),
                runs: runs.len(),
                traj_path: med(|m| m.traj_path),
                traj_dest: med(|m| m.traj_dest),
                mpjpe_path: med(|m| m.mpjpe_path),
                mpjpe_dest: med(|m| m.mpjpe_dest),
            }
        })
        .collect()
}

pub const CSV_HEADER: &str = "variant,traj_path_mm,traj_dest_mm,mpjpe_path_mm,mpjpe_dest_mm,seed,epochs";

/// One CSV line per row, fixed six-decimal formatting.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.variant, m.traj_path, m.traj_dest, m.mpjpe_path, m.mpjpe_dest, r.seed, r.epochs
        );
    }
    s
}

/// Pretty JSON mirror of the CSV with per-episode detail.
pub fn ablation_json(rows: &[AblationRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
    s.push('\n');
    s
}

/// Per-variant medians as CSV, same metric columns as the ablation CSV.
pub fn summary_csv(summaries: &[VariantSummary]) -> String {
    let mut s = String::from("variant,traj_path_mm,traj_dest_mm,mpjpe_path_mm,mpjpe_dest_mm,runs\n");
    for v in summaries {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            v.variant, v.traj_path, v.traj_dest, v.mpjpe_path, v.mpjpe_dest, v.runs
        );
    }
    s
}

/// Per-episode metrics followed by a `mean` row.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut s = String::from("episode,scene_id,traj_path_mm,traj_dest_mm,mpjpe_path_mm,mpjpe_dest_mm\n");
    for e in &report.episodes {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            e.episode, e.scene_id, e.traj_path, e.traj_dest, e.mpjpe_path, e.mpjpe_dest
        );
    }
    let _ = writeln!(
        s,
        "mean,,{:.6},{:.6},{:.6},{:.6}",
        report.traj_path, report.traj_dest, report.mpjpe_path, report.mpjpe_dest
    );
    s
}

pub fn prediction_path(dir: &Path, episode: u32) -> PathBuf {
    dir.join(format!("episode_{episode:05}.json"))
}

pub fn write_prediction(dir: &Path, episode: u32, pred: &PredictionBundle) -> Result<()> {
    let path = prediction_path(dir, episode);
    let mut text = serde_json::to_string_pretty(pred).expect("prediction serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io("writing prediction", &path, e))
}

pub fn read_prediction(dir: &Path, episode: u32) -> Result<PredictionBundle> {
    let path = prediction_path(dir, episode);
    let text = fs::read_to_string(&path).map_err(|e| Error::io("reading prediction", &path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "prediction file",
        detail: format!("{}: {e}", path.display()),
    })
}

/// Scores stored predictions against the given episodes.
pub fn score_predictions(dir: &Path, episodes: &[&EpisodeRecord]) -> Result<(MetricReport, Vec<PredictionBundle>)> {
    let mut rows = Vec::with_capacity(episodes.len());
    let mut bundles = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let pred = read_prediction(dir, ep.id)?;
        rows.append(&mut compute_metrics(&pred, ep)?.episodes);
        bundles.push(pred);
    }
    Ok((MetricReport::aggregate(rows), bundles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_episode, SceneSpec};
    use crate::types::HorizonConfig;
    use proptest::prelude::*;

    fn episode() -> EpisodeRecord {
        generate_episode(&SceneSpec::random(2, 1024), "s", 7, 3, HorizonConfig::default()).unwrap()
    }

    /// Prediction equal to the ground truth, optionally shifted.
    fn oracle(ep: &EpisodeRecord, shift: [f64; 3]) -> PredictionBundle {
        let mut pred = oracle_prediction(ep).unwrap();
        let add = |p: &mut [f64; 3]| {
            for a in 0..3 {
                p[a] += shift[a];
            }
        };
        pred.traj_translation.iter_mut().for_each(add);
        for set in pred.joints.iter_mut().chain(pred.decoded.iter_mut()) {
            set.joints.iter_mut().for_each(add);
        }
        pred
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let ep = episode();
        let m = compute_metrics(&oracle(&ep, [0.0; 3]), &ep).unwrap();
        assert_eq!((m.traj_path, m.traj_dest, m.mpjpe_path, m.mpjpe_dest), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn uniform_offset_of_ten_millimeters() {
        let ep = episode();
        let m = compute_metrics(&oracle(&ep, [0.01, 0.0, 0.0]), &ep).unwrap();
        for v in [m.traj_path, m.traj_dest, m.mpjpe_path, m.mpjpe_dest] {
            assert!((v - 10.0).abs() < 1e-9, "{v}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn translation_error_scales_linearly(alpha in 1.0f64..5.0, dx in -0.3f64..0.3, dy in -0.3f64..0.3) {
            let ep = episode();
            let a = compute_metrics(&oracle(&ep, [dx, dy, 0.0]), &ep).unwrap();
            let b = compute_metrics(&oracle(&ep, [alpha * dx, alpha * dy, 0.0]), &ep).unwrap();
            for (x, y) in [(a.traj_path, b.traj_path), (a.traj_dest, b.traj_dest), (a.mpjpe_path, b.mpjpe_path), (a.mpjpe_dest, b.mpjpe_dest)] {
                prop_assert!((alpha * x - y).abs() <= 1e-9 * y.max(1.0));
            }
        }
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let ep = episode();
        let mut pred = oracle(&ep, [0.0; 3]);
        pred.observed_frames = 5;
        assert!(matches!(compute_metrics(&pred, &ep), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn grids_have_table_structure() {
        let base = Toggles::default();
        let t3: Vec<String> = grid_variants(AblationGrid::Table3, base).into_iter().map(|v| v.name).collect();
        assert_eq!(t3, ["w/o TIA", "w/o SCA", "w/o MotionDecoder", "w/o Discriminator", "w/o PointNet++", "full"]);
        assert_eq!(grid_variants(AblationGrid::Table5, base).len(), 5);
        assert_eq!(grid_variants(AblationGrid::Table4, base).len(), 4);
        assert_eq!(grid_variants(AblationGrid::Full, base).len(), 1);
        let t1 = grid_variants(AblationGrid::Table1, base);
        assert!(!t1[0].toggles.scene && !t1[0].toggles.gaze);
        assert!(t1[3].toggles.scene && t1[3].toggles.gaze);
        assert!("table9".parse::<AblationGrid>().is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
