use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use scenemotion_core::checkpoint::load_checkpoint;
use scenemotion_core::eval::{
    ablation_csv, ablation_json, evaluate, grid_variants, metrics_csv, prediction_path, score_predictions, summarize,
    summary_csv, write_prediction, AblationGrid, AblationRow, MetricReport,
};
use scenemotion_core::heads::PredictionBundle;
use scenemotion_core::model::Model;
use scenemotion_core::report::{global_salience_svg, local_salience_svg, trajectory_svg};
use scenemotion_core::synthworld::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetSpec};
use scenemotion_core::training::{env_output_dir, run_training, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "scenemotion", version, about = "Scene- and gaze-conditioned motion forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or stored predictions) on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate every variant of an ablation grid.
    Ablate(AblateArgs),
    /// Turn evaluation outputs into CSV, JSON and SVG plots.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON dataset spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TOML training config (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output directory; falls back to SCENEMOTION_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Test,
    Train,
    All,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of stored episode predictions to score instead of a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Held-out share when no checkpoint supplies one.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

#[derive(clap::Args)]
struct AblateArgs {
    /// full, table1, table3, table4 or table5.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; the default benchmark is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Base TOML config (the CPU-scale benchmark schedule when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Output directory of `eval`.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint used for the evaluation; needed for the global-salience plot
    /// when the model subsamples the scene.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ablation JSON to summarize (medians per variant).
    #[arg(long)]
    ablation: Option<PathBuf>,
    /// Number of episodes to plot.
    #[arg(long, default_value_t = 4)]
    plots: usize,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn pretty_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn load_config(path: Option<&Path>, fallback: TrainConfig) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_toml_str(&text)?)
        }
        None => Ok(fallback),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => DatasetSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.scenes {
        spec.scenes = v;
    }
    if let Some(v) = args.episodes {
        spec.episodes_per_scene = v;
    }
    if let Some(v) = args.points {
        spec.point_count = v;
    }
    let dataset = generate_dataset(&spec)?;
    let hash = write_dataset(&dataset, &args.out)?;
    println!("{hash}");
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), TrainConfig::default())?;
    config.apply_env()?;
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    config.validate()?;
    let Some(out) = args.out.or_else(env_output_dir) else {
        bail!("no output directory: pass --out or set SCENEMOTION_OUT");
    };
    let dataset = read_dataset(&args.data)?;
    let (trainer, history) = run_training(&config, &dataset, Some(&out), args.resume.as_deref())?;
    write(&out.join("config.toml"), config.to_toml_string())?;
    match history.last() {
        Some(h) => println!("epoch {} total loss {:.6}", trainer.epoch, h.losses.total),
        None => println!("epoch {} (nothing to train)", trainer.epoch),
    }
    Ok(())
}

fn split_indices(dataset: &Dataset, split: Split, test_fraction: f64) -> Vec<usize> {
    let (train, test) = dataset.split(test_fraction);
    match split {
        Split::Test => test,
        Split::Train => train,
        Split::All => (0..dataset.episodes.len()).collect(),
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let dataset = read_dataset(&args.data)?;
    let (report, bundles, indices) = match (&args.checkpoint, &args.predictions) {
        (Some(ckpt), _) => {
            let trainer = Trainer::from_checkpoint(load_checkpoint(ckpt)?)?;
            let indices = split_indices(&dataset, args.split, trainer.config.test_fraction);
            let data = trainer.prepare(&dataset)?;
            let (report, bundles) = evaluate(&trainer, &data, &indices)?;
            (report, bundles, indices)
        }
        (None, Some(dir)) => {
            let indices = split_indices(&dataset, args.split, args.test_fraction);
            let episodes: Vec<_> = indices.iter().map(|&i| &dataset.episodes[i]).collect();
            let (report, bundles) = score_predictions(dir, &episodes)?;
            (report, bundles, indices)
        }
        (None, None) => bail!("pass --checkpoint or --predictions"),
    };
    let pred_dir = args.out.join("predictions");
    create_dir(&pred_dir)?;
    for (&i, pred) in indices.iter().zip(&bundles) {
        write_prediction(&pred_dir, dataset.episodes[i].id, pred)?;
    }
    write(&args.out.join("metrics.json"), pretty_json(&report)?)?;
    write(&args.out.join("metrics.csv"), metrics_csv(&report))?;
    println!(
        "traj_path {:.3} mm  traj_dest {:.3} mm  mpjpe_path {:.3} mm  mpjpe_dest {:.3} mm  ({} episodes)",
        report.traj_path,
        report.traj_dest,
        report.mpjpe_path,
        report.mpjpe_dest,
        report.episodes.len()
    );
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let grid: AblationGrid = args.grid.parse()?;
    let mut base = load_config(args.config.as_deref(), TrainConfig::benchmark())?;
    if let Some(v) = args.epochs {
        base.epochs = v;
    }
    let dataset = match &args.data {
        Some(dir) => read_dataset(dir)?,
        None => generate_dataset(&DatasetSpec {
            seed: args.data_seed,
            ..DatasetSpec::default()
        })?,
    };
    let variants = grid_variants(grid, base.toggles);
    let rows = scenemotion_core::eval::run_ablation(&base, &dataset, &variants, &args.seeds)?;
    create_dir(&args.out)?;
    write(&args.out.join("ablation.csv"), ablation_csv(&rows))?;
    write(&args.out.join("ablation.json"), ablation_json(&rows))?;
    let summary = summarize(&rows);
    write(&args.out.join("summary.csv"), summary_csv(&summary))?;
    print!("{}", summary_csv(&summary));
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let dataset = read_dataset(&args.data)?;
    let metrics_path = args.eval.join("metrics.json");
    let text = fs::read_to_string(&metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
    let metrics: MetricReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", metrics_path.display()))?;
    create_dir(&args.out)?;
    write(&args.out.join("metrics.csv"), metrics_csv(&metrics))?;
    write(&args.out.join("metrics.json"), pretty_json(&metrics)?)?;

    if let Some(path) = &args.ablation {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rows: Vec<AblationRow> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let summary = summarize(&rows);
        write(&args.out.join("summary.csv"), summary_csv(&summary))?;
        write(&args.out.join("summary.json"), pretty_json(&summary)?)?;
    }

    let model = match &args.checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            Some(Model::new(&ckpt.config.model, &ckpt.config.toggles, ckpt.config.seed)?.0)
        }
        None => None,
    };
    let plots = args.out.join("plots");
    create_dir(&plots)?;
    let pred_dir = args.eval.join("predictions");
    for m in metrics.episodes.iter().take(args.plots) {
        let episode = dataset
            .episodes
            .iter()
            .find(|e| e.id == m.episode)
            .with_context(|| format!("episode {} is not in the dataset", m.episode))?;
        let scene = dataset
            .scene(&episode.scene_id)
            .with_context(|| format!("scene {} is not in the dataset", episode.scene_id))?;
        let path = prediction_path(&pred_dir, m.episode);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let pred: PredictionBundle = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let stem = format!("episode_{:05}", m.episode);
        write(&plots.join(format!("{stem}_trajectory.svg")), trajectory_svg(&scene.cloud, episode, &pred))?;
        if let Some(svg) = local_salience_svg(&pred, 128) {
            write(&plots.join(format!("{stem}_local_salience.svg")), svg)?;
        }
        let points = match &model {
            Some(model) => model.prepare_scene(&scene.cloud)?.cloud,
            None => scene.cloud.clone(),
        };
        if let Some(svg) = global_salience_svg(&points, &pred) {
            write(&plots.join(format!("{stem}_global_salience.svg")), svg)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
