//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eyecue_core::checkpoint;
use eyecue_core::dataset::density::{flag_by_recording, DEFAULT_CC_THRESHOLD};
use eyecue_core::dataset::frames::{FrameStore, ManifestFrames};
use eyecue_core::dataset::segment::{align_gaze, read_gaze_csv, segment_clips, Recording, DEFAULT_CLIP_LENGTH};
use eyecue_core::dataset::{
    balance_and_split, read_manifest, write_manifest, Aggregation, Catalog, ClipRecord, MapSpec, Scene,
    SourceDataset, Split, TimeOfDay, Weather,
};
use eyecue_core::model::{Branches, ModelParams};
use eyecue_core::synth::{write_corpus, CorpusOptions, DEFAULT_JITTER_PX, DEFAULT_MOTION_PX};
use eyecue_core::train::runners::{
    check_hold_out, leave_one_out, preprocessing_grid, run_ablation, run_preprocessing_study,
    run_robustness, run_sweep, train_and_evaluate, Cell, DEFAULT_NOISE_LEVELS, SWEEP_FRAMES,
    SWEEP_NEIGHBORHOODS,
};
use eyecue_core::train::{evaluate, prepare_examples, reference, Evaluation, Experiment, ScenarioBreakdown};
use eyecue_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::{to_toml, ExperimentConfig};
use crate::error::{io_error, CliError, CliResult};
use crate::plots;
use crate::run::Run;
use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "eyecue", version, about = "Gaze-guided detection of driver cognitive distraction")]
pub struct Cli {
    /// Directory that receives one subdirectory per experiment run.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut a recording into fixed-length clips and write a manifest.
    Segment(SegmentArgs),
    /// Score clips against their recording's fixation density and flag outliers.
    Flag(FlagArgs),
    /// Generate a labeled synthetic driving corpus.
    Synth(SynthArgs),
    /// Train on a class-balanced split and evaluate on the held-out part.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on labeled clips.
    Eval(EvalArgs),
    /// Train every branch combination.
    Ablate(ConfigArgs),
    /// Train over clip lengths and gaze neighborhood sizes.
    Sweep(SweepArgs),
    /// Compare gaze-guided frame preprocessing modes.
    PreprocStudy(ConfigArgs),
    /// Evaluate under uniform gaze noise.
    Robustness(RobustnessArgs),
    /// Accuracy per scene, time of day and weather.
    Scenario(CheckpointOrTrain),
    /// Train on all sources but one and test on the held-out source.
    Loo(LooArgs),
    /// Run the HTTP labeling service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Directory of frame images, ordered by file name.
    #[arg(long)]
    pub frames: PathBuf,
    /// Gaze log with a `frame_index,x,y` header; coordinates normalized to [0,1].
    #[arg(long)]
    pub gaze: PathBuf,
    #[arg(long)]
    pub video_id: String,
    #[arg(long)]
    pub source: SourceDataset,
    #[arg(long)]
    pub scene: Scene,
    #[arg(long)]
    pub time_of_day: TimeOfDay,
    #[arg(long)]
    pub weather: Weather,
    #[arg(long, default_value_t = DEFAULT_CLIP_LENGTH)]
    pub frames_per_clip: usize,
    /// Output manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Add the clips to an existing manifest instead of replacing it.
    #[arg(long)]
    pub append: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    MeanOfClips,
    AllPoints,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::MeanOfClips => Aggregation::MeanOfClips,
            AggregationArg::AllPoints => Aggregation::AllPoints,
        }
    }
}

#[derive(Debug, Args)]
pub struct FlagArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Clips whose correlation falls below this are flagged.
    #[arg(long, default_value_t = DEFAULT_CC_THRESHOLD)]
    pub cc_threshold: f64,
    #[arg(long, value_enum, default_value = "mean-of-clips")]
    pub aggregation: AggregationArg,
    /// Output manifest; defaults to rewriting the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 800)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of distracted clips.
    #[arg(long, default_value_t = 0.5)]
    pub balance: f64,
    #[arg(long, default_value_t = DEFAULT_JITTER_PX)]
    pub jitter_px: f32,
    #[arg(long, default_value_t = DEFAULT_MOTION_PX)]
    pub motion_px: f32,
    /// Output directory for frames and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `split.json` from a training run; evaluates its test clips only.
    #[arg(long)]
    pub clips: Option<PathBuf>,
    /// Directory for metrics, predictions and plots.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_FRAMES)]
    pub frames: Vec<usize>,
    #[arg(long = "h", value_delimiter = ',', default_values_t = SWEEP_NEIGHBORHOODS)]
    pub neighborhoods: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct CheckpointOrTrain {
    #[arg(long)]
    pub config: PathBuf,
    /// Evaluate these parameters instead of training from the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub model: CheckpointOrTrain,
    /// Gaze noise radii in pixels.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_NOISE_LEVELS)]
    pub levels: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct LooArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub held_out: SourceDataset,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Append-only label log (JSON lines); created if missing.
    #[arg(long)]
    pub labels: PathBuf,
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let runs = cli.runs_dir.as_path();
    match cli.command {
        Command::Segment(a) => segment(a),
        Command::Flag(a) => flag(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_command(runs, a),
        Command::Eval(a) => eval_command(a),
        Command::Ablate(a) => ablate(runs, a),
        Command::Sweep(a) => sweep(runs, a),
        Command::PreprocStudy(a) => preproc_study(runs, a),
        Command::Robustness(a) => robustness(runs, a),
        Command::Scenario(a) => scenario(runs, a),
        Command::Loo(a) => loo(runs, a),
        Command::Serve(a) => serve(a),
    }
}

fn segment(a: SegmentArgs) -> CliResult<()> {
    let mut frame_files: Vec<PathBuf> = std::fs::read_dir(&a.frames)
        .map_err(|e| io_error(&a.frames, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    frame_files.sort();
    if frame_files.is_empty() {
        return Err(Error::Validation(format!("no png or jpeg frames in {}", a.frames.display())).into());
    }
    let out_dir = absolute(a.out.parent().unwrap_or(Path::new(".")))?;
    let frame_paths: Vec<String> = frame_files
        .iter()
        .map(|p| {
            let p = absolute(p)?;
            Ok(p.strip_prefix(&out_dir).unwrap_or(&p).to_string_lossy().into_owned())
        })
        .collect::<CliResult<_>>()?;
    let gaze = align_gaze(&read_gaze_csv(&a.gaze)?, frame_paths.len())?;
    let recording = Recording {
        video_id: a.video_id,
        source_dataset: a.source,
        scene: a.scene,
        time_of_day: a.time_of_day,
        weather: a.weather,
    };
    let clips = segment_clips(&recording, &frame_paths, &gaze, a.frames_per_clip)?;
    let added = clips.len();
    let mut all = if a.append && a.out.exists() {
        read_manifest(&a.out)?
    } else {
        Vec::new()
    };
    all.extend(clips);
    let catalog = Catalog::new(all)?;
    write_manifest(catalog.clips(), &a.out)?;
    println!("wrote {added} clips of {} frames to {}", a.frames_per_clip, a.out.display());
    Ok(())
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| io_error(p, e))
}

fn flag(a: FlagArgs) -> CliResult<()> {
    if !(a.cc_threshold.is_finite() && (-1.0..=1.0).contains(&a.cc_threshold)) {
        return Err(CliError::Usage("--cc-threshold must be in [-1, 1]".into()));
    }
    let mut clips = read_manifest(&a.manifest)?;
    let flagged = flag_by_recording(&mut clips, MapSpec::default(), a.aggregation.into(), a.cc_threshold)?;
    let out = a.out.as_ref().unwrap_or(&a.manifest);
    write_manifest(&clips, out)?;
    println!(
        "flagged {flagged} of {} clips (cc < {}) -> {}",
        clips.len(),
        a.cc_threshold,
        out.display()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let options = CorpusOptions {
        count: a.count,
        balance: a.balance,
        seed: a.seed,
        jitter_px: a.jitter_px,
        motion_px: a.motion_px,
        ..CorpusOptions::default()
    };
    let manifest = write_corpus(&options, &a.out)?;
    println!("wrote {} synthetic clips -> {}", a.count, manifest.display());
    Ok(())
}

/// A loaded experiment config with its clips and class-balanced split.
struct Setup {
    config: ExperimentConfig,
    path: PathBuf,
    frames: ManifestFrames,
    clips: Vec<ClipRecord>,
}

impl Setup {
    fn load(path: &Path) -> CliResult<Self> {
        let config = ExperimentConfig::load(path)?;
        let clips = read_manifest(&config.manifest)?;
        Ok(Self {
            frames: ManifestFrames::new(&config.manifest),
            path: path.to_path_buf(),
            config,
            clips,
        })
    }

    fn split(&self) -> CliResult<Split> {
        let split = balance_and_split(&self.clips, self.config.split_seed, self.config.train_fraction)?;
        log::info!("split: {} train, {} test clips", split.train.len(), split.test.len());
        Ok(split)
    }

    fn experiment(&self) -> CliResult<Experiment<'_>> {
        let split = self.split()?;
        Ok(Experiment {
            frames: &self.frames,
            train: split.train,
            test: split.test,
        })
    }

    fn start_run(&self, runs_dir: &Path, command: &str, options: Option<&impl Serialize>) -> CliResult<Run> {
        let options = options.map(to_toml).transpose()?;
        Run::start(
            runs_dir,
            command,
            Some(&self.path),
            &to_toml(&self.config)?,
            options.as_deref(),
        )
    }
}

fn write_csv<T: Serialize>(run_dir: &Path, name: &str, rows: &[T]) -> CliResult<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(CliError::internal)?;
    }
    let bytes = writer.into_inner().map_err(CliError::internal)?;
    let path = run_dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| io_error(&path, e))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::internal)?;
    text.push('\n');
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))
}

/// Metrics, predictions, per-scenario accuracy and the ROC and confusion plots.
fn write_evaluation(dir: &Path, evaluation: &Evaluation) -> CliResult<()> {
    let r = &evaluation.report;
    write_json(
        dir,
        "metrics.json",
        &json!({
            "report": r,
            "reference": {
                "accuracy": reference::FULL_ACCURACY,
                "f1": reference::FULL_F1,
                "auc": reference::FULL_AUC,
                "precision": reference::FULL_PRECISION,
                "recall": reference::FULL_RECALL,
                "confusion": reference::FULL_CONFUSION,
            },
        }),
    )?;
    write_csv(dir, "predictions.csv", &evaluation.predictions)?;
    write_scenarios(dir, &evaluation.scenarios)?;
    let roc = r.roc.as_deref().unwrap_or(&[]);
    write_text(dir, "roc.svg", &plots::roc_svg(roc, r.auc)?)?;
    write_text(dir, "confusion.svg", &plots::confusion_svg(&r.confusion)?)
}

#[derive(Serialize)]
struct ScenarioCsvRow<'a> {
    axis: &'a str,
    tag: &'a str,
    count: usize,
    correct: usize,
    accuracy: f64,
    reference_clips: usize,
    reference_accuracy: f64,
}

fn write_scenarios(dir: &Path, scenarios: &ScenarioBreakdown) -> CliResult<()> {
    let rows: Vec<ScenarioCsvRow> = scenarios
        .axes
        .iter()
        .flat_map(|axis| {
            axis.groups.iter().map(|g| ScenarioCsvRow {
                axis: &axis.axis,
                tag: &g.tag,
                count: g.count,
                correct: g.correct,
                accuracy: g.accuracy,
                reference_clips: g.reference.0,
                reference_accuracy: g.reference.1,
            })
        })
        .collect();
    write_csv(dir, "scenarios.csv", &rows)
}

fn print_summary(name: &str, e: &Evaluation) {
    let r = &e.report;
    println!(
        "{name}: accuracy {:.2}% precision {:.3} recall {:.3} f1 {:.3} auc {} (n={})",
        100.0 * r.accuracy,
        r.distracted.precision,
        r.distracted.recall,
        r.distracted.f1,
        r.auc.map_or("undefined".to_string(), |a| format!("{a:.3}")),
        r.total
    );
}

fn save_params(dir: &Path, cell: &Cell) -> CliResult<()> {
    let params = cell
        .params
        .as_ref()
        .ok_or_else(|| CliError::internal("trained cell has no parameters"))?;
    checkpoint::save(params, &dir.join("checkpoint.safetensors"))?;
    Ok(())
}

fn train_command(runs: &Path, a: ConfigArgs) -> CliResult<()> {
    let setup = Setup::load(&a.config)?;
    let split = setup.split()?;
    let run = setup.start_run(runs, "train", None::<&()>)?;
    let model = &setup.config.model;
    let train_set = prepare_examples(model, &setup.frames, &split.train, None)?;
    let test_set = prepare_examples(model, &setup.frames, &split.test, None)?;
    let cell = train_and_evaluate(model, &setup.config.train, &train_set, &test_set, setup.config.repeats)?;
    write_evaluation(&run.dir, &cell.evaluation)?;
    write_csv(&run.dir, "history.csv", &cell.history)?;
    run.write_json(
        "split.json",
        &json!({
            "train": split.train.iter().map(|c| &c.clip_id).collect::<Vec<_>>(),
            "test": split.test.iter().map(|c| &c.clip_id).collect::<Vec<_>>(),
            "attentive_quotas": split.attentive_quotas,
        }),
    )?;
    run.write_json(
        "summary.json",
        &json!({
            "best_epoch": cell.best_epoch,
            "accuracies": cell.accuracies,
            "mean_accuracy": cell.mean_accuracy,
        }),
    )?;
    save_params(&run.dir, &cell)?;
    print_summary("test", &cell.evaluation);
    println!("run directory: {}", run.finish()?.display());
    Ok(())
}

/// Test clip ids from a training run's `split.json`.
fn split_test_ids(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    value
        .get("test")
        .and_then(|t| t.as_array())
        .and_then(|ids| ids.iter().map(|v| v.as_str().map(str::to_string)).collect())
        .ok_or_else(|| CliError::Usage(format!("{}: expected a `test` array of clip ids", path.display())))
}

fn eval_command(a: EvalArgs) -> CliResult<()> {
    let params = checkpoint::load(&a.checkpoint)?;
    let clips = read_manifest(&a.manifest)?;
    let selected: Vec<ClipRecord> = match &a.clips {
        Some(split) => {
            let catalog = Catalog::new(clips)?;
            split_test_ids(split)?
                .iter()
                .map(|id| {
                    catalog
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::Validation(format!("clip {id} is not in the manifest")).into())
                })
                .collect::<CliResult<_>>()?
        }
        None => clips.into_iter().filter(|c| c.label.class_index().is_some()).collect(),
    };
    if selected.is_empty() {
        return Err(Error::Validation("no attentive or distracted clips to evaluate".into()).into());
    }
    let frames = ManifestFrames::new(&a.manifest);
    let examples = prepare_examples(&params.config, &frames, &selected, None)?;
    let evaluation = evaluate(&params, &examples)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
        write_evaluation(out, &evaluation)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&evaluation.report).map_err(CliError::internal)?
    );
    print_summary("eval", &evaluation);
    Ok(())
}

#[derive(Serialize)]
struct GridCsvRow {
    label: String,
    accuracy: f64,
    mean_accuracy: f64,
    best_epoch: usize,
    reference_accuracy: Option<f64>,
}

fn grid_row(label: String, cell: &Cell, reference_accuracy: Option<f64>) -> GridCsvRow {
    GridCsvRow {
        label,
        accuracy: cell.evaluation.report.accuracy,
        mean_accuracy: cell.mean_accuracy,
        best_epoch: cell.best_epoch,
        reference_accuracy,
    }
}

fn bars(rows: &[GridCsvRow]) -> Vec<(String, f64)> {
    rows.iter().map(|r| (r.label.clone(), 100.0 * r.mean_accuracy)).collect()
}

fn ablate(runs: &Path, a: ConfigArgs) -> CliResult<()> {
    let setup = Setup::load(&a.config)?;
    let experiment = setup.experiment()?;
    let run = setup.start_run(runs, "ablate", None::<&()>)?;
    let rows = run_ablation(
        &setup.config.model,
        &setup.config.train,
        &experiment,
        &Branches::ABLATION_GRID,
        setup.config.repeats,
    )?;
    run.write_json("ablation.json", &rows)?;
    let csv: Vec<GridCsvRow> = rows
        .iter()
        .map(|r| grid_row(r.label.clone(), &r.cell, r.reference_accuracy))
        .collect();
    write_csv(&run.dir, "ablation.csv", &csv)?;
    run.write_text("ablation.svg", &plots::bars_svg("accuracy by branch combination", &bars(&csv))?)?;
    for r in &csv {
        println!("{:<8} {:.2}%", r.label, 100.0 * r.mean_accuracy);
    }
    println!("run directory: {}", run.finish()?.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepOptions<'a> {
    frames: &'a [usize],
    neighborhoods: &'a [usize],
}

fn sweep(runs: &Path, a: SweepArgs) -> CliResult<()> {
    if a.frames.is_empty() || a.neighborhoods.is_empty() {
        return Err(CliError::Usage("--frames and --h need at least one value".into()));
    }
    let setup = Setup::load(&a.config)?;
    let experiment = setup.experiment()?;
    let options = SweepOptions {
        frames: &a.frames,
        neighborhoods: &a.neighborhoods,
    };
    let run = setup.start_run(runs, "sweep", Some(&options))?;
    let cells = run_sweep(
        &setup.config.model,
        &setup.config.train,
        &experiment,
        &a.frames,
        &a.neighborhoods,
        setup.config.repeats,
    )?;
    run.write_json("sweep.json", &cells)?;
    #[derive(Serialize)]
    struct Row {
        frames: usize,
        neighborhood: usize,
        accuracy: f64,
        mean_accuracy: f64,
        reference_accuracy: Option<f64>,
    }
    let rows: Vec<Row> = cells
        .iter()
        .map(|c| Row {
            frames: c.frames,
            neighborhood: c.neighborhood,
            accuracy: c.cell.evaluation.report.accuracy,
            mean_accuracy: c.cell.mean_accuracy,
            reference_accuracy: c.reference_accuracy,
        })
        .collect();
    write_csv(&run.dir, "sweep.csv", &rows)?;
    let series: Vec<(usize, Vec<(usize, f64)>)> = a
        .frames
        .iter()
        .map(|&n| {
            let points = rows
                .iter()
                .filter(|r| r.frames == n)
                .map(|r| (r.neighborhood, 100.0 * r.mean_accuracy))
                .collect();
            (n, points)
        })
        .collect();
    run.write_text("sweep.svg", &plots::sweep_svg(&series)?)?;
    for r in &rows {
        println!("frames {:>2} h {:>2}: {:.2}%", r.frames, r.neighborhood, 100.0 * r.mean_accuracy);
    }
    println!("run directory: {}", run.finish()?.display());
    Ok(())
}

fn preproc_study(runs: &Path, a: ConfigArgs) -> CliResult<()> {
    let setup = Setup::load(&a.config)?;
    let experiment = setup.experiment()?;
    let first = experiment
        .train
        .first()
        .ok_or_else(|| Error::Validation("empty training split".into()))?;
    let width = setup
        .frames
        .load(first)?
        .first()
        .map(|f| f.width)
        .ok_or_else(|| Error::Validation(format!("clip {} has no frames", first.clip_id)))?;
    let modes = preprocessing_grid(width);
    let run = setup.start_run(runs, "preproc-study", None::<&()>)?;
    let rows = run_preprocessing_study(
        &setup.config.model,
        &setup.config.train,
        &experiment,
        &modes,
        setup.config.repeats,
    )?;
    run.write_json("preprocessing.json", &rows)?;
    let csv: Vec<GridCsvRow> = rows.iter().map(|r| grid_row(r.label.clone(), &r.cell, None)).collect();
    write_csv(&run.dir, "preprocessing.csv", &csv)?;
    run.write_text("preprocessing.svg", &plots::bars_svg("accuracy by preprocessing", &bars(&csv))?)?;
    for r in &csv {
        println!("{:<28} {:.2}%", r.label, 100.0 * r.mean_accuracy);
    }
    println!("run directory: {}", run.finish()?.display());
    Ok(())
}

/// Parameters from a checkpoint, or trained per the config on the split.
fn model_for(setup: &Setup, experiment: &Experiment<'_>, checkpoint: Option<&Path>) -> CliResult<ModelParams<f32>> {
    if let Some(path) = checkpoint {
        return Ok(checkpoint::load(path)?);
    }
    let model = &setup.config.model;
    let train_set = prepare_examples(model, experiment.frames, &experiment.train, None)?;
    let outcome = eyecue_core::train::train(model, &setup.config.train, &train_set)?;
    Ok(outcome.params)
}

#[derive(Serialize)]
struct CheckpointOptions<'a> {
    checkpoint: Option<&'a Path>,
    levels: Option<&'a [f64]>,
}

fn robustness(runs: &Path, a: RobustnessArgs) -> CliResult<()> {
    if a.levels.is_empty() || a.levels.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(CliError::Usage("--levels must be nonnegative pixel radii".into()));
    }
    let setup = Setup::load(&a.model.config)?;
    let experiment = setup.experiment()?;
    let options = CheckpointOptions {
        checkpoint: a.model.checkpoint.as_deref(),
        levels: Some(&a.levels),
    };
    let run = setup.start_run(runs, "robustness", Some(&options))?;
    let params = model_for(&setup, &experiment, a.model.checkpoint.as_deref())?;
    let rows = run_robustness(
        &params,
        &setup.frames,
        &experiment.test,
        &a.levels,
        setup.config.train.seed,
    )?;
    run.write_json("robustness.json", &rows)?;
    #[derive(Serialize)]
    struct Row {
        level_px: f64,
        accuracy: f64,
        reference_accuracy: Option<f64>,
    }
    let csv: Vec<Row> = rows
        .iter()
        .map(|r| Row {
            level_px: r.level_px,
            accuracy: r.accuracy,
            reference_accuracy: r.reference_accuracy,
        })
        .collect();
    write_csv(&run.dir, "robustness.csv", &csv)?;
    for r in &csv {
        println!("noise {:>5} px: {:.2}%", r.level_px, 100.0 * r.accuracy);
    }
    println!("run directory: {}", run.finish()?.display());
    Ok(())
}

fn scenario(runs: &Path, a: CheckpointOrTrain) -> CliResult<()> {
    let setup = Setup::load(&a.config)?;
    let experiment = setup.experiment()?;
    let options = CheckpointOptions {
        checkpoint: a.checkpoint.as_deref(),
        levels: None,
    };
    let run = setup.start_run(runs, "scenario", Some(&options))?;
    let params = model_for(&setup, &experiment, a.checkpoint.as_deref())?;
    let test_set = prepare_examples(&params.config, &setup.frames, &experiment.test, None)?;
    let evaluation = evaluate(&params, &test_set)?;
    run.write_json("scenarios.json", &evaluation.scenarios)?;
    write_scenarios(&run.dir, &evaluation.scenarios)?;
    for axis in &evaluation.scenarios.axes {
        for g in &axis.groups {
            println!(
                "{:<12} {:<8} {:>4} clips {:.2}%",
                axis.axis,
                g.tag,
                g.count,
                100.0 * g.accuracy
            );
        }
        if !axis.omitted.is_empty() {
            println!("{:<12} no test clips: {}", axis.axis, axis.omitted.join(", "));
        }
    }
    println!("run directory: {}", run.finish()?.display());
    Ok(())
}

#[derive(Serialize)]
struct LooOptions {
    held_out: SourceDataset,
}

fn loo(runs: &Path, a: LooArgs) -> CliResult<()> {
    check_hold_out(a.held_out)?;
    let setup = Setup::load(&a.config)?;
    let run = setup.start_run(runs, "loo", Some(&LooOptions { held_out: a.held_out }))?;
    let result = leave_one_out(
        &setup.config.model,
        &setup.config.train,
        &setup.frames,
        &setup.clips,
        a.held_out,
    )?;
    run.write_json("loo.json", &result)?;
    write_evaluation(&run.dir, &result.cell.evaluation)?;
    print_summary(&format!("held out {}", a.held_out), &result.cell.evaluation);
    println!("run directory: {}", run.finish()?.display());
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let state = Arc::new(AppState::open(&a.manifest, &a.labels)?);
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::internal)?
        .block_on(service::serve(state, a.port))
}
