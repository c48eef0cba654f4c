//! Experiment grids: branch ablation, clip-length by neighborhood sweep,
//! preprocessing study, gaze-noise robustness and leave-one-dataset-out.
//!
//! Each cell trains and evaluates its own model on the same split with the
//! same seeds. `repeats > 1` retrains with consecutive seeds and reports the
//! mean accuracy next to each run's accuracy.

use serde::Serialize;

use crate::dataset::frames::FrameStore;
use crate::dataset::record::{ClipRecord, SourceDataset};
use crate::error::{ensure, Error, Result};
use crate::geometry::Preprocessing;
use crate::model::{Branches, ModelConfig, ModelParams};
use crate::train::data::{prepare_examples, Example, GazeNoise};
use crate::train::eval::{evaluate, Evaluation};
use crate::train::reference;
use crate::train::trainer::{train, EpochRecord, TrainConfig};

/// Train and test clips plus where their frames come from.
pub struct Experiment<'a> {
    pub frames: &'a dyn FrameStore,
    pub train: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
}

/// Outcome of training and evaluating one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub evaluation: Evaluation,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Test accuracy of each repeat; the first is the one evaluated above.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Parameters of the first repeat.
    #[serde(skip)]
    pub params: Option<ModelParams<f32>>,
}

pub fn train_and_evaluate(
    model: &ModelConfig,
    tc: &TrainConfig,
    train_set: &[Example],
    test_set: &[Example],
    repeats: usize,
) -> Result<Cell> {
    ensure!(repeats >= 1, "repeat count must be at least 1");
    let mut first: Option<Cell> = None;
    let mut accuracies = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let config = TrainConfig {
            seed: tc.seed.wrapping_add(r as u64),
            ..tc.clone()
        };
        let outcome = train(model, &config, train_set)?;
        let evaluation = evaluate(&outcome.params, test_set)?;
        accuracies.push(evaluation.report.accuracy);
        if first.is_none() {
            first = Some(Cell {
                evaluation,
                history: outcome.history,
                best_epoch: outcome.best_epoch,
                accuracies: Vec::new(),
                mean_accuracy: 0.0,
                params: Some(outcome.params),
            });
        }
    }
    let mut cell = first.expect("at least one repeat");
    cell.mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    cell.accuracies = accuracies;
    Ok(cell)
}

fn prepare_split(model: &ModelConfig, experiment: &Experiment<'_>) -> Result<(Vec<Example>, Vec<Example>)> {
    Ok((
        prepare_examples(model, experiment.frames, &experiment.train, None)?,
        prepare_examples(model, experiment.frames, &experiment.test, None)?,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub branches: Branches,
    pub label: String,
    pub fusion_width: usize,
    pub cell: Cell,
    pub reference_accuracy: Option<f64>,
}

/// Trains one model per branch combination; all rows share the prepared data.
pub fn run_ablation(
    model: &ModelConfig,
    tc: &TrainConfig,
    experiment: &Experiment<'_>,
    rows: &[Branches],
    repeats: usize,
) -> Result<Vec<AblationRow>> {
    let (train_set, test_set) = prepare_split(model, experiment)?;
    rows.iter()
        .map(|&branches| {
            let config = ModelConfig {
                branches,
                ..model.clone()
            };
            config.validate()?;
            log::info!("ablation row {}", branches.label());
            Ok(AblationRow {
                branches,
                label: branches.label(),
                fusion_width: config.fusion_width(),
                cell: train_and_evaluate(&config, tc, &train_set, &test_set, repeats)?,
                reference_accuracy: reference::ablation_accuracy(branches),
            })
        })
        .collect()
}

pub const SWEEP_FRAMES: [usize; 2] = [8, 16];
pub const SWEEP_NEIGHBORHOODS: [usize; 4] = [1, 5, 9, 25];

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub frames: usize,
    pub neighborhood: usize,
    pub cell: Cell,
    pub reference_accuracy: Option<f64>,
}

/// One model per (clip length, neighborhood). Shorter clip lengths keep the
/// leading frames of each clip.
pub fn run_sweep(
    model: &ModelConfig,
    tc: &TrainConfig,
    experiment: &Experiment<'_>,
    frames: &[usize],
    neighborhoods: &[usize],
    repeats: usize,
) -> Result<Vec<SweepCell>> {
    ensure!(
        !frames.is_empty() && !neighborhoods.is_empty(),
        "sweep grid must not be empty"
    );
    let mut cells = Vec::with_capacity(frames.len() * neighborhoods.len());
    for &n in frames {
        let base = ModelConfig {
            frames_per_clip: n,
            ..model.clone()
        };
        let (train_set, test_set) = prepare_split(&base, experiment)?;
        for &h in neighborhoods {
            let config = ModelConfig {
                neighborhood: h,
                ..base.clone()
            };
            config.validate()?;
            log::info!("sweep cell frames={n} h={h}");
            cells.push(SweepCell {
                frames: n,
                neighborhood: h,
                cell: train_and_evaluate(&config, tc, &train_set, &test_set, repeats)?,
                reference_accuracy: reference::sweep_accuracy(n, h),
            });
        }
    }
    Ok(cells)
}

/// Frame width the preprocessing grid is specified at.
pub const PREPROCESSING_REFERENCE_WIDTH: usize = 1920;

/// Baseline plus three settings per mode, given at full-HD scale and
/// rescaled to `frame_width`.
pub fn preprocessing_grid(frame_width: usize) -> Vec<Preprocessing> {
    let scale = frame_width as f32 / PREPROCESSING_REFERENCE_WIDTH as f32;
    let floor = Preprocessing::DEFAULT_HEATMAP_FLOOR;
    let mut grid = vec![Preprocessing::None];
    grid.extend([10.0, 20.0, 40.0].map(|r| Preprocessing::Dot { radius: r * scale }));
    grid.extend([35.0, 75.0, 150.0].map(|r| Preprocessing::Heatmap {
        radius: r * scale,
        floor,
    }));
    grid.extend([224.0f32, 448.0, 896.0].map(|s| Preprocessing::Crop {
        size: ((s * scale).round() as usize).max(1),
    }));
    grid
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessingRow {
    pub preprocessing: Preprocessing,
    pub label: String,
    pub cell: Cell,
}

pub fn run_preprocessing_study(
    model: &ModelConfig,
    tc: &TrainConfig,
    experiment: &Experiment<'_>,
    modes: &[Preprocessing],
    repeats: usize,
) -> Result<Vec<PreprocessingRow>> {
    ensure!(
        modes.first() == Some(&Preprocessing::None),
        "the study must start with the unprocessed baseline"
    );
    modes
        .iter()
        .map(|&preprocessing| {
            let config = ModelConfig {
                preprocessing,
                ..model.clone()
            };
            config.validate()?;
            log::info!("preprocessing {}", preprocessing.label());
            let (train_set, test_set) = prepare_split(&config, experiment)?;
            Ok(PreprocessingRow {
                preprocessing,
                label: preprocessing.label(),
                cell: train_and_evaluate(&config, tc, &train_set, &test_set, repeats)?,
            })
        })
        .collect()
}

pub const DEFAULT_NOISE_LEVELS: [f64; 3] = [0.0, 20.0, 100.0];

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessRow {
    pub level_px: f64,
    pub accuracy: f64,
    pub evaluation: Evaluation,
    pub reference_accuracy: Option<f64>,
}

/// Evaluates fixed parameters with gaze perturbed at each level.
pub fn run_robustness(
    params: &ModelParams<f32>,
    frames: &dyn FrameStore,
    test: &[ClipRecord],
    levels: &[f64],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    levels
        .iter()
        .map(|&level_px| {
            let noise = (level_px != 0.0).then_some(GazeNoise { level_px, seed });
            let examples = prepare_examples(&params.config, frames, test, noise)?;
            let evaluation = evaluate(params, &examples)?;
            Ok(RobustnessRow {
                level_px,
                accuracy: evaluation.report.accuracy,
                evaluation,
                reference_accuracy: reference::noise_accuracy(level_px),
            })
        })
        .collect()
}

/// Sources eligible to be held out.
pub const HOLD_OUT_SOURCES: [SourceDataset; 3] = [
    SourceDataset::BddA,
    SourceDataset::Dada2000,
    SourceDataset::DrEyeVe,
];

#[derive(Debug, Clone, Serialize)]
pub struct LeaveOneOut {
    pub held_out: SourceDataset,
    pub train_size: usize,
    pub test_size: usize,
    pub cell: Cell,
    /// Full-scale `(accuracy %, distracted F1)`.
    pub reference: Option<(f64, f64)>,
}

/// Rejects sources that cannot be held out.
pub fn check_hold_out(held_out: SourceDataset) -> Result<()> {
    if held_out == SourceDataset::TrafficGaze {
        return Err(Error::Policy(
            "TrafficGaze cannot be held out: its distracted class is too small (26 of 507 clips) \
             for a meaningful evaluation"
                .into(),
        ));
    }
    ensure!(
        HOLD_OUT_SOURCES.contains(&held_out),
        "held-out source must be one of BDD-A, DADA-2000, DR(eye)VE"
    );
    Ok(())
}

/// Trains on every other source and evaluates on `held_out`. Clips labeled
/// erroneous or not yet labeled are skipped.
pub fn leave_one_out(
    model: &ModelConfig,
    tc: &TrainConfig,
    frames: &dyn FrameStore,
    clips: &[ClipRecord],
    held_out: SourceDataset,
) -> Result<LeaveOneOut> {
    check_hold_out(held_out)?;
    let usable: Vec<&ClipRecord> = clips.iter().filter(|c| c.label.class_index().is_some()).collect();
    let skipped = clips.len() - usable.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} clips without an attentive or distracted label");
    }
    let (test, train_clips): (Vec<ClipRecord>, Vec<ClipRecord>) = usable
        .into_iter()
        .cloned()
        .partition(|c| c.source_dataset == held_out);
    ensure!(!test.is_empty(), "no labeled clips from {held_out}");
    ensure!(!train_clips.is_empty(), "no labeled clips outside {held_out}");
    let experiment = Experiment {
        frames,
        train: train_clips,
        test,
    };
    let (train_set, test_set) = prepare_split(model, &experiment)?;
    Ok(LeaveOneOut {
        held_out,
        train_size: train_set.len(),
        test_size: test_set.len(),
        cell: train_and_evaluate(model, tc, &train_set, &test_set, 1)?,
        reference: reference::held_out_accuracy(held_out),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocessing_grid_scales_with_frame_width() {
        let grid = preprocessing_grid(1920);
        assert_eq!(grid.len(), 10);
        assert_eq!(grid[0], Preprocessing::None);
        assert!(grid.contains(&Preprocessing::Dot { radius: 20.0 }));
        assert!(grid.contains(&Preprocessing::Crop { size: 448 }));
        assert!(grid.iter().any(|p| matches!(p, Preprocessing::Heatmap { radius, .. } if *radius == 75.0)));
        let small = preprocessing_grid(64);
        assert_eq!(small[8], Preprocessing::Crop { size: 15 });
    }

    #[test]
    fn traffic_gaze_cannot_be_held_out() {
        let frames = crate::dataset::frames::ManifestFrames::new("unused");
        let err = leave_one_out(
            &ModelConfig::default(),
            &TrainConfig::default(),
            &frames,
            &[],
            SourceDataset::TrafficGaze,
        );
        assert!(matches!(err, Err(Error::Policy(_))));
        let err = leave_one_out(
            &ModelConfig::default(),
            &TrainConfig::default(),
            &frames,
            &[],
            SourceDataset::Synthetic,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
