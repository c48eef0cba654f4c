//! Accuracies reported for the full-scale model on the real driving corpus.
//! Reports carry them as a comparison column; nothing asserts against them.
//! All accuracies are percentages.

use crate::dataset::record::{Scene, SourceDataset, TimeOfDay, Weather};
use crate::model::Branches;
use crate::train::metrics::Confusion;

pub const FULL_ACCURACY: f64 = 74.38;
pub const FULL_F1: f64 = 0.74;
pub const FULL_AUC: f64 = 0.82;
pub const FULL_PRECISION: f64 = 0.78;
pub const FULL_RECALL: f64 = 0.69;

/// Test-set confusion of the full model (distracted = positive).
pub const FULL_CONFUSION: Confusion = Confusion {
    tp: 167,
    fn_: 75,
    fp: 49,
    tn: 193,
};

pub fn ablation_accuracy(branches: Branches) -> Option<f64> {
    const VALUES: [f64; 7] = [54.13, 67.53, 68.80, 69.36, 70.25, 72.31, 74.38];
    Branches::ABLATION_GRID
        .iter()
        .position(|&b| b == branches)
        .map(|i| VALUES[i])
}

pub fn sweep_accuracy(frames: usize, neighborhood: usize) -> Option<f64> {
    let column = [1, 5, 9, 25].iter().position(|&h| h == neighborhood)?;
    match frames {
        8 => Some([74.09, 72.93, 70.04, 68.60][column]),
        16 => Some([74.38, 73.35, 72.11, 70.04][column]),
        _ => None,
    }
}

pub fn noise_accuracy(level_px: f64) -> Option<f64> {
    match level_px {
        0.0 => Some(FULL_ACCURACY),
        20.0 => Some(74.17),
        100.0 => Some(71.07),
        _ => None,
    }
}

/// `(clips, accuracy)` per scenario tag on the real test set.
pub fn scene_accuracy(scene: Scene) -> (usize, f64) {
    match scene {
        Scene::City => (368, 73.64),
        Scene::Highway => (50, 76.00),
        Scene::Rural => (66, 78.79),
    }
}

pub fn time_accuracy(time: TimeOfDay) -> (usize, f64) {
    match time {
        TimeOfDay::Day => (366, 74.32),
        TimeOfDay::Evening => (44, 61.36),
        TimeOfDay::Night => (74, 79.73),
    }
}

pub fn weather_accuracy(weather: Weather) -> (usize, f64) {
    match weather {
        Weather::Sunny => (253, 74.70),
        Weather::Cloudy => (147, 72.79),
        Weather::Rainy => (84, 72.62),
    }
}

/// `(accuracy, distracted F1)` when holding out one source dataset.
pub fn held_out_accuracy(source: SourceDataset) -> Option<(f64, f64)> {
    match source {
        SourceDataset::BddA => Some((65.24, 0.71)),
        SourceDataset::Dada2000 => Some((68.29, 0.68)),
        SourceDataset::DrEyeVe => Some((60.20, 0.67)),
        _ => None,
    }
}
