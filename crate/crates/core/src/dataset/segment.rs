//! Cutting recordings into fixed-length clips with one fixation per frame.

use std::path::Path;

use serde::Deserialize;

use crate::dataset::record::{
    ClipRecord, FrameSource, Label, Scene, SourceDataset, TimeOfDay, Weather,
};
use crate::error::{ensure, Error, Result};
use crate::geometry::{GazePoint, GazeTrack};

pub const DEFAULT_CLIP_LENGTH: usize = 16;

/// One row of a gaze log. `frame_index` may be fractional when the eye
/// tracker samples faster than the camera.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct GazeSample {
    pub frame_index: f64,
    pub x: f32,
    pub y: f32,
}

/// Reads `frame_index,x,y` rows; the header row is required.
pub fn read_gaze_csv(path: &Path) -> Result<Vec<GazeSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["frame_index", "x", "y"] {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "expected header `frame_index,x,y`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<GazeSample>().enumerate() {
        let line = i + 2;
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line,
            message,
        };
        let sample = row.map_err(|e| schema(e.to_string()))?;
        if !sample.frame_index.is_finite() || !sample.x.is_finite() || !sample.y.is_finite() {
            return Err(schema("non-finite value".into()));
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// One fixation per frame: the sample whose `frame_index` is nearest to the
/// frame number (earlier sample on ties).
pub fn align_gaze(samples: &[GazeSample], frames: usize) -> Result<Vec<GazePoint>> {
    ensure!(!samples.is_empty(), "gaze stream is empty");
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.frame_index.total_cmp(&b.frame_index));
    let mut j = 0;
    (0..frames)
        .map(|f| {
            let f = f as f64;
            while j + 1 < sorted.len()
                && (sorted[j + 1].frame_index - f).abs() < (sorted[j].frame_index - f).abs()
            {
                j += 1;
            }
            GazePoint::new(sorted[j].x, sorted[j].y)
        })
        .collect()
}

/// Metadata shared by every clip of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub video_id: String,
    pub source_dataset: SourceDataset,
    pub scene: Scene,
    pub time_of_day: TimeOfDay,
    pub weather: Weather,
}

/// Consecutive non-overlapping windows of `n` frames; the remainder is
/// dropped. Frame references are paths relative to the output manifest.
pub fn segment_clips(
    recording: &Recording,
    frame_paths: &[String],
    gaze: &[GazePoint],
    n: usize,
) -> Result<Vec<ClipRecord>> {
    ensure!(n >= 1, "clip length must be positive");
    ensure!(
        frame_paths.len() == gaze.len(),
        "{} frames but {} aligned gaze points",
        frame_paths.len(),
        gaze.len()
    );
    if frame_paths.len() < n {
        log::warn!(
            "recording {} has {} frames, fewer than one {n}-frame clip",
            recording.video_id,
            frame_paths.len()
        );
    }
    Ok(frame_paths
        .chunks_exact(n)
        .zip(gaze.chunks_exact(n))
        .enumerate()
        .map(|(k, (paths, points))| ClipRecord {
            clip_id: format!("{}_{k:04}", recording.video_id),
            video_id: Some(recording.video_id.clone()),
            source_dataset: recording.source_dataset,
            scene: recording.scene,
            time_of_day: recording.time_of_day,
            weather: recording.weather,
            frames: FrameSource::Files(paths.to_vec()),
            gaze: GazeTrack(points.to_vec()),
            cc: None,
            flagged: false,
            degenerate: false,
            label: Label::Unlabeled,
        })
        .collect())
}
