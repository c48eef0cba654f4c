//! Turning labeled manifest clips into encoder-ready examples, optionally
//! with perturbed gaze.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::frames::FrameStore;
use crate::dataset::record::{ClipRecord, Label};
use crate::error::{ensure, Error, Result};
use crate::geometry::{GazePoint, GazeTrack};
use crate::model::{prepare_clip, ModelConfig, PreparedClip};

/// A labeled clip ready for the model.
#[derive(Debug, Clone)]
pub struct Example {
    pub record: ClipRecord,
    pub target: usize,
    pub clip: PreparedClip<f32>,
}

/// Class index of a clip, rejecting clips that cannot be trained on.
pub fn target_of(clip: &ClipRecord) -> Result<usize> {
    clip.label.class_index().ok_or_else(|| {
        Error::Validation(format!(
            "clip {} is labeled {}; only attentive and distracted clips can be used",
            clip.clip_id,
            match clip.label {
                Label::Erroneous => "erroneous",
                _ => "unlabeled",
            }
        ))
    })
}

/// Uniform gaze noise over a disk, in raw-frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeNoise {
    pub level_px: f64,
    pub seed: u64,
}

/// Adds an independent offset per frame, uniform over the disk of radius
/// `level_px`, then clamps to the frame.
pub fn perturb_gaze(
    track: &GazeTrack,
    level_px: f64,
    frame_width: usize,
    frame_height: usize,
    seed: u64,
) -> Result<GazeTrack> {
    ensure!(
        level_px.is_finite() && level_px >= 0.0,
        "noise level must be a nonnegative number of pixels"
    );
    ensure!(frame_width > 0 && frame_height > 0, "frame must be nonempty");
    if level_px == 0.0 {
        return Ok(track.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = track
        .points()
        .iter()
        .map(|p| {
            let radius = level_px * rng.random::<f64>().sqrt();
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let x = p.x as f64 + radius * angle.cos() / frame_width as f64;
            let y = p.y as f64 + radius * angle.sin() / frame_height as f64;
            GazePoint::new(x as f32, y as f32)
        })
        .collect::<Result<_>>()?;
    Ok(GazeTrack(points))
}

/// Loads, optionally perturbs and prepares each clip. Clips longer than
/// `config.frames_per_clip` keep their leading frames.
pub fn prepare_examples(
    config: &ModelConfig,
    frames: &dyn FrameStore,
    clips: &[ClipRecord],
    noise: Option<GazeNoise>,
) -> Result<Vec<Example>> {
    config.validate()?;
    let n = config.frames_per_clip;
    clips
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let target = target_of(record)?;
            ensure!(
                record.frame_count() >= n,
                "clip {} has {} frames, fewer than {n}",
                record.clip_id,
                record.frame_count()
            );
            let mut raw = frames.load(record)?;
            raw.truncate(n);
            let mut gaze = record.gaze.truncated(n);
            if let Some(noise) = noise {
                let seed = noise.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                gaze = perturb_gaze(&gaze, noise.level_px, raw[0].width, raw[0].height, seed)?;
            }
            Ok(Example {
                record: record.clone(),
                target,
                clip: prepare_clip(config, &raw, &gaze)?,
            })
        })
        .collect()
}
