//! Clip records and the line-delimited JSON manifest format.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{GazePoint, GazeTrack};

macro_rules! tag_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Validation(format!(
                        "unknown {} `{other}`, expected one of: {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

tag_enum!(
    /// Dataset a clip was cut from.
    SourceDataset {
        DrEyeVe => "DR(eye)VE",
        BddA => "BDD-A",
        Dada2000 => "DADA-2000",
        TrafficGaze => "TrafficGaze",
        Synthetic => "synthetic",
    }
);

tag_enum!(Scene { City => "city", Highway => "highway", Rural => "rural" });

tag_enum!(TimeOfDay { Day => "day", Evening => "evening", Night => "night" });

tag_enum!(Weather { Sunny => "sunny", Cloudy => "cloudy", Rainy => "rainy" });

tag_enum!(
    /// Cognitive state of the driver during a clip.
    Label {
        Attentive => "attentive",
        Distracted => "distracted",
        Erroneous => "erroneous",
        Unlabeled => "unlabeled",
    }
);

impl Label {
    /// Class index for training, if the label is usable as a target.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Attentive => Some(0),
            Label::Distracted => Some(1),
            _ => None,
        }
    }
}

/// Where a clip's pixels live, relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameSource {
    Files(Vec<String>),
    Packed { packed: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Recording the clip was segmented from; groups clips for flagging.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    pub source_dataset: SourceDataset,
    pub scene: Scene,
    pub time_of_day: TimeOfDay,
    pub weather: Weather,
    pub frames: FrameSource,
    #[serde(with = "gaze_pairs")]
    pub gaze: GazeTrack,
    /// Correlation of the clip's fixation density with its video's.
    pub cc: Option<f64>,
    pub flagged: bool,
    /// Set when `cc` came from a constant density map.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
    pub label: Label,
}

impl ClipRecord {
    pub fn frame_count(&self) -> usize {
        self.gaze.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("clip {}: {m}", self.clip_id)));
        if self.clip_id.is_empty() {
            return Err(Error::Validation("clip_id must not be empty".into()));
        }
        if self.gaze.is_empty() {
            return fail("gaze track is empty".into());
        }
        if let FrameSource::Files(files) = &self.frames {
            if files.len() != self.gaze.len() {
                return fail(format!(
                    "{} frames but {} gaze points; every frame needs one fixation",
                    files.len(),
                    self.gaze.len()
                ));
            }
        }
        match self.cc {
            Some(cc) if !(-1.0..=1.0).contains(&cc) => {
                return fail(format!("cc {cc} outside [-1, 1]"))
            }
            None if self.flagged => return fail("flagged clips must carry a cc value".into()),
            _ => {}
        }
        Ok(())
    }
}

mod gaze_pairs {
    use super::*;

    pub fn serialize<S: Serializer>(track: &GazeTrack, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<[f32; 2]> = track.points().iter().map(|p| [p.x, p.y]).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<GazeTrack, D::Error> {
        let pairs = Vec::<[f32; 2]>::deserialize(d)?;
        pairs
            .into_iter()
            .map(|[x, y]| GazePoint::new(x, y).map_err(serde::de::Error::custom))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(GazeTrack)
    }
}

/// Parses one manifest line, reporting problems against `path:line`.
fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<ClipRecord> {
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let record: ClipRecord = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
    record.validate().map_err(|e| schema(e.to_string()))?;
    Ok(record)
}

/// Reads a manifest; blank lines are skipped. All clips must share one length
/// and clip ids must be unique.
pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut clips: Vec<ClipRecord> = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let record = parse_line(path, line_no, &line)?;
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if let Some(first) = clips.first() {
            if first.frame_count() != record.frame_count() {
                return Err(schema(format!(
                    "clip {} has {} frames, earlier clips have {}",
                    record.clip_id,
                    record.frame_count(),
                    first.frame_count()
                )));
            }
        }
        if let Some(prev) = seen.insert(record.clip_id.clone(), line_no) {
            return Err(schema(format!(
                "duplicate clip_id {} (first on line {prev})",
                record.clip_id
            )));
        }
        clips.push(record);
    }
    Ok(clips)
}

pub fn write_manifest(clips: &[ClipRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for clip in clips {
        clip.validate()?;
        serde_json::to_writer(&mut out, clip)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Resolves a path stored in a manifest against the manifest's directory.
pub fn resolve(manifest: &Path, relative: &str) -> PathBuf {
    manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(relative)
}

/// Clip lookup by id.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    clips: Vec<ClipRecord>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(clips: Vec<ClipRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            if index.insert(clip.clip_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate clip_id {}", clip.clip_id)));
            }
        }
        Ok(Self { clips, index })
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.index.get(clip_id).map(|&i| &self.clips[i])
    }

    pub fn clips(&self) -> &[ClipRecord] {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}
