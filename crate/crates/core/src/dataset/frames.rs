//! Frame storage: packed little-endian f32 tensors and ordinary image files.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::dataset::record::{resolve, ClipRecord, FrameSource};
use crate::error::{ensure, Error, Result};
use crate::geometry::FrameImage;

const HEADER_LEN: usize = 16;

/// Writes `(n, H, W, 3)` as four u32 LE values followed by f32 LE intensities.
pub fn write_packed(frames: &[FrameImage], path: &Path) -> Result<()> {
    ensure!(!frames.is_empty(), "cannot pack an empty clip");
    let (h, w) = (frames[0].height, frames[0].width);
    ensure!(
        frames.iter().all(|f| f.height == h && f.width == w),
        "all frames of a packed clip must share one size"
    );
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(HEADER_LEN + frames.len() * h * w * 12);
    for dim in [frames.len(), h, w, FrameImage::CHANNELS] {
        let dim = u32::try_from(dim).map_err(|_| Error::Validation("dimension too large".into()))?;
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    for frame in frames {
        for v in &frame.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: &Path) -> Result<Vec<FrameImage>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Validation(format!("{}: {m}", path.display()));
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    if c != FrameImage::CHANNELS || n == 0 || h == 0 || w == 0 {
        return Err(bad(format!("unsupported shape ({n}, {h}, {w}, {c})")));
    }
    let per_frame = h * w * c;
    let expected = HEADER_LEN + n * per_frame * 4;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for shape ({n}, {h}, {w}, {c}), found {}",
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    values
        .chunks_exact(per_frame)
        .map(|data| FrameImage::new(h, w, data.to_vec()).map_err(|e| bad(e.to_string())))
        .collect()
}

/// Decodes an RGB image file into [0,1] intensities.
pub fn read_image(path: &Path) -> Result<FrameImage> {
    let img = image::open(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    FrameImage::new(h as usize, w as usize, data)
}

/// Encodes a frame as an 8-bit RGB PNG.
pub fn encode_png(frame: &FrameImage) -> Result<Vec<u8>> {
    let raw: Vec<u8> = frame
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, raw)
        .ok_or_else(|| Error::Validation("frame buffer does not match its size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Validation(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Loads every frame of a clip, resolving paths against the manifest.
pub fn load_clip_frames(manifest: &Path, clip: &ClipRecord) -> Result<Vec<FrameImage>> {
    let frames = match &clip.frames {
        FrameSource::Packed { packed } => read_packed(&resolve(manifest, packed))?,
        FrameSource::Files(files) => files
            .iter()
            .map(|f| read_image(&resolve(manifest, f)))
            .collect::<Result<_>>()?,
    };
    ensure!(
        frames.len() == clip.frame_count(),
        "clip {} has {} frames on disk but {} gaze points",
        clip.clip_id,
        frames.len(),
        clip.frame_count()
    );
    Ok(frames)
}

/// Source of decoded frames for manifest clips.
pub trait FrameStore: Sync {
    fn load(&self, clip: &ClipRecord) -> Result<Vec<FrameImage>>;
}

/// Frames read from disk relative to a manifest file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestFrames {
    pub manifest: PathBuf,
}

impl ManifestFrames {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
        }
    }
}

impl FrameStore for ManifestFrames {
    fn load(&self, clip: &ClipRecord) -> Result<Vec<FrameImage>> {
        load_clip_frames(&self.manifest, clip)
    }
}
