//! Frame geometry: pixel to patch mapping, gaze neighborhoods and the
//! gaze-guided frame renderers (dot overlay, heatmap mask, gaze crop).
//!
//! Everything here is pure and deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Row-major tessellation of a frame into square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub frame_height: usize,
    pub frame_width: usize,
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl PatchGrid {
    pub fn new(frame_height: usize, frame_width: usize, patch_size: usize) -> Result<Self> {
        ensure!(
            frame_height > 0 && frame_width > 0 && patch_size > 0,
            "grid dimensions must be positive (got {frame_height}x{frame_width}, patch {patch_size})"
        );
        ensure!(
            patch_size <= frame_height.min(frame_width),
            "patch size {patch_size} exceeds frame {frame_height}x{frame_width}"
        );
        Ok(Self {
            frame_height,
            frame_width,
            patch_size,
            grid_rows: frame_height / patch_size,
            grid_cols: frame_width / patch_size,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid_cols + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.grid_cols, index % self.grid_cols)
    }

    /// Patch containing the gaze point. Points on the far edge (or in the
    /// uncovered remainder strip when the frame is not a multiple of the
    /// patch size) clamp to the last row/column.
    pub fn gaze_to_patch(&self, gaze: GazePoint) -> usize {
        let (row, col) = self.gaze_row_col(gaze);
        self.index(row, col)
    }

    pub fn gaze_row_col(&self, gaze: GazePoint) -> (usize, usize) {
        let py = gaze.y as f64 * self.frame_height as f64;
        let px = gaze.x as f64 * self.frame_width as f64;
        let row = ((py / self.patch_size as f64).floor() as usize).min(self.grid_rows - 1);
        let col = ((px / self.patch_size as f64).floor() as usize).min(self.grid_cols - 1);
        (row, col)
    }

    /// The `h` patches nearest to the gaze patch, ordered by
    /// (distance, row, col). Distance is Manhattan for the 5-cross and
    /// Chebyshev otherwise, which reproduces the center / cross / 3x3 / 5x5
    /// shapes away from borders and still yields exactly `h` tokens at
    /// borders and corners.
    pub fn select_neighborhood(&self, gaze: GazePoint, h: usize) -> Result<Vec<usize>> {
        let shape = Neighborhood::try_from(h)?;
        ensure!(
            self.num_patches() >= h,
            "grid {}x{} has {} patches, fewer than h={h}",
            self.grid_rows,
            self.grid_cols,
            self.num_patches()
        );
        let center = self.gaze_row_col(gaze);
        Ok(shape.select(self, center))
    }
}

/// Supported neighborhood sizes around the gaze patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Neighborhood {
    Single,
    Cross,
    Square3,
    Square5,
}

impl Neighborhood {
    pub const ALL: [Neighborhood; 4] = [
        Neighborhood::Single,
        Neighborhood::Cross,
        Neighborhood::Square3,
        Neighborhood::Square5,
    ];

    pub fn size(self) -> usize {
        match self {
            Neighborhood::Single => 1,
            Neighborhood::Cross => 5,
            Neighborhood::Square3 => 9,
            Neighborhood::Square5 => 25,
        }
    }

    fn distance(self, a: (usize, usize), b: (usize, usize)) -> usize {
        let dr = a.0.abs_diff(b.0);
        let dc = a.1.abs_diff(b.1);
        match self {
            Neighborhood::Cross => dr + dc,
            _ => dr.max(dc),
        }
    }

    fn select(self, grid: &PatchGrid, center: (usize, usize)) -> Vec<usize> {
        let h = self.size();
        // Any of the h nearest patches lies within this window, even when the
        // gaze patch sits in a corner.
        let reach = match self {
            Neighborhood::Single => 0,
            Neighborhood::Cross => 2,
            Neighborhood::Square3 => 2,
            Neighborhood::Square5 => 4,
        };
        let r0 = center.0.saturating_sub(reach);
        let r1 = (center.0 + reach).min(grid.grid_rows - 1);
        let c0 = center.1.saturating_sub(reach);
        let c1 = (center.1 + reach).min(grid.grid_cols - 1);
        let mut candidates = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                candidates.push((self.distance(center, (r, c)), r, c));
            }
        }
        candidates.sort_unstable();
        // Thin grids (e.g. 1xN) can leave the window short; anything farther
        // than `reach` may then compete, so fall back to a full scan.
        if candidates.len() < h || candidates[h - 1].0 > reach {
            candidates.clear();
            for r in 0..grid.grid_rows {
                for c in 0..grid.grid_cols {
                    candidates.push((self.distance(center, (r, c)), r, c));
                }
            }
            candidates.sort_unstable();
        }
        candidates
            .into_iter()
            .take(h)
            .map(|(_, r, c)| grid.index(r, c))
            .collect()
    }
}

impl TryFrom<usize> for Neighborhood {
    type Error = Error;

    fn try_from(h: usize) -> Result<Self> {
        match h {
            1 => Ok(Neighborhood::Single),
            5 => Ok(Neighborhood::Cross),
            9 => Ok(Neighborhood::Square3),
            25 => Ok(Neighborhood::Square5),
            other => Err(Error::Validation(format!(
                "neighborhood size h must be one of 1, 5, 9, 25 (got {other})"
            ))),
        }
    }
}

/// Normalized fixation coordinate, x to the right and y downwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePoint {
    pub x: f32,
    pub y: f32,
}

impl GazePoint {
    /// Clamps into [0,1]; rejects non-finite coordinates.
    pub fn new(x: f32, y: f32) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Validation(format!(
                "gaze coordinates must be finite (got {x}, {y})"
            )));
        }
        Ok(Self {
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
        })
    }

    /// Integer pixel holding the gaze point in a `width` x `height` frame.
    pub fn to_pixel(self, width: usize, height: usize) -> (usize, usize) {
        let px = ((self.x as f64 * width as f64).floor() as usize).min(width - 1);
        let py = ((self.y as f64 * height as f64).floor() as usize).min(height - 1);
        (px, py)
    }
}

/// One fixation per frame of a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GazeTrack(pub Vec<GazePoint>);

impl GazeTrack {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[GazePoint] {
        &self.0
    }

    pub fn truncated(&self, frames: usize) -> GazeTrack {
        GazeTrack(self.0.iter().take(frames).copied().collect())
    }
}

/// RGB frame, row-major HWC, intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "frame dimensions must be positive");
        ensure!(
            data.len() == height * width * Self::CHANNELS,
            "frame buffer has {} values, expected {}",
            data.len(),
            height * width * Self::CHANNELS
        );
        ensure!(
            data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "frame intensities must be finite and in [0,1]"
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resample with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> FrameImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let mut out = Vec::with_capacity(height * width * 3);
        for oy in 0..height {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for ox in 0..width {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                let (a, b) = (self.pixel(x0, y0), self.pixel(x1, y0));
                let (c, d) = (self.pixel(x0, y1), self.pixel(x1, y1));
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * tx;
                    let bottom = c[ch] + (d[ch] - c[ch]) * tx;
                    out.push((top + (bottom - top) * ty).clamp(0.0, 1.0));
                }
            }
        }
        FrameImage {
            height,
            width,
            data: out,
        }
    }
}

pub const DOT_COLOR: [f32; 3] = [0.0, 1.0, 0.0];

/// Paints every pixel within Euclidean `radius` of the gaze pixel pure green.
pub fn render_dot_overlay(frame: &FrameImage, gaze: GazePoint, radius: f32) -> FrameImage {
    let mut out = frame.clone();
    let (gx, gy) = gaze.to_pixel(frame.width, frame.height);
    let reach = radius.max(0.0).floor() as usize;
    let r2 = (radius as f64) * (radius as f64);
    let y0 = gy.saturating_sub(reach);
    let y1 = (gy + reach).min(frame.height - 1);
    let x0 = gx.saturating_sub(reach);
    let x1 = (gx + reach).min(frame.width - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - gx as f64;
            let dy = y as f64 - gy as f64;
            if dx * dx + dy * dy <= r2 {
                out.set_pixel(x, y, DOT_COLOR);
            }
        }
    }
    out
}

/// Gaussian attention mask with sigma = radius / 2, never darker than `floor`.
pub fn heatmap_mask_value(distance_sq: f64, radius: f32, floor: f32) -> f32 {
    let sigma = radius as f64 / 2.0;
    let floor = floor as f64;
    (floor + (1.0 - floor) * (-distance_sq / (2.0 * sigma * sigma)).exp()) as f32
}

pub fn render_heatmap_mask(
    frame: &FrameImage,
    gaze: GazePoint,
    radius: f32,
    floor: f32,
) -> FrameImage {
    let (gx, gy) = gaze.to_pixel(frame.width, frame.height);
    let mut out = frame.clone();
    for y in 0..frame.height {
        let dy = y as f64 - gy as f64;
        for x in 0..frame.width {
            let dx = x as f64 - gx as f64;
            let m = heatmap_mask_value(dx * dx + dy * dy, radius, floor);
            let i = (y * frame.width + x) * 3;
            for v in &mut out.data[i..i + 3] {
                *v *= m;
            }
        }
    }
    out
}

/// Pixel window `[x0, x0+size) x [y0, y0+size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

pub fn gaze_crop_window(
    width: usize,
    height: usize,
    gaze: GazePoint,
    crop: usize,
) -> Result<CropWindow> {
    ensure!(crop > 0, "crop size must be positive");
    ensure!(
        crop <= width.min(height),
        "crop {crop} larger than frame {height}x{width}"
    );
    let (gx, gy) = gaze.to_pixel(width, height);
    let half = crop / 2;
    let x0 = gx.saturating_sub(half).min(width - crop);
    let y0 = gy.saturating_sub(half).min(height - crop);
    Ok(CropWindow { x0, y0, size: crop })
}

/// Square window centered on the gaze pixel, slid inward at the borders.
pub fn crop_gaze_centered(frame: &FrameImage, gaze: GazePoint, crop: usize) -> Result<FrameImage> {
    let w = gaze_crop_window(frame.width, frame.height, gaze, crop)?;
    let mut data = Vec::with_capacity(crop * crop * 3);
    for y in w.y0..w.y0 + crop {
        let start = (y * frame.width + w.x0) * 3;
        data.extend_from_slice(&frame.data[start..start + crop * 3]);
    }
    Ok(FrameImage {
        height: crop,
        width: crop,
        data,
    })
}

/// Gaze-guided preprocessing applied to raw frames before encoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Preprocessing {
    #[default]
    None,
    Dot { radius: f32 },
    Heatmap { radius: f32, floor: f32 },
    Crop { size: usize },
}

impl Preprocessing {
    pub const DEFAULT_DOT_RADIUS: f32 = 20.0;
    pub const DEFAULT_HEATMAP_RADIUS: f32 = 75.0;
    pub const DEFAULT_HEATMAP_FLOOR: f32 = 0.3;
    pub const DEFAULT_CROP: usize = 448;

    pub fn validate(&self) -> Result<()> {
        match *self {
            Preprocessing::None => Ok(()),
            Preprocessing::Dot { radius } => {
                ensure!(radius > 0.0, "dot radius must be positive");
                Ok(())
            }
            Preprocessing::Heatmap { radius, floor } => {
                ensure!(radius > 0.0, "heatmap radius must be positive");
                ensure!((0.0..=1.0).contains(&floor), "heatmap floor must be in [0,1]");
                Ok(())
            }
            Preprocessing::Crop { size } => {
                ensure!(size > 0, "crop size must be positive");
                Ok(())
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Preprocessing::None => "none".into(),
            Preprocessing::Dot { radius } => format!("dot(r={radius})"),
            Preprocessing::Heatmap { radius, floor } => format!("heatmap(r={radius},floor={floor})"),
            Preprocessing::Crop { size } => format!("crop({size})"),
        }
    }

    /// Renders the frame and resizes it to the encoder input. Also returns the
    /// gaze point expressed in the output frame, which only moves for crops.
    pub fn apply(
        &self,
        frame: &FrameImage,
        gaze: GazePoint,
        out_height: usize,
        out_width: usize,
    ) -> Result<(FrameImage, GazePoint)> {
        let (rendered, local_gaze) = match *self {
            Preprocessing::None => (frame.clone(), gaze),
            Preprocessing::Dot { radius } => (render_dot_overlay(frame, gaze, radius), gaze),
            Preprocessing::Heatmap { radius, floor } => {
                (render_heatmap_mask(frame, gaze, radius, floor), gaze)
            }
            Preprocessing::Crop { size } => {
                let w = gaze_crop_window(frame.width, frame.height, gaze, size)?;
                let cropped = crop_gaze_centered(frame, gaze, size)?;
                let gx = gaze.x as f64 * frame.width as f64 - w.x0 as f64;
                let gy = gaze.y as f64 * frame.height as f64 - w.y0 as f64;
                let local = GazePoint::new((gx / size as f64) as f32, (gy / size as f64) as f32)?;
                (cropped, local)
            }
        };
        Ok((rendered.resize(out_height, out_width), local_gaze))
    }
}
