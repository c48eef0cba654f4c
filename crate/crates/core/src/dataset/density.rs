//! Fixation density maps, Pearson correlation between maps, and flagging of
//! clips whose gaze departs from the rest of their recording.

use serde::{Deserialize, Serialize};

use crate::dataset::record::ClipRecord;
use crate::error::{ensure, Result};
use crate::geometry::GazePoint;

pub const DEFAULT_MAP_WIDTH: usize = 64;
pub const DEFAULT_MAP_HEIGHT: usize = 36;
pub const DEFAULT_SIGMA: f64 = 1.5;
pub const DEFAULT_CC_THRESHOLD: f64 = 0.3;
const TRUNCATION: f64 = 4.0;

/// Row-major grid of nonnegative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(width > 0 && height > 0, "map dimensions must be positive");
        ensure!(
            values.len() == width * height,
            "{} values for a {width}x{height} map",
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite() && *v >= 0.0),
            "density values must be finite and nonnegative"
        );
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > self.values[best] { i } else { best });
        (i % self.width, i / self.width)
    }

    fn normalize(&mut self) {
        let total = self.sum();
        if total > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= total);
        }
    }
}

/// Grid and kernel used for density maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self {
            width: DEFAULT_MAP_WIDTH,
            height: DEFAULT_MAP_HEIGHT,
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// Splats an isotropic Gaussian (truncated at 4 sigma) per fixation, then
/// normalizes to unit mass. No fixations give the all-zero map.
pub fn density_map(points: &[GazePoint], spec: MapSpec) -> Result<DensityMap> {
    ensure!(spec.width > 0 && spec.height > 0, "map dimensions must be positive");
    ensure!(spec.sigma > 0.0, "sigma must be positive");
    let mut map = DensityMap::zeros(spec.width, spec.height);
    let reach = TRUNCATION * spec.sigma;
    let inv = 1.0 / (2.0 * spec.sigma * spec.sigma);
    for p in points {
        let cx = p.x as f64 * spec.width as f64;
        let cy = p.y as f64 * spec.height as f64;
        let x0 = (cx - reach - 0.5).floor().max(0.0) as usize;
        let x1 = ((cx + reach - 0.5).ceil().max(0.0) as usize).min(spec.width - 1);
        let y0 = (cy - reach - 0.5).floor().max(0.0) as usize;
        let y1 = ((cy + reach - 0.5).ceil().max(0.0) as usize).min(spec.height - 1);
        for y in y0..=y1 {
            let dy = y as f64 + 0.5 - cy;
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - cx;
                let d2 = dx * dx + dy * dy;
                if d2 <= reach * reach {
                    map.values[y * spec.width + x] += (-d2 * inv).exp();
                }
            }
        }
    }
    map.normalize();
    Ok(map)
}

/// Pearson correlation; `degenerate` marks a zero-variance input, for which
/// the value is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    ensure!(a.len() == b.len(), "length mismatch: {} vs {}", a.len(), b.len());
    ensure!(!a.is_empty(), "cannot correlate empty inputs");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn pearson_cc(a: &DensityMap, b: &DensityMap) -> Result<Correlation> {
    ensure!(
        a.width == b.width && a.height == b.height,
        "map dimensions differ: {}x{} vs {}x{}",
        a.width,
        a.height,
        b.width,
        b.height
    );
    pearson(&a.values, &b.values)
}

/// How clip maps combine into a recording-level map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average of per-clip normalized maps.
    #[default]
    MeanOfClips,
    /// One splat over every fixation of the recording.
    AllPoints,
}

pub fn clip_map(clip: &ClipRecord, spec: MapSpec) -> Result<DensityMap> {
    density_map(clip.gaze.points(), spec)
}

pub fn whole_video_map(
    clips: &[ClipRecord],
    spec: MapSpec,
    aggregation: Aggregation,
) -> Result<DensityMap> {
    ensure!(!clips.is_empty(), "a recording-level map needs at least one clip");
    match aggregation {
        Aggregation::AllPoints => {
            let points: Vec<GazePoint> = clips
                .iter()
                .flat_map(|c| c.gaze.points().iter().copied())
                .collect();
            density_map(&points, spec)
        }
        Aggregation::MeanOfClips => {
            let mut total = DensityMap::zeros(spec.width, spec.height);
            for clip in clips {
                let m = clip_map(clip, spec)?;
                total.values.iter_mut().zip(&m.values).for_each(|(t, v)| *t += v);
            }
            total.normalize();
            Ok(total)
        }
    }
}

/// Strict comparison: a clip is a candidate when `cc < threshold`, or when
/// its correlation is undefined.
pub fn is_candidate(cc: &Correlation, threshold: f64) -> bool {
    cc.degenerate || cc.value < threshold
}

/// Sets `cc`, `flagged` and `degenerate` on every clip against the
/// recording-level map. Flagging is strict: `cc < threshold`. Degenerate clips
/// are always flagged for review. Returns the number flagged.
pub fn flag_candidates(
    clips: &mut [ClipRecord],
    whole: &DensityMap,
    spec: MapSpec,
    threshold: f64,
) -> Result<usize> {
    let mut flagged = 0;
    for clip in clips.iter_mut() {
        let cc = pearson_cc(&clip_map(clip, spec)?, whole)?;
        clip.cc = Some(cc.value);
        clip.degenerate = cc.degenerate;
        clip.flagged = is_candidate(&cc, threshold);
        flagged += clip.flagged as usize;
    }
    Ok(flagged)
}

/// Groups clips by `video_id` and flags each group against its own map.
pub fn flag_by_recording(
    clips: &mut [ClipRecord],
    spec: MapSpec,
    aggregation: Aggregation,
    threshold: f64,
) -> Result<usize> {
    let mut groups: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, clip) in clips.iter().enumerate() {
        let Some(video) = &clip.video_id else {
            return Err(crate::Error::Validation(format!(
                "clip {} has no video_id; flagging compares clips with their recording",
                clip.clip_id
            )));
        };
        groups.entry(video.clone()).or_default().push(i);
    }
    let mut flagged = 0;
    for indices in groups.values() {
        let mut group: Vec<ClipRecord> = indices.iter().map(|&i| clips[i].clone()).collect();
        let whole = whole_video_map(&group, spec, aggregation)?;
        flagged += flag_candidates(&mut group, &whole, spec, threshold)?;
        for (&i, clip) in indices.iter().zip(group) {
            clips[i] = clip;
        }
    }
    Ok(flagged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::record::tests::sample_clip;
    use crate::geometry::GazeTrack;

    fn gp(x: f32, y: f32) -> GazePoint {
        GazePoint::new(x, y).unwrap()
    }

    #[test]
    fn single_point_is_unimodal_with_unit_mass() {
        let m = density_map(&[gp(0.5, 0.5)], MapSpec::default()).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-12);
        let (x, y) = m.argmax();
        assert!((31..=32).contains(&x) && (17..=18).contains(&y), "{x},{y}");
        let twice = density_map(&[gp(0.5, 0.5), gp(0.5, 0.5)], MapSpec::default()).unwrap();
        assert_eq!(m, twice);
        let empty = density_map(&[], MapSpec::default()).unwrap();
        assert_eq!(empty.sum(), 0.0);
    }

    #[test]
    fn matches_double_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let points: Vec<GazePoint> = (0..16).map(|_| gp(rng.random(), rng.random())).collect();
        let spec = MapSpec::default();
        let fast = density_map(&points, spec).unwrap();
        let mut slow = vec![0.0; spec.width * spec.height];
        for y in 0..spec.height {
            for x in 0..spec.width {
                for p in &points {
                    let dx = x as f64 + 0.5 - p.x as f64 * spec.width as f64;
                    let dy = y as f64 + 0.5 - p.y as f64 * spec.height as f64;
                    let d2 = dx * dx + dy * dy;
                    if d2.sqrt() <= 4.0 * spec.sigma {
                        slow[y * spec.width + x] += (-d2 / (2.0 * spec.sigma * spec.sigma)).exp();
                    }
                }
            }
        }
        let total: f64 = slow.iter().sum();
        for (a, b) in fast.values.iter().zip(&slow) {
            assert!((a - b / total).abs() < 1e-6);
        }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[1.0, 3.0, 2.0]).unwrap().value - 0.5).abs() < 1e-12);
        let affine: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((pearson(&affine, &x).unwrap().value - 1.0).abs() < 1e-12);
        let flat = pearson(&[0.0; 3], &x).unwrap();
        assert_eq!(flat, Correlation { value: 0.0, degenerate: true });
        assert!(pearson(&x, &[1.0]).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let spec = MapSpec {
            width: 3,
            height: 1,
            sigma: 1.0,
        };
        let whole = DensityMap::from_values(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let mut clips = vec![sample_clip("a", 2)];
        clips[0].gaze = GazeTrack(vec![gp(0.9, 0.5), gp(0.9, 0.5)]);
        let cc = pearson_cc(&clip_map(&clips[0], spec).unwrap(), &whole)
            .unwrap()
            .value;
        flag_candidates(&mut clips, &whole, spec, cc).unwrap();
        assert!(!clips[0].flagged, "cc equal to the threshold is not flagged");
        flag_candidates(&mut clips, &whole, spec, cc + 1e-9).unwrap();
        assert!(clips[0].flagged);
    }

    #[test]
    fn degenerate_clip_is_flagged() {
        let spec = MapSpec::default();
        let whole = density_map(&[gp(0.2, 0.2)], spec).unwrap();
        let mut clips = vec![sample_clip("a", 2)];
        let zero = DensityMap::zeros(spec.width, spec.height);
        assert!(pearson_cc(&zero, &whole).unwrap().degenerate);
        // A clip map can only be constant when the grid is a single cell.
        let tiny = MapSpec {
            width: 1,
            height: 1,
            sigma: 1.0,
        };
        let whole_tiny = DensityMap::from_values(1, 1, vec![1.0]).unwrap();
        assert_eq!(flag_candidates(&mut clips, &whole_tiny, tiny, 0.3).unwrap(), 1);
        assert!(clips[0].degenerate && clips[0].flagged);
        assert_eq!(clips[0].cc, Some(0.0));
    }

    #[test]
    fn whole_video_aggregation() {
        let spec = MapSpec::default();
        let mut a = sample_clip("a", 2);
        a.gaze = GazeTrack(vec![gp(0.1, 0.2); 2]);
        let mut b = sample_clip("b", 2);
        b.gaze = GazeTrack(vec![gp(0.9, 0.8); 2]);
        let single = whole_video_map(std::slice::from_ref(&a), spec, Aggregation::MeanOfClips).unwrap();
        for (w, c) in single.values.iter().zip(&clip_map(&a, spec).unwrap().values) {
            assert!((w - c).abs() < 1e-12);
        }
        let both = whole_video_map(&[a.clone(), b.clone()], spec, Aggregation::MeanOfClips).unwrap();
        let (ma, mb) = (clip_map(&a, spec).unwrap(), clip_map(&b, spec).unwrap());
        for ((w, x), y) in both.values.iter().zip(&ma.values).zip(&mb.values) {
            assert!((w - (x + y) / 2.0).abs() < 1e-12);
        }
        assert!((both.sum() - 1.0).abs() < 1e-9);
        assert!(whole_video_map(&[], spec, Aggregation::AllPoints).is_err());
    }
}
