//! Deterministic synthetic driving scenes with planted gaze behavior.
//!
//! Every scene holds four objects (lead vehicle, traffic sign, road-center
//! marker, roadside distractor), each in its own randomly chosen patch cell
//! with the same position and motion distribution. Attentive gaze follows a
//! task-relevant object; distracted gaze follows the distractor, with the
//! same tracking dynamics so the gaze track alone is uninformative. Scenes are
//! shared between labels in pairs, so neither the frames nor the gaze position
//! alone reveal the label: only what lies under the gaze does.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::frames::{write_packed, FrameStore};
use crate::dataset::record::{
    write_manifest, ClipRecord, FrameSource, Label, Scene, SourceDataset, TimeOfDay, Weather,
};
use crate::dataset::split::largest_remainder;
use crate::error::{ensure, Result};
use crate::geometry::{FrameImage, GazePoint, GazeTrack};

pub const FRAME_SIZE: usize = 64;
pub const CELL_SIZE: usize = 16;
pub const CLIP_FRAMES: usize = 16;
pub const DEFAULT_JITTER_PX: f32 = 1.5;
pub const DEFAULT_MOTION_PX: f32 = 4.0;
const CLIPS_PER_RECORDING: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    LeadVehicle,
    TrafficSign,
    RoadMarker,
    Distractor,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 4] = [
        ObjectKind::LeadVehicle,
        ObjectKind::TrafficSign,
        ObjectKind::RoadMarker,
        ObjectKind::Distractor,
    ];

    pub fn task_relevant(self) -> bool {
        self != ObjectKind::Distractor
    }

    fn color(self) -> [f32; 3] {
        match self {
            ObjectKind::LeadVehicle => [0.85, 0.1, 0.1],
            ObjectKind::TrafficSign => [0.95, 0.85, 0.1],
            ObjectKind::RoadMarker => [0.95, 0.95, 0.95],
            ObjectKind::Distractor => [0.85, 0.2, 0.85],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazePolicy {
    Attentive,
    Distracted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub scene: Scene,
    pub time_of_day: TimeOfDay,
    pub weather: Weather,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Drives object placement and motion; equal seeds give equal scenes.
    pub layout_seed: u64,
    pub scenario: Scenario,
    pub policy: GazePolicy,
    /// Standard deviation of per-frame gaze noise, in pixels.
    pub jitter_px: f32,
    /// Total displacement of each object over the clip, in pixels.
    pub motion_px: f32,
}

/// Object center per frame, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub kind: ObjectKind,
    pub centers: Vec<(f32, f32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub record: ClipRecord,
    pub frames: Vec<FrameImage>,
    pub objects: Vec<Trajectory>,
}

impl SynthClip {
    /// Fraction of frames whose fixation lies within `radius_px` of an object
    /// accepted by `filter`.
    pub fn gaze_near_fraction(&self, radius_px: f32, filter: impl Fn(ObjectKind) -> bool) -> f64 {
        let hits = self
            .record
            .gaze
            .points()
            .iter()
            .enumerate()
            .filter(|(t, g)| {
                let (gx, gy) = (g.x * FRAME_SIZE as f32, g.y * FRAME_SIZE as f32);
                self.objects.iter().filter(|o| filter(o.kind)).any(|o| {
                    let (cx, cy) = o.centers[*t];
                    (gx - cx).hypot(gy - cy) <= radius_px
                })
            })
            .count();
        hits as f64 / self.record.gaze.len() as f64
    }
}

fn layout(spec: &SceneSpec) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.layout_seed);
    let cells_per_side = FRAME_SIZE / CELL_SIZE;
    let mut cells: Vec<usize> = (0..cells_per_side * cells_per_side).collect();
    cells.shuffle(&mut rng);
    ObjectKind::ALL
        .iter()
        .zip(cells)
        .map(|(&kind, cell)| {
            let (r, c) = (cell / cells_per_side, cell % cells_per_side);
            let half = CELL_SIZE as f32 / 2.0;
            let x0 = c as f32 * CELL_SIZE as f32 + half + rng.random_range(-2.0..=2.0);
            let y0 = r as f32 * CELL_SIZE as f32 + half + rng.random_range(-2.0..=2.0);
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (angle.cos() * spec.motion_px, angle.sin() * spec.motion_px);
            let centers = (0..CLIP_FRAMES)
                .map(|t| {
                    let s = t as f32 / (CLIP_FRAMES - 1) as f32;
                    (x0 + dx * s, y0 + dy * s)
                })
                .collect();
            Trajectory { kind, centers }
        })
        .collect()
}

fn backdrop(scenario: Scenario, seed: u64) -> FrameImage {
    let s = FRAME_SIZE;
    let horizon = s * 2 / 5;
    let night = scenario.time_of_day == TimeOfDay::Night;
    let dim = |c: [f32; 3]| if night { c.map(|v| v * 0.35) } else { c };
    let mut sky = match scenario.time_of_day {
        TimeOfDay::Day => [0.55, 0.75, 0.95],
        TimeOfDay::Evening => [0.85, 0.55, 0.4],
        TimeOfDay::Night => [0.08, 0.08, 0.2],
    };
    if scenario.weather != Weather::Sunny {
        let mean = sky.iter().sum::<f32>() / 3.0;
        sky = sky.map(|v| 0.5 * v + 0.5 * mean);
    }
    let ground = dim(match scenario.scene {
        Scene::City => [0.45, 0.42, 0.4],
        Scene::Highway => [0.35, 0.55, 0.3],
        Scene::Rural => [0.3, 0.6, 0.2],
    });
    let road = dim([0.35, 0.35, 0.37]);
    let mut frame = FrameImage::filled(s, s, sky);
    for y in horizon..s {
        let depth = (y - horizon) as f32 / (s - horizon) as f32;
        let half_width = 3.0 + depth * (s as f32 * 0.45);
        for x in 0..s {
            let inside = (x as f32 + 0.5 - s as f32 / 2.0).abs() <= half_width;
            frame.set_pixel(x, y, if inside { road } else { ground });
        }
    }
    if scenario.weather == Weather::Rainy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..24 {
            let (x, y) = (rng.random_range(0..s), rng.random_range(0..s - 4));
            for k in 0..4 {
                let xx = (x + k).min(s - 1);
                let p = frame.pixel(xx, y + k);
                frame.set_pixel(xx, y + k, p.map(|v| (v + 0.25).min(1.0)));
            }
        }
    }
    frame
}

fn draw(frame: &mut FrameImage, kind: ObjectKind, (cx, cy): (f32, f32)) {
    let color = kind.color();
    let s = FRAME_SIZE as i32;
    for y in (cy - 6.0).floor() as i32..=(cy + 6.0).ceil() as i32 {
        for x in (cx - 6.0).floor() as i32..=(cx + 6.0).ceil() as i32 {
            if x < 0 || y < 0 || x >= s || y >= s {
                continue;
            }
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let inside = match kind {
                ObjectKind::LeadVehicle => dx.abs() <= 5.0 && dy.abs() <= 3.5,
                ObjectKind::TrafficSign => dx.abs() + dy.abs() <= 5.0,
                ObjectKind::RoadMarker => dx.abs() <= 3.0 && dy.abs() <= 2.0,
                ObjectKind::Distractor => dx * dx + dy * dy <= 25.0,
            };
            if inside {
                frame.set_pixel(x as usize, y as usize, color);
            }
        }
    }
}

/// Renders the clip and its gaze track. `seed` drives the gaze only, so the
/// same spec under both policies shows identical frames.
pub fn generate_clip(spec: &SceneSpec, clip_id: &str, seed: u64) -> Result<SynthClip> {
    ensure!(spec.jitter_px >= 0.0, "gaze jitter must be nonnegative");
    ensure!(spec.motion_px >= 0.0, "object motion must be nonnegative");
    let objects = layout(spec);
    let background = backdrop(spec.scenario, spec.layout_seed);
    let frames: Vec<FrameImage> = (0..CLIP_FRAMES)
        .map(|t| {
            let mut frame = background.clone();
            for o in &objects {
                draw(&mut frame, o.kind, o.centers[t]);
            }
            frame
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let find = |kind: ObjectKind| objects.iter().position(|o| o.kind == kind).expect("placed");
    let targets: Vec<usize> = match spec.policy {
        GazePolicy::Distracted => vec![find(ObjectKind::Distractor); CLIP_FRAMES],
        GazePolicy::Attentive => {
            let relevant: Vec<usize> = (0..objects.len())
                .filter(|&i| objects[i].kind.task_relevant())
                .collect();
            vec![*relevant.choose(&mut rng).expect("relevant objects"); CLIP_FRAMES]
        }
    };
    let noise = Normal::new(0.0, spec.jitter_px.max(f32::MIN_POSITIVE)).expect("valid std");
    let gaze = targets
        .iter()
        .enumerate()
        .map(|(t, &i)| {
            let (cx, cy) = objects[i].centers[t];
            let (jx, jy) = if spec.jitter_px > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            GazePoint::new((cx + jx) / FRAME_SIZE as f32, (cy + jy) / FRAME_SIZE as f32)
        })
        .collect::<Result<Vec<_>>>()?;

    let record = ClipRecord {
        clip_id: clip_id.to_string(),
        video_id: None,
        source_dataset: SourceDataset::Synthetic,
        scene: spec.scenario.scene,
        time_of_day: spec.scenario.time_of_day,
        weather: spec.scenario.weather,
        frames: FrameSource::Packed {
            packed: format!("frames/{clip_id}.f32"),
        },
        gaze: GazeTrack(gaze),
        cc: None,
        flagged: false,
        degenerate: false,
        label: match spec.policy {
            GazePolicy::Attentive => Label::Attentive,
            GazePolicy::Distracted => Label::Distracted,
        },
    };
    Ok(SynthClip {
        record,
        frames,
        objects,
    })
}

/// Relative weight of each scenario value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioMix {
    pub scene: BTreeMap<Scene, f64>,
    pub time_of_day: BTreeMap<TimeOfDay, f64>,
    pub weather: BTreeMap<Weather, f64>,
}

impl Default for ScenarioMix {
    /// Skewed toward daytime city driving, as real driving corpora are.
    fn default() -> Self {
        Self {
            scene: BTreeMap::from([(Scene::City, 0.5), (Scene::Highway, 0.3), (Scene::Rural, 0.2)]),
            time_of_day: BTreeMap::from([
                (TimeOfDay::Day, 0.6),
                (TimeOfDay::Evening, 0.25),
                (TimeOfDay::Night, 0.15),
            ]),
            weather: BTreeMap::from([
                (Weather::Sunny, 0.5),
                (Weather::Cloudy, 0.3),
                (Weather::Rainy, 0.2),
            ]),
        }
    }
}

/// Exact per-value counts for `total` items, shuffled into an order.
fn assign<K: Ord + Copy>(weights: &BTreeMap<K, f64>, total: usize, rng: &mut ChaCha8Rng) -> Result<Vec<K>> {
    ensure!(!weights.is_empty(), "scenario mix axes must not be empty");
    ensure!(
        weights.values().all(|w| w.is_finite() && *w >= 0.0) && weights.values().sum::<f64>() > 0.0,
        "scenario weights must be nonnegative with a positive sum"
    );
    // Integer weights at a fine resolution keep the rounding exact.
    let scaled: BTreeMap<K, usize> = weights
        .iter()
        .map(|(k, w)| (*k, (w * 1e6).round() as usize))
        .collect();
    let mut out: Vec<K> = largest_remainder(&scaled, total)
        .into_iter()
        .flat_map(|(k, n)| std::iter::repeat_n(k, n))
        .collect();
    out.shuffle(rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub count: usize,
    /// Fraction of distracted clips.
    pub balance: f64,
    pub mix: ScenarioMix,
    pub seed: u64,
    pub jitter_px: f32,
    pub motion_px: f32,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            count: 800,
            balance: 0.5,
            mix: ScenarioMix::default(),
            seed: 0,
            jitter_px: DEFAULT_JITTER_PX,
            motion_px: DEFAULT_MOTION_PX,
        }
    }
}

/// Everything needed to render one corpus clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPlan {
    pub clip_id: String,
    pub video_id: String,
    pub spec: SceneSpec,
    pub gaze_seed: u64,
}

impl ClipPlan {
    pub fn generate(&self) -> Result<SynthClip> {
        let mut clip = generate_clip(&self.spec, &self.clip_id, self.gaze_seed)?;
        clip.record.video_id = Some(self.video_id.clone());
        Ok(clip)
    }
}

/// Lays out a corpus without rendering it. Scenes come in pairs shown once
/// per label while both labels remain; labels and scenario tags follow exact
/// largest-remainder quotas.
pub fn plan_corpus(options: &CorpusOptions) -> Result<Vec<ClipPlan>> {
    let count = options.count;
    ensure!(count >= 2, "a corpus needs at least two clips");
    ensure!(
        (0.0..=1.0).contains(&options.balance),
        "balance must be in [0, 1]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let distracted = (options.balance * count as f64).round() as usize;
    let attentive = count - distracted;
    let pairs = distracted.min(attentive);
    let layouts = count - pairs;

    // Paired layouts first, then single layouts for the surplus label.
    let surplus = if distracted > attentive {
        GazePolicy::Distracted
    } else {
        GazePolicy::Attentive
    };
    let mut slots: Vec<(usize, GazePolicy)> = Vec::with_capacity(count);
    for layout in 0..pairs {
        slots.push((layout, GazePolicy::Attentive));
        slots.push((layout, GazePolicy::Distracted));
    }
    slots.extend((pairs..layouts).map(|layout| (layout, surplus)));

    let scenes = assign(&options.mix.scene, layouts, &mut rng)?;
    let times = assign(&options.mix.time_of_day, layouts, &mut rng)?;
    let weathers = assign(&options.mix.weather, layouts, &mut rng)?;
    let layout_seeds: Vec<u64> = (0..layouts).map(|_| rng.random()).collect();
    slots.shuffle(&mut rng);

    Ok(slots
        .into_iter()
        .enumerate()
        .map(|(i, (layout, policy))| ClipPlan {
            clip_id: format!("synth_{i:05}"),
            video_id: format!("synth_rec_{:03}", i / CLIPS_PER_RECORDING),
            spec: SceneSpec {
                layout_seed: layout_seeds[layout],
                scenario: Scenario {
                    scene: scenes[layout],
                    time_of_day: times[layout],
                    weather: weathers[layout],
                },
                policy,
                jitter_px: options.jitter_px,
                motion_px: options.motion_px,
            },
            gaze_seed: rng.random(),
        })
        .collect())
}

pub fn generate_corpus(options: &CorpusOptions) -> Result<Vec<SynthClip>> {
    plan_corpus(options)?.iter().map(ClipPlan::generate).collect()
}

/// Renders a corpus into `dir` (packed frames under `frames/`) and writes
/// `dir/manifest.jsonl`. Clips are rendered one at a time.
pub fn write_corpus(options: &CorpusOptions, dir: &Path) -> Result<PathBuf> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| crate::Error::io(&frames_dir, e))?;
    let mut records = Vec::with_capacity(options.count);
    for plan in plan_corpus(options)? {
        let clip = plan.generate()?;
        write_packed(&clip.frames, &frames_dir.join(format!("{}.f32", plan.clip_id)))?;
        records.push(clip.record);
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&records, &manifest)?;
    Ok(manifest)
}

/// Renders corpus frames on demand instead of keeping them in memory.
#[derive(Debug, Clone, Default)]
pub struct PlannedCorpus {
    plans: HashMap<String, ClipPlan>,
}

impl PlannedCorpus {
    pub fn new(plans: Vec<ClipPlan>) -> Self {
        Self {
            plans: plans.into_iter().map(|p| (p.clip_id.clone(), p)).collect(),
        }
    }

    pub fn plan(&self, clip_id: &str) -> Option<&ClipPlan> {
        self.plans.get(clip_id)
    }
}

impl FrameStore for PlannedCorpus {
    fn load(&self, clip: &ClipRecord) -> Result<Vec<FrameImage>> {
        let plan = self.plans.get(&clip.clip_id).ok_or_else(|| {
            crate::Error::Validation(format!("clip {} is not part of this corpus", clip.clip_id))
        })?;
        Ok(generate_clip(&plan.spec, &plan.clip_id, plan.gaze_seed)?.frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(policy: GazePolicy) -> SceneSpec {
        SceneSpec {
            layout_seed: 42,
            scenario: Scenario {
                scene: Scene::City,
                time_of_day: TimeOfDay::Day,
                weather: Weather::Rainy,
            },
            policy,
            jitter_px: DEFAULT_JITTER_PX,
            motion_px: DEFAULT_MOTION_PX,
        }
    }

    #[test]
    fn policies_follow_their_objects() {
        let radius = 1.5 * CELL_SIZE as f32;
        for seed in 0..20 {
            let a = generate_clip(&spec(GazePolicy::Attentive), "a", seed).unwrap();
            assert!(a.gaze_near_fraction(radius, ObjectKind::task_relevant) >= 0.8);
            let d = generate_clip(&spec(GazePolicy::Distracted), "d", seed).unwrap();
            assert!(d.gaze_near_fraction(radius, |k| k == ObjectKind::Distractor) >= 0.8);
            assert_eq!(a.frames, d.frames);
            assert_eq!(a.record.label, Label::Attentive);
            assert_eq!(d.record.label, Label::Distracted);
        }
    }

    #[test]
    fn static_scene_without_jitter_has_fixed_gaze() {
        let mut s = spec(GazePolicy::Distracted);
        s.jitter_px = 0.0;
        s.motion_px = 0.0;
        let clip = generate_clip(&s, "c", 3).unwrap();
        let first = clip.record.gaze.points()[0];
        assert!(clip.record.gaze.points().iter().all(|&g| g == first));
        assert!(clip.frames.iter().all(|f| f == &clip.frames[0]));
    }

    #[test]
    fn frames_are_valid_and_objects_distinct() {
        let clip = generate_clip(&spec(GazePolicy::Attentive), "c", 0).unwrap();
        assert_eq!(clip.frames.len(), CLIP_FRAMES);
        for f in &clip.frames {
            FrameImage::new(f.height, f.width, f.data.clone()).unwrap();
        }
        let cells: std::collections::HashSet<(i32, i32)> = clip
            .objects
            .iter()
            .map(|o| {
                let (x, y) = o.centers[0];
                (x as i32 / CELL_SIZE as i32, y as i32 / CELL_SIZE as i32)
            })
            .collect();
        assert_eq!(cells.len(), 4);
    }

    #[test]
    fn corpus_quotas_and_pairing() {
        let options = CorpusOptions {
            count: 800,
            mix: ScenarioMix {
                scene: BTreeMap::from([(Scene::City, 0.7), (Scene::Highway, 0.1), (Scene::Rural, 0.2)]),
                ..ScenarioMix::default()
            },
            ..CorpusOptions::default()
        };
        let plans = plan_corpus(&options).unwrap();
        let distracted = plans
            .iter()
            .filter(|p| p.spec.policy == GazePolicy::Distracted)
            .count();
        assert_eq!(distracted, 400);
        let city = plans
            .iter()
            .filter(|p| p.spec.scenario.scene == Scene::City)
            .count() as f64;
        assert!((city / 800.0 - 0.7).abs() <= 0.02);
        // Every layout appears once per label.
        let mut by_layout: BTreeMap<u64, Vec<GazePolicy>> = BTreeMap::new();
        for p in &plans {
            by_layout.entry(p.spec.layout_seed).or_default().push(p.spec.policy);
        }
        assert!(by_layout.values().all(|v| v.len() == 2 && v[0] != v[1]));
        assert_eq!(plans, plan_corpus(&options).unwrap());
    }

    #[test]
    fn unbalanced_corpus_counts() {
        let options = CorpusOptions {
            count: 11,
            balance: 0.2,
            ..CorpusOptions::default()
        };
        let plans = plan_corpus(&options).unwrap();
        let distracted = plans
            .iter()
            .filter(|p| p.spec.policy == GazePolicy::Distracted)
            .count();
        assert_eq!((plans.len(), distracted), (11, 2));
        assert!(plan_corpus(&CorpusOptions { count: 1, ..options }).is_err());
    }

    #[test]
    fn written_corpus_is_byte_identical() {
        let options = CorpusOptions {
            count: 6,
            ..CorpusOptions::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = write_corpus(&options, a.path()).unwrap();
        let mb = write_corpus(&options, b.path()).unwrap();
        assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
        let clips = crate::dataset::read_manifest(&ma).unwrap();
        let frames = crate::dataset::frames::load_clip_frames(&ma, &clips[0]).unwrap();
        assert_eq!(frames.len(), CLIP_FRAMES);
    }
}
