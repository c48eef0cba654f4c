//! The three-branch classifier: a gaze encoder, a divided space-time video
//! encoder, gaze-driven semantic queries (gaze tokens cross-attending to the
//! video patches under the fixation) and a fused two-layer head.
//!
//! Every forward pass is recorded on a [`Graph`], so the same code serves
//! inference, training and 64-bit gradient checks. The eager helpers at the
//! bottom wrap it for callers that only need values.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention_block, encoder_block, AttentionParams, FeedForwardParams, Initializer,
    LayerNormParams, LinearParams, ProjectionParams, TokenRole, TokenSet,
};
use crate::error::{ensure, Error, Result};
use crate::geometry::{FrameImage, GazePoint, GazeTrack, Neighborhood, PatchGrid, Preprocessing};
use crate::tape::{
    AttentionGroup, AttentionPattern, Graph, ParamGrads, ParamId, ParamStore, Scalar, Var,
};

/// Which class tokens feed the fusion head.
///
/// Whenever `gdsq` is on, both encoders run because the queries come from the
/// gaze encoder and the keys from the video encoder; their own class tokens
/// are only concatenated when the matching flag is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branches {
    pub gaze: bool,
    pub video: bool,
    pub gdsq: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self::FULL
    }
}

impl Branches {
    pub const FULL: Branches = Branches {
        gaze: true,
        video: true,
        gdsq: true,
    };

    /// The seven non-empty combinations: G, V, Q, G+Q, V+Q, G+V, G+V+Q.
    pub const ABLATION_GRID: [Branches; 7] = [
        Branches::new(true, false, false),
        Branches::new(false, true, false),
        Branches::new(false, false, true),
        Branches::new(true, false, true),
        Branches::new(false, true, true),
        Branches::new(true, true, false),
        Branches::new(true, true, true),
    ];

    pub const fn new(gaze: bool, video: bool, gdsq: bool) -> Self {
        Self { gaze, video, gdsq }
    }

    pub fn count(&self) -> usize {
        self.gaze as usize + self.video as usize + self.gdsq as usize
    }

    pub fn runs_video(&self) -> bool {
        self.video || self.gdsq
    }

    pub fn runs_gaze(&self) -> bool {
        self.gaze || self.gdsq
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.gaze {
            parts.push("gaze");
        }
        if self.video {
            parts.push("video");
        }
        if self.gdsq {
            parts.push("gdsq");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frames_per_clip: usize,
    /// Side of the square frames fed to the video encoder.
    pub encoder_input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub gaze_heads: usize,
    pub gaze_blocks: usize,
    pub video_blocks: usize,
    pub video_heads: usize,
    pub gdsq_blocks: usize,
    pub gdsq_heads: usize,
    /// Patches selected around the fixation per frame (1, 5, 9 or 25).
    pub neighborhood: usize,
    pub preprocessing: Preprocessing,
    /// Hidden width of the fusion head; `None` means `embed_dim`.
    pub classifier_hidden: Option<usize>,
    /// Dropout on the fusion head's hidden layer during training.
    pub dropout: f32,
    pub branches: Branches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames_per_clip: 16,
            encoder_input_size: 64,
            patch_size: 16,
            embed_dim: 64,
            gaze_heads: 8,
            gaze_blocks: 1,
            video_blocks: 2,
            video_heads: 4,
            gdsq_blocks: 2,
            gdsq_heads: 8,
            neighborhood: 1,
            preprocessing: Preprocessing::None,
            classifier_hidden: None,
            dropout: 0.0,
            branches: Branches::FULL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.frames_per_clip >= 1, "frames_per_clip must be at least 1");
        ensure!(self.embed_dim >= 1, "embed_dim must be positive");
        let grid = self.grid()?;
        Neighborhood::try_from(self.neighborhood)?;
        ensure!(
            grid.num_patches() >= self.neighborhood,
            "encoder grid {}x{} has fewer than h={} patches",
            grid.grid_rows,
            grid.grid_cols,
            self.neighborhood
        );
        ensure!(self.gdsq_blocks >= 1, "gdsq_blocks must be at least 1");
        for (name, heads) in [
            ("gaze_heads", self.gaze_heads),
            ("video_heads", self.video_heads),
            ("gdsq_heads", self.gdsq_heads),
        ] {
            ensure!(
                heads >= 1 && self.embed_dim.is_multiple_of(heads),
                "{name}={heads} must divide embed_dim={}",
                self.embed_dim
            );
        }
        ensure!(self.classifier_hidden != Some(0), "classifier_hidden must be positive");
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            "dropout must be in [0,1) (got {})",
            self.dropout
        );
        ensure!(self.branches.count() > 0, "at least one branch must be enabled");
        self.preprocessing.validate()
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.encoder_input_size, self.encoder_input_size, self.patch_size)
    }

    pub fn hidden_width(&self) -> usize {
        self.classifier_hidden.unwrap_or(self.embed_dim)
    }

    pub fn fusion_width(&self) -> usize {
        self.branches.count() * self.embed_dim
    }

    /// Flattened length of one RGB patch.
    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * FrameImage::CHANNELS
    }
}

/// One divided space-time block: temporal attention across frames at a fixed
/// patch position, then spatial attention within each frame, then the
/// feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DividedBlockParams {
    pub temporal_norm: LayerNormParams,
    pub temporal: ProjectionParams,
    pub spatial_norm: LayerNormParams,
    pub spatial: ProjectionParams,
    pub feed_forward: FeedForwardParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeEncoderLayout {
    pub embed: LinearParams,
    pub class_token: ParamId,
    pub position: ParamId,
    pub blocks: Vec<AttentionParams>,
    pub norm: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEncoderLayout {
    pub embed: LinearParams,
    pub class_token: ParamId,
    pub space_position: ParamId,
    pub time_position: ParamId,
    pub blocks: Vec<DividedBlockParams>,
    pub norm: LayerNormParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub hidden: LinearParams,
    pub output: LinearParams,
}

/// Handles into the parameter store, grouped by branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub gaze: GazeEncoderLayout,
    pub video: VideoEncoderLayout,
    pub gdsq: Vec<AttentionParams>,
    pub head: HeadLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub layout: ModelLayout,
}

impl<F: Scalar> ModelParams<F> {
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn grid(&self) -> PatchGrid {
        self.config.grid().expect("validated at construction")
    }
}

/// Deterministic initialization: Gaussian projections (std 0.02), zero class
/// tokens and biases, and a zeroed output layer so that the head predicts
/// (0.5, 0.5).
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    let d = config.embed_dim;
    let n = config.frames_per_clip;
    let grid = config.grid()?;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed));

    let gaze = GazeEncoderLayout {
        embed: LinearParams::new(&mut store, &mut init, "gaze.embed", 2, d, false),
        class_token: store.add("gaze.class_token", Array2::zeros((1, d))),
        position: store.add("gaze.position", init.gaussian(n + 1, d)),
        blocks: (0..config.gaze_blocks)
            .map(|i| {
                AttentionParams::new(
                    &mut store,
                    &mut init,
                    &format!("gaze.block{i}"),
                    d,
                    config.gaze_heads,
                    false,
                )
            })
            .collect::<Result<_>>()?,
        norm: LayerNormParams::new(&mut store, "gaze.norm", d),
    };

    let mut video_blocks = Vec::with_capacity(config.video_blocks);
    for i in 0..config.video_blocks {
        let p = format!("video.block{i}");
        video_blocks.push(DividedBlockParams {
            temporal_norm: LayerNormParams::new(&mut store, &format!("{p}.temporal_norm"), d),
            temporal: ProjectionParams::new(
                &mut store,
                &mut init,
                &format!("{p}.temporal"),
                d,
                config.video_heads,
            )?,
            spatial_norm: LayerNormParams::new(&mut store, &format!("{p}.spatial_norm"), d),
            spatial: ProjectionParams::new(
                &mut store,
                &mut init,
                &format!("{p}.spatial"),
                d,
                config.video_heads,
            )?,
            feed_forward: FeedForwardParams::new(&mut store, &mut init, &format!("{p}.ffn"), d),
        });
    }
    let video = VideoEncoderLayout {
        embed: LinearParams::new(
            &mut store,
            &mut init,
            "video.embed",
            config.patch_features(),
            d,
            false,
        ),
        class_token: store.add("video.class_token", Array2::zeros((1, d))),
        space_position: store.add("video.space_position", init.gaussian(grid.num_patches(), d)),
        time_position: store.add("video.time_position", init.gaussian(n, d)),
        blocks: video_blocks,
        norm: LayerNormParams::new(&mut store, "video.norm", d),
    };

    let gdsq = (0..config.gdsq_blocks)
        .map(|i| {
            AttentionParams::new(
                &mut store,
                &mut init,
                &format!("gdsq.block{i}"),
                d,
                config.gdsq_heads,
                true,
            )
        })
        .collect::<Result<_>>()?;

    let hidden = config.hidden_width();
    let head = HeadLayout {
        hidden: LinearParams::new(
            &mut store,
            &mut init,
            "head.hidden",
            config.fusion_width(),
            hidden,
            false,
        ),
        output: LinearParams::new(&mut store, &mut init, "head.output", hidden, 2, true),
    };

    Ok(ModelParams {
        config: config.clone(),
        store,
        layout: ModelLayout {
            gaze,
            video,
            gdsq,
            head,
        },
    })
}

/// Encoder-ready tensors for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedClip<F> {
    /// `(n * G) x (p * p * 3)` flattened patches, frame-major then row-major,
    /// intensities mapped to [-1, 1].
    pub patches: Array2<F>,
    /// `n x 2` fixation coordinates mapped to [-1, 1].
    pub gaze: Array2<F>,
    /// Fixations in encoder-frame coordinates, used to select patches.
    pub selection: Vec<GazePoint>,
}

impl<F: Scalar> PreparedClip<F> {
    pub fn frames(&self) -> usize {
        self.selection.len()
    }

    /// The first `frames` frames of this clip.
    pub fn truncated(&self, frames: usize) -> Result<PreparedClip<F>> {
        let n = self.frames();
        ensure!(
            frames >= 1 && frames <= n,
            "cannot keep {frames} of {n} frames"
        );
        let per_frame = self.patches.nrows() / n;
        Ok(PreparedClip {
            patches: self
                .patches
                .slice(ndarray::s![..frames * per_frame, ..])
                .to_owned(),
            gaze: self.gaze.slice(ndarray::s![..frames, ..]).to_owned(),
            selection: self.selection[..frames].to_vec(),
        })
    }

    pub fn cast<G: Scalar>(&self) -> PreparedClip<G> {
        let c = |v: &F| G::from_f64_lossy(v.to_f64().expect("finite float"));
        PreparedClip {
            patches: self.patches.map(c),
            gaze: self.gaze.map(c),
            selection: self.selection.clone(),
        }
    }
}

/// Maps a gaze track to the `n x 2` gaze-encoder input.
pub fn gaze_matrix<F: Scalar>(track: &GazeTrack) -> Array2<F> {
    Array2::from_shape_fn((track.len(), 2), |(t, c)| {
        let p = track.points()[t];
        let v = if c == 0 { p.x } else { p.y };
        F::from_f64_lossy(v as f64 * 2.0 - 1.0)
    })
}

/// Applies gaze-guided preprocessing, resizes to the encoder input and
/// flattens each frame into patches.
pub fn prepare_clip<F: Scalar>(
    config: &ModelConfig,
    frames: &[FrameImage],
    track: &GazeTrack,
) -> Result<PreparedClip<F>> {
    let n = config.frames_per_clip;
    ensure!(
        frames.len() == n,
        "clip has {} frames, expected {n}",
        frames.len()
    );
    ensure!(
        track.len() == n,
        "gaze track has {} points, expected {n}",
        track.len()
    );
    let grid = config.grid()?;
    let size = config.encoder_input_size;
    let p = config.patch_size;
    let g = grid.num_patches();
    let mut patches = Array2::<F>::zeros((n * g, config.patch_features()));
    let mut selection = Vec::with_capacity(n);
    for (t, (frame, &gaze)) in frames.iter().zip(track.points()).enumerate() {
        let (rendered, local) = config.preprocessing.apply(frame, gaze, size, size)?;
        selection.push(local);
        for r in 0..grid.grid_rows {
            for c in 0..grid.grid_cols {
                let mut row = patches.row_mut(t * g + grid.index(r, c));
                let mut k = 0;
                for y in r * p..(r + 1) * p {
                    let start = (y * size + c * p) * 3;
                    for &v in &rendered.data[start..start + p * 3] {
                        row[k] = F::from_f64_lossy((v as f64 - 0.5) * 2.0);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PreparedClip {
        patches,
        gaze: gaze_matrix(track),
        selection,
    })
}

/// Row layout of the video token matrix: class token at row 0, then patch
/// token (t, r, c) at row `1 + t * G + r * cols + c`.
fn divided_patterns(frames: usize, patches: usize) -> (AttentionPattern, AttentionPattern) {
    let temporal = (0..patches)
        .map(|s| {
            let rows: Vec<usize> = (0..frames).map(|t| 1 + t * patches + s).collect();
            AttentionGroup {
                queries: rows.clone(),
                keys: rows,
            }
        })
        .collect();
    let mut spatial = vec![AttentionGroup {
        queries: vec![0],
        keys: (0..1 + frames * patches).collect(),
    }];
    for t in 0..frames {
        let rows: Vec<usize> = (1 + t * patches..1 + (t + 1) * patches).collect();
        let mut keys = Vec::with_capacity(patches + 1);
        keys.push(0);
        keys.extend_from_slice(&rows);
        spatial.push(AttentionGroup {
            queries: rows,
            keys,
        });
    }
    (
        AttentionPattern::Groups(Arc::new(temporal)),
        AttentionPattern::Groups(Arc::new(spatial)),
    )
}

/// Class token and patch tokens of one stream, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct StreamVars {
    pub class_token: Var,
    pub tokens: Var,
}

pub fn gaze_encoder_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    params: &ModelParams<F>,
    gaze: &Array2<F>,
) -> Result<StreamVars> {
    let n = params.config.frames_per_clip;
    ensure!(
        gaze.nrows() == n && gaze.ncols() == 2,
        "gaze input is {}x{}, expected {n}x2",
        gaze.nrows(),
        gaze.ncols()
    );
    let layout = &params.layout.gaze;
    let x = g.input(gaze.clone());
    let tokens = layout.embed.apply(g, x);
    let cls = g.param(layout.class_token);
    let mut x = g.concat_rows(&[cls, tokens])?;
    let pos = g.param(layout.position);
    x = g.add(x, pos);
    for block in &layout.blocks {
        x = encoder_block(g, block, x)?;
    }
    let x = layout.norm.apply(g, x);
    Ok(StreamVars {
        class_token: g.slice_rows(x, 0, 1),
        tokens: g.slice_rows(x, 1, n + 1),
    })
}

pub fn video_encoder_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    params: &ModelParams<F>,
    patches: &Array2<F>,
) -> Result<StreamVars> {
    let config = &params.config;
    let n = config.frames_per_clip;
    let per_frame = params.grid().num_patches();
    ensure!(
        patches.nrows() == n * per_frame && patches.ncols() == config.patch_features(),
        "patch input is {}x{}, expected {}x{}",
        patches.nrows(),
        patches.ncols(),
        n * per_frame,
        config.patch_features()
    );
    let layout = &params.layout.video;
    let x = g.input(patches.clone());
    let mut tokens = layout.embed.apply(g, x);
    let space = g.param(layout.space_position);
    let space = g.gather_rows(space, (0..n * per_frame).map(|i| i % per_frame).collect())?;
    let time = g.param(layout.time_position);
    let time = g.gather_rows(time, (0..n * per_frame).map(|i| i / per_frame).collect())?;
    tokens = g.add(tokens, space);
    tokens = g.add(tokens, time);
    let cls = g.param(layout.class_token);
    let mut x = g.concat_rows(&[cls, tokens])?;
    let (temporal, spatial) = divided_patterns(n, per_frame);
    for block in &layout.blocks {
        let normed = block.temporal_norm.apply(g, x);
        let mixed = block.temporal.apply(g, normed, normed, &temporal)?;
        x = g.add(x, mixed);
        let normed = block.spatial_norm.apply(g, x);
        let mixed = block.spatial.apply(g, normed, normed, &spatial)?;
        x = g.add(x, mixed);
        x = block.feed_forward.residual(g, x);
    }
    let x = layout.norm.apply(g, x);
    Ok(StreamVars {
        class_token: g.slice_rows(x, 0, 1),
        tokens: g.slice_rows(x, 1, 1 + n * per_frame),
    })
}

/// Per-frame patch indices (within the frame) around each fixation.
pub fn select_tokens(
    grid: &PatchGrid,
    selection: &[GazePoint],
    h: usize,
) -> Result<Vec<Vec<usize>>> {
    selection
        .iter()
        .map(|&gaze| grid.select_neighborhood(gaze, h))
        .collect()
}

/// Gaze tokens query the patch tokens selected around each fixation; the
/// query-side output of the last block is mean-pooled.
pub fn gdsq_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    params: &ModelParams<F>,
    gaze_tokens: Var,
    patch_tokens: Var,
    selection: &[GazePoint],
    grid: &PatchGrid,
) -> Result<(Var, Vec<Vec<usize>>)> {
    let config = &params.config;
    let n = config.frames_per_clip;
    let h = config.neighborhood;
    let per_frame = grid.num_patches();
    ensure!(
        selection.len() == n && g.shape(gaze_tokens).0 == n,
        "GDSQ expects {n} gaze tokens and fixations"
    );
    ensure!(
        g.shape(patch_tokens).0 == n * per_frame,
        "patch token count {} does not match {n} frames of {per_frame} patches",
        g.shape(patch_tokens).0
    );
    let selected = select_tokens(grid, selection, h)?;
    let rows: Vec<usize> = selected
        .iter()
        .enumerate()
        .flat_map(|(t, idx)| idx.iter().map(move |&i| t * per_frame + i))
        .collect();
    if rows.len() != h * n {
        return Err(Error::Numeric(format!(
            "selected {} tokens, expected h*n = {}",
            rows.len(),
            h * n
        )));
    }
    let keys = g.gather_rows(patch_tokens, rows)?;
    let mut q = gaze_tokens;
    for block in &params.layout.gdsq {
        q = cross_attention_block(g, block, q, keys)?;
    }
    Ok((g.mean_rows(q)?, selected))
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub video_class: Option<Var>,
    pub gdsq_class: Option<Var>,
    pub gaze_class: Option<Var>,
    pub selected: Vec<Vec<usize>>,
}

/// Where the video tokens come from.
pub enum VideoSource<'a, F> {
    /// Run the internal encoder on prepared patches.
    Encoder,
    /// Use tokens produced elsewhere (frame-major, already adapted).
    Tokens {
        class_token: &'a Array1<F>,
        patches: &'a Array2<F>,
        grid: PatchGrid,
    },
}

/// Full forward pass. `dropout_rng` enables training-mode dropout.
pub fn forward_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    params: &ModelParams<F>,
    clip: &PreparedClip<F>,
    source: VideoSource<'_, F>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardVars> {
    let config = &params.config;
    let branches = config.branches;
    ensure!(
        clip.frames() == config.frames_per_clip,
        "clip has {} frames, model expects {}",
        clip.frames(),
        config.frames_per_clip
    );
    let gaze = if branches.runs_gaze() {
        Some(gaze_encoder_graph(g, params, &clip.gaze)?)
    } else {
        None
    };
    let (video, grid) = if branches.runs_video() {
        match source {
            VideoSource::Encoder => (
                Some(video_encoder_graph(g, params, &clip.patches)?),
                params.grid(),
            ),
            VideoSource::Tokens {
                class_token,
                patches,
                grid,
            } => {
                let cls = g.input(class_token.clone().insert_axis(ndarray::Axis(0)));
                let tokens = g.input(patches.clone());
                (
                    Some(StreamVars {
                        class_token: cls,
                        tokens,
                    }),
                    grid,
                )
            }
        }
    } else {
        (None, params.grid())
    };
    let (gdsq_class, selected) = if branches.gdsq {
        let (gaze, video) = (gaze.expect("gaze runs"), video.expect("video runs"));
        let (s, selected) = gdsq_graph(g, params, gaze.tokens, video.tokens, &clip.selection, &grid)?;
        (Some(s), selected)
    } else {
        (None, Vec::new())
    };
    let video_class = video.filter(|_| branches.video).map(|v| v.class_token);
    let gaze_class = gaze.filter(|_| branches.gaze).map(|v| v.class_token);
    let parts: Vec<Var> = [video_class, gdsq_class, gaze_class]
        .into_iter()
        .flatten()
        .collect();
    let fused = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)?
    };
    let head = &params.layout.head;
    let mut hidden = head.hidden.apply(g, fused);
    hidden = g.gelu(hidden);
    if let Some(rng) = dropout_rng {
        if config.dropout > 0.0 {
            let keep = 1.0 - config.dropout as f64;
            let scale = F::from_f64_lossy(1.0 / keep);
            let mask = Array2::from_shape_simple_fn(g.shape(hidden), || {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            });
            hidden = g.dropout(hidden, mask);
        }
    }
    let logits = head.output.apply(g, hidden);
    Ok(ForwardVars {
        logits,
        video_class,
        gdsq_class,
        gaze_class,
        selected,
    })
}

/// Class index of the positive (distracted) class in the logit vector.
pub const DISTRACTED: usize = 1;
pub const ATTENTIVE: usize = 0;

/// Softmax of a 2-logit row.
pub fn probabilities<F: Scalar>(logits: &Array2<F>) -> [F; 2] {
    let (a, b) = (logits[[0, 0]], logits[[0, 1]]);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let total = ea + eb;
    [ea / total, eb / total]
}

/// Outcome of differentiating the loss of one clip.
#[derive(Debug, Clone)]
pub struct ClipLoss<F> {
    pub loss: F,
    pub probabilities: [F; 2],
    pub grads: ParamGrads<F>,
}

/// Cross-entropy of one clip against `target` and its parameter gradients.
pub fn clip_loss<F: Scalar>(
    params: &ModelParams<F>,
    clip: &PreparedClip<F>,
    target: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ClipLoss<F>> {
    let mut g = Graph::new(&params.store);
    let out = forward_graph(&mut g, params, clip, VideoSource::Encoder, dropout_rng)?;
    let probabilities = probabilities(g.value(out.logits));
    let loss = g.softmax_cross_entropy(out.logits, target)?;
    let value = g.value(loss)[[0, 0]];
    if !value.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok(ClipLoss {
        loss: value,
        probabilities,
        grads: g.backward(loss).into_param_grads(),
    })
}

/// Intermediate results of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F> {
    pub video_class: Option<Array1<F>>,
    pub gdsq_class: Option<Array1<F>>,
    pub gaze_class: Option<Array1<F>>,
    /// Per-frame patch indices fed to GDSQ (empty without GDSQ).
    pub selected: Vec<Vec<usize>>,
    pub logits: [F; 2],
}

impl<F> ForwardTrace<F> {
    pub fn selected_count(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }
}

fn row<F: Scalar>(g: &Graph<'_, F>, v: Var) -> Array1<F> {
    g.value(v).row(0).to_owned()
}

fn run_classify<F: Scalar>(
    params: &ModelParams<F>,
    clip: &PreparedClip<F>,
    source: VideoSource<'_, F>,
) -> Result<([F; 2], ForwardTrace<F>)> {
    let mut g = Graph::new(&params.store);
    let out = forward_graph(&mut g, params, clip, source, None)?;
    let logits = g.value(out.logits);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("logits are not finite".into()));
    }
    let trace = ForwardTrace {
        video_class: out.video_class.map(|v| row(&g, v)),
        gdsq_class: out.gdsq_class.map(|v| row(&g, v)),
        gaze_class: out.gaze_class.map(|v| row(&g, v)),
        selected: out.selected,
        logits: [logits[[0, 0]], logits[[0, 1]]],
    };
    Ok((probabilities(logits), trace))
}

/// Probabilities over (attentive, distracted) in evaluation mode.
pub fn classify<F: Scalar>(
    params: &ModelParams<F>,
    clip: &PreparedClip<F>,
) -> Result<([F; 2], ForwardTrace<F>)> {
    run_classify(params, clip, VideoSource::Encoder)
}

/// Eager gaze encoder: `(g_cls, n gaze tokens)`.
pub fn encode_gaze<F: Scalar>(
    params: &ModelParams<F>,
    track: &GazeTrack,
) -> Result<(Array1<F>, TokenSet<F>)> {
    let mut g = Graph::new(&params.store);
    let out = gaze_encoder_graph(&mut g, params, &gaze_matrix(track))?;
    Ok((
        row(&g, out.class_token),
        TokenSet::uniform(g.value(out.tokens).clone(), TokenRole::Gaze)?,
    ))
}

/// Eager video encoder: `(v_cls, n * G patch tokens)`.
pub fn encode_video<F: Scalar>(
    params: &ModelParams<F>,
    clip: &PreparedClip<F>,
) -> Result<(Array1<F>, TokenSet<F>)> {
    let mut g = Graph::new(&params.store);
    let out = video_encoder_graph(&mut g, params, &clip.patches)?;
    Ok((
        row(&g, out.class_token),
        TokenSet::uniform(g.value(out.tokens).clone(), TokenRole::Patch)?,
    ))
}

/// Eager GDSQ: `(s_cls, per-frame selected indices)`.
pub fn gdsq<F: Scalar>(
    params: &ModelParams<F>,
    gaze_tokens: &TokenSet<F>,
    patch_tokens: &TokenSet<F>,
    selection: &[GazePoint],
    grid: &PatchGrid,
) -> Result<(Array1<F>, Vec<Vec<usize>>)> {
    let mut g = Graph::new(&params.store);
    let q = g.input(gaze_tokens.tokens.clone());
    let p = g.input(patch_tokens.tokens.clone());
    let (s, selected) = gdsq_graph(&mut g, params, q, p, selection, grid)?;
    Ok((row(&g, s), selected))
}

/// Order of patch tokens emitted by a token provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenLayout {
    /// Token (t, p) at row `t * G + p`.
    FrameMajor,
    /// Token (t, p) at row `p * n + t`.
    PatchMajor,
}

/// What a video backbone promises about its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProviderSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub frames: usize,
    pub dim: usize,
    pub layout: TokenLayout,
    /// True when the backbone merges or drops tokens (e.g. token pooling).
    pub reduces_tokens: bool,
}

impl ProviderSpec {
    pub fn patches_per_frame(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderOutput<F> {
    pub class_token: Array1<F>,
    /// Dense per-frame patch tokens; `None` for pooled-only backbones.
    pub patch_tokens: Option<Array2<F>>,
}

/// A video backbone that can feed GDSQ.
pub trait PatchTokenProvider<F: Scalar> {
    fn spec(&self) -> ProviderSpec;
    fn tokens(&self, clip: &PreparedClip<F>) -> Result<ProviderOutput<F>>;
}

/// The built-in divided space-time encoder viewed as a provider.
pub struct InternalEncoder<'a, F> {
    pub params: &'a ModelParams<F>,
}

impl<F: Scalar> PatchTokenProvider<F> for InternalEncoder<'_, F> {
    fn spec(&self) -> ProviderSpec {
        let grid = self.params.grid();
        ProviderSpec {
            grid_rows: grid.grid_rows,
            grid_cols: grid.grid_cols,
            frames: self.params.config.frames_per_clip,
            dim: self.params.config.embed_dim,
            layout: TokenLayout::FrameMajor,
            reduces_tokens: false,
        }
    }

    fn tokens(&self, clip: &PreparedClip<F>) -> Result<ProviderOutput<F>> {
        let (class_token, patches) = encode_video(self.params, clip)?;
        Ok(ProviderOutput {
            class_token,
            patch_tokens: Some(patches.tokens),
        })
    }
}

/// Tokens from any backbone, validated and re-indexed to frame-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedTokens<F> {
    pub class_token: Array1<F>,
    pub patches: TokenSet<F>,
    pub spec: ProviderSpec,
}

pub fn adapt_backbone<F: Scalar, P: PatchTokenProvider<F> + ?Sized>(
    provider: &P,
    clip: &PreparedClip<F>,
) -> Result<AdaptedTokens<F>> {
    let spec = provider.spec();
    if spec.reduces_tokens {
        return Err(Error::Capability(
            "backbone reduces tokens; dense per-frame patch tokens are required".into(),
        ));
    }
    ensure!(
        spec.grid_rows > 0 && spec.grid_cols > 0 && spec.frames > 0 && spec.dim > 0,
        "provider spec has empty dimensions: {spec:?}"
    );
    let out = provider.tokens(clip)?;
    let Some(tokens) = out.patch_tokens else {
        return Err(Error::Capability(
            "backbone emits pooled tokens only; per-frame patch tokens are required".into(),
        ));
    };
    let per_frame = spec.patches_per_frame();
    let expected = per_frame * spec.frames;
    if tokens.nrows() != expected || tokens.ncols() != spec.dim {
        return Err(Error::Capability(format!(
            "backbone emitted {}x{} patch tokens, declared {expected}x{}",
            tokens.nrows(),
            tokens.ncols(),
            spec.dim
        )));
    }
    ensure!(
        out.class_token.len() == spec.dim,
        "class token has dimension {}, declared {}",
        out.class_token.len(),
        spec.dim
    );
    let tokens = match spec.layout {
        TokenLayout::FrameMajor => tokens,
        TokenLayout::PatchMajor => {
            let order: Vec<usize> = (0..expected)
                .map(|i| (i % per_frame) * spec.frames + i / per_frame)
                .collect();
            tokens.select(ndarray::Axis(0), &order)
        }
    };
    Ok(AdaptedTokens {
        class_token: out.class_token,
        patches: TokenSet::uniform(tokens, TokenRole::Patch)?,
        spec,
    })
}

/// [`classify`] with the video tokens taken from an external backbone.
pub fn classify_with_provider<F: Scalar, P: PatchTokenProvider<F> + ?Sized>(
    params: &ModelParams<F>,
    provider: &P,
    clip: &PreparedClip<F>,
) -> Result<([F; 2], ForwardTrace<F>)> {
    let adapted = adapt_backbone(provider, clip)?;
    let spec = adapted.spec;
    ensure!(
        spec.frames == params.config.frames_per_clip && spec.dim == params.config.embed_dim,
        "backbone provides {} frames of dimension {}, model expects {} of {}",
        spec.frames,
        spec.dim,
        params.config.frames_per_clip,
        params.config.embed_dim
    );
    // Fixations are normalized, so the provider grid can differ from ours.
    let grid = PatchGrid {
        frame_height: spec.grid_rows,
        frame_width: spec.grid_cols,
        patch_size: 1,
        grid_rows: spec.grid_rows,
        grid_cols: spec.grid_cols,
    };
    run_classify(
        params,
        clip,
        VideoSource::Tokens {
            class_token: &adapted.class_token,
            patches: &adapted.patches.tokens,
            grid,
        },
    )
}
