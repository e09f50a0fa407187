//! Sampling orchestration: deterministic reverse diffusion with depth-aware
//! feature rendering/replacement at the denoiser's feature tap, and
//! stochastic latent completion of disoccluded regions.
//!
//! Per sampling iteration `s` (1-based) with hooks active (`s <= t_rep`):
//! a capture pass records every frame's tap features, the current anchor
//! estimate is decoded and turned into an anchor mesh (aligning relative
//! depth first), the mesh is rendered into every non-anchor pose, a second
//! denoiser pass replaces masked feature regions at the tap, completion
//! re-noises the clean estimate into the disoccluded latent cells when
//! `s <= t_comp`, and the reverse step closes the iteration. The completion
//! noise stream is split per (step, frame), so runs differing only in the
//! completion seed stay bit-identical outside the disoccluded cells.

use crate::camera::{CameraPose, Intrinsics};
use crate::denoiser::{Conditioning, Denoiser, DenoiserHooks};
use crate::depthmesh::{align_depth, build_anchor_mesh, candidate_range, median_depth_search};
use crate::error::{MvError, Result};
use crate::featurefield::{
    expected_central_depth, render_feature_map, FieldFunction, FieldRenderConfig, ReferenceSet,
};
use crate::grid::{resize_bilinear, FeatureGrid};
use crate::rasterizer::render;
use crate::scheduler::{DiffusionSchedule, LatentVideo, ScheduleConfig};
use crate::synthscene::{render_ground_truth, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GRID_SEARCH_CANDIDATES: usize = 21;

/// Inference configuration. Thresholds count 1-based sampling iterations;
/// setting `t_rep` (and `t_comp`) to 0 disables the corresponding stage.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub t_total: usize,
    pub t_rep: usize,
    pub t_comp: usize,
    pub anchor_index: usize,
    pub zeta: f64,
    pub grid_search: bool,
    /// Re-run the median-depth search at every replacement step instead of
    /// caching the first result.
    pub grid_search_every_step: bool,
    pub seed: u64,
    /// Separate stream for completion noise; defaults to `seed`.
    pub completion_seed: Option<u64>,
    pub denoiser_name: String,
    pub schedule: ScheduleConfig,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    /// Median depth override for aligning relative depth maps; when absent
    /// it is estimated from the reference field's central ray.
    pub d_med: Option<f64>,
    pub field: FieldRenderConfig,
    pub trace: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_total: 50,
            t_rep: 35,
            t_comp: 15,
            anchor_index: 0,
            zeta: 0.05,
            grid_search: false,
            grid_search_every_step: false,
            seed: 0,
            completion_seed: None,
            denoiser_name: "oracle".to_string(),
            schedule: ScheduleConfig::default(),
            latent_height: 32,
            latent_width: 32,
            latent_channels: 4,
            d_med: None,
            field: FieldRenderConfig::default(),
            trace: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, num_frames: usize) -> Result<()> {
        if !(self.t_comp <= self.t_rep && self.t_rep <= self.t_total && self.t_total >= 1) {
            return Err(MvError::config(format!(
                "thresholds must satisfy t_comp <= t_rep <= t_total, got {} <= {} <= {}",
                self.t_comp, self.t_rep, self.t_total
            )));
        }
        if self.anchor_index >= num_frames {
            return Err(MvError::config(format!(
                "anchor index {} out of range for {num_frames} frames",
                self.anchor_index
            )));
        }
        if !(self.zeta > 0.0) {
            return Err(MvError::config(format!("zeta must be positive, got {}", self.zeta)));
        }
        if self.latent_height == 0 || self.latent_width == 0 || self.latent_channels == 0 {
            return Err(MvError::config("latent dimensions must be positive".to_string()));
        }
        if self.t_rep > 0 && self.latent_channels < 3 {
            return Err(MvError::config(
                "feature rendering needs at least 3 latent channels to decode".to_string(),
            ));
        }
        Ok(())
    }

    pub fn completion_seed(&self) -> u64 {
        self.completion_seed.unwrap_or(self.seed)
    }
}

/// Whether a provider's depth is already in scene units or needs alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthKind {
    Metric,
    Relative,
}

/// Supplies a depth map for a decoded frame.
pub trait DepthProvider {
    fn kind(&self) -> DepthKind;
    fn depth_for(
        &self,
        rgb: &FeatureGrid,
        pose: &CameraPose,
        out_h: usize,
        out_w: usize,
    ) -> Result<FeatureGrid>;
}

/// Exact depth from the synthetic scene; ignores the decoded frame.
pub struct SceneDepthProvider {
    pub scene: SceneSpec,
}

impl DepthProvider for SceneDepthProvider {
    fn kind(&self) -> DepthKind {
        DepthKind::Metric
    }
    fn depth_for(
        &self,
        _rgb: &FeatureGrid,
        pose: &CameraPose,
        out_h: usize,
        out_w: usize,
    ) -> Result<FeatureGrid> {
        let (_, depth) = render_ground_truth(&self.scene, pose, out_h, out_w);
        Ok(depth)
    }
}

/// Ground-truth depth distorted by an affine transform, standing in for a
/// relative monocular estimate; alignment must undo it.
pub struct ScaledSceneDepthProvider {
    pub scene: SceneSpec,
    pub scale: f64,
    pub offset: f64,
}

impl DepthProvider for ScaledSceneDepthProvider {
    fn kind(&self) -> DepthKind {
        DepthKind::Relative
    }
    fn depth_for(
        &self,
        _rgb: &FeatureGrid,
        pose: &CameraPose,
        out_h: usize,
        out_w: usize,
    ) -> Result<FeatureGrid> {
        let (_, depth) = render_ground_truth(&self.scene, pose, out_h, out_w);
        let data = depth
            .data()
            .iter()
            .map(|&d| (d - self.offset) * self.scale)
            .collect::<Vec<_>>();
        if data.iter().any(|&v| !(v > 0.0)) {
            return Err(MvError::DepthProvider(
                "distorted depth is not strictly positive".to_string(),
            ));
        }
        FeatureGrid::new(depth.height(), depth.width(), 1, data)
    }
}

/// Reference feature maps plus the field head used to render pose-aligned
/// features (foreground alpha for the grid search, median-depth estimates).
pub struct FieldContext<'a> {
    pub refs: &'a ReferenceSet,
    pub field_fn: &'a dyn FieldFunction,
}

/// `F_hat = M (.) F_anchor + (1 - M) (.) F`; the mask is C=1, binary, and
/// broadcast across feature channels.
pub fn feature_replace(
    f_n: &FeatureGrid,
    f_a_n: &FeatureGrid,
    mask: &FeatureGrid,
) -> Result<FeatureGrid> {
    if !f_n.same_shape(f_a_n) {
        return Err(MvError::domain(format!(
            "feature grids differ: {:?} vs {:?}",
            f_n.shape(),
            f_a_n.shape()
        )));
    }
    validate_mask(mask, f_n.height(), f_n.width())?;
    let mut out = f_n.clone();
    for r in 0..f_n.height() {
        for c in 0..f_n.width() {
            if mask.get(r, c, 0) == 1.0 {
                for ch in 0..f_n.channels() {
                    out.set(r, c, ch, f_a_n.get(r, c, ch));
                }
            }
        }
    }
    Ok(out)
}

fn validate_mask(mask: &FeatureGrid, h: usize, w: usize) -> Result<()> {
    if mask.channels() != 1 || mask.height() != h || mask.width() != w {
        return Err(MvError::domain(format!(
            "mask must be {h}x{w}x1, got {:?}",
            mask.shape()
        )));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(MvError::domain("mask must be binary".to_string()));
    }
    Ok(())
}

/// Min-pooling downsample: a coarse cell is visible only when every fine
/// cell it covers is visible.
pub fn downsample_mask_min(mask: &FeatureGrid, out_h: usize, out_w: usize) -> Result<FeatureGrid> {
    validate_mask(mask, mask.height(), mask.width())?;
    if out_h == 0 || out_w == 0 || out_h > mask.height() || out_w > mask.width() {
        return Err(MvError::domain(format!(
            "cannot min-pool {}x{} mask to {out_h}x{out_w}",
            mask.height(),
            mask.width()
        )));
    }
    let mut out = FeatureGrid::zeros(out_h, out_w, 1);
    for r in 0..out_h {
        let r0 = r * mask.height() / out_h;
        let r1 = ((r + 1) * mask.height()).div_ceil(out_h);
        for c in 0..out_w {
            let c0 = c * mask.width() / out_w;
            let c1 = ((c + 1) * mask.width()).div_ceil(out_w);
            let mut m = 1.0;
            for rr in r0..r1 {
                for cc in c0..c1 {
                    m = f64::min(m, mask.get(rr, cc, 0));
                }
            }
            out.set(r, c, 0, m);
        }
    }
    Ok(out)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Deterministic frame-indexed substream so per-frame noise is independent
/// of any parallel evaluation order.
pub fn substream_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ a.wrapping_mul(0x9E3779B97F4A7C15)) ^ b)
}

fn normal_grid(h: usize, w: usize, c: usize, seed: u64) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * c).map(|_| StandardNormal.sample(&mut rng)).collect();
    FeatureGrid::new(h, w, c, data).expect("normal draws are finite")
}

/// Standard-normal latent video drawn from frame-indexed substreams.
pub fn normal_video(poses: &[CameraPose], h: usize, w: usize, c: usize, seed: u64) -> Result<LatentVideo> {
    let frames = (0..poses.len())
        .map(|n| normal_grid(h, w, c, substream_seed(seed, u64::MAX, n as u64)))
        .collect();
    LatentVideo::new(frames, poses.to_vec())
}

/// Blend of the re-noised clean estimate into masked-out latent cells, given
/// an already computed noise prediction. Frames with `None` masks (the
/// anchor) pass through unchanged.
pub fn complete_with_eps(
    x_t: &LatentVideo,
    eps_hat: &LatentVideo,
    masks: &[Option<FeatureGrid>],
    schedule: &DiffusionSchedule,
    t: usize,
    step: usize,
    noise_seed: u64,
) -> Result<LatentVideo> {
    if masks.len() != x_t.num_frames() {
        return Err(MvError::domain(format!(
            "{} masks for {} frames",
            masks.len(),
            x_t.num_frames()
        )));
    }
    let (h, w, c) = x_t.frame_shape();
    let x0 = schedule.predict_x0(x_t, eps_hat, t)?;
    let abar = schedule.alpha_bar(t)?;
    let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut out = x_t.clone();
    for n in 0..x_t.num_frames() {
        let Some(mask) = &masks[n] else { continue };
        validate_mask(mask, h, w)?;
        let fresh = normal_grid(h, w, c, substream_seed(noise_seed, step as u64, n as u64));
        let mut frame = x_t.frame(n).clone();
        for r in 0..h {
            for col in 0..w {
                if mask.get(r, col, 0) == 0.0 {
                    for ch in 0..c {
                        let perturbed =
                            sa * x0.frame(n).get(r, col, ch) + sb * fresh.get(r, col, ch);
                        frame.set(r, col, ch, perturbed);
                    }
                }
            }
        }
        out.set_frame(n, frame)?;
    }
    Ok(out)
}

/// Consistent-aware latent completion: predict the clean latent, re-noise it
/// stochastically at the same timestep, and substitute it into the cells the
/// visibility masks leave uncovered.
pub fn latent_complete(
    x_t: &LatentVideo,
    masks: &[Option<FeatureGrid>],
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    schedule: &DiffusionSchedule,
    t: usize,
    noise_seed: u64,
) -> Result<LatentVideo> {
    let eps = denoiser.predict_noise(x_t, t, cond, &mut DenoiserHooks::none())?;
    complete_with_eps(x_t, &eps, masks, schedule, t, 0, noise_seed)
}

/// Fixed anchor selection from the config, validated against the frame count.
pub fn choose_anchor_frame(cfg: &PipelineConfig, num_frames: usize) -> Result<usize> {
    if cfg.anchor_index >= num_frames {
        return Err(MvError::config(format!(
            "anchor index {} out of range for {num_frames} frames",
            cfg.anchor_index
        )));
    }
    Ok(cfg.anchor_index)
}

/// Per-step artifacts recorded when tracing is enabled.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// 1-based sampling iteration.
    pub step: usize,
    pub timestep: usize,
    /// Visibility masks per frame (None for the anchor / untouched frames).
    pub masks: Vec<Option<FeatureGrid>>,
    /// Rendered anchor features per frame.
    pub rendered: Vec<Option<FeatureGrid>>,
    /// Latent frames right after the completion blend, when it ran.
    pub completed: Option<Vec<FeatureGrid>>,
}

#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    /// Median depth used for alignment (relative providers only).
    pub d_med: Option<f64>,
    pub grid_search_fell_back: bool,
    pub steps: Vec<StepTrace>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Clean latent frames after the full reverse pass.
    pub latents: LatentVideo,
    /// Identity-decoded RGB views of the clean latents.
    pub rgb: Vec<FeatureGrid>,
    pub artifacts: RunArtifacts,
}

/// Identity decoder: latent channels 0..2 are the RGB image.
pub fn decode_rgb(latent: &FeatureGrid) -> Result<FeatureGrid> {
    if latent.channels() < 3 {
        return Err(MvError::domain(format!(
            "decoding needs >= 3 channels, got {}",
            latent.channels()
        )));
    }
    let (h, w, _) = latent.shape();
    let mut out = FeatureGrid::zeros(h, w, 3);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out.set(r, c, ch, latent.get(r, c, ch));
            }
        }
    }
    Ok(out)
}

/// Identity encoder: RGB into channels 0..2, remaining channels zero.
pub fn encode_rgb(rgb: &FeatureGrid, channels: usize) -> Result<FeatureGrid> {
    if rgb.channels() != 3 || channels < 3 {
        return Err(MvError::domain("encoding expects C=3 input and >= 3 output channels".to_string()));
    }
    let (h, w, _) = rgb.shape();
    let mut out = FeatureGrid::zeros(h, w, channels);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out.set(r, c, ch, rgb.get(r, c, ch));
            }
        }
    }
    Ok(out)
}

fn scale_camera(cam: &CameraPose, new_h: usize, new_w: usize) -> Result<CameraPose> {
    let k = &cam.intrinsics;
    if k.height as usize == new_h && k.width as usize == new_w {
        return Ok(cam.clone());
    }
    let sx = new_w as f64 / k.width as f64;
    let sy = new_h as f64 / k.height as f64;
    // pixel centers sit at integers, so rescaling shifts by half a pixel
    let intr = Intrinsics::new(
        k.fx * sx,
        k.fy * sy,
        (k.cx + 0.5) * sx - 0.5,
        (k.cy + 0.5) * sy - 0.5,
        new_w as u32,
        new_h as u32,
    )?;
    Ok(CameraPose::new(intr, cam.pose.clone()))
}

struct ReplacementState {
    cached_d_med: Option<f64>,
    grid_search_fell_back: bool,
}

/// Runs the full inference loop. The denoiser is constructed by the caller
/// (see `denoiser_name` for the CLI mapping); `field_ctx` supplies reference
/// features for median-depth estimation and the grid-search foreground mask.
pub fn run_inference(
    cfg: &PipelineConfig,
    cond: &Conditioning,
    depth_provider: &dyn DepthProvider,
    field_ctx: Option<&FieldContext>,
    denoiser: &dyn Denoiser,
) -> Result<RunOutput> {
    let n = cond.num_frames();
    cfg.validate(n)?;
    let anchor = choose_anchor_frame(cfg, n)?;
    let schedule = DiffusionSchedule::new(cfg.schedule, cfg.t_total)?;
    let transitions = schedule.transitions();

    let mut x = normal_video(
        &cond.poses,
        cfg.latent_height,
        cfg.latent_width,
        cfg.latent_channels,
        cfg.seed,
    )?;
    let mut state = ReplacementState { cached_d_med: None, grid_search_fell_back: false };
    let mut artifacts = RunArtifacts::default();

    for (i, &(t, t_prev)) in transitions.iter().enumerate() {
        let step = i + 1;
        let mut trace_masks: Vec<Option<FeatureGrid>> = vec![None; n];
        let mut trace_rendered: Vec<Option<FeatureGrid>> = vec![None; n];
        let mut trace_completed: Option<Vec<FeatureGrid>> = None;

        let eps = if step <= cfg.t_rep {
            // capture pass: record every frame's tap features
            let mut captured: Vec<Option<FeatureGrid>> = vec![None; n];
            let eps_pre = {
                let mut tap = |fi: usize, g: &FeatureGrid| {
                    captured[fi] = Some(g.clone());
                    None
                };
                let mut hooks = DenoiserHooks::with_tap(&mut tap);
                denoiser.predict_noise(&x, t, cond, &mut hooks)?
            };
            let captured: Vec<FeatureGrid> = captured
                .into_iter()
                .map(|c| c.ok_or_else(|| MvError::domain("denoiser skipped a tap".to_string())))
                .collect::<Result<_>>()?;
            let (feat_h, feat_w) = (captured[anchor].height(), captured[anchor].width());

            // current anchor estimate -> depth -> aligned anchor mesh
            let x0_pre = schedule.predict_x0(&x, &eps_pre, t)?;
            let anchor_rgb = decode_rgb(x0_pre.frame(anchor))?;
            let anchor_cam = scale_camera(&cond.poses[anchor], feat_h, feat_w)?;
            let raw_depth = depth_provider.depth_for(&anchor_rgb, &anchor_cam, feat_h, feat_w)?;
            let depth = match depth_provider.kind() {
                DepthKind::Metric => raw_depth,
                DepthKind::Relative => {
                    let aligned = align_relative_depth(
                        cfg,
                        cond,
                        field_ctx,
                        &raw_depth,
                        &captured,
                        anchor,
                        &anchor_cam,
                        &mut state,
                    )?;
                    artifacts.d_med = state.cached_d_med;
                    artifacts.grid_search_fell_back = state.grid_search_fell_back;
                    aligned
                }
            };
            let depth = if depth.height() != feat_h || depth.width() != feat_w {
                resize_bilinear(&depth, feat_h, feat_w)?
            } else {
                depth
            };
            let mesh = build_anchor_mesh(&captured[anchor], &depth, &anchor_cam, cfg.zeta)?;

            // render into every non-anchor pose
            let mut rendered: Vec<Option<FeatureGrid>> = vec![None; n];
            let mut masks: Vec<Option<FeatureGrid>> = vec![None; n];
            for fi in 0..n {
                if fi == anchor {
                    continue;
                }
                let cam = scale_camera(&cond.poses[fi], feat_h, feat_w)?;
                let out = render(&mesh, &cam, feat_h, feat_w);
                rendered[fi] = Some(out.features);
                masks[fi] = Some(out.mask);
            }

            // replace pass: blend rendered anchor features in at the tap
            let mut tap_err: Option<MvError> = None;
            let eps = {
                let mut tap = |fi: usize, g: &FeatureGrid| -> Option<FeatureGrid> {
                    if fi == anchor || tap_err.is_some() {
                        return None;
                    }
                    match (&rendered[fi], &masks[fi]) {
                        (Some(f_a), Some(m)) => match feature_replace(g, f_a, m) {
                            Ok(replaced) => Some(replaced),
                            Err(e) => {
                                tap_err = Some(e);
                                None
                            }
                        },
                        _ => None,
                    }
                };
                let mut hooks = DenoiserHooks::with_tap(&mut tap);
                denoiser.predict_noise(&x, t, cond, &mut hooks)?
            };
            if let Some(e) = tap_err {
                return Err(e);
            }

            // completion fills the disoccluded latent cells
            if step <= cfg.t_comp {
                let latent_masks: Vec<Option<FeatureGrid>> = masks
                    .iter()
                    .map(|m| {
                        m.as_ref()
                            .map(|mask| {
                                downsample_mask_min(mask, cfg.latent_height, cfg.latent_width)
                            })
                            .transpose()
                    })
                    .collect::<Result<_>>()?;
                x = complete_with_eps(
                    &x,
                    &eps,
                    &latent_masks,
                    &schedule,
                    t,
                    step,
                    cfg.completion_seed(),
                )?;
                if cfg.trace {
                    trace_completed = Some(x.frames().to_vec());
                }
            }
            if cfg.trace {
                trace_masks = masks;
                trace_rendered = rendered;
            }
            eps
        } else {
            denoiser.predict_noise(&x, t, cond, &mut DenoiserHooks::none())?
        };

        x = schedule.ddim_step(&x, &eps, t, t_prev)?;
        if cfg.trace {
            artifacts.steps.push(StepTrace {
                step,
                timestep: t,
                masks: trace_masks,
                rendered: trace_rendered,
                completed: trace_completed,
            });
        }
    }

    let rgb = x.frames().iter().map(decode_rgb).collect::<Result<Vec<_>>>()?;
    Ok(RunOutput { latents: x, rgb, artifacts })
}

/// Plain deterministic reverse pass without any hooks, used as the
/// regression baseline for `t_rep = t_comp = 0`.
pub fn ddim_sample(
    schedule: &DiffusionSchedule,
    denoiser: &dyn Denoiser,
    x_init: &LatentVideo,
    cond: &Conditioning,
) -> Result<LatentVideo> {
    let mut x = x_init.clone();
    for (t, t_prev) in schedule.transitions() {
        let eps = denoiser.predict_noise(&x, t, cond, &mut DenoiserHooks::none())?;
        x = schedule.ddim_step(&x, &eps, t, t_prev)?;
    }
    Ok(x)
}

#[allow(clippy::too_many_arguments)]
fn align_relative_depth(
    cfg: &PipelineConfig,
    cond: &Conditioning,
    field_ctx: Option<&FieldContext>,
    raw_depth: &FeatureGrid,
    captured: &[FeatureGrid],
    anchor: usize,
    anchor_cam: &CameraPose,
    state: &mut ReplacementState,
) -> Result<FeatureGrid> {
    let needs_search = cfg.grid_search
        && (state.cached_d_med.is_none() || cfg.grid_search_every_step);
    if let (false, Some(d)) = (needs_search, state.cached_d_med) {
        return align_depth(raw_depth, d);
    }

    let base_d_med = match cfg.d_med {
        Some(d) => d,
        None => match field_ctx {
            Some(ctx) => expected_central_depth(ctx.refs, anchor_cam, ctx.field_fn, &cfg.field)?
                .ok_or_else(|| {
                    MvError::config(
                        "reference field accumulates no opacity on the central ray; set d_med"
                            .to_string(),
                    )
                })?,
            None => {
                return Err(MvError::config(
                    "aligning relative depth needs d_med or a reference field".to_string(),
                ))
            }
        },
    };

    if !needs_search {
        state.cached_d_med = Some(base_d_med);
        return align_depth(raw_depth, base_d_med);
    }

    let (feat_h, feat_w) = (raw_depth.height(), raw_depth.width());
    // foreground masks per non-anchor frame: reference-field alpha when a
    // field is available, otherwise the candidate render's own visibility
    let mut foreground: Vec<Option<FeatureGrid>> = vec![None; cond.num_frames()];
    if let Some(ctx) = field_ctx {
        for fi in 0..cond.num_frames() {
            if fi == anchor {
                continue;
            }
            let cam = scale_camera(&cond.poses[fi], feat_h, feat_w)?;
            let (_, alpha) =
                render_feature_map(ctx.refs, &cam, ctx.field_fn, feat_h, feat_w, &cfg.field)?;
            let mut fg = FeatureGrid::zeros(feat_h, feat_w, 1);
            for (dst, &a) in fg.data_mut().iter_mut().zip(alpha.data()) {
                *dst = if a >= 0.5 { 1.0 } else { 0.0 };
            }
            foreground[fi] = Some(fg);
        }
    }

    let candidates = candidate_range(base_d_med, GRID_SEARCH_CANDIDATES)?;
    let objective = |cand: f64| -> Result<Option<f64>> {
        let aligned = align_depth(raw_depth, cand)?;
        let mesh = build_anchor_mesh(&captured[anchor], &aligned, anchor_cam, cfg.zeta)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for fi in 0..cond.num_frames() {
            if fi == anchor {
                continue;
            }
            let cam = scale_camera(&cond.poses[fi], feat_h, feat_w)?;
            let out = render(&mesh, &cam, feat_h, feat_w);
            let reference = &captured[fi];
            for r in 0..feat_h {
                for c in 0..feat_w {
                    if out.mask.get(r, c, 0) != 1.0 {
                        continue;
                    }
                    if let Some(fg) = &foreground[fi] {
                        if fg.get(r, c, 0) != 1.0 {
                            continue;
                        }
                    }
                    for ch in 0..reference.channels() {
                        let d = out.features.get(r, c, ch) - reference.get(r, c, ch);
                        total += d * d;
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            Ok(None)
        } else {
            Ok(Some(total / count as f64))
        }
    };
    let result = median_depth_search(&candidates, base_d_med, objective)?;
    state.cached_d_med = Some(result.value);
    state.grid_search_fell_back = result.fell_back;
    align_depth(raw_depth, result.value)
}
