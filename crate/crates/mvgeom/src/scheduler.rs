//! Diffusion noise schedules and sampler steps: the stochastic forward
//! (re-)noising process and deterministic reverse steps used by latent
//! completion and sampling.
//!
//! Timestep 0 is the clean end of the chain: `alpha_bar[0]` is exactly 1
//! (empty product), so a reverse transition targeting t = 0 returns the
//! predicted clean latent exactly. Betas ramp linearly from `beta_start` to
//! `beta_end` across timesteps 1..T-1.

use crate::camera::CameraPose;
use crate::error::{MvError, Result};
use crate::grid::FeatureGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { beta_start: 1e-4, beta_end: 2e-2, train_steps: 1000 }
    }
}

/// Per-timestep cumulative noise levels plus the reverse-sampler step list.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
    sampler_steps: Vec<usize>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig, sampler_count: usize) -> Result<DiffusionSchedule> {
        let n = config.train_steps;
        if n < 2 {
            return Err(MvError::config(format!("train_steps must be >= 2, got {n}")));
        }
        if !(config.beta_start > 0.0 && config.beta_end < 1.0 && config.beta_start <= config.beta_end)
        {
            return Err(MvError::config(format!(
                "betas must satisfy 0 < start <= end < 1, got {} .. {}",
                config.beta_start, config.beta_end
            )));
        }
        let mut alpha_bar = Vec::with_capacity(n);
        alpha_bar.push(1.0);
        for t in 1..n {
            let frac = if n > 2 { (t - 1) as f64 / (n - 2) as f64 } else { 0.0 };
            let beta = config.beta_start + (config.beta_end - config.beta_start) * frac;
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        let sampler_steps = uniform_sampler_steps(n, sampler_count)?;
        let schedule = DiffusionSchedule { alpha_bar, sampler_steps };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn with_sampler_steps(mut self, steps: Vec<usize>) -> Result<DiffusionSchedule> {
        self.sampler_steps = steps;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.alpha_bar.len();
        for t in 1..n {
            if !(self.alpha_bar[t] < self.alpha_bar[t - 1]) {
                return Err(MvError::config(format!("alpha_bar not strictly decreasing at t={t}")));
            }
            if !(self.alpha_bar[t] > 0.0) {
                return Err(MvError::config(format!("alpha_bar[{t}] must stay positive")));
            }
        }
        if (self.alpha_bar[0] - 1.0).abs() > 1e-3 {
            return Err(MvError::config("alpha_bar[0] must be close to 1".to_string()));
        }
        if self.sampler_steps.is_empty() {
            return Err(MvError::config("sampler step list is empty".to_string()));
        }
        for w in self.sampler_steps.windows(2) {
            if w[1] >= w[0] {
                return Err(MvError::config("sampler steps must be strictly decreasing".to_string()));
            }
        }
        if self.sampler_steps[0] >= n {
            return Err(MvError::config(format!(
                "sampler step {} out of range for {n} train steps",
                self.sampler_steps[0]
            )));
        }
        Ok(())
    }

    pub fn num_train_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn sampler_steps(&self) -> &[usize] {
        &self.sampler_steps
    }

    /// `(t, t_prev)` pairs for a full reverse pass. When the step list does
    /// not already end at 0, a final transition to timestep 0 is appended;
    /// `alpha_bar[0]` is exactly 1, so that transition returns the clean
    /// prediction.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.sampler_steps.len());
        for w in self.sampler_steps.windows(2) {
            out.push((w[0], w[1]));
        }
        let last = *self.sampler_steps.last().unwrap();
        if last != 0 {
            out.push((last, 0));
        }
        out
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| MvError::domain(format!("timestep {t} out of range")))
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`, elementwise per frame.
    pub fn ddpm_forward(
        &self,
        x0: &LatentVideo,
        t: usize,
        noise: &LatentVideo,
    ) -> Result<LatentVideo> {
        let abar = self.alpha_bar(t)?;
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        x0.zip_map(noise, |x, n| a * x + b * n)
    }

    /// `x0 = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
    pub fn predict_x0(
        &self,
        x_t: &LatentVideo,
        eps_hat: &LatentVideo,
        t: usize,
    ) -> Result<LatentVideo> {
        let abar = self.alpha_bar(t)?;
        if abar <= 0.0 {
            return Err(MvError::domain(format!("predict_x0 requires alpha_bar > 0 at t={t}")));
        }
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
    }

    /// Deterministic (eta = 0) reverse step from `t` to `t_prev < t`:
    /// `x_prev = sqrt(abar_prev) predict_x0(x_t, eps, t) + sqrt(1 - abar_prev) eps`.
    pub fn ddim_step(
        &self,
        x_t: &LatentVideo,
        eps_hat: &LatentVideo,
        t: usize,
        t_prev: usize,
    ) -> Result<LatentVideo> {
        if t_prev >= t {
            return Err(MvError::domain(format!(
                "ddim_step requires t_prev < t, got {t_prev} >= {t}"
            )));
        }
        let x0 = self.predict_x0(x_t, eps_hat, t)?;
        let abar_prev = self.alpha_bar(t_prev)?;
        let (a, b) = (abar_prev.sqrt(), (1.0 - abar_prev).sqrt());
        x0.zip_map(eps_hat, |x, e| a * x + b * e)
    }
}

fn uniform_sampler_steps(train_steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(MvError::config("sampler step count must be >= 1".to_string()));
    }
    let stride = train_steps / count;
    if stride == 0 {
        return Err(MvError::config(format!(
            "cannot fit {count} sampler steps into {train_steps} train steps"
        )));
    }
    // e.g. 1000 train steps, 50 sampler steps: 999, 979, ..., 19
    Ok((0..count).map(|k| (train_steps - 1) - k * stride).collect())
}

/// Ordered sequence of per-frame latent grids with their camera poses.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    frames: Vec<FeatureGrid>,
    poses: Vec<CameraPose>,
}

impl LatentVideo {
    pub fn new(frames: Vec<FeatureGrid>, poses: Vec<CameraPose>) -> Result<LatentVideo> {
        if frames.is_empty() {
            return Err(MvError::domain("latent video needs at least one frame".to_string()));
        }
        if frames.len() != poses.len() {
            return Err(MvError::domain(format!(
                "{} frames but {} poses",
                frames.len(),
                poses.len()
            )));
        }
        let shape = frames[0].shape();
        if frames.iter().any(|f| f.shape() != shape) {
            return Err(MvError::domain("latent frames must share dimensions".to_string()));
        }
        Ok(LatentVideo { frames, poses })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[FeatureGrid] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &FeatureGrid {
        &self.frames[i]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut FeatureGrid {
        &mut self.frames[i]
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }

    /// Replace one frame, keeping shape invariants.
    pub fn set_frame(&mut self, i: usize, frame: FeatureGrid) -> Result<()> {
        if frame.shape() != self.frame_shape() {
            return Err(MvError::domain("replacement frame has mismatched shape".to_string()));
        }
        self.frames[i] = frame;
        Ok(())
    }

    pub fn zip_map(
        &self,
        other: &LatentVideo,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<LatentVideo> {
        if self.num_frames() != other.num_frames() || self.frame_shape() != other.frame_shape() {
            return Err(MvError::domain("latent video dimension mismatch".to_string()));
        }
        let frames = self
            .frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| {
                let data =
                    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
                let (h, w, c) = a.shape();
                FeatureGrid::new(h, w, c, data)
            })
            .collect::<Result<Vec<_>>>()?;
        LatentVideo::new(frames, self.poses.clone())
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> f64 {
        self.frames
            .iter()
            .zip(&other.frames)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn bit_identical(&self, other: &LatentVideo) -> bool {
        self.num_frames() == other.num_frames()
            && self.frames.iter().zip(&other.frames).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
