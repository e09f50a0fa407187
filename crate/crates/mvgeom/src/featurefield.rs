//! Pose-aligned feature synthesis from posed reference feature maps: rays are
//! sampled through the target view, each sample is projected into every
//! reference view and bilinearly gathered, the aggregated feature drives a
//! density+feature head, and standard volume-rendering weights composite the
//! result into a feature map with an alpha channel.

use crate::camera::CameraPose;
use crate::error::{MvError, Result};
use crate::grid::{read_grid, write_grid, FeatureGrid};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Posed reference feature maps `(X_i, pi_i)`.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    entries: Vec<(FeatureGrid, CameraPose)>,
}

impl ReferenceSet {
    pub fn new(entries: Vec<(FeatureGrid, CameraPose)>) -> Result<ReferenceSet> {
        if entries.is_empty() {
            return Err(MvError::domain("reference set needs at least one entry".to_string()));
        }
        let shape = entries[0].0.shape();
        if entries.iter().any(|(g, _)| g.shape() != shape) {
            return Err(MvError::domain("reference grids must share dimensions".to_string()));
        }
        Ok(ReferenceSet { entries })
    }

    pub fn entries(&self) -> &[(FeatureGrid, CameraPose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature_channels(&self) -> usize {
        self.entries[0].0.channels()
    }

    /// Serializes as a directory of `ref_###.fgrid` files plus
    /// `trajectory.txt`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let cams: Vec<CameraPose> = self.entries.iter().map(|(_, c)| c.clone()).collect();
        crate::camera::write_trajectory(&cams, &dir.join("trajectory.txt"))?;
        for (i, (grid, _)) in self.entries.iter().enumerate() {
            write_grid(grid, &dir.join(format!("ref_{i:03}.fgrid")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<ReferenceSet> {
        let cams = crate::camera::read_trajectory(&dir.join("trajectory.txt"))?;
        let mut entries = Vec::with_capacity(cams.len());
        for (i, cam) in cams.into_iter().enumerate() {
            let grid = read_grid(&dir.join(format!("ref_{i:03}.fgrid")))?;
            entries.push((grid, cam));
        }
        ReferenceSet::new(entries)
    }
}

/// Ray-sampling parameters for the field renderer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldRenderConfig {
    pub near: f64,
    pub far: f64,
    pub samples_per_ray: usize,
}

impl Default for FieldRenderConfig {
    fn default() -> Self {
        Self { near: 0.1, far: 10.0, samples_per_ray: 32 }
    }
}

impl FieldRenderConfig {
    fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(MvError::domain(format!(
                "need 0 < near < far, got {}..{}",
                self.near, self.far
            )));
        }
        if self.samples_per_ray < 2 {
            return Err(MvError::domain("need at least 2 samples per ray".to_string()));
        }
        Ok(())
    }
}

/// Per-target-pixel rays with unit directions and stratified sample
/// distances (midpoints of uniform bins in `[near, far]`).
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub origins: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
    pub sample_ts: Vec<f64>,
    pub delta: f64,
    pub height: usize,
    pub width: usize,
}

impl RayBatch {
    pub fn for_camera(cam: &CameraPose, h: usize, w: usize, cfg: &FieldRenderConfig) -> Result<RayBatch> {
        cfg.validate()?;
        let mut origins = Vec::with_capacity(h * w);
        let mut directions = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                let (o, d) = cam.pixel_ray(col as f64, row as f64);
                origins.push(o);
                directions.push(d.normalize());
            }
        }
        let s = cfg.samples_per_ray;
        let delta = (cfg.far - cfg.near) / s as f64;
        let sample_ts = (0..s).map(|k| cfg.near + (k as f64 + 0.5) * delta).collect();
        Ok(RayBatch { origins, directions, sample_ts, delta, height: h, width: w })
    }
}

/// Density + feature head applied to a world-space sample point and its
/// aggregated reference feature.
pub trait FieldFunction {
    fn out_channels(&self, in_channels: usize) -> usize;
    /// Returns `(sigma, feature)`; `sigma` must be non-negative (infinity
    /// encodes a hard opaque surface).
    fn evaluate(&self, point: &Vector3<f64>, aggregated: &[f64]) -> (f64, Vec<f64>);
}

/// Hard opaque slab around the plane `z = plane_z`; features pass through.
#[derive(Debug, Clone, Copy)]
pub struct OpaqueSlabField {
    pub plane_z: f64,
    pub half_thickness: f64,
}

impl FieldFunction for OpaqueSlabField {
    fn out_channels(&self, in_channels: usize) -> usize {
        in_channels
    }
    fn evaluate(&self, point: &Vector3<f64>, aggregated: &[f64]) -> (f64, Vec<f64>) {
        let sigma = if (point.z - self.plane_z).abs() <= self.half_thickness {
            f64::INFINITY
        } else {
            0.0
        };
        (sigma, aggregated.to_vec())
    }
}

/// Constant density everywhere; features pass through.
#[derive(Debug, Clone, Copy)]
pub struct UniformField {
    pub sigma: f64,
}

impl FieldFunction for UniformField {
    fn out_channels(&self, in_channels: usize) -> usize {
        in_channels
    }
    fn evaluate(&self, _point: &Vector3<f64>, aggregated: &[f64]) -> (f64, Vec<f64>) {
        (self.sigma, aggregated.to_vec())
    }
}

/// Small fixed two-layer head: `[point, aggregated] -> tanh hidden ->
/// (softplus density, features)`. Weights are not trained here; they can be
/// seeded or loaded from a flat FGRID file.
#[derive(Debug, Clone)]
pub struct MlpField {
    in_channels: usize,
    hidden: usize,
    out_channels: usize,
    // layer 1: hidden x (3 + in), bias hidden; layer 2: (1 + out) x hidden,
    // bias (1 + out)
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl MlpField {
    pub fn param_count(in_channels: usize, hidden: usize, out_channels: usize) -> usize {
        let d_in = 3 + in_channels;
        let d_out = 1 + out_channels;
        hidden * d_in + hidden + d_out * hidden + d_out
    }

    pub fn from_flat(
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        flat: &[f64],
    ) -> Result<MlpField> {
        let expected = Self::param_count(in_channels, hidden, out_channels);
        if flat.len() != expected {
            return Err(MvError::domain(format!(
                "field weights: expected {expected} parameters, got {}",
                flat.len()
            )));
        }
        let d_in = 3 + in_channels;
        let d_out = 1 + out_channels;
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        Ok(MlpField {
            in_channels,
            hidden,
            out_channels,
            w1: take(hidden * d_in),
            b1: take(hidden),
            w2: take(d_out * hidden),
            b2: take(d_out),
        })
    }

    pub fn seeded(in_channels: usize, hidden: usize, out_channels: usize, seed: u64) -> MlpField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::param_count(in_channels, hidden, out_channels);
        let flat: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Self::from_flat(in_channels, hidden, out_channels, &flat).expect("sized above")
    }

    /// Loads weights from a flat (1 x K x 1) FGRID file.
    pub fn from_fgrid_file(
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        path: &Path,
    ) -> Result<MlpField> {
        let grid = read_grid(path)?;
        Self::from_flat(in_channels, hidden, out_channels, grid.data())
    }
}

impl FieldFunction for MlpField {
    fn out_channels(&self, _in_channels: usize) -> usize {
        self.out_channels
    }
    fn evaluate(&self, point: &Vector3<f64>, aggregated: &[f64]) -> (f64, Vec<f64>) {
        debug_assert_eq!(aggregated.len(), self.in_channels);
        let d_in = 3 + self.in_channels;
        let mut input = Vec::with_capacity(d_in);
        input.extend_from_slice(&[point.x, point.y, point.z]);
        input.extend_from_slice(aggregated);
        let mut h = vec![0.0; self.hidden];
        for i in 0..self.hidden {
            let mut acc = self.b1[i];
            for j in 0..d_in {
                acc += self.w1[i * d_in + j] * input[j];
            }
            h[i] = acc.tanh();
        }
        let d_out = 1 + self.out_channels;
        let mut out = vec![0.0; d_out];
        for i in 0..d_out {
            let mut acc = self.b2[i];
            for j in 0..self.hidden {
                acc += self.w2[i * self.hidden + j] * h[j];
            }
            out[i] = acc;
        }
        let sigma = softplus(out[0]);
        (sigma, out[1..].to_vec())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Standard volume-rendering weights: `w_s = T_s (1 - exp(-sigma_s delta_s))`
/// with `T_s = exp(-sum_{k<s} sigma_k delta_k)`.
pub fn composite_weights(sigmas: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.len() != deltas.len() {
        return Err(MvError::domain(format!(
            "{} densities but {} spacings",
            sigmas.len(),
            deltas.len()
        )));
    }
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut transmittance = 1.0;
    for (&sigma, &delta) in sigmas.iter().zip(deltas) {
        if sigma < 0.0 || sigma.is_nan() {
            return Err(MvError::domain(format!("negative density {sigma}")));
        }
        if !(delta > 0.0) {
            return Err(MvError::domain(format!("non-positive spacing {delta}")));
        }
        let att = (-sigma * delta).exp();
        weights.push(transmittance * (1.0 - att));
        transmittance *= att;
    }
    Ok(weights)
}

/// Renders the pose-aligned feature map `X_y` and its alpha for the target
/// camera. Samples with no covering reference get zero density; pixels whose
/// every sample is uncovered come out with alpha 0.
pub fn render_feature_map(
    refs: &ReferenceSet,
    target: &CameraPose,
    field_fn: &dyn FieldFunction,
    out_h: usize,
    out_w: usize,
    cfg: &FieldRenderConfig,
) -> Result<(FeatureGrid, FeatureGrid)> {
    let rays = RayBatch::for_camera(target, out_h, out_w, cfg)?;
    let c_in = refs.feature_channels();
    let c_out = field_fn.out_channels(c_in);
    let mut xy = FeatureGrid::zeros(out_h, out_w, c_out);
    let mut alpha = FeatureGrid::zeros(out_h, out_w, 1);
    let s = rays.sample_ts.len();
    let deltas = vec![rays.delta; s];

    let mut sample_buf = vec![0.0; c_in];
    let mut aggregated = vec![0.0; c_in];
    for row in 0..out_h {
        for col in 0..out_w {
            let ray = row * out_w + col;
            let origin = rays.origins[ray];
            let dir = rays.directions[ray];
            let mut sigmas = Vec::with_capacity(s);
            let mut feats: Vec<Vec<f64>> = Vec::with_capacity(s);
            for &t in &rays.sample_ts {
                let point = origin + dir * t;
                aggregated.fill(0.0);
                let mut covering = 0usize;
                for (grid, cam) in refs.entries() {
                    if let Some((u, v, _z)) = cam.project(&point) {
                        if grid.sample_bilinear(u, v, &mut sample_buf).is_some() {
                            for ch in 0..c_in {
                                aggregated[ch] += sample_buf[ch];
                            }
                            covering += 1;
                        }
                    }
                }
                if covering == 0 {
                    sigmas.push(0.0);
                    feats.push(vec![0.0; c_out]);
                    continue;
                }
                for a in aggregated.iter_mut() {
                    *a /= covering as f64;
                }
                let (sigma, feat) = field_fn.evaluate(&point, &aggregated);
                if sigma < 0.0 {
                    return Err(MvError::domain(format!("field produced negative density {sigma}")));
                }
                sigmas.push(sigma);
                feats.push(feat);
            }
            let weights = composite_weights(&sigmas, &deltas)?;
            let mut acc = vec![0.0; c_out];
            let mut a = 0.0;
            for (w, feat) in weights.iter().zip(&feats) {
                a += w;
                for ch in 0..c_out {
                    acc[ch] += w * feat[ch];
                }
            }
            for ch in 0..c_out {
                xy.set(row, col, ch, acc[ch]);
            }
            alpha.set(row, col, 0, a);
        }
    }
    Ok((xy, alpha))
}

/// Alpha-weighted mean sample distance along the central pixel's ray, used
/// to estimate the scene's median depth; `None` when the ray accumulates
/// almost no opacity.
pub fn expected_central_depth(
    refs: &ReferenceSet,
    target: &CameraPose,
    field_fn: &dyn FieldFunction,
    cfg: &FieldRenderConfig,
) -> Result<Option<f64>> {
    cfg.validate()?;
    let k = &target.intrinsics;
    let (origin, dir) = target.pixel_ray(k.cx, k.cy);
    let dir = dir.normalize();
    let s = cfg.samples_per_ray;
    let delta = (cfg.far - cfg.near) / s as f64;
    let c_in = refs.feature_channels();
    let mut sample_buf = vec![0.0; c_in];
    let mut sigmas = Vec::with_capacity(s);
    let mut ts = Vec::with_capacity(s);
    for kk in 0..s {
        let t = cfg.near + (kk as f64 + 0.5) * delta;
        let point = origin + dir * t;
        let mut aggregated = vec![0.0; c_in];
        let mut covering = 0usize;
        for (grid, cam) in refs.entries() {
            if let Some((u, v, _)) = cam.project(&point) {
                if grid.sample_bilinear(u, v, &mut sample_buf).is_some() {
                    for ch in 0..c_in {
                        aggregated[ch] += sample_buf[ch];
                    }
                    covering += 1;
                }
            }
        }
        let sigma = if covering == 0 {
            0.0
        } else {
            for a in aggregated.iter_mut() {
                *a /= covering as f64;
            }
            field_fn.evaluate(&point, &aggregated).0
        };
        sigmas.push(sigma);
        ts.push(t);
    }
    let weights = composite_weights(&sigmas, &vec![delta; s])?;
    let alpha: f64 = weights.iter().sum();
    if alpha < 1e-6 {
        return Ok(None);
    }
    let depth: f64 = weights.iter().zip(&ts).map(|(w, t)| w * t).sum::<f64>() / alpha;
    Ok(Some(depth))
}
