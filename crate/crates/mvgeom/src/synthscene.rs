//! Synthetic posed scenes with exact depth, features and trajectories.
//!
//! Scenes are built from analytic primitives (planes, axis-aligned boxes,
//! depth-step walls) carrying procedural textures. Every render is an exact
//! per-pixel ray intersection, so depth maps agree with unprojection to
//! machine precision and serve as ground truth for the warping machinery.

use crate::camera::{CameraPose, Intrinsics, RigidPose};
use crate::error::{MvError, Result};
use crate::grid::{FeatureGrid, FAR_SENTINEL};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FEATURE_CHANNELS: usize = 3;

/// Procedural texture evaluated at a hit point's world (x, y).
///
/// Gradient and smooth-noise textures are band-limited so barycentric or
/// bilinear resampling stays within the geometric test tolerances; checker
/// has sharp edges and is meant for visual output.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Gradient { base: [f64; 3], gx: [f64; 3], gy: [f64; 3] },
    SmoothNoise { amp: [[f64; 3]; 3], freq_x: [f64; 3], freq_y: [f64; 3], phase_x: [f64; 3], phase_y: [f64; 3] },
    Checker { scale: f64, a: [f64; 3], b: [f64; 3] },
}

impl Texture {
    pub fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        match self {
            Texture::Gradient { base, gx, gy } => {
                let mut out = [0.0; 3];
                for ch in 0..3 {
                    out[ch] = base[ch] + gx[ch] * x + gy[ch] * y;
                }
                out
            }
            Texture::SmoothNoise { amp, freq_x, freq_y, phase_x, phase_y } => {
                let mut out = [0.5; 3];
                for ch in 0..3 {
                    for k in 0..3 {
                        out[ch] += amp[k][ch]
                            * (freq_x[k] * x + phase_x[k]).sin()
                            * (freq_y[k] * y + phase_y[k]).sin();
                    }
                }
                out
            }
            Texture::Checker { scale, a, b } => {
                let ix = (x / scale).floor() as i64;
                let iy = (y / scale).floor() as i64;
                if (ix + iy).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }

    pub fn gradient_seeded(rng: &mut ChaCha8Rng) -> Texture {
        let mut base = [0.0; 3];
        let mut gx = [0.0; 3];
        let mut gy = [0.0; 3];
        for ch in 0..3 {
            base[ch] = rng.gen_range(0.3..0.7);
            gx[ch] = rng.gen_range(-0.08..0.08);
            gy[ch] = rng.gen_range(-0.08..0.08);
        }
        Texture::Gradient { base, gx, gy }
    }

    pub fn noise_seeded(rng: &mut ChaCha8Rng) -> Texture {
        let mut amp = [[0.0; 3]; 3];
        let mut freq_x = [0.0; 3];
        let mut freq_y = [0.0; 3];
        let mut phase_x = [0.0; 3];
        let mut phase_y = [0.0; 3];
        for k in 0..3 {
            freq_x[k] = rng.gen_range(0.4..1.8);
            freq_y[k] = rng.gen_range(0.4..1.8);
            phase_x[k] = rng.gen_range(0.0..std::f64::consts::TAU);
            phase_y[k] = rng.gen_range(0.0..std::f64::consts::TAU);
            for ch in 0..3 {
                amp[k][ch] = rng.gen_range(-0.12..0.12);
            }
        }
        Texture::SmoothNoise { amp, freq_x, freq_y, phase_x, phase_y }
    }
}

/// Analytic scene primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Plane `normal . X = offset`, optionally bounded in world x/y.
    Plane { normal: Vector3<f64>, offset: f64, bounds: Option<[f64; 4]> },
    /// Axis-aligned box.
    Box { min: Vector3<f64>, max: Vector3<f64> },
    /// Fronto-parallel wall with a depth step at `split_x`: depth `z_near`
    /// for x < split_x, `z_far` for x >= split_x.
    StepWall { z_near: f64, z_far: f64, split_x: f64 },
}

impl Primitive {
    pub fn fronto_plane(z: f64) -> Primitive {
        Primitive::Plane { normal: Vector3::new(0.0, 0.0, 1.0), offset: z, bounds: None }
    }

    /// First intersection parameter t > eps of `origin + t * dir`, if any.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-12;
        match self {
            Primitive::Plane { normal, offset, bounds } => {
                let denom = normal.dot(dir);
                if denom.abs() < EPS {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / denom;
                if t <= EPS {
                    return None;
                }
                if let Some([xmin, xmax, ymin, ymax]) = bounds {
                    let p = origin + dir * t;
                    if p.x < *xmin || p.x > *xmax || p.y < *ymin || p.y > *ymax {
                        return None;
                    }
                }
                Some(t)
            }
            Primitive::Box { min, max } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                for axis in 0..3 {
                    let (o, d) = (origin[axis], dir[axis]);
                    if d.abs() < EPS {
                        if o < min[axis] || o > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let t0 = (min[axis] - o) / d;
                    let t1 = (max[axis] - o) / d;
                    let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
                    t_enter = t_enter.max(lo);
                    t_exit = t_exit.min(hi);
                    if t_enter > t_exit {
                        return None;
                    }
                }
                if t_enter > EPS {
                    Some(t_enter)
                } else if t_exit > EPS {
                    Some(t_exit)
                } else {
                    None
                }
            }
            Primitive::StepWall { z_near, z_far, split_x } => {
                let mut best: Option<f64> = None;
                for (z, near_side) in [(z_near, true), (z_far, false)] {
                    if dir.z.abs() < EPS {
                        continue;
                    }
                    let t = (z - origin.z) / dir.z;
                    if t <= EPS {
                        continue;
                    }
                    let x = origin.x + dir.x * t;
                    let on_side = if near_side { x < *split_x } else { x >= *split_x };
                    if on_side && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                }
                best
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrimitive {
    pub shape: Primitive,
    pub texture: Texture,
}

/// Parametric camera trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    /// Pure x-translation with identity rotation.
    TranslateX { step: f64 },
    /// Pure y-translation with identity rotation.
    TranslateY { step: f64 },
    /// Poses on a circle of `radius` at `height`, looking at the origin.
    Orbit { radius: f64, height: f64 },
}

pub fn make_trajectory(
    kind: TrajectoryKind,
    n: usize,
    intrinsics: Intrinsics,
) -> Result<Vec<CameraPose>> {
    if n < 2 {
        return Err(MvError::config(format!("trajectory needs at least 2 poses, got {n}")));
    }
    let mut cams = Vec::with_capacity(n);
    match kind {
        TrajectoryKind::TranslateX { step } => {
            for i in 0..n {
                let pose = RigidPose::from_translation(Vector3::new(i as f64 * step, 0.0, 0.0));
                cams.push(CameraPose::new(intrinsics, pose));
            }
        }
        TrajectoryKind::TranslateY { step } => {
            for i in 0..n {
                let pose = RigidPose::from_translation(Vector3::new(0.0, i as f64 * step, 0.0));
                cams.push(CameraPose::new(intrinsics, pose));
            }
        }
        TrajectoryKind::Orbit { radius, height } => {
            if radius <= 0.0 {
                return Err(MvError::config(format!("orbit radius must be positive, got {radius}")));
            }
            for i in 0..n {
                let theta = i as f64 * std::f64::consts::TAU / n as f64;
                let eye = Vector3::new(radius * theta.sin(), height, -radius * theta.cos());
                cams.push(CameraPose::new(intrinsics, look_at_origin(eye)?));
            }
        }
    }
    Ok(cams)
}

/// Camera-to-world pose at `eye` looking at the world origin, world +y up
/// (camera y axis points world-down so images are upright).
pub fn look_at_origin(eye: Vector3<f64>) -> Result<RigidPose> {
    let forward = (-eye).normalize();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let x = forward.cross(&up);
    if x.norm() < 1e-9 {
        return Err(MvError::config("orbit camera looking along the up axis".to_string()));
    }
    let x = x.normalize();
    let y = forward.cross(&x);
    let r = Matrix3::from_columns(&[x, y, forward]);
    RigidPose::new(r, eye)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<ScenePrimitive>,
    pub intrinsics: Intrinsics,
    pub trajectory: TrajectoryKind,
    pub num_frames: usize,
}

impl SceneSpec {
    pub fn cameras(&self) -> Result<Vec<CameraPose>> {
        make_trajectory(self.trajectory, self.num_frames, self.intrinsics)
    }

    /// Parses the key=value scene format. Repeated `primitive=` keys add
    /// primitives; see the README for the grammar.
    pub fn from_config_str(text: &str) -> Result<SceneSpec> {
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut width: u32 = 32;
        let mut height: u32 = 32;
        let mut seed: u64 = 1;
        let mut trajectory = None;
        let mut num_frames = None;
        let mut prim_lines: Vec<String> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MvError::config(format!("scene line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "width" => width = parse_num(value)? as u32,
                "height" => height = parse_num(value)? as u32,
                "fx" => fx = Some(parse_num(value)?),
                "fy" => fy = Some(parse_num(value)?),
                "cx" => cx = Some(parse_num(value)?),
                "cy" => cy = Some(parse_num(value)?),
                "seed" => seed = parse_num(value)? as u64,
                "trajectory" => {
                    let (kind, n) = parse_trajectory_value(value)?;
                    trajectory = Some(kind);
                    num_frames = Some(n);
                }
                "primitive" => prim_lines.push(value.to_string()),
                other => {
                    return Err(MvError::config(format!("scene: unknown key `{other}`")));
                }
            }
        }

        let intrinsics = Intrinsics::new(
            fx.unwrap_or(width as f64),
            fy.unwrap_or(width as f64),
            cx.unwrap_or((width as f64 - 1.0) / 2.0),
            cy.unwrap_or((height as f64 - 1.0) / 2.0),
            width,
            height,
        )?;
        let trajectory =
            trajectory.ok_or_else(|| MvError::config("scene: missing trajectory".to_string()))?;
        let num_frames = num_frames.unwrap();
        if prim_lines.is_empty() {
            return Err(MvError::config("scene: at least one primitive required".to_string()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let primitives = prim_lines
            .iter()
            .map(|l| parse_primitive_value(l, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneSpec { primitives, intrinsics, trajectory, num_frames })
    }
}

fn parse_num(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|e| MvError::config(format!("bad number `{s}`: {e}")))
}

fn parse_kv_fields(s: &str) -> Result<Vec<(String, String)>> {
    s.split_whitespace()
        .skip(1)
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| MvError::config(format!("expected key=value, got `{tok}`")))
        })
        .collect()
}

fn parse_trajectory_value(value: &str) -> Result<(TrajectoryKind, usize)> {
    let kind_name = value.split_whitespace().next().unwrap_or("");
    let fields = parse_kv_fields(value)?;
    let get = |name: &str| -> Option<&str> {
        fields.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    };
    let n = match get("n") {
        Some(v) => parse_num(v)? as usize,
        None => 8,
    };
    let kind = match kind_name {
        "xtrans" => TrajectoryKind::TranslateX {
            step: get("step").map(parse_num).transpose()?.unwrap_or(0.1),
        },
        "ytrans" => TrajectoryKind::TranslateY {
            step: get("step").map(parse_num).transpose()?.unwrap_or(0.1),
        },
        "orbit" => TrajectoryKind::Orbit {
            radius: get("radius").map(parse_num).transpose()?.unwrap_or(2.0),
            height: get("height").map(parse_num).transpose()?.unwrap_or(0.0),
        },
        other => {
            return Err(MvError::config(format!("unknown trajectory kind `{other}`")));
        }
    };
    Ok((kind, n))
}

fn parse_primitive_value(value: &str, rng: &mut ChaCha8Rng) -> Result<ScenePrimitive> {
    let kind = value.split_whitespace().next().unwrap_or("");
    let fields = parse_kv_fields(value)?;
    let get = |name: &str| -> Option<&str> {
        fields.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    };
    let texture = match get("tex").unwrap_or("gradient") {
        "gradient" => Texture::gradient_seeded(rng),
        "noise" => Texture::noise_seeded(rng),
        "checker" => Texture::Checker {
            scale: get("checker_scale").map(parse_num).transpose()?.unwrap_or(0.25),
            a: [0.9, 0.9, 0.9],
            b: [0.1, 0.1, 0.2],
        },
        other => return Err(MvError::config(format!("unknown texture `{other}`"))),
    };
    let shape = match kind {
        "plane" => {
            let z = get("z").map(parse_num).transpose()?.unwrap_or(2.0);
            Primitive::fronto_plane(z)
        }
        "box" => {
            let need = |name: &str| -> Result<f64> {
                get(name)
                    .map(parse_num)
                    .transpose()?
                    .ok_or_else(|| MvError::config(format!("box: missing `{name}`")))
            };
            Primitive::Box {
                min: Vector3::new(need("min_x")?, need("min_y")?, need("min_z")?),
                max: Vector3::new(need("max_x")?, need("max_y")?, need("max_z")?),
            }
        }
        "wall" => Primitive::StepWall {
            z_near: get("z_near").map(parse_num).transpose()?.unwrap_or(1.5),
            z_far: get("z_far").map(parse_num).transpose()?.unwrap_or(3.0),
            split_x: get("split_x").map(parse_num).transpose()?.unwrap_or(0.0),
        },
        other => return Err(MvError::config(format!("unknown primitive `{other}`"))),
    };
    Ok(ScenePrimitive { shape, texture })
}

/// Exact analytic render of the scene: features from the nearest hit's
/// texture, depth = camera-space z. Uncovered pixels get feature 0 and the
/// far depth sentinel.
pub fn render_ground_truth(
    spec: &SceneSpec,
    cam: &CameraPose,
    h: usize,
    w: usize,
) -> (FeatureGrid, FeatureGrid) {
    let mut features = FeatureGrid::zeros(h, w, FEATURE_CHANNELS);
    let mut depth = FeatureGrid::zeros(h, w, 1);
    for row in 0..h {
        for col in 0..w {
            let (origin, dir) = cam.pixel_ray(col as f64, row as f64);
            let mut best: Option<(f64, &ScenePrimitive)> = None;
            for prim in &spec.primitives {
                if let Some(t) = prim.shape.intersect(&origin, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, prim));
                    }
                }
            }
            match best {
                Some((t, prim)) => {
                    let p = origin + dir * t;
                    let tex = prim.texture.eval(p.x, p.y);
                    for ch in 0..FEATURE_CHANNELS {
                        features.set(row, col, ch, tex[ch]);
                    }
                    depth.set(row, col, 0, t);
                }
                None => depth.set(row, col, 0, FAR_SENTINEL),
            }
        }
    }
    (features, depth)
}

/// Camera-space depth of the nearest surface along the ray through the
/// (possibly fractional) pixel `(u, v)`; the far sentinel when nothing is
/// hit. This is the continuous-coordinate form of the per-pixel render.
pub fn trace_depth(spec: &SceneSpec, cam: &CameraPose, u: f64, v: f64) -> f64 {
    let (origin, dir) = cam.pixel_ray(u, v);
    spec.primitives
        .iter()
        .filter_map(|p| p.shape.intersect(&origin, &dir))
        .fold(FAR_SENTINEL, f64::min)
}

/// Deterministic randomized scene for oracle tests: a smooth-textured
/// backdrop plane, optionally with a step wall or a box in front.
pub fn random_scene(seed: u64, resolution: u32) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = resolution as f64;
    let intrinsics = Intrinsics::centered(focal, resolution, resolution).unwrap();
    let mut primitives = Vec::new();

    let backdrop_z = rng.gen_range(2.2..4.0);
    let tex = if rng.gen_bool(0.5) {
        Texture::gradient_seeded(&mut rng)
    } else {
        Texture::noise_seeded(&mut rng)
    };
    primitives.push(ScenePrimitive { shape: Primitive::fronto_plane(backdrop_z), texture: tex });

    match rng.gen_range(0..3u32) {
        0 => {}
        1 => {
            let z_near = rng.gen_range(1.2..1.9);
            let split_x = rng.gen_range(-0.3..0.3);
            let tex = Texture::noise_seeded(&mut rng);
            primitives.push(ScenePrimitive {
                shape: Primitive::StepWall { z_near, z_far: backdrop_z, split_x },
                texture: tex,
            });
            primitives.remove(0);
        }
        _ => {
            let cx = rng.gen_range(-0.4..0.4);
            let cy = rng.gen_range(-0.3..0.3);
            let half = rng.gen_range(0.2..0.45);
            let z0 = rng.gen_range(1.3..1.8);
            let tex = Texture::gradient_seeded(&mut rng);
            primitives.push(ScenePrimitive {
                shape: Primitive::Box {
                    min: Vector3::new(cx - half, cy - half, z0),
                    max: Vector3::new(cx + half, cy + half, z0 + 0.4),
                },
                texture: tex,
            });
        }
    }

    let step = rng.gen_range(0.05..0.18);
    SceneSpec {
        primitives,
        intrinsics,
        trajectory: TrajectoryKind::TranslateX { step },
        num_frames: 2,
    }
}
