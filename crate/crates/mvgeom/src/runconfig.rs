//! Key=value run configuration: parses the file the `run` subcommand takes
//! and assembles the pieces an inference run needs (pipeline config,
//! conditioning, depth provider, optional reference field, denoiser).

use crate::denoiser::{
    Conditioning, Denoiser, GaussianAnalyticDenoiser, OracleDenoiser, ToyNetDenoiser, ZeroDenoiser,
};
use crate::error::{MvError, Result};
use crate::featurefield::{
    render_feature_map, FieldFunction, MlpField, OpaqueSlabField, ReferenceSet, UniformField,
};
use crate::grid::FeatureGrid;
use crate::pipeline::{
    encode_rgb, DepthProvider, FieldContext, PipelineConfig, SceneDepthProvider,
    ScaledSceneDepthProvider,
};
use crate::scheduler::{DiffusionSchedule, LatentVideo};
use crate::synthscene::{render_ground_truth, SceneSpec};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Raw key=value map plus the directory paths resolve against.
pub struct RunFileConfig {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl RunFileConfig {
    pub fn from_file(path: &Path) -> Result<RunFileConfig> {
        let text = std::fs::read_to_string(path)?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_str_with_base(&text, base_dir)
    }

    pub fn from_str_with_base(text: &str, base_dir: PathBuf) -> Result<RunFileConfig> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                MvError::config(format!("run config line {}: expected key=value", lineno + 1))
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(RunFileConfig { values, base_dir })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn num(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| MvError::config(format!("bad number for `{key}`: {e}")))
            })
            .transpose()
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.num(key)?.map(|v| v as usize).unwrap_or(default))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.num(key)?.unwrap_or(default))
    }

    fn flag_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("on") | Some("true") | Some("1") => Ok(true),
            Some("off") | Some("false") | Some("0") => Ok(false),
            Some(other) => Err(MvError::config(format!("bad flag for `{key}`: `{other}`"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.base_dir.join(v))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        cfg.t_total = self.usize_or("t_total", cfg.t_total)?;
        cfg.t_rep = self.usize_or("t_rep", cfg.t_rep)?;
        cfg.t_comp = self.usize_or("t_comp", cfg.t_comp)?;
        cfg.anchor_index = self.usize_or("anchor_index", cfg.anchor_index)?;
        cfg.zeta = self.f64_or("zeta", cfg.zeta)?;
        cfg.grid_search = self.flag_or("grid_search", cfg.grid_search)?;
        cfg.grid_search_every_step =
            self.flag_or("grid_search_every_step", cfg.grid_search_every_step)?;
        cfg.seed = self.usize_or("seed", cfg.seed as usize)? as u64;
        cfg.completion_seed = self.num("completion_seed")?.map(|v| v as u64);
        if let Some(name) = self.get("denoiser") {
            cfg.denoiser_name = name.to_string();
        }
        cfg.schedule.beta_start = self.f64_or("beta_start", cfg.schedule.beta_start)?;
        cfg.schedule.beta_end = self.f64_or("beta_end", cfg.schedule.beta_end)?;
        cfg.schedule.train_steps = self.usize_or("train_steps", cfg.schedule.train_steps)?;
        cfg.latent_height = self.usize_or("latent_height", cfg.latent_height)?;
        cfg.latent_width = self.usize_or("latent_width", cfg.latent_width)?;
        cfg.latent_channels = self.usize_or("latent_channels", cfg.latent_channels)?;
        cfg.d_med = self.num("d_med")?;
        cfg.field.near = self.f64_or("near", cfg.field.near)?;
        cfg.field.far = self.f64_or("far", cfg.field.far)?;
        cfg.field.samples_per_ray = self.usize_or("samples_per_ray", cfg.field.samples_per_ray)?;
        Ok(cfg)
    }

    pub fn scene(&self) -> Result<SceneSpec> {
        let path = self
            .path("scene")
            .ok_or_else(|| MvError::config("run config: missing `scene` path".to_string()))?;
        SceneSpec::from_config_str(&std::fs::read_to_string(path)?)
    }

    /// Assembles everything an inference run needs.
    pub fn assemble(&self) -> Result<AssembledRun> {
        let cfg = self.pipeline_config()?;
        let scene = self.scene()?;
        let cams = match self.path("trajectory") {
            Some(p) => crate::camera::read_trajectory(&p)?,
            None => scene.cameras()?,
        };

        let cond_dim = self.usize_or("cond_dim", 8)?;
        let cond = Conditioning::new(vec![0.0; cond_dim], cams.clone())?;

        let provider: Box<dyn DepthProvider> = match self.get("depth").unwrap_or("scene") {
            "scene" => Box::new(SceneDepthProvider { scene: scene.clone() }),
            "scaled" => Box::new(ScaledSceneDepthProvider {
                scene: scene.clone(),
                scale: self.f64_or("depth_scale", 1.0)?,
                offset: self.f64_or("depth_offset", 0.0)?,
            }),
            other => {
                return Err(MvError::config(format!("unknown depth provider `{other}`")));
            }
        };

        let refs = self.path("refs").map(|p| ReferenceSet::load_dir(&p)).transpose()?;
        let field_fn: Option<Box<dyn FieldFunction>> = match &refs {
            Some(refs) => Some(self.field_head(&cfg, refs)?),
            None => None,
        };

        let denoiser = self.denoiser(&cfg, &scene, &cams, refs.as_ref(), field_fn.as_deref())?;
        Ok(AssembledRun { cfg, cond, scene, provider, refs, field_fn, denoiser })
    }

    fn field_head(&self, cfg: &PipelineConfig, refs: &ReferenceSet) -> Result<Box<dyn FieldFunction>> {
        let c_in = refs.feature_channels();
        Ok(match self.get("field_head").unwrap_or("slab") {
            "slab" => Box::new(OpaqueSlabField {
                plane_z: self.f64_or("slab_z", 2.0)?,
                half_thickness: self.f64_or("slab_half_thickness", 0.2)?,
            }),
            "uniform" => Box::new(UniformField { sigma: self.f64_or("uniform_sigma", 1.0)? }),
            "mlp" => {
                let hidden = self.usize_or("field_hidden", 8)?;
                match self.path("field_weights") {
                    Some(p) => Box::new(MlpField::from_fgrid_file(c_in, hidden, c_in, &p)?),
                    None => Box::new(MlpField::seeded(c_in, hidden, c_in, cfg.seed)),
                }
            }
            other => {
                return Err(MvError::config(format!("unknown field head `{other}`")));
            }
        })
    }

    fn denoiser(
        &self,
        cfg: &PipelineConfig,
        scene: &SceneSpec,
        cams: &[crate::camera::CameraPose],
        refs: Option<&ReferenceSet>,
        field_fn: Option<&dyn FieldFunction>,
    ) -> Result<Box<dyn Denoiser>> {
        let schedule = DiffusionSchedule::new(cfg.schedule, cfg.t_total)?;
        Ok(match cfg.denoiser_name.as_str() {
            "oracle" => {
                let frames = cams
                    .iter()
                    .map(|cam| {
                        let (feat, _) =
                            render_ground_truth(scene, cam, cfg.latent_height, cfg.latent_width);
                        encode_rgb(&feat, cfg.latent_channels)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let targets = LatentVideo::new(frames, cams.to_vec())?;
                Box::new(OracleDenoiser::new(targets, schedule))
            }
            "zero" => Box::new(ZeroDenoiser::new(schedule)),
            "gaussian" => Box::new(GaussianAnalyticDenoiser::new(
                self.f64_or("gaussian_mu", 0.0)?,
                self.f64_or("gaussian_sigma", 1.0)?,
                schedule,
            )?),
            "toynet" => {
                // pose-aligned reference features per frame, when available
                let xy = match (refs, field_fn) {
                    (Some(refs), Some(field_fn)) => {
                        let mut maps = Vec::with_capacity(cams.len());
                        for cam in cams {
                            let (map, _alpha) = render_feature_map(
                                refs,
                                cam,
                                field_fn,
                                cfg.latent_height,
                                cfg.latent_width,
                                &cfg.field,
                            )?;
                            maps.push(pad_channels(&map, cfg.latent_channels)?);
                        }
                        Some(maps)
                    }
                    _ => None,
                };
                Box::new(ToyNetDenoiser::new(
                    schedule,
                    cfg.latent_channels,
                    self.usize_or("cond_dim", 8)?,
                    self.usize_or("toynet_field", 4)?,
                    self.usize_or("toynet_seed", 7)? as u64,
                    xy,
                )?)
            }
            other => {
                return Err(MvError::config(format!(
                    "unknown denoiser `{other}` (expected oracle|zero|gaussian|toynet)"
                )))
            }
        })
    }
}

fn pad_channels(grid: &FeatureGrid, channels: usize) -> Result<FeatureGrid> {
    if grid.channels() == channels {
        return Ok(grid.clone());
    }
    let (h, w, c) = grid.shape();
    let mut out = FeatureGrid::zeros(h, w, channels);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c.min(channels) {
                out.set(r, col, ch, grid.get(r, col, ch));
            }
        }
    }
    Ok(out)
}

/// Everything `run_inference` needs, built from one config file.
pub struct AssembledRun {
    pub cfg: PipelineConfig,
    pub cond: Conditioning,
    pub scene: SceneSpec,
    pub provider: Box<dyn DepthProvider>,
    pub refs: Option<ReferenceSet>,
    pub field_fn: Option<Box<dyn FieldFunction>>,
    pub denoiser: Box<dyn Denoiser>,
}

impl AssembledRun {
    pub fn field_ctx(&self) -> Option<FieldContext<'_>> {
        match (&self.refs, &self.field_fn) {
            (Some(refs), Some(field_fn)) => {
                Some(FieldContext { refs, field_fn: field_fn.as_ref() })
            }
            _ => None,
        }
    }
}
