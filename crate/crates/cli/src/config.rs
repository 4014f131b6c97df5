//! Effective configuration: defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use scene2prompt::describe::Precision;
use scene2prompt::pipeline::PipelineConfig;

use crate::args::{AssembleFlags, Cli, DescribeFlags, EndpointFlags, FeatureFlags, ModeFlags, PruneFlags, RenderFlags};
use crate::Failure;

pub fn load(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let Some(path) = path else { return Ok(PipelineConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

pub fn apply_global(cfg: &mut PipelineConfig, cli: &Cli) {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// The output root from `--out` or the config file.
pub fn output_root(cfg: &mut PipelineConfig, flag: &Option<PathBuf>) -> Result<PathBuf, Failure> {
    set(&mut cfg.paths.output, flag.clone());
    if cfg.paths.output.as_os_str().is_empty() {
        return Err(Failure::Config("no output directory: pass --out or set paths.output".into()));
    }
    Ok(cfg.paths.output.clone())
}

impl PruneFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), Failure> {
        set(&mut cfg.prune.iou_threshold, self.iou);
        set(&mut cfg.prune.vote_weighting, self.vote);
        scene2prompt::pruning::PruneConfig::new(cfg.prune.iou_threshold, cfg.prune.vote_weighting)
            .map_err(|e| Failure::Config(e.to_string()))?;
        Ok(())
    }
}

impl ModeFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.mode, self.mode);
    }
}

impl DescribeFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), Failure> {
        if let Some(p) = self.precision {
            cfg.describe.precision = Precision::new(p).map_err(|e| Failure::Config(e.to_string()))?;
        }
        if self.append_coordinates {
            cfg.describe.append_coordinate_list = true;
        }
        Ok(())
    }
}

impl RenderFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), Failure> {
        set(&mut cfg.render.width, self.width);
        set(&mut cfg.render.height, self.height);
        set(&mut cfg.render.splat_radius, self.splat_radius);
        if cfg.render.width == 0 || cfg.render.height == 0 {
            return Err(Failure::Config("render width and height must be positive".into()));
        }
        if !(cfg.render.splat_radius >= 0.0) {
            return Err(Failure::Config("splat radius must be non-negative".into()));
        }
        Ok(())
    }
}

impl FeatureFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), Failure> {
        set(&mut cfg.features.grid, self.grid);
        set(&mut cfg.features.dim, self.dim);
        if cfg.features.grid == 0 || cfg.features.dim == 0 {
            return Err(Failure::Config("feature grid and dim must be positive".into()));
        }
        Ok(())
    }
}

impl AssembleFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if self.four_view_placeholders {
            cfg.assemble.four_view_placeholders = true;
        }
    }
}

impl EndpointFlags {
    /// Request options always apply; endpoint settings apply when an
    /// endpoint is configured by flag or file.
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), Failure> {
        set(&mut cfg.request.model, self.model.clone());
        set(&mut cfg.request.max_tokens, self.max_tokens);
        set(&mut cfg.request.image_encoding, self.image_encoding.map(Into::into));
        if let Some(url) = &self.endpoint {
            cfg.endpoint.get_or_insert_with(Default::default).base_url = url.clone();
        }
        if let Some(ep) = cfg.endpoint.as_mut() {
            set(&mut ep.timeout_secs, self.timeout);
            set(&mut ep.max_retries, self.max_retries);
            set(&mut ep.parallelism, self.parallelism);
            if self.cache_dir.is_some() {
                ep.cache_dir = self.cache_dir.clone();
            }
            if self.no_cache {
                ep.use_cache = false;
            }
            ep.validate().map_err(|e| Failure::Config(e.to_string()))?;
        }
        Ok(())
    }
}
