use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use gaitfuse_core::config::RunConfig;
use gaitfuse_core::Error;

use crate::args::Common;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// Config file (or `base`) with command-line overrides applied.
pub fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => base,
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = common.preset {
        cfg.model.preset = p.into();
    }
    if let Some(f) = common.fusion {
        cfg.model.fusion = f.into();
    }
    if let Some(f) = common.features {
        cfg.model.features = f.into();
    }
    if let Some(v) = common.variant {
        cfg.model.variant = v.into();
    }
    if let Some(fps) = common.fps {
        cfg.fps = fps;
        cfg.synth.fps = fps;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Create the output directory and record the configuration in it.
pub fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = toml::to_string(cfg).context("serializing the resolved config")?;
    fs::write(out.join(RESOLVED_CONFIG), text)?;
    Ok(())
}
