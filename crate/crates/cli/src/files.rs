//! Bundle files and their sidecars.
//!
//! A bundle `F` may be accompanied by `F.config` (model shape, `key = value`
//! lines) and `F.masks` (a bundle of 0/1 matrices for pruned entries).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ladabert::bundle_io::{load_bundle, save_bundle};
use ladabert::compress::{masks_from_bundle, masks_to_bundle};
use ladabert::model::{MaskSet, Model, ModelConfig};
use ladabert::ParamBundle;

pub fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

pub fn read_bundle(path: &Path) -> Result<(ParamBundle, MaskSet)> {
    let bundle = load_bundle(path).with_context(|| format!("reading bundle {}", path.display()))?;
    let mask_path = sidecar(path, "masks");
    let masks = if mask_path.exists() {
        let stored = load_bundle(&mask_path).with_context(|| format!("reading masks {}", mask_path.display()))?;
        masks_from_bundle(&stored, &bundle).with_context(|| format!("reading masks {}", mask_path.display()))?
    } else {
        MaskSet::new()
    };
    Ok((bundle, masks))
}

pub fn write_bundle(path: &Path, bundle: &ParamBundle, masks: &MaskSet) -> Result<()> {
    save_bundle(bundle, path).with_context(|| format!("writing bundle {}", path.display()))?;
    let mask_path = sidecar(path, "masks");
    if masks.is_empty() {
        if mask_path.exists() {
            fs::remove_file(&mask_path).with_context(|| format!("removing stale {}", mask_path.display()))?;
        }
    } else {
        save_bundle(&masks_to_bundle(masks, bundle)?, &mask_path)
            .with_context(|| format!("writing masks {}", mask_path.display()))?;
    }
    Ok(())
}

pub fn read_config(bundle_path: &Path) -> Result<ModelConfig> {
    let path = sidecar(bundle_path, "config");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading model config {} (needed to rebuild the model)", path.display()))?;
    text.parse().with_context(|| format!("parsing {}", path.display()))
}

pub fn read_model(path: &Path) -> Result<Model> {
    let config = read_config(path)?;
    let (bundle, masks) = read_bundle(path)?;
    Model::from_bundle_with_masks(config, &bundle, Some(&masks)).with_context(|| format!("loading model {}", path.display()))
}

pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    let (bundle, masks) = model.to_bundle_with_masks();
    write_bundle(path, &bundle, &masks)?;
    let config_path = sidecar(path, "config");
    fs::write(&config_path, model.config.to_text()).with_context(|| format!("writing {}", config_path.display()))
}

pub fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
