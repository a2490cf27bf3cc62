//! Checkpoints: a JSON manifest next to a blob of little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GilaError, Result};
use crate::numerics::{ParamStore, Real, Tensor};

use super::config::RunConfig;
use super::model::GilaModel;

pub const CKPT_FORMAT: &str = "gila-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub step: u64,
    pub params: Vec<ParamEntry>,
    pub config: RunConfig,
}

/// `(manifest, blob)` paths for a checkpoint given as a stem or either file.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".bin"))
}

/// Manifest and blob bytes for every parameter, including running
/// statistics, in store order.
pub fn encode<R: Real>(cfg: &RunConfig, step: u64, store: &ParamStore<R>) -> Result<(Manifest, Vec<u8>)> {
    let mut params = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    for p in store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: blob.len(),
        });
        for &x in p.tensor.data() {
            blob.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CKPT_FORMAT.into(),
        config_hash: cfg.hash()?,
        step,
        params,
        config: cfg.clone(),
    };
    Ok((manifest, blob))
}

pub fn save<R: Real>(path: &Path, cfg: &RunConfig, step: u64, store: &ParamStore<R>) -> Result<()> {
    let (manifest, blob) = encode(cfg, step, store)?;
    let (mpath, bpath) = checkpoint_paths(path);
    if let Some(dir) = mpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(&bpath, blob)?;
    Ok(())
}

pub fn save_model<R: Real>(path: &Path, model: &GilaModel<R>) -> Result<()> {
    save(path, &model.cfg, model.step, &model.store)
}

/// Decoded checkpoint: the manifest and one tensor per entry.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

/// Checks the manifest against the blob and splits it into tensors.
pub fn decode(manifest: Manifest, blob: &[u8]) -> Result<Loaded> {
    if manifest.format != CKPT_FORMAT {
        return Err(GilaError::Checkpoint(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    let mut expected = 0usize;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        if e.offset != expected {
            return Err(GilaError::Checkpoint(format!(
                "parameter {} has offset {} but the previous entry ends at {expected}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > blob.len() {
            return Err(GilaError::Checkpoint(format!(
                "parameter {} needs bytes {}..{end} but the blob has {} (truncated?)",
                e.name,
                e.offset,
                blob.len()
            )));
        }
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t =
            Tensor::new(&e.shape, data).map_err(|err| GilaError::Checkpoint(format!("parameter {}: {err}", e.name)))?;
        tensors.push(t);
        expected = end;
    }
    if expected != blob.len() {
        return Err(GilaError::Checkpoint(format!(
            "blob has {} bytes but the manifest accounts for {expected}",
            blob.len()
        )));
    }
    Ok(Loaded { manifest, tensors })
}

pub fn read(path: &Path) -> Result<Loaded> {
    let (mpath, bpath) = checkpoint_paths(path);
    let text = fs::read_to_string(&mpath)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| GilaError::Checkpoint(format!("bad manifest {}: {e}", mpath.display())))?;
    let blob = fs::read(&bpath)?;
    decode(manifest, &blob)
}

/// Copies the checkpoint tensors into `store`, matching by name.
pub fn restore<R: Real>(loaded: &Loaded, store: &mut ParamStore<R>) -> Result<()> {
    if loaded.manifest.params.len() != store.len() {
        return Err(GilaError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.manifest.params.len(),
            store.len()
        )));
    }
    for (e, t) in loaded.manifest.params.iter().zip(&loaded.tensors) {
        let id = store
            .id(&e.name)
            .ok_or_else(|| GilaError::Checkpoint(format!("model has no parameter {}", e.name)))?;
        let have = store.get(id).tensor.shape().to_vec();
        if have != e.shape {
            return Err(GilaError::Checkpoint(format!(
                "parameter {}: checkpoint shape {:?} vs model shape {have:?}",
                e.name, e.shape
            )));
        }
        store.set_value(id, t.cast())?;
    }
    Ok(())
}

/// Rebuilds the model described by the checkpoint and loads its weights.
///
/// A manifest whose stored hash does not match its config, or a config
/// differing from `expected`, is refused unless `force` is set.
pub fn load_model<R: Real>(path: &Path, expected: Option<&RunConfig>, force: bool) -> Result<GilaModel<R>> {
    let loaded = read(path)?;
    let actual = loaded.manifest.config.hash()?;
    let mut mismatch = None;
    if actual != loaded.manifest.config_hash {
        mismatch = Some(format!(
            "manifest hash {} does not match its config ({actual})",
            loaded.manifest.config_hash
        ));
    }
    if let Some(cfg) = expected {
        let want = cfg.hash()?;
        if want != loaded.manifest.config_hash {
            mismatch = Some(format!(
                "checkpoint config hash {} differs from the requested config ({want})",
                loaded.manifest.config_hash
            ));
        }
    }
    if let Some(m) = mismatch {
        if !force {
            return Err(GilaError::Checkpoint(format!("{m}; pass --force to load anyway")));
        }
        log::warn!("{m}; loading anyway");
    }
    let cfg = expected.cloned().unwrap_or_else(|| loaded.manifest.config.clone());
    let mut model = GilaModel::new(cfg)?;
    restore(&loaded, &mut model.store)?;
    model.step = loaded.manifest.step;
    Ok(model)
}
