//! On-disk layout of datasets and run directories, and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use mmst::data::cache::{read_split, sha256_hex, split_digest};
use mmst::data::split::{Split, SplitSpec};
use mmst::data::synth::SceneSpec;
use mmst::data::Example;
use mmst::model::{ModelConfig, Mmst};
use mmst::tensor::checkpoint;
use mmst::training::TrainConfig;

use crate::error::{CliError, CliResult};

pub const DATA_MANIFEST: &str = "dataset.json";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Creates `dir`, refusing to reuse a nonempty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if nonempty && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Written by `gen-data` next to the scene files and example cache.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub scenes: usize,
    pub scene_spec: SceneSpec,
    /// Horizon and raster settings the cached examples were built with.
    pub model: ModelConfig,
    pub split_spec: SplitSpec,
    pub split: Split,
    pub examples: BTreeMap<String, usize>,
    pub skipped_tracks: BTreeMap<String, usize>,
    /// SHA-256 of each split's cache index.
    pub digests: BTreeMap<String, String>,
    pub created_unix: u64,
}

pub fn scene_path(data: &Path, index: usize) -> PathBuf {
    data.join("scenes").join(format!("scene_{index:04}.json"))
}

pub fn cache_dir(data: &Path, split: &str) -> PathBuf {
    data.join("cache").join(split)
}

pub fn read_data_manifest(data: &Path) -> CliResult<DataManifest> {
    let path = data.join(DATA_MANIFEST);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{} is not a dataset directory (no {DATA_MANIFEST}); run gen-data first",
            data.display()
        )));
    }
    read_json(&path)
}

/// Loads one split, verifying its digest against the dataset manifest and
/// every blob against the cache index.
pub fn load_split(data: &Path, manifest: &DataManifest, split: &str) -> CliResult<Vec<Example>> {
    if !SPLITS.contains(&split) {
        return Err(CliError::Usage(format!("unknown split `{split}`; expected train, val or test")));
    }
    let dir = cache_dir(data, split);
    let digest = split_digest(&dir)?;
    if manifest.digests.get(split) != Some(&digest) {
        return Err(CliError::Data(format!(
            "cache index of split `{split}` does not match the dataset manifest"
        )));
    }
    Ok(read_split(&dir)?)
}

/// The examples must have been built with the model's horizons and rasters.
pub fn check_compatible(data: &ModelConfig, model: &ModelConfig) -> CliResult<()> {
    let same = data.rate_hz == model.rate_hz
        && data.history_s == model.history_s
        && data.future_s == model.future_s
        && data.raster == model.raster;
    if same {
        Ok(())
    } else {
        Err(CliError::Usage(
            "model rate, horizons or raster settings differ from those the dataset was built with".into(),
        ))
    }
}

/// Content hash over a resolved config and the dataset digests.
pub fn input_hash(config: &serde_json::Value, data: &DataManifest) -> String {
    let mut text = config.to_string();
    for (split, digest) in &data.digests {
        text.push_str(&format!("\n{split}:{digest}"));
    }
    sha256_hex(text.as_bytes())
}

/// Written first into every run directory and completed at the end.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub data: PathBuf,
    pub input_hash: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, data: &Path, hash: String) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seed,
            data: data.to_path_buf(),
            input_hash: hash,
            started_unix: now_unix(),
            finished_unix: None,
        }
    }
}

/// Saves parameters plus a sidecar `<name>.json` holding the training
/// config needed to rebuild the model.
pub fn save_checkpoint(path: &Path, model: &Mmst<f32>, cfg: &TrainConfig) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    checkpoint::save_store(path, &model.store)?;
    write_json(&path.with_extension("json"), cfg)
}

pub fn load_checkpoint(path: &Path) -> CliResult<(Mmst<f32>, TrainConfig)> {
    let side = path.with_extension("json");
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    let text = fs::read_to_string(&side).map_err(|e| io_err(&side, e))?;
    let cfg = TrainConfig::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", side.display())))?;
    let mut model = Mmst::<f32>::new(cfg.model.clone(), cfg.seed)?;
    checkpoint::load_store(path, &mut model.store)?;
    Ok((model, cfg))
}
