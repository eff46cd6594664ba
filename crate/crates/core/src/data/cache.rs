//! On-disk example cache: one directory per split holding a tensor blob per
//! example (checkpoint format) and an `index.csv` with SHA-256 digests.
//!
//! Blobs store `f32`, so cached positions carry single-precision rounding.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::example::Example;
use crate::error::{Error, Result};
use crate::geometry::{MotionState, Pose};
use crate::tensor::checkpoint;
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub id: String,
    pub scene: usize,
    pub track: u32,
    pub anchor: usize,
    pub file: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn points_tensor(points: &[[f64; 2]]) -> Tensor<f64> {
    let flat: Vec<f64> = points.iter().flat_map(|p| [p[0], p[1]]).collect();
    Tensor::new(&[points.len(), 2], flat).expect("2 values per point")
}

fn example_bytes(e: &Example) -> Vec<u8> {
    let states: Vec<f64> = e.states.iter().flat_map(|s| s.to_array()).collect();
    let states = Tensor::new(&[e.states.len(), 3], states).expect("3 values per state");
    let pose = Tensor::new(&[3], vec![e.anchor_pose.x, e.anchor_pose.y, e.anchor_pose.yaw]).expect("3 values");
    let (past, future) = (points_tensor(&e.past), points_tensor(&e.future));
    let global = e.global.cast::<f64>();
    let local = e.local.cast::<f64>();
    checkpoint::to_bytes([
        ("anchor_pose", &pose),
        ("states", &states),
        ("past", &past),
        ("future", &future),
        ("global", &global),
        ("local", &local),
    ])
}

fn example_from_bytes(row: &IndexRow, bytes: &[u8], path: &Path) -> Result<Example> {
    let corrupt = |m: String| Error::Corrupt {
        path: path.to_path_buf(),
        message: m,
    };
    let entries = checkpoint::from_bytes(bytes).map_err(|e| corrupt(e.to_string()))?;
    let get = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| corrupt(format!("missing tensor `{name}`")))
    };
    let f = |t: &Tensor<f32>| t.to_f64_vec();
    let points = |t: &Tensor<f32>| f(t).chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
    let pose = f(get("anchor_pose")?);
    if pose.len() != 3 {
        return Err(corrupt("anchor_pose must hold 3 values".into()));
    }
    let states = f(get("states")?)
        .chunks(3)
        .map(|c| MotionState {
            v: c[0],
            a: c[1],
            yaw_rate: c[2],
        })
        .collect();
    Ok(Example {
        id: row.id.clone(),
        scene: row.scene,
        track: row.track,
        anchor: row.anchor,
        anchor_pose: Pose::new(pose[0], pose[1], pose[2]),
        states,
        past: points(get("past")?),
        future: points(get("future")?),
        global: get("global")?.clone(),
        local: get("local")?.clone(),
    })
}

/// Writes `examples` into `dir` (created if needed) with an index.
pub fn write_split(dir: &Path, examples: &[Example]) -> Result<Vec<IndexRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(examples.len());
    for e in examples {
        let bytes = example_bytes(e);
        let file = format!("{}.bin", e.id);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|err| Error::io(&path, err))?;
        rows.push(IndexRow {
            id: e.id.clone(),
            scene: e.scene,
            track: e.track,
            anchor: e.anchor,
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let index = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&index).map_err(|e| csv_error(&index, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(&index, e))?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRow>> {
    let index = dir.join(INDEX_FILE);
    if !index.exists() {
        return Err(Error::io(
            &index,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing cache index"),
        ));
    }
    let mut r = csv::Reader::from_path(&index).map_err(|e| csv_error(&index, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(&index, e))).collect()
}

/// Reads every example listed in `dir`'s index, verifying digests.
pub fn read_split(dir: &Path) -> Result<Vec<Example>> {
    read_index(dir)?
        .iter()
        .map(|row| {
            let path: PathBuf = dir.join(&row.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let digest = sha256_hex(&bytes);
            if digest != row.sha256 {
                return Err(Error::Corrupt {
                    path,
                    message: format!("sha256 {digest} does not match index {}", row.sha256),
                });
            }
            example_from_bytes(row, &bytes, &path)
        })
        .collect()
}

/// SHA-256 over a split's index file, a digest of the whole split.
pub fn split_digest(dir: &Path) -> Result<String> {
    let index = dir.join(INDEX_FILE);
    let bytes = fs::read(&index).map_err(|e| Error::io(&index, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::example::build_examples;
    use crate::data::synth::{generate_scene, SceneSpec};
    use crate::model::ModelConfig;

    fn examples() -> Vec<Example> {
        let scene = generate_scene(8, 0, &SceneSpec::default()).unwrap();
        build_examples(&[(0, &scene)], &ModelConfig::tiny()).unwrap().0[..4].to_vec()
    }

    #[test]
    fn round_trip_at_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let ex = examples();
        write_split(dir.path(), &ex).unwrap();
        let back = read_split(dir.path()).unwrap();
        assert_eq!(back.len(), ex.len());
        for (a, b) in ex.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.local, b.local);
            assert_eq!(a.global, b.global);
            for (p, q) in a.future.iter().zip(&b.future) {
                assert_eq!(p[0] as f32 as f64, q[0]);
                assert_eq!(p[1] as f32 as f64, q[1]);
            }
            b.validate(&ModelConfig::tiny()).unwrap();
        }
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let rows = write_split(dir.path(), &examples()).unwrap();
        let path = dir.path().join(&rows[2].file);
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        match read_split(dir.path()) {
            Err(Error::Corrupt { path: p, .. }) => assert_eq!(p, path),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_inputs_identical_digest() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_split(a.path(), &examples()).unwrap();
        write_split(b.path(), &examples()).unwrap();
        assert_eq!(split_digest(a.path()).unwrap(), split_digest(b.path()).unwrap());
    }
}
