//! `.afmt` feature files: `"AFMT"`, u32 version, u32 T, u32 D, then T * D
//! little-endian f32 values, row-major. Timing metadata lives in a
//! `manifest.json` next to the files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use af_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{DataError, FeatureSequence};

pub const MAGIC: &[u8; 4] = b"AFMT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode(features: &Tensor<f32>) -> Vec<u8> {
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * features.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(DataError::Version(version));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(DataError::Empty);
    }
    let expected = HEADER_LEN + 4 * t * d;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinite { index });
    }
    Ok(Tensor::from_vec(&[t, d], data)?)
}

pub fn write(path: &Path, features: &Tensor<f32>) -> Result<(), DataError> {
    fs::write(path, encode(features)).map_err(|e| DataError::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes)
}

/// Timing metadata of one feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub fps: f64,
    pub feature_stride: f64,
    pub clip_window: f64,
    /// Feature file name relative to the manifest directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: BTreeMap<String, ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Json(path, e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| DataError::io(&path, e))
    }

    pub fn path_of(&self, dir: &Path, video_id: &str) -> Result<PathBuf, DataError> {
        let entry = self
            .videos
            .get(video_id)
            .ok_or_else(|| DataError::MissingVideo(video_id.to_string()))?;
        Ok(dir.join(&entry.file))
    }
}

/// Loads one video's features and metadata from a manifest directory.
pub fn load_features(dir: &Path, manifest: &Manifest, video_id: &str) -> Result<FeatureSequence, DataError> {
    let entry = manifest
        .videos
        .get(video_id)
        .ok_or_else(|| DataError::MissingVideo(video_id.to_string()))?;
    let features = read(&dir.join(&entry.file))?;
    Ok(FeatureSequence {
        video_id: video_id.to_string(),
        features,
        fps: entry.fps,
        feature_stride: entry.feature_stride,
        clip_window: entry.clip_window,
    })
}

/// Writes `seq` as `<video_id>.afmt` under `dir` and records it in `manifest`.
pub fn save_features(dir: &Path, manifest: &mut Manifest, seq: &FeatureSequence) -> Result<(), DataError> {
    let file = format!("{}.afmt", seq.video_id);
    write(&dir.join(&file), &seq.features)?;
    manifest.videos.insert(
        seq.video_id.clone(),
        ManifestEntry {
            fps: seq.fps,
            feature_stride: seq.feature_stride,
            clip_window: seq.clip_window,
            file,
        },
    );
    Ok(())
}
