//! Whole-dataset generation and content hashing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{ClassInfo, Dataset, Video};
use super::scene::{generate_scene, SceneConfig};
use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    /// Template for every video; its `seed` is replaced per video.
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 8,
            scene: SceneConfig::default(),
            seed: 0,
        }
    }
}

/// Videos `video_000, ...`, video `i` generated with seed `seed * 1_000_003 + i`.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    if config.num_videos == 0 {
        bail!(Config, "num_videos must be positive");
    }
    config.scene.validate()?;
    let mut classes: Vec<ClassInfo> = config
        .scene
        .thing_classes
        .iter()
        .map(|&id| ClassInfo {
            id,
            name: format!("thing_{id}"),
            is_thing: true,
        })
        .chain(config.scene.stuff_classes.iter().map(|&id| ClassInfo {
            id,
            name: format!("stuff_{id}"),
            is_thing: false,
        }))
        .collect();
    classes.sort_by_key(|c| c.id);
    let mut videos = Vec::with_capacity(config.num_videos);
    for i in 0..config.num_videos {
        let scene = SceneConfig {
            seed: config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            ..config.scene.clone()
        };
        let (clip, annotations) = generate_scene(&scene)?;
        videos.push(Video {
            name: format!("video_{i:03}"),
            clip,
            annotations,
        });
    }
    Ok(Dataset { classes, videos })
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 over every file of a dataset directory (relative path and
/// bytes, in sorted path order), hex encoded.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).expect("under dir").to_string_lossy().replace('\\', "/");
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
