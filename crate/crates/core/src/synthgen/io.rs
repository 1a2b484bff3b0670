//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<video>/frames/00000.png      RGB8
//! <dir>/<video>/segments/00000.png    16-bit grayscale segment ids
//! <dir>/<video>/annotations.json      per-frame segment tables
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::{PanopticFrame, SegmentInfo};
use crate::error::{Error, Result};
use crate::types::VideoClip;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub name: String,
    pub clip: VideoClip,
    pub annotations: Vec<PanopticFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<ClassInfo>,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn thing_classes(&self) -> Vec<u32> {
        self.classes.iter().filter(|c| c.is_thing).map(|c| c.id).collect()
    }

    pub fn stuff_classes(&self) -> Vec<u32> {
        self.classes.iter().filter(|c| !c.is_thing).map(|c| c.id).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    classes: Vec<ClassInfo>,
    videos: Vec<ManifestVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestVideo {
    name: String,
    num_frames: usize,
    height: usize,
    width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentRecord {
    id: u16,
    #[serde(flatten)]
    info: SegmentInfo,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotations {
    frames: Vec<Vec<SegmentRecord>>,
}

pub fn frame_file(index: usize) -> String {
    format!("{index:05}.png")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn save_rgb(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::Image {
            path: path.into(),
            reason: "buffer size mismatch".into(),
        })?;
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        reason: e.to_string(),
    })
}

pub(crate) fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let img = img.into_rgb8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

pub(crate) fn save_u16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::Image {
            path: path.into(),
            reason: "buffer size mismatch".into(),
        })?;
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        reason: e.to_string(),
    })
}

pub(crate) fn load_u16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let img = img.into_luma16();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// Writes `dataset` under `dir` (created if missing).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for video in &dataset.videos {
        let vdir = dir.join(&video.name);
        let fdir = vdir.join("frames");
        let sdir = vdir.join("segments");
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let (h, w) = (video.clip.height, video.clip.width);
        for (t, (frame, ann)) in video.clip.frames.iter().zip(&video.annotations).enumerate() {
            save_rgb(&fdir.join(frame_file(t)), w, h, frame)?;
            save_u16(&sdir.join(frame_file(t)), w, h, &ann.segment_map)?;
        }
        let annotations = Annotations {
            frames: video
                .annotations
                .iter()
                .map(|a| {
                    a.segments
                        .iter()
                        .map(|(&id, &info)| SegmentRecord { id, info })
                        .collect()
                })
                .collect(),
        };
        write_json(&vdir.join("annotations.json"), &annotations)?;
    }
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        classes: dataset.classes.clone(),
        videos: dataset
            .videos
            .iter()
            .map(|v| ManifestVideo {
                name: v.name.clone(),
                num_frames: v.clip.num_frames(),
                height: v.clip.height,
                width: v.clip.width,
            })
            .collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn corrupt(path: PathBuf, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path,
        reason: reason.into(),
    }
}

/// Reads a dataset written by [`write_dataset`]. Either the whole dataset
/// loads or an error naming the offending file is returned.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(corrupt(dir.to_path_buf(), "dataset directory does not exist"));
    }
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(corrupt(
            mpath,
            format!("unsupported schema version {}", manifest.schema_version),
        ));
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in &manifest.videos {
        let vdir = dir.join(&mv.name);
        let apath = vdir.join("annotations.json");
        let ann: Annotations = read_json(&apath)?;
        if ann.frames.len() != mv.num_frames {
            return Err(corrupt(
                apath,
                format!("{} annotated frames, manifest says {}", ann.frames.len(), mv.num_frames),
            ));
        }
        let mut frames = Vec::with_capacity(mv.num_frames);
        let mut annotations = Vec::with_capacity(mv.num_frames);
        for (t, records) in ann.frames.into_iter().enumerate() {
            let fpath = vdir.join("frames").join(frame_file(t));
            let (h, w, rgb) = load_rgb(&fpath)?;
            if (h, w) != (mv.height, mv.width) {
                return Err(corrupt(fpath, format!("size {h}x{w} differs from manifest")));
            }
            let spath = vdir.join("segments").join(frame_file(t));
            let (h2, w2, seg) = load_u16(&spath)?;
            if (h2, w2) != (mv.height, mv.width) {
                return Err(corrupt(spath, format!("size {h2}x{w2} differs from manifest")));
            }
            let segments: BTreeMap<u16, SegmentInfo> = records.into_iter().map(|r| (r.id, r.info)).collect();
            let frame = PanopticFrame {
                height: h,
                width: w,
                segment_map: seg,
                segments,
            };
            frame.validate().map_err(|e| corrupt(spath.clone(), e.to_string()))?;
            frames.push(rgb);
            annotations.push(frame);
        }
        videos.push(Video {
            name: mv.name.clone(),
            clip: VideoClip {
                height: mv.height,
                width: mv.width,
                frames,
            },
            annotations,
        });
    }
    Ok(Dataset {
        classes: manifest.classes,
        videos,
    })
}
