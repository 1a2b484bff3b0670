//! Per-video inference results and their on-disk form.
//!
//! `result.json`:
//!
//! ```text
//! { "schema_version": 1, "video": str, "task": "vis"|"vps"|"vos"|"pet",
//!   "height": H, "width": W, "num_frames": T,
//!   "tracks": [ { "id": u32, "class_id": u32|null, "score": f64,
//!                 "masks": [ RLE per frame ] } ],
//!   "stuff":  [ { "class_id": u32, "masks": [ RLE per frame ] } ] }
//! ```
//!
//! RLE is `{ "size": [H, W], "counts": [..] }`: uncompressed run lengths over
//! the row-major pixel order, alternating zeros and ones, starting with a
//! (possibly empty) run of zeros.
//!
//! Cue file for VOS/PET (`cues.json`):
//!
//! ```text
//! { "schema_version": 1, "video": str, "task": "vos"|"pet",
//!   "objects": [ { "id": u32, "frame": usize, "mask": RLE }
//!              | { "id": u32, "frame": usize, "point": [y, x] } ] }
//! ```
//!
//! Optional `panoptic/00000.png`: 16-bit segment ids, things
//! `THING_SEGMENT_BASE + id`, stuff `1 + class_id`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::inference::ObjectPrompt;
use crate::synthgen::{ObjectCue, PanopticFrame, SegmentInfo, THING_SEGMENT_BASE};
use crate::types::{Mask, Task};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &v in &mask.data {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            size: [mask.height, mask.width],
            counts,
        }
    }

    pub fn decode(&self) -> Result<Mask> {
        let [h, w] = self.size;
        let total: usize = self.counts.iter().sum();
        if total != h * w {
            bail!(InvalidInput, "RLE covers {total} pixels, mask has {}", h * w);
        }
        let mut data = Vec::with_capacity(h * w);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, c));
        }
        Ok(Mask {
            height: h,
            width: w,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub id: u32,
    /// Absent for class-agnostic tasks.
    pub class_id: Option<u32>,
    pub score: f64,
    /// One mask per video frame.
    pub masks: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StuffResult {
    pub class_id: u32,
    pub masks: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoResult {
    pub video: String,
    pub task: Task,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub tracks: Vec<TrackResult>,
    pub stuff: Vec<StuffResult>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    id: u32,
    class_id: Option<u32>,
    score: f64,
    masks: Vec<Rle>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StuffRecord {
    class_id: u32,
    masks: Vec<Rle>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultFile {
    schema_version: u32,
    video: String,
    task: Task,
    height: usize,
    width: usize,
    num_frames: usize,
    tracks: Vec<TrackRecord>,
    #[serde(default)]
    stuff: Vec<StuffRecord>,
}

fn decode_all(masks: &[Rle], r: &ResultFile) -> Result<Vec<Mask>> {
    if masks.len() != r.num_frames {
        bail!(InvalidInput, "{} masks for {} frames", masks.len(), r.num_frames);
    }
    masks
        .iter()
        .map(|m| {
            if m.size != [r.height, r.width] {
                bail!(Shape, "mask size {:?} differs from video {}x{}", m.size, r.height, r.width);
            }
            m.decode()
        })
        .collect()
}

impl VideoResult {
    /// Checks the structural contract: one mask per frame of the video
    /// size, unique increasing ids, disjoint masks within a frame.
    pub fn validate(&self) -> Result<()> {
        let shape_ok = |m: &[Mask]| m.len() == self.num_frames && m.iter().all(|x| (x.height, x.width) == (self.height, self.width));
        if !self.tracks.iter().all(|t| shape_ok(&t.masks)) || !self.stuff.iter().all(|s| shape_ok(&s.masks)) {
            bail!(Shape, "result masks do not match {} frames of {}x{}", self.num_frames, self.height, self.width);
        }
        if self.tracks.windows(2).any(|w| w[0].id >= w[1].id) {
            bail!(InvalidInput, "track ids must be unique and increasing");
        }
        for f in 0..self.num_frames {
            let mut owner = vec![false; self.height * self.width];
            let all = self.tracks.iter().map(|t| &t.masks[f]).chain(self.stuff.iter().map(|s| &s.masks[f]));
            for m in all {
                for (o, &v) in owner.iter_mut().zip(&m.data) {
                    if v && *o {
                        bail!(InvalidInput, "overlapping masks in frame {f}");
                    }
                    *o |= v;
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.to_file()).map_err(|e| Error::json("result.json", e))
    }

    fn to_file(&self) -> ResultFile {
        ResultFile {
            schema_version: RESULT_SCHEMA_VERSION,
            video: self.video.clone(),
            task: self.task,
            height: self.height,
            width: self.width,
            num_frames: self.num_frames,
            tracks: self
                .tracks
                .iter()
                .map(|t| TrackRecord {
                    id: t.id,
                    class_id: t.class_id,
                    score: t.score,
                    masks: t.masks.iter().map(Rle::encode).collect(),
                })
                .collect(),
            stuff: self
                .stuff
                .iter()
                .map(|s| StuffRecord {
                    class_id: s.class_id,
                    masks: s.masks.iter().map(Rle::encode).collect(),
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ResultFile = serde_json::from_str(text).map_err(|e| Error::json("result.json", e))?;
        Self::from_file(r)
    }

    fn from_file(r: ResultFile) -> Result<Self> {
        if r.schema_version != RESULT_SCHEMA_VERSION {
            bail!(InvalidInput, "unsupported result schema version {}", r.schema_version);
        }
        let tracks = r
            .tracks
            .iter()
            .map(|t| {
                Ok(TrackResult {
                    id: t.id,
                    class_id: t.class_id,
                    score: t.score,
                    masks: decode_all(&t.masks, &r)?,
                })
            })
            .collect::<Result<_>>()?;
        let stuff = r
            .stuff
            .iter()
            .map(|s| {
                Ok(StuffResult {
                    class_id: s.class_id,
                    masks: decode_all(&s.masks, &r)?,
                })
            })
            .collect::<Result<_>>()?;
        let out = Self {
            video: r.video,
            task: r.task,
            height: r.height,
            width: r.width,
            num_frames: r.num_frames,
            tracks,
            stuff,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { reason, .. } => Error::json(path, reason),
            other => other,
        })
    }

    /// Panoptic frames from thing tracks and stuff regions; pixels covered
    /// by neither keep segment id 0.
    pub fn panoptic(&self) -> Result<Vec<PanopticFrame>> {
        let mut frames = Vec::with_capacity(self.num_frames);
        for f in 0..self.num_frames {
            let mut map = vec![0u16; self.height * self.width];
            let mut segments = BTreeMap::new();
            for t in &self.tracks {
                let id = THING_SEGMENT_BASE as u32 + t.id;
                let Ok(id) = u16::try_from(id) else {
                    bail!(InvalidInput, "track id {} does not fit a 16-bit segment id", t.id);
                };
                if paint(&mut map, &t.masks[f], id) {
                    segments.insert(
                        id,
                        SegmentInfo {
                            class_id: t.class_id.unwrap_or(0),
                            is_thing: true,
                            track_id: Some(t.id),
                        },
                    );
                }
            }
            for s in &self.stuff {
                if s.class_id + 1 >= THING_SEGMENT_BASE as u32 {
                    bail!(InvalidInput, "stuff class {} collides with thing segment ids", s.class_id);
                }
                let id = 1 + s.class_id as u16;
                if paint(&mut map, &s.masks[f], id) {
                    segments.insert(
                        id,
                        SegmentInfo {
                            class_id: s.class_id,
                            is_thing: false,
                            track_id: None,
                        },
                    );
                }
            }
            frames.push(PanopticFrame {
                height: self.height,
                width: self.width,
                segment_map: map,
                segments,
            });
        }
        Ok(frames)
    }

    /// Every frame is panoptic-complete.
    pub fn is_panoptic_complete(&self) -> bool {
        self.panoptic().map(|p| p.iter().all(|f| f.validate().is_ok())).unwrap_or(false)
    }

    /// Writes `panoptic/00000.png ...` under `dir`.
    pub fn save_panoptic_png(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join("panoptic");
        std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        for (f, frame) in self.panoptic()?.iter().enumerate() {
            crate::synthgen::save_u16(&pdir.join(crate::synthgen::frame_file(f)), self.width, self.height, &frame.segment_map)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CueRecord {
    id: u32,
    frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Rle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    point: Option<[usize; 2]>,
}

/// Object prompts for one video, as read from or written to `cues.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct CueFile {
    pub video: String,
    pub task: Task,
    pub objects: Vec<ObjectPrompt>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CueFileRecord {
    schema_version: u32,
    video: String,
    task: Task,
    objects: Vec<CueRecord>,
}

impl CueFile {
    pub fn to_json(&self) -> Result<String> {
        let rec = CueFileRecord {
            schema_version: RESULT_SCHEMA_VERSION,
            video: self.video.clone(),
            task: self.task,
            objects: self
                .objects
                .iter()
                .map(|o| {
                    let (mask, point) = match &o.cue {
                        ObjectCue::Mask(m) => (Some(Rle::encode(m)), None),
                        ObjectCue::Point(y, x) => (None, Some([*y, *x])),
                    };
                    CueRecord {
                        id: o.id,
                        frame: o.frame,
                        mask,
                        point,
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&rec).map_err(|e| Error::json("cues.json", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: CueFileRecord = serde_json::from_str(text).map_err(|e| Error::json("cues.json", e))?;
        if r.schema_version != RESULT_SCHEMA_VERSION {
            bail!(InvalidInput, "unsupported cue schema version {}", r.schema_version);
        }
        if !r.task.is_object_guided() {
            bail!(TaskMismatch, "cue files are for vos or pet, not {}", r.task);
        }
        let objects = r
            .objects
            .into_iter()
            .map(|o| {
                let cue = match (o.mask, o.point) {
                    (Some(m), None) => ObjectCue::Mask(m.decode()?),
                    (None, Some([y, x])) => ObjectCue::Point(y, x),
                    _ => bail!(InvalidInput, "object {} needs exactly one of mask or point", o.id),
                };
                Ok(ObjectPrompt { id: o.id, frame: o.frame, cue })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            video: r.video,
            task: r.task,
            objects,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json { reason, .. } => Error::json(path, reason),
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixedFile {
    schema_version: u32,
    video: String,
    task: String,
    groups: Vec<ResultFile>,
}

/// Writes one result per pass group. A single group uses the plain layout;
/// several use `{ "schema_version", "video", "task": "mixed", "groups":
/// [ <plain layout>, .. ] }`.
pub fn results_to_json(results: &[VideoResult]) -> Result<String> {
    match results {
        [] => bail!(InvalidInput, "no results to write"),
        [one] => one.to_json(),
        many => {
            let file = MixedFile {
                schema_version: RESULT_SCHEMA_VERSION,
                video: many[0].video.clone(),
                task: "mixed".into(),
                groups: many.iter().map(VideoResult::to_file).collect(),
            };
            serde_json::to_string_pretty(&file).map_err(|e| Error::json("result.json", e))
        }
    }
}

/// Reads either layout written by [`results_to_json`].
pub fn results_from_json(text: &str) -> Result<Vec<VideoResult>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::json("result.json", e))?;
    if value.get("task").and_then(|t| t.as_str()) != Some("mixed") {
        return Ok(vec![VideoResult::from_json(text)?]);
    }
    let m: MixedFile = serde_json::from_value(value).map_err(|e| Error::json("result.json", e))?;
    if m.schema_version != RESULT_SCHEMA_VERSION {
        bail!(InvalidInput, "unsupported result schema version {}", m.schema_version);
    }
    if m.groups.is_empty() || m.groups.iter().any(|g| g.video != m.video) {
        bail!(InvalidInput, "mixed result needs groups of video {}", m.video);
    }
    m.groups.into_iter().map(VideoResult::from_file).collect()
}

pub fn save_results(path: &Path, results: &[VideoResult]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, results_to_json(results)?).map_err(|e| Error::io(path, e))
}

pub fn load_results(path: &Path) -> Result<Vec<VideoResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    results_from_json(&text).map_err(|e| match e {
        Error::Json { reason, .. } => Error::json(path, reason),
        other => other,
    })
}

fn paint(map: &mut [u16], mask: &Mask, id: u16) -> bool {
    let mut any = false;
    for (m, &v) in map.iter_mut().zip(&mask.data) {
        if v {
            *m = id;
            any = true;
        }
    }
    any
}
