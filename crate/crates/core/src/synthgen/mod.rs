//! Synthetic labelled videos, pseudo-videos from stills, and per-task
//! training targets derived from panoptic ground truth.

mod augment;
mod dataset;
mod io;
mod scene;
mod targets;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use augment::{augment_still_to_clip, AugmentConfig};
pub use dataset::{dataset_hash, generate_dataset, SynthConfig};
pub use io::{frame_file, read_dataset, write_dataset, ClassInfo, Dataset, Video, DATASET_SCHEMA_VERSION};
pub use io::{read_json, save_rgb, write_json};
pub(crate) use io::save_u16;
#[cfg(test)]
pub(crate) use io::load_u16;
pub use scene::{generate_scene, MotionConfig, SceneConfig, THING_SEGMENT_BASE};
pub use targets::{
    derive_task_targets, interior_point, sample_task, InstanceTargets, ObjectCue, ObjectTarget, ObjectTargets,
    TargetOptions, Targets, TaskSample, TaskWeights, TrackTarget,
};

use crate::error::{bail, Result};
use crate::types::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub class_id: u32,
    pub is_thing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u32>,
}

/// Panoptic annotation of one frame: every pixel carries a segment id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticFrame {
    pub height: usize,
    pub width: usize,
    pub segment_map: Vec<u16>,
    pub segments: BTreeMap<u16, SegmentInfo>,
}

impl PanopticFrame {
    /// Checks panoptic completeness: the segment table lists exactly the ids
    /// present in the map, no pixel is unassigned, stuff has no track and
    /// no two segments share a track.
    pub fn validate(&self) -> Result<()> {
        if self.segment_map.len() != self.height * self.width {
            bail!(Shape, "segment map has {} pixels, expected {}", self.segment_map.len(), self.height * self.width);
        }
        let present: BTreeSet<u16> = self.segment_map.iter().copied().collect();
        if present.contains(&0) {
            bail!(InvalidInput, "segment id 0 (unassigned) present in map");
        }
        let listed: BTreeSet<u16> = self.segments.keys().copied().collect();
        if present != listed {
            bail!(InvalidInput, "segment table {listed:?} does not match map ids {present:?}");
        }
        let mut tracks = BTreeSet::new();
        for (id, s) in &self.segments {
            match (s.is_thing, s.track_id) {
                (true, Some(t)) => {
                    if !tracks.insert(t) {
                        bail!(InvalidInput, "track {t} assigned to two segments");
                    }
                }
                (true, None) => bail!(InvalidInput, "thing segment {id} has no track id"),
                (false, Some(_)) => bail!(InvalidInput, "stuff segment {id} carries a track id"),
                (false, None) => {}
            }
        }
        Ok(())
    }

    pub fn segment_mask(&self, segment_id: u16) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.segment_map.iter().map(|&s| s == segment_id).collect(),
        }
    }

    /// Mask of the thing with the given track id (empty if absent).
    pub fn track_mask(&self, track_id: u32) -> Mask {
        match self.segment_of_track(track_id) {
            Some(seg) => self.segment_mask(seg),
            None => Mask::empty(self.height, self.width),
        }
    }

    pub fn segment_of_track(&self, track_id: u32) -> Option<u16> {
        self.segments
            .iter()
            .find(|(_, s)| s.track_id == Some(track_id))
            .map(|(id, _)| *id)
    }

    pub fn track_ids(&self) -> Vec<u32> {
        self.segments.values().filter_map(|s| s.track_id).collect()
    }

    /// Per-pixel class id.
    pub fn class_map(&self) -> Vec<u32> {
        self.segment_map.iter().map(|s| self.segments[s].class_id).collect()
    }

    /// Pixels not covered by any thing.
    pub fn stuff_mask(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.segment_map.iter().map(|s| !self.segments[s].is_thing).collect(),
        }
    }
}
