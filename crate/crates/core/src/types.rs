//! Plain data types shared across modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The four segmentation tasks served by one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vis,
    Vps,
    Vos,
    Pet,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Vis, Task::Vps, Task::Vos, Task::Pet];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Vis => "vis",
            Task::Vps => "vps",
            Task::Vos => "vos",
            Task::Pet => "pet",
        }
    }

    /// VIS and VPS are driven by class queries, VOS and PET by object cues.
    pub fn is_object_guided(self) -> bool {
        matches!(self, Task::Vos | Task::Pet)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vis" => Ok(Task::Vis),
            "vps" => Ok(Task::Vps),
            "vos" => Ok(Task::Vos),
            "pet" => Ok(Task::Pet),
            other => Err(Error::InvalidInput(format!("unknown task '{other}'"))),
        }
    }
}

/// Binary mask over a row-major `height × width` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// `(y, x)` coordinates of all set pixels in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count()
    }

    /// Mean `(y, x)` of set pixels measured at pixel centers.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let pts = self.points();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        let (sy, sx) = pts
            .iter()
            .fold((0.0, 0.0), |(a, b), &(y, x)| (a + y as f64 + 0.5, b + x as f64 + 0.5));
        Some((sy / n, sx / n))
    }
}

/// RGB video clip, frames stored row-major as interleaved `u8` triplets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoClip {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<u8>>,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Frames `[start, end)` as a new clip.
    pub fn slice(&self, start: usize, end: usize) -> VideoClip {
        VideoClip {
            height: self.height,
            width: self.width,
            frames: self.frames[start..end].to_vec(),
        }
    }

    /// Normalized channel-first pixel values, `T × 3 × H × W`.
    pub fn to_normalized(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.frames.len() * 3 * hw];
        for (t, f) in self.frames.iter().enumerate() {
            for p in 0..hw {
                for c in 0..3 {
                    out[(t * 3 + c) * hw + p] = (f[p * 3 + c] as f64 / 255.0 - 0.5) / 0.25;
                }
            }
        }
        out
    }
}
