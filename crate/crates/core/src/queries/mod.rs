//! Target queries: the learned class/instance/background bank used for
//! VIS and VPS, and the object encoder that turns mask or point cues into
//! queries for VOS and PET.

mod bank;
mod encoder;
mod segments;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use bank::{ClassifierMode, DatasetClasses, LinearClassifier, QueryBank, QueryBankConfig};
pub use encoder::{ObjectCueInput, ObjectEncoder, ObjectEncoderConfig};
pub use segments::{downsample_mask, split_mask_into_segments, subsample_points};

use crate::error::{bail, Result};

/// What a query stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum QueryRole {
    /// One semantic class of the active dataset.
    Semantic { class_id: u32 },
    Instance { slot: usize },
    /// Catch-all for inactive instance queries.
    Background,
    /// One cell of the object-encoder background grid.
    ObjectBackground { cell: usize },
    /// Segment `segment` of guided object `object`.
    Object { object: usize, segment: usize },
}

impl QueryRole {
    pub fn kind(&self) -> &'static str {
        match self {
            QueryRole::Semantic { .. } => "semantic",
            QueryRole::Instance { .. } => "instance",
            QueryRole::Background => "background",
            QueryRole::ObjectBackground { .. } => "object_background",
            QueryRole::Object { .. } => "object",
        }
    }
}

/// An ordered set of `N` queries with their positional embeddings and roles.
#[derive(Debug, Clone)]
pub struct TargetQuerySet {
    /// `(N, D)`.
    pub queries: Tensor,
    /// `(N, D)`, added where attention affinities are formed.
    pub embeddings: Tensor,
    pub roles: Vec<QueryRole>,
    /// Set when classification and semantic logits come from a linear
    /// layer instead of semantic queries.
    pub classifier: Option<LinearClassifier>,
}

impl TargetQuerySet {
    pub fn empty(dim: usize, dtype: DType) -> Result<Self> {
        let z = Tensor::zeros((0, dim), dtype, &candle_core::Device::Cpu)?;
        Ok(Self {
            queries: z.clone(),
            embeddings: z,
            roles: Vec::new(),
            classifier: None,
        })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.queries.dims()[1]
    }

    /// Row indices of queries matching `pred`.
    pub fn indices(&self, pred: impl Fn(&QueryRole) -> bool) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, r)| pred(r)).map(|(i, _)| i).collect()
    }

    pub fn semantic_indices(&self) -> Vec<usize> {
        self.indices(|r| matches!(r, QueryRole::Semantic { .. }))
    }

    pub fn instance_indices(&self) -> Vec<usize> {
        self.indices(|r| matches!(r, QueryRole::Instance { .. }))
    }

    pub fn background_indices(&self) -> Vec<usize> {
        self.indices(|r| matches!(r, QueryRole::Background))
    }

    pub fn object_background_indices(&self) -> Vec<usize> {
        self.indices(|r| matches!(r, QueryRole::ObjectBackground { .. }))
    }

    /// Per guided object, the row indices of its segment queries.
    pub fn object_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, r) in self.roles.iter().enumerate() {
            if let QueryRole::Object { object, .. } = *r {
                if groups.len() <= object {
                    groups.resize(object + 1, Vec::new());
                }
                groups[object].push(i);
            }
        }
        groups
    }

    /// Class ids of the semantic queries in order.
    pub fn semantic_classes(&self) -> Vec<u32> {
        self.roles
            .iter()
            .filter_map(|r| match r {
                QueryRole::Semantic { class_id } => Some(*class_id),
                _ => None,
            })
            .collect()
    }

    pub fn with_queries(&self, queries: Tensor) -> Self {
        Self {
            queries,
            ..self.clone()
        }
    }
}

/// Concatenates query sets, preserving order and roles. Object indices of
/// later parts are shifted so that objects stay distinct.
pub fn concat_task_queries(parts: &[TargetQuerySet]) -> Result<TargetQuerySet> {
    let nonempty: Vec<&TargetQuerySet> = parts.iter().filter(|p| !p.is_empty()).collect();
    let Some(first) = parts.first() else {
        bail!(InvalidInput, "cannot concatenate zero query sets");
    };
    let dim = first.dim();
    if let Some(p) = parts.iter().find(|p| p.dim() != dim) {
        bail!(Shape, "query width mismatch: {} vs {}", dim, p.dim());
    }
    if nonempty.is_empty() {
        return Ok(first.clone());
    }
    let mut roles = Vec::new();
    let mut object_offset = 0;
    let mut classifier = None;
    for p in &nonempty {
        let mut max_obj = None;
        for r in &p.roles {
            roles.push(match *r {
                QueryRole::Object { object, segment } => {
                    max_obj = Some(max_obj.map_or(object, |m: usize| m.max(object)));
                    QueryRole::Object {
                        object: object + object_offset,
                        segment,
                    }
                }
                other => other,
            });
        }
        object_offset += max_obj.map_or(0, |m| m + 1);
        if classifier.is_none() {
            classifier = p.classifier.clone();
        }
    }
    let q: Vec<&Tensor> = nonempty.iter().map(|p| &p.queries).collect();
    let e: Vec<&Tensor> = nonempty.iter().map(|p| &p.embeddings).collect();
    Ok(TargetQuerySet {
        queries: Tensor::cat(&q, 0)?,
        embeddings: Tensor::cat(&e, 0)?,
        roles,
        classifier,
    })
}
