//! Output heads. All mask-like logits are kept at stride 4 as `(rows, T*h*w)`
//! tensors, frame-major then row-major.

use candle_core::Tensor;

use crate::error::{bail, Result};
use crate::nn::{index_tensor, Mlp};
use crate::queries::TargetQuerySet;

/// Head outputs of one evaluation.
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `(N, T*h*w)` mask logits of every query, in query order.
    pub query_masks: Tensor,
    /// `(I, T*h*w)`.
    pub instance_masks: Option<Tensor>,
    /// `(I, C + 1)`, last column background.
    pub class_logits: Option<Tensor>,
    /// `(1, T*h*w)` mask of the instance catch-all query.
    pub background_mask: Option<Tensor>,
    /// `(C, T*h*w)`.
    pub semantic_logits: Option<Tensor>,
    /// `(O, T*h*w)`, maximum over each object's segment queries.
    pub object_masks: Option<Tensor>,
    /// `(1, T*h*w)`, maximum over the object-encoder background queries.
    pub object_background_mask: Option<Tensor>,
}

fn rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    Ok(x.index_select(&index_tensor(idx.iter().map(|&i| i as u32).collect())?, 0)?)
}

fn row_max(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    Ok(rows(x, idx)?.max_keepdim(0)?)
}

/// Evaluates every head supported by the roles present in `queries`.
///
/// `normed`: `(N, D)` normalized decoder queries; `f4`: `(T, h*w, D)`.
pub fn evaluate_heads(
    normed: &Tensor,
    queries: &TargetQuerySet,
    mask_embed: Option<&Mlp>,
    f4: &Tensor,
    (h, w): (usize, usize),
) -> Result<SegmentationOutput> {
    let (t, hw, d) = f4.dims3()?;
    let flat = f4.reshape((t * hw, d))?;
    let me = match mask_embed {
        Some(mlp) => mlp.forward(normed)?,
        None => normed.clone(),
    };
    let all = me.matmul(&flat.t()?)?;

    let inst = queries.instance_indices();
    let sem = queries.semantic_indices();
    let bg = queries.background_indices();
    let obj_bg = queries.object_background_indices();
    let groups = queries.object_groups();

    let instance_masks = if inst.is_empty() { None } else { Some(rows(&all, &inst)?) };
    let class_logits = if inst.is_empty() {
        None
    } else if let Some(lin) = &queries.classifier {
        Some(lin.cls.forward(&rows(normed, &inst)?)?)
    } else {
        if sem.is_empty() || bg.is_empty() {
            bail!(InvalidInput, "instance queries need semantic and background queries for classification");
        }
        let mut cols = sem.clone();
        cols.extend(&bg);
        Some(rows(normed, &inst)?.matmul(&rows(normed, &cols)?.t()?)?)
    };
    let semantic_logits = match queries.classifier.as_ref().and_then(|c| c.semantic.as_ref()) {
        Some(lin) => Some(lin.forward(&flat)?.t()?.contiguous()?),
        None if !sem.is_empty() => Some(rows(&all, &sem)?),
        None => None,
    };
    let object_masks = if groups.is_empty() {
        None
    } else {
        let maps: Vec<Tensor> = groups.iter().map(|g| row_max(&all, g)).collect::<Result<_>>()?;
        Some(Tensor::cat(&maps, 0)?)
    };
    Ok(SegmentationOutput {
        frames: t,
        height: h,
        width: w,
        instance_masks,
        class_logits,
        background_mask: if bg.is_empty() { None } else { Some(rows(&all, &bg)?) },
        semantic_logits,
        object_masks,
        object_background_mask: if obj_bg.is_empty() { None } else { Some(row_max(&all, &obj_bg)?) },
        query_masks: all,
    })
}
