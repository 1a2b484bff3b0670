//! Matching and supervision: Hungarian assignment of instance queries to
//! ground-truth tracks, point-sampled DICE/BCE mask losses, class and
//! semantic cross-entropy, combined per task.

mod hungarian;
mod points;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian_match, CostMatrix};
pub use points::{
    mask_uncertainty, read_points, sample_points_by, sample_semantic_points, sample_supervision_points,
    select_points, semantic_uncertainty, Point, PointConfig, PointGeometry, PointPools,
};

use crate::decoder::SegmentationOutput;
use crate::error::{bail, Result};
use crate::nn::{constant, index_tensor, log_softmax_last, sigmoid, to_vec_f64};
use crate::synthgen::{InstanceTargets, ObjectTargets, TaskWeights};
use crate::types::{Mask, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub mce_weight: f64,
    /// Class-loss weight of instance queries matched to no track.
    pub no_object_weight: f64,
    pub dice_eps: f64,
    pub points: PointConfig,
    /// Supervise every head evaluation rather than only the last.
    pub aux_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 2.0,
            bce_weight: 5.0,
            dice_weight: 5.0,
            mce_weight: 5.0,
            no_object_weight: 0.1,
            dice_eps: 1.0,
            points: PointConfig::default(),
            aux_loss: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.cls_weight, self.bce_weight, self.dice_weight, self.mce_weight, self.no_object_weight];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            bail!(Config, "loss weights must be finite and non-negative");
        }
        if !(self.dice_eps > 0.0) {
            bail!(Config, "dice_eps must be positive");
        }
        self.points.validate()
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub semantic_mce: f64,
}

impl LossTerms {
    pub fn weighted(&self, cfg: &LossConfig) -> f64 {
        cfg.cls_weight * self.cls
            + cfg.bce_weight * self.mask_bce
            + cfg.dice_weight * self.mask_dice
            + cfg.mce_weight * self.semantic_mce
    }

    fn add(&mut self, o: &LossTerms, scale: f64) {
        self.cls += scale * o.cls;
        self.mask_bce += scale * o.mask_bce;
        self.mask_dice += scale * o.mask_dice;
        self.semantic_mce += scale * o.semantic_mce;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Summed over supervised head evaluations.
    pub terms: LossTerms,
    pub total: f64,
    /// One entry per supervised head evaluation, last is the final output.
    pub layers: Vec<LossTerms>,
    /// `(query, track)` pairs of the final output's matching.
    pub assignment: Vec<(usize, usize)>,
}

/// Differentiable total with its report.
#[derive(Debug, Clone)]
pub struct TaskLoss {
    pub total: Tensor,
    pub report: LossReport,
}

/// Per-row DICE loss `(R,)` of logits against binary targets, both `(R, P)`.
pub fn dice_per_row(logits: &Tensor, targets: &Tensor, eps: f64) -> Result<Tensor> {
    let p = sigmoid(logits)?;
    let inter = (&p * targets)?.sum(1)?;
    let denom = (p.sum(1)? + targets.sum(1)?)?;
    let ratio = ((inter * 2.0)? + eps)?.div(&(denom + eps)?)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// Per-row mean binary cross-entropy `(R,)` with logits.
pub fn bce_per_row(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.relu()? + logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
    Ok((softplus - (logits * targets)?)?.mean(1)?)
}

pub fn dice_loss(logits: &Tensor, targets: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(dice_per_row(logits, targets, eps)?.mean_all()?)
}

pub fn bce_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(bce_per_row(logits, targets)?.mean_all()?)
}

fn one_hot(targets: &[usize], classes: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0.0; targets.len() * classes];
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            bail!(InvalidInput, "class index {t} out of range for {classes} classes");
        }
        v[i * classes + t] = 1.0;
    }
    constant(v, &[targets.len(), classes], dtype)
}

/// Weighted mean cross-entropy of `(N, K)` logits.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n || weights.len() != n {
        bail!(Shape, "{n} logit rows with {} targets and {} weights", targets.len(), weights.len());
    }
    let picked = (log_softmax_last(logits)? * one_hot(targets, k, logits.dtype())?)?.sum(1)?;
    let w = constant(weights.to_vec(), &[n], logits.dtype())?;
    let norm: f64 = weights.iter().sum();
    if norm <= 0.0 {
        bail!(InvalidInput, "cross-entropy weights sum to zero");
    }
    Ok(((picked * w)?.sum_all()? * (-1.0 / norm))?)
}

/// Mean multi-class cross-entropy of semantic logits `(C, P)` against
/// per-point class indices.
pub fn mce_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let p = targets.len();
    cross_entropy(&logits.t()?.contiguous()?, targets, &vec![1.0; p])
}

fn sigmoid_f64(x: f64) -> f64 {
    0.5 * ((0.5 * x).tanh() + 1.0)
}

pub fn dice_value(logits: &[f64], targets: &[bool], eps: f64) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&l, &g) in logits.iter().zip(targets) {
        let p = sigmoid_f64(l);
        let g = g as u8 as f64;
        inter += p * g;
        sp += p;
        sg += g;
    }
    1.0 - (2.0 * inter + eps) / (sp + sg + eps)
}

pub fn bce_value(logits: &[f64], targets: &[bool]) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&l, &g)| l.max(0.0) - l * (g as u8 as f64) + (-l.abs()).exp().ln_1p())
        .sum();
    s / logits.len() as f64
}

/// Row-wise softmax of plain values.
pub fn softmax_rows(v: &[f64], cols: usize) -> Vec<Vec<f64>> {
    v.chunks(cols)
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// One ground-truth track as seen by the matcher.
#[derive(Debug, Clone, Copy)]
pub struct MatchTarget<'a> {
    /// Classification column of the track's class.
    pub column: usize,
    pub masks: &'a [Mask],
}

/// `cost(i, g) = -λ_cls·p_i(c_g) + λ_bce·BCE + λ_dice·DICE`, the mask terms
/// on prediction `i`'s sampled points.
pub fn vis_cost_matrix(
    class_probs: &[Vec<f64>],
    point_logits: &[Vec<f64>],
    points: &[Vec<Point>],
    targets: &[MatchTarget],
    cfg: &LossConfig,
) -> CostMatrix {
    CostMatrix::from_fn(class_probs.len(), targets.len(), |i, g| {
        let t = &targets[g];
        let gt: Vec<bool> = points[i].iter().map(|p| p.lookup(t.masks)).collect();
        let mut c = 0.0;
        if cfg.cls_weight != 0.0 {
            c -= cfg.cls_weight * class_probs[i][t.column];
        }
        if cfg.bce_weight != 0.0 {
            c += cfg.bce_weight * bce_value(&point_logits[i], &gt);
        }
        if cfg.dice_weight != 0.0 {
            c += cfg.dice_weight * dice_value(&point_logits[i], &gt, cfg.dice_eps);
        }
        c
    })
}

/// Terms of one head evaluation as tensors.
#[derive(Default)]
struct TermTensors {
    cls: Option<Tensor>,
    /// Per-mask losses, averaged at the end.
    bce_rows: Vec<Tensor>,
    dice_rows: Vec<Tensor>,
    mce: Option<Tensor>,
}

impl TermTensors {
    fn push_masks(&mut self, logits: &Tensor, targets: &Tensor, eps: f64) -> Result<()> {
        self.bce_rows.push(bce_per_row(logits, targets)?);
        self.dice_rows.push(dice_per_row(logits, targets, eps)?);
        Ok(())
    }

    fn finish(self, cfg: &LossConfig, like: &Tensor) -> Result<(Tensor, LossTerms)> {
        let mean_rows = |rows: Vec<Tensor>| -> Result<Option<Tensor>> {
            if rows.is_empty() {
                return Ok(None);
            }
            Ok(Some(Tensor::cat(&rows, 0)?.mean_all()?))
        };
        let bce = mean_rows(self.bce_rows)?;
        let dice = mean_rows(self.dice_rows)?;
        let mut total = like.zeros_like()?.sum_all()?;
        let mut terms = LossTerms::default();
        for (t, w, slot) in [
            (self.cls, cfg.cls_weight, &mut terms.cls),
            (bce, cfg.bce_weight, &mut terms.mask_bce),
            (dice, cfg.dice_weight, &mut terms.mask_dice),
            (self.mce, cfg.mce_weight, &mut terms.semantic_mce),
        ] {
            if let Some(t) = t {
                *slot = to_vec_f64(&t)?[0];
                total = (total + (t * w)?)?;
            }
        }
        Ok((total, terms))
    }
}

fn sample_rows(
    logits: &Tensor,
    geom: &PointGeometry,
    cfg: &PointConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<Point>>, Tensor, Vec<Vec<f64>>)> {
    let (r, cells) = logits.dims2()?;
    let vals = to_vec_f64(&logits.detach())?;
    let pools = PointPools::draw(geom, cfg, rng);
    let points: Vec<Vec<Point>> = (0..r)
        .map(|i| select_points(mask_uncertainty(&vals[i * cells..(i + 1) * cells], geom), &pools, cfg))
        .collect();
    let refs: Vec<&[Point]> = points.iter().map(|p| p.as_slice()).collect();
    let sampled = read_points(logits, &refs, geom)?;
    let sv = to_vec_f64(&sampled.detach())?;
    let p = cfg.num_points;
    let rows = (0..r).map(|i| sv[i * p..(i + 1) * p].to_vec()).collect();
    Ok((points, sampled, rows))
}

fn target_tensor(points: &[&[Point]], f: impl Fn(usize, &Point) -> bool, dtype: DType) -> Result<Tensor> {
    let r = points.len();
    let p = points.first().map_or(0, |x| x.len());
    let mut v = Vec::with_capacity(r * p);
    for (i, pts) in points.iter().enumerate() {
        v.extend(pts.iter().map(|pt| f(i, pt) as u8 as f64));
    }
    constant(v, &[r, p], dtype)
}

fn geometry(out: &SegmentationOutput, image: (usize, usize)) -> PointGeometry {
    PointGeometry {
        frames: out.frames,
        image,
        grid: (out.height, out.width),
    }
}

fn check_masks(masks: &[Mask], frames: usize, image: (usize, usize)) -> Result<()> {
    if masks.len() != frames || masks.iter().any(|m| (m.height, m.width) != image) {
        bail!(Shape, "target masks do not cover {frames} frames of {}x{}", image.0, image.1);
    }
    Ok(())
}

/// Instance (and, with a class map, semantic) supervision of one head
/// evaluation. `class_columns` lists the class id of each classification
/// column; the background column follows them.
fn instance_output_loss(
    out: &SegmentationOutput,
    class_columns: &[u32],
    targets: &InstanceTargets,
    image: (usize, usize),
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossTerms, Vec<(usize, usize)>)> {
    let (Some(masks), Some(logits)) = (&out.instance_masks, &out.class_logits) else {
        bail!(TaskMismatch, "instance supervision needs instance queries");
    };
    let geom = geometry(out, image);
    let pc = &cfg.points;
    let (n_inst, k) = logits.dims2()?;
    if k != class_columns.len() + 1 {
        bail!(Shape, "{k} classification columns for {} classes", class_columns.len());
    }
    if targets.tracks.len() > n_inst {
        bail!(InvalidInput, "{} tracks exceed {n_inst} instance queries", targets.tracks.len());
    }
    let mut match_targets = Vec::with_capacity(targets.tracks.len());
    for t in &targets.tracks {
        check_masks(&t.masks, out.frames, image)?;
        let Some(column) = class_columns.iter().position(|&c| c == t.class_id) else {
            bail!(InvalidInput, "track class {} has no classification column", t.class_id);
        };
        match_targets.push(MatchTarget { column, masks: &t.masks });
    }

    let (points, sampled, point_logits) = sample_rows(masks, &geom, pc, rng)?;
    let probs = softmax_rows(&to_vec_f64(&logits.detach())?, k);
    let cost = vis_cost_matrix(&probs, &point_logits, &points, &match_targets, cfg);
    let assignment = hungarian_match(&cost)?;

    let mut terms = TermTensors::default();
    let mut cls_t = vec![k - 1; n_inst];
    let mut cls_w = vec![cfg.no_object_weight; n_inst];
    for &(i, g) in &assignment {
        cls_t[i] = match_targets[g].column;
        cls_w[i] = 1.0;
    }
    if cls_w.iter().sum::<f64>() > 0.0 {
        terms.cls = Some(cross_entropy(logits, &cls_t, &cls_w)?);
    }
    if !assignment.is_empty() {
        let rows: Vec<u32> = assignment.iter().map(|&(i, _)| i as u32).collect();
        let pred = sampled.index_select(&index_tensor(rows)?, 0)?;
        let pts: Vec<&[Point]> = assignment.iter().map(|&(i, _)| points[i].as_slice()).collect();
        let gt = target_tensor(&pts, |r, p| p.lookup(match_targets[assignment[r].1].masks), masks.dtype())?;
        terms.push_masks(&pred, &gt, cfg.dice_eps)?;
    }
    if let Some(bg) = &out.background_mask {
        let (bg_pts, bg_pred, _) = sample_rows(bg, &geom, pc, rng)?;
        let refs: Vec<&[Point]> = bg_pts.iter().map(|p| p.as_slice()).collect();
        let gt = target_tensor(&refs, |_, p| !match_targets.iter().any(|t| p.lookup(t.masks)), bg.dtype())?;
        terms.push_masks(&bg_pred, &gt, cfg.dice_eps)?;
    }
    if let Some(sem_maps) = &targets.semantic {
        let Some(sem) = &out.semantic_logits else {
            bail!(TaskMismatch, "semantic targets given without semantic logits");
        };
        terms.mce = Some(semantic_loss(sem, class_columns, sem_maps, &geom, pc, rng)?);
    }
    let (total, t) = terms.finish(cfg, masks)?;
    Ok((total, t, assignment))
}

fn semantic_loss(
    sem: &Tensor,
    class_columns: &[u32],
    maps: &[Vec<u32>],
    geom: &PointGeometry,
    pc: &PointConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (c, _) = sem.dims2()?;
    if c != class_columns.len() {
        bail!(Shape, "{c} semantic rows for {} classes", class_columns.len());
    }
    let (h, w) = geom.image;
    if maps.len() != geom.frames || maps.iter().any(|m| m.len() != h * w) {
        bail!(Shape, "semantic maps do not cover {} frames of {h}x{w}", geom.frames);
    }
    let vals = to_vec_f64(&sem.detach())?;
    let pts = sample_semantic_points(&vals, c, geom, pc, rng);
    let mut targets = Vec::with_capacity(pts.len());
    for p in &pts {
        let id = maps[p.frame][p.pixel(w)];
        let Some(col) = class_columns.iter().position(|&k| k == id) else {
            bail!(InvalidInput, "semantic class {id} out of range");
        };
        targets.push(col);
    }
    let refs: Vec<&[Point]> = vec![pts.as_slice(); c];
    mce_loss(&read_points(sem, &refs, geom)?, &targets)
}

/// Object and object-background supervision of one head evaluation; query
/// groups correspond to `targets.objects` in order.
fn object_output_loss(
    out: &SegmentationOutput,
    targets: &ObjectTargets,
    image: (usize, usize),
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossTerms)> {
    let Some(obj) = &out.object_masks else {
        bail!(TaskMismatch, "object supervision needs object queries");
    };
    let n = obj.dims()[0];
    if n != targets.objects.len() {
        bail!(Shape, "{n} object predictions for {} targets", targets.objects.len());
    }
    for o in &targets.objects {
        check_masks(&o.masks, out.frames, image)?;
    }
    let geom = geometry(out, image);
    let mut terms = TermTensors::default();
    let (points, sampled, _) = sample_rows(obj, &geom, &cfg.points, rng)?;
    let refs: Vec<&[Point]> = points.iter().map(|p| p.as_slice()).collect();
    let gt = target_tensor(&refs, |r, p| p.lookup(&targets.objects[r].masks), obj.dtype())?;
    terms.push_masks(&sampled, &gt, cfg.dice_eps)?;
    if let Some(bg) = &out.object_background_mask {
        let (bg_pts, bg_pred, _) = sample_rows(bg, &geom, &cfg.points, rng)?;
        let refs: Vec<&[Point]> = bg_pts.iter().map(|p| p.as_slice()).collect();
        let gt = target_tensor(&refs, |_, p| !targets.objects.iter().any(|o| p.lookup(&o.masks)), bg.dtype())?;
        terms.push_masks(&bg_pred, &gt, cfg.dice_eps)?;
    }
    terms.finish(cfg, obj)
}

fn supervised<'a>(outputs: &'a [SegmentationOutput], cfg: &LossConfig) -> Result<&'a [SegmentationOutput]> {
    if outputs.is_empty() {
        bail!(InvalidInput, "no head outputs to supervise");
    }
    Ok(if cfg.aux_loss { outputs } else { &outputs[outputs.len() - 1..] })
}

fn accumulate(parts: Vec<(Tensor, LossTerms)>, cfg: &LossConfig, assignment: Vec<(usize, usize)>) -> Result<TaskLoss> {
    let mut report = LossReport {
        assignment,
        ..LossReport::default()
    };
    let mut total: Option<Tensor> = None;
    for (t, terms) in parts {
        report.terms.add(&terms, 1.0);
        report.layers.push(terms);
        total = Some(match total {
            Some(a) => (a + t)?,
            None => t,
        });
    }
    report.total = report.terms.weighted(cfg);
    Ok(TaskLoss {
        total: total.expect("at least one output"),
        report,
    })
}

/// VIS loss (VPS when `targets.semantic` is set) summed over head
/// evaluations.
pub fn instance_loss(
    outputs: &[SegmentationOutput],
    class_columns: &[u32],
    targets: &InstanceTargets,
    image: (usize, usize),
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TaskLoss> {
    let mut parts = Vec::new();
    let mut last = Vec::new();
    for out in supervised(outputs, cfg)? {
        let (t, terms, a) = instance_output_loss(out, class_columns, targets, image, cfg, rng)?;
        parts.push((t, terms));
        last = a;
    }
    accumulate(parts, cfg, last)
}

/// VOS/PET loss summed over head evaluations.
pub fn object_loss(
    outputs: &[SegmentationOutput],
    targets: &ObjectTargets,
    image: (usize, usize),
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TaskLoss> {
    let parts = supervised(outputs, cfg)?
        .iter()
        .map(|out| object_output_loss(out, targets, image, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    accumulate(parts, cfg, Vec::new())
}

/// Weighted sum of per-sample task losses.
pub fn combine_task_losses(parts: Vec<(Task, TaskLoss)>, weights: &TaskWeights) -> Result<TaskLoss> {
    let mut total: Option<Tensor> = None;
    let mut report = LossReport::default();
    for (task, loss) in parts {
        let w = weights.get(task);
        report.terms.add(&loss.report.terms, w);
        report.total += w * loss.report.total;
        for (i, l) in loss.report.layers.iter().enumerate() {
            if report.layers.len() <= i {
                report.layers.push(LossTerms::default());
            }
            report.layers[i].add(l, w);
        }
        let t = (loss.total * w)?;
        total = Some(match total {
            Some(a) => (a + t)?,
            None => t,
        });
    }
    let Some(total) = total else {
        bail!(InvalidInput, "empty batch");
    };
    Ok(TaskLoss { total, report })
}
