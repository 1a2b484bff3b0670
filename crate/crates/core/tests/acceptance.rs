//! Acceptance suite. Prints one `criterion N (name): PASS|FAIL - detail`
//! line per criterion and exits nonzero if any fails.
//!
//! `TARVIS_ACCEPTANCE=1,4,8` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tarvis_core::checkpoint::CheckpointMeta;
use tarvis_core::gradcheck::{check_params, check_vars, max_rel_err};
use tarvis_core::inference::{
    associate_instances, best_iou_assignment, max_emission_delay, run_video, window_video, InferenceConfig,
};
use tarvis_core::losses::{
    bce_loss, cross_entropy, dice_loss, dice_value, hungarian_match, mce_loss, CostMatrix, LossConfig,
};
use tarvis_core::metrics::{evaluate, EvalReport};
use tarvis_core::model::{Model, ModelConfig};
use tarvis_core::neck::{FeaturePyramid, Level};
use tarvis_core::nn::to_vec_f64;
use tarvis_core::protocol::{ground_truth, run_and_evaluate, task_targets};
use tarvis_core::queries::{concat_task_queries, ClassifierMode, DatasetClasses, ObjectCueInput, TargetQuerySet};
use tarvis_core::results::{results_from_json, results_to_json};
use tarvis_core::synthgen::{
    dataset_hash, derive_task_targets, generate_dataset, write_dataset, Dataset, SceneConfig, SynthConfig,
    TargetOptions, TaskSample,
};
use tarvis_core::train::{sample_loss, TrainConfig, Trainer};
use tarvis_core::{Mask, Task, VideoClip};

/// Finite-difference bounds by path type.
const TOL_LINEAR: f64 = 1e-4;
const TOL_ATTENTION: f64 = 1e-3;
/// Probes whose analytic and numeric values are both below this are skipped.
const GRAD_FLOOR: f64 = 1e-7;
const FD_EPS: f64 = 1e-6;
const SPOT_TOL: f64 = 1e-9;
const EQUIVARIANCE_TOL: f64 = 1e-9;

const OVERFIT_VIS_IOU: f64 = 0.80;
const OVERFIT_VPS_MIOU: f64 = 0.85;
const OVERFIT_VOS_J: f64 = 0.80;
const OVERFIT_PET_J: f64 = 0.60;
const OVERFIT_PRETRAIN: usize = 500;
const OVERFIT_FINETUNE: usize = 1500;
const OVERFIT_LR: f64 = 1e-3;
const ABLATION_STEPS: usize = 200;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn ok<T>(r: tarvis_core::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// shared fixtures

/// Overfit-scale data: 8 videos of 8 frames at 64x64.
fn overfit_data() -> Dataset {
    synth(8, 8, (64, 64), 0)
}

fn synth(videos: usize, frames: usize, size: (usize, usize), seed: u64) -> Dataset {
    generate_dataset(&SynthConfig {
        num_videos: videos,
        scene: SceneConfig {
            image_size: size,
            num_frames: frames,
            ..SceneConfig::default()
        },
        seed,
    })
    .expect("synthetic data")
}

fn overfit_train_config(pre: usize, fine: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.pretrain.steps = pre;
    cfg.pretrain.lr = OVERFIT_LR;
    cfg.pretrain.lr_decay_steps = vec![];
    cfg.pretrain.clip_len = 4;
    cfg.finetune.steps = fine;
    cfg.finetune.lr = OVERFIT_LR;
    cfg.finetune.lr_decay_steps = if fine >= 10 { vec![fine * 4 / 5] } else { vec![] };
    cfg.finetune.clip_len = 4;
    cfg.loss.points.num_points = 256;
    cfg.checkpoint_interval = 0;
    cfg
}

fn overfit_infer_config() -> InferenceConfig {
    InferenceConfig {
        clip_len: 4,
        overlap: 2,
        ..InferenceConfig::default()
    }
}

/// Double-precision model small enough for finite differences.
fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::small();
    c.backbone.stage_channels = [4, 8, 8, 8];
    c.backbone.norm_groups = 2;
    c.neck.dim = 8;
    c.neck.num_layers = 1;
    c.neck.num_heads = 2;
    c.neck.deform_points = 1;
    c.neck.temporal_grid = 1;
    c.neck.ffn_dim = 16;
    c.decoder.num_layers = 2;
    c.decoder.num_heads = 2;
    c.decoder.ffn_dim = 16;
    c.objects.q_o = 2;
    c.objects.bg_grid = 2;
    c.objects.num_layers = 1;
    c.objects.num_heads = 2;
    c.objects.ffn_dim = 16;
    c.objects.p_max = 16;
    c.queries.num_instances = 3;
    c
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

/// `sum(x * r)` for a fixed random `r`, a generic scalar probe of `x`.
fn weighted_sum(x: &Tensor, seed: u64) -> tarvis_core::Result<Tensor> {
    let r = random_tensor(x.dims(), seed).to_dtype(x.dtype())?;
    Ok((x * r)?.sum_all()?)
}

fn pyramid_sum(pyr: &FeaturePyramid, seed: u64) -> tarvis_core::Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (i, l) in pyr.levels.iter().enumerate() {
        let s = weighted_sum(&l.feat, seed + i as u64)?;
        total = Some(match total {
            Some(t) => (t + s)?,
            None => s,
        });
    }
    Ok(total.expect("four levels"))
}

fn frames_tensor(model: &Model, clip: &VideoClip) -> Tensor {
    Tensor::from_vec(clip.to_normalized(), (clip.num_frames(), 3, clip.height, clip.width), &Device::Cpu)
        .unwrap()
        .to_dtype(model.dtype())
        .unwrap()
}

/// Square cue masks at distinct spots, one per object.
fn square_cues(objects: usize, size: (usize, usize), frame: usize) -> Vec<ObjectCueInput> {
    (0..objects)
        .map(|o| {
            let (y0, x0) = (4 + 12 * (o / 3), 4 + 18 * (o % 3));
            ObjectCueInput {
                frame,
                mask: Mask::from_fn(size.0, size.1, |y, x| (y0..y0 + 10).contains(&y) && (x0..x0 + 10).contains(&x)),
            }
        })
        .collect()
}

fn flat(t: &Tensor) -> Vec<f64> {
    to_vec_f64(t).unwrap()
}

fn aggregate(model: &Model, data: &Dataset, task: Task, cfg: &InferenceConfig) -> std::result::Result<EvalReport, String> {
    let reps = data
        .videos
        .iter()
        .map(|v| run_and_evaluate(model, v, task, "synth", cfg).map(|r| r.1))
        .collect::<tarvis_core::Result<Vec<_>>>();
    ok(EvalReport::aggregate(&ok(reps)?))
}

fn train(model: Model, data: &Dataset, cfg: TrainConfig) -> std::result::Result<Model, String> {
    let mut tr = ok(Trainer::new(model, data.clone(), cfg))?;
    while !tr.is_done() {
        let r = ok(tr.step())?;
        ensure!(r.loss.total.is_finite(), "non-finite loss at step {}", r.step);
    }
    Ok(tr.model)
}

// ---------------------------------------------------------------------------
// 1. oracle equivalence

/// Minimum cost over every injective assignment of the smaller side.
fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    fn go(r: usize, used: &mut Vec<bool>, cost: &[Vec<f64>], acc: f64, best: &mut f64, transpose: bool) {
        let (n, m) = if transpose { (cost[0].len(), cost.len()) } else { (cost.len(), cost[0].len()) };
        if r == n {
            *best = best.min(acc);
            return;
        }
        for c in 0..m {
            if !used[c] {
                used[c] = true;
                let v = if transpose { cost[c][r] } else { cost[r][c] };
                go(r + 1, used, cost, acc + v, best, transpose);
                used[c] = false;
            }
        }
    }
    let transpose = rows > cols;
    let mut best = f64::INFINITY;
    let m = if transpose { rows } else { cols };
    go(0, &mut vec![false; m], cost, 0.0, &mut best, transpose);
    best
}

fn valid_pairs(pairs: &[(usize, usize)], rows: usize, cols: usize) -> bool {
    let mut rs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut cs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    rs.sort_unstable();
    rs.dedup();
    cs.sort_unstable();
    cs.dedup();
    pairs.len() == rows.min(cols)
        && rs.len() == pairs.len()
        && cs.len() == pairs.len()
        && pairs.iter().all(|&(r, c)| r < rows && c < cols)
}

/// All maximum-total assignments of `iou`, as row -> column maps.
fn best_iou_assignments(iou: &[Vec<f64>], cols: usize) -> (f64, Vec<Vec<Option<usize>>>) {
    let rows = iou.len();
    let mut best = f64::NEG_INFINITY;
    let mut all: Vec<(f64, Vec<Option<usize>>)> = Vec::new();
    fn go(
        r: usize,
        assign: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        iou: &[Vec<f64>],
        need: usize,
        out: &mut Vec<(f64, Vec<Option<usize>>)>,
    ) {
        if r == iou.len() {
            if assign.iter().filter(|a| a.is_some()).count() == need {
                let total = assign.iter().enumerate().filter_map(|(r, c)| c.map(|c| iou[r][c])).sum();
                out.push((total, assign.clone()));
            }
            return;
        }
        assign[r] = None;
        go(r + 1, assign, used, iou, need, out);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                assign[r] = Some(c);
                go(r + 1, assign, used, iou, need, out);
                used[c] = false;
                assign[r] = None;
            }
        }
    }
    go(0, &mut vec![None; rows], &mut vec![false; cols], iou, rows.min(cols), &mut all);
    for (t, _) in &all {
        best = best.max(*t);
    }
    let winners = all.into_iter().filter(|(t, _)| (t - best).abs() < 1e-12).map(|(_, a)| a).collect();
    (best, winners)
}

fn mask_iou(a: &[Mask], b: &[Mask]) -> f64 {
    let mut i = 0usize;
    let mut u = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data.iter().zip(&y.data) {
            i += (*p && *q) as usize;
            u += (*p || *q) as usize;
        }
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        // Predictions (rows) always cover the targets (columns).
        let rows = rng.random_range(1..=7);
        let cols = rng.random_range(1..=rows);
        // Integer costs keep every sum exact, so totals compare bitwise.
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.random_range(-50i32..=50) as f64).collect())
            .collect();
        let m = CostMatrix::from_fn(rows, cols, |r, c| cost[r][c]);
        let pairs = ok(hungarian_match(&m))?;
        ensure!(valid_pairs(&pairs, rows, cols), "trial {trial}: invalid assignment {pairs:?}");
        let got = m.cost_of(&pairs);
        let want = brute_force_min(&cost);
        ensure!(got == want, "trial {trial} ({rows}x{cols}): hungarian {got} vs exhaustive {want}");
    }

    let iou_min = InferenceConfig::default().iou_min;
    let (mut unique, mut tied) = (0, 0);
    for trial in 0..1000 {
        let rows = rng.random_range(0..=5);
        let cols = rng.random_range(0..=5);
        let frames = rng.random_range(1..=2);
        let blob = |rng: &mut ChaCha8Rng| -> Vec<Mask> {
            let (y, x, s) = (rng.random_range(0..6), rng.random_range(0..6), rng.random_range(1..5));
            let drop = rng.random_range(0..frames + 1);
            (0..frames)
                .map(|f| Mask::from_fn(10, 10, |yy, xx| f != drop && (y..y + s).contains(&yy) && (x..x + s).contains(&xx)))
                .collect()
        };
        let new: Vec<Vec<Mask>> = (0..rows).map(|_| blob(&mut rng)).collect();
        let prev: Vec<Vec<Mask>> = (0..cols).map(|_| blob(&mut rng)).collect();
        let iou: Vec<Vec<f64>> = new.iter().map(|n| prev.iter().map(|p| mask_iou(n, p)).collect()).collect();
        let (best, winners) = best_iou_assignments(&iou, cols);

        let pairs = ok(best_iou_assignment(&iou, cols))?;
        ensure!(valid_pairs(&pairs, rows, cols), "trial {trial}: invalid assignment {pairs:?}");
        let total: f64 = pairs.iter().map(|&(r, c)| iou[r][c]).sum();
        if rows.min(cols) > 0 {
            ensure!((total - best).abs() < 1e-12, "trial {trial}: IoU total {total} vs exhaustive {best}");
        }

        let got = ok(associate_instances(&prev, &new, iou_min))?;
        let accepted = |a: &Vec<Option<usize>>| -> Vec<Option<usize>> {
            a.iter()
                .enumerate()
                .map(|(r, c)| c.filter(|&c| iou[r][c] >= iou_min && iou[r][c] > 0.0))
                .collect()
        };
        let options: Vec<Vec<Option<usize>>> = winners.iter().map(accepted).collect();
        if options.windows(2).all(|w| w[0] == w[1]) {
            unique += 1;
        } else {
            tied += 1;
        }
        ensure!(
            options.contains(&got),
            "trial {trial}: association {got:?} is not an optimal thresholded assignment"
        );
    }
    Ok(format!("1000 matrices up to 7x7 exact; 1000 association cases ({unique} unique optima, {tied} ties)"))
}

// ---------------------------------------------------------------------------
// 2. gradient suite

fn tiny_sample(task: Task, seed: u64) -> TaskSample {
    let data = synth(1, 2, (64, 64), seed);
    let v = &data.videos[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    derive_task_targets(&v.clip, &v.annotations, task, &TargetOptions::default(), &mut rng).expect("trackable objects")
}

fn criterion_2() -> Outcome {
    let model = ok(Model::new(&tiny_config(), DType::F64, 7))?;
    // Initial offsets put samples on integer pixels, where bilinear
    // sampling has kinks; move them to generic positions.
    for (k, name) in ["neck.layers.0.deform.offsets.weight", "neck.layers.0.deform.offsets.bias"].iter().enumerate() {
        let dims = model.params.get(name).ok_or(format!("missing {name}"))?.dims().to_vec();
        ok(model.params.assign(name, &(random_tensor(&dims, 60 + k as u64) * 0.7).unwrap()))?;
    }
    let clip = synth(1, 2, (64, 64), 4).videos[0].clip.clone();
    let frames = frames_tensor(&model, &clip);
    let mut report = Vec::new();
    let mut check = |name: &str, prefixes: &[&str], probes: usize, tol: f64, loss: &dyn Fn() -> tarvis_core::Result<Tensor>| -> std::result::Result<(), String> {
        let p = ok(check_params(&model.params, prefixes, probes, FD_EPS, 11, loss))?;
        let err = max_rel_err(&p, GRAD_FLOOR);
        report.push(format!("{name} {err:.1e}"));
        ensure!(err < tol, "{name}: max relative error {err:.3e} over {} probes exceeds {tol:e} ({})", p.len(), worst(&p));
        Ok(())
    };

    check("backbone", &["backbone."], 2, TOL_LINEAR, &|| {
        let raw = model.backbone.forward(&frames)?;
        let mut total = weighted_sum(&raw.maps[0], 1)?;
        for (i, m) in raw.maps.iter().enumerate().skip(1) {
            total = (total + weighted_sum(m, 1 + i as u64)?)?;
        }
        Ok(total)
    })?;

    let raw = ok(model.backbone.forward(&frames))?;
    let raw = tarvis_core::backbone::RawPyramid {
        maps: raw.maps.map(|m| m.detach()),
    };
    let projected = ok(model.neck.project_inputs(&raw))?;
    check(
        "deformable layer",
        &["neck.layers.0.deform", "neck.layers.0.deform_norm", "neck.layers.0.deform_ffn"],
        3,
        TOL_ATTENTION,
        &|| pyramid_sum(&model.neck.apply_deformable(0, &projected)?, 20),
    )?;
    let deformed = detach_pyramid(&ok(model.neck.apply_deformable(0, &projected))?);
    check(
        "temporal layer",
        &["neck.layers.0.temporal"],
        3,
        TOL_ATTENTION,
        &|| pyramid_sum(&model.neck.apply_temporal(0, &deformed)?, 30),
    )?;

    let pyr = detach_pyramid(&ok(model.features(&clip))?);
    let cues = square_cues(2, (64, 64), 0);
    check("object encoder", &["objects."], 2, TOL_ATTENTION, &|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = model.mask_cue_queries(&pyr, &cues, &mut rng)?;
        Ok((weighted_sum(&q.queries, 40)? + weighted_sum(&q.embeddings, 41)?)?)
    })?;

    check("decoder and heads", &["decoder.", "queries."], 2, TOL_ATTENTION, &|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let objects = model.mask_cue_queries(&pyr, &cues, &mut rng)?;
        let objects = TargetQuerySet {
            queries: objects.queries.detach(),
            embeddings: objects.embeddings.detach(),
            ..objects
        };
        let set = concat_task_queries(&[model.class_queries(Task::Vps, "synth")?, objects])?;
        let out = model.decode(&set, &pyr)?;
        let mut total = Tensor::zeros((), DType::F64, &Device::Cpu)?;
        for (k, o) in out.outputs.iter().enumerate() {
            let heads = [
                Some(&o.query_masks),
                o.class_logits.as_ref(),
                o.semantic_logits.as_ref(),
                o.object_masks.as_ref(),
                o.background_mask.as_ref(),
                o.object_background_mask.as_ref(),
            ];
            for (j, h) in heads.into_iter().enumerate() {
                let h = h.ok_or_else(|| tarvis_core::Error::Shape(format!("head {j} missing from the mixed pass")))?;
                total = (total + weighted_sum(h, 100 + 10 * k as u64 + j as u64)?)?;
            }
        }
        Ok(total)
    })?;

    // Loss functions against their own logits.
    let logits = Var::from_tensor(&random_tensor(&[3, 40], 50)).map_err(|e| e.to_string())?;
    let targets = random_tensor(&[3, 40], 51).ge(0.0).unwrap().to_dtype(DType::F64).unwrap();
    let vars = vec![("logits".to_string(), logits.clone())];
    let mut check_loss = |name: &str, f: &dyn Fn() -> tarvis_core::Result<Tensor>| -> std::result::Result<(), String> {
        let p = ok(check_vars(&vars, 30, FD_EPS, 12, f))?;
        let err = max_rel_err(&p, GRAD_FLOOR);
        report.push(format!("{name} {err:.1e}"));
        ensure!(err < TOL_LINEAR, "{name}: max relative error {err:.3e} exceeds {TOL_LINEAR:e}");
        Ok(())
    };
    check_loss("dice", &|| dice_loss(logits.as_tensor(), &targets, 1.0))?;
    check_loss("bce", &|| bce_loss(logits.as_tensor(), &targets))?;
    let labels = [0usize, 5, 39];
    check_loss("cross-entropy", &|| cross_entropy(logits.as_tensor(), &labels, &[1.0, 0.1, 2.0]))?;
    let pixel_labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
    check_loss("semantic mce", &|| mce_loss(logits.as_tensor(), &pixel_labels))?;

    // Matched task losses through the whole model; the loss rng is
    // reseeded per evaluation so point sampling repeats.
    let mut cfg = LossConfig::default();
    cfg.points.num_points = 64;
    for task in Task::ALL {
        let sample = tiny_sample(task, 9);
        let p = ok(check_params(&model.params, &["decoder.mask_embed", "queries.", "objects."], 2, FD_EPS, 13, || {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            Ok(sample_loss(&model, &sample, "synth", &cfg, &mut rng)?.total)
        }))?;
        let err = max_rel_err(&p, GRAD_FLOOR);
        report.push(format!("{task} loss {err:.1e}"));
        ensure!(err < TOL_ATTENTION, "{task} loss: max relative error {err:.3e} exceeds {TOL_ATTENTION:e}");
    }
    Ok(report.join(", "))
}

fn worst(probes: &[tarvis_core::gradcheck::Probe]) -> String {
    let p = probes
        .iter()
        .max_by(|a, b| a.rel_err(GRAD_FLOOR).total_cmp(&b.rel_err(GRAD_FLOOR)))
        .expect("at least one probe");
    format!("{}[{}]: analytic {:.6e}, numeric {:.6e}", p.name, p.index, p.analytic, p.numeric)
}

fn detach_pyramid(p: &FeaturePyramid) -> FeaturePyramid {
    FeaturePyramid {
        levels: p.levels.clone().map(|mut l: Level| {
            l.feat = l.feat.detach();
            l.pos = l.pos.detach();
            l
        }),
    }
}

// ---------------------------------------------------------------------------
// 3. structural invariants

fn row_blocks(t: &Tensor, frames: usize) -> Vec<Vec<f64>> {
    // (T, P, D) -> per-(frame, token) rows
    let dims = t.dims().to_vec();
    let v = flat(t);
    let d = dims[2];
    (0..frames * dims[1]).map(|i| v[i * d..(i + 1) * d].to_vec()).collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut shapes = 0;
    for trial in 0..12 {
        let h = 64 * rng.random_range(1..=2);
        let w = 64 * rng.random_range(1..=2);
        let t = rng.random_range(1..=3);
        let things = rng.random_range(1..=3u32);
        let stuff = rng.random_range(1..=3u32);
        let inst = rng.random_range(1..=4);
        let objects = rng.random_range(1..=3);
        let q_o = rng.random_range(1..=3);
        let mut cfg = tiny_config();
        cfg.neck.temporal_grid = 2;
        cfg.queries.num_instances = inst;
        cfg.queries.datasets = vec![DatasetClasses {
            name: "synth".into(),
            things: (0..things).collect(),
            stuff: (things..things + stuff).collect(),
        }];
        cfg.objects.q_o = q_o;
        let model = ok(Model::new(&cfg, DType::F64, trial))?;
        let clip = VideoClip {
            height: h,
            width: w,
            frames: (0..t).map(|f| (0..h * w * 3).map(|i| ((i * 7 + f * 13) % 251) as u8).collect()).collect(),
        };
        let pyr = ok(model.features(&clip))?;
        for (l, s) in pyr.levels.iter().zip([4, 8, 16, 32]) {
            ensure!(l.feat.dims() == [t, (h / s) * (w / s), 8], "trial {trial}: stride {s} level {:?}", l.feat.dims());
        }
        let p4 = t * (h / 4) * (w / 4);
        let c = (things + stuff) as usize;
        let vis = ok(model.decode(&ok(model.class_queries(Task::Vis, "synth"))?, &pyr))?;
        let vps = ok(model.decode(&ok(model.class_queries(Task::Vps, "synth"))?, &pyr))?;
        let cues = square_cues(objects, (h, w), t - 1);
        let obj_set = ok(model.mask_cue_queries(&pyr, &cues, &mut ChaCha8Rng::seed_from_u64(0)))?;
        ensure!(obj_set.len() == objects * q_o + 4, "trial {trial}: {} object-encoder queries", obj_set.len());
        let pts: Vec<(usize, usize, usize)> = cues.iter().map(|c| (c.frame, c.mask.points()[0].0, c.mask.points()[0].1)).collect();
        let pet_set = ok(model.point_cue_queries(&pyr, &pts, &mut ChaCha8Rng::seed_from_u64(0)))?;
        ensure!(pet_set.len() == objects + 4, "trial {trial}: {} point-cue queries", pet_set.len());
        let vos = ok(model.decode(&obj_set, &pyr))?;
        for out in [&vis, &vps, &vos] {
            ensure!(out.outputs.len() == 3 && out.layer_queries.len() == 3, "trial {trial}: head evaluations");
        }
        let dims = |x: &Option<Tensor>| x.as_ref().map(|x| x.dims().to_vec());
        let (a, b, o) = (vis.last(), vps.last(), vos.last());
        ensure!(
            dims(&a.instance_masks) == Some(vec![inst, p4])
                && dims(&a.class_logits) == Some(vec![inst, things as usize + 1])
                && dims(&a.background_mask) == Some(vec![1, p4]),
            "trial {trial}: VIS heads {:?} {:?} {:?}",
            dims(&a.instance_masks),
            dims(&a.class_logits),
            dims(&a.background_mask)
        );
        ensure!(
            dims(&a.semantic_logits) == Some(vec![things as usize, p4]),
            "trial {trial}: VIS semantic logits {:?}",
            dims(&a.semantic_logits)
        );
        ensure!(
            dims(&b.class_logits) == Some(vec![inst, c + 1]) && dims(&b.semantic_logits) == Some(vec![c, p4]),
            "trial {trial}: VPS heads"
        );
        ensure!(
            dims(&o.object_masks) == Some(vec![objects, p4])
                && dims(&o.object_background_mask) == Some(vec![1, p4])
                && o.query_masks.dims() == [objects * q_o + 4, p4],
            "trial {trial}: VOS heads"
        );
        shapes += 1;
    }

    // Locality probes on a 2-frame 128x128 clip: stride-32 maps are 4x4 and
    // temporal cells are 2x2 coarse pixels.
    let mut cfg = tiny_config();
    cfg.neck.temporal_grid = 2;
    let model = ok(Model::new(&cfg, DType::F64, 21))?;
    let clip = VideoClip {
        height: 128,
        width: 128,
        frames: (0..2).map(|f| (0..128 * 128 * 3).map(|i| ((i * 5 + f * 31) % 253) as u8).collect()).collect(),
    };
    let raw = ok(model.backbone.forward(&frames_tensor(&model, &clip)))?;
    let pyr = ok(model.neck.project_inputs(&raw))?;
    let bump = |pyr: &FeaturePyramid, level: usize, frame: usize, token: usize| -> FeaturePyramid {
        let mut out = pyr.clone();
        let l = &pyr.levels[level];
        let (t, n, d) = l.feat.dims3().unwrap();
        let mut v = vec![0.0; t * n * d];
        for c in 0..d {
            v[(frame * n + token) * d + c] = 0.5;
        }
        out.levels[level].feat = (&l.feat + Tensor::from_vec(v, (t, n, d), &Device::Cpu).unwrap()).unwrap();
        out
    };

    // Deformable attention never looks across frames.
    let base = ok(model.neck.apply_deformable(0, &pyr))?;
    let moved = ok(model.neck.apply_deformable(0, &bump(&pyr, 2, 1, 5)))?;
    for (i, (a, b)) in base.levels.iter().zip(&moved.levels).enumerate() {
        let (ra, rb) = (row_blocks(&a.feat, 2), row_blocks(&b.feat, 2));
        let n = ra.len() / 2;
        ensure!(ra[..n] == rb[..n], "deformable: frame 0 of level {i} changed after perturbing frame 1");
        ensure!(i != 2 || ra[n..] != rb[n..], "deformable: frame 1 ignores its own perturbation");
    }

    // Temporal attention stays inside its cell, across frames, and leaves
    // strides 8 and 4 untouched.
    let base = ok(model.neck.apply_temporal(0, &pyr))?;
    let moved = ok(model.neck.apply_temporal(0, &bump(&pyr, 3, 1, 0)))?;
    for (i, s) in [(2usize, 16usize), (3, 32)] {
        let side = 128 / s;
        let (ra, rb) = (row_blocks(&base.levels[i].feat, 2), row_blocks(&moved.levels[i].feat, 2));
        let per = 64 / s;
        for (k, (x, y)) in ra.iter().zip(&rb).enumerate() {
            let p = k % (side * side);
            let cell = (p / side / per, p % side / per);
            let in_cell = cell == (0, 0);
            ensure!(in_cell || x == y, "temporal: stride {s} token {k} outside the perturbed cell changed");
            if in_cell {
                ensure!(x != y, "temporal: stride {s} token {k} inside the perturbed cell did not change");
            }
        }
    }
    for i in 0..2 {
        ensure!(
            flat(&base.levels[i].feat) == flat(&pyr.levels[i].feat),
            "temporal: stride {} features are not passed through",
            4 << i
        );
    }

    // Instance queries permute, outputs follow.
    let pyr = ok(model.features(&clip))?;
    let set = ok(model.class_queries(Task::Vps, "synth"))?;
    let idx = set.instance_indices();
    let mut order: Vec<u32> = (0..set.len() as u32).collect();
    let perm = [2usize, 0, 1];
    for (k, &p) in perm.iter().enumerate() {
        order[idx[k]] = idx[p] as u32;
    }
    let sel = Tensor::new(order.as_slice(), &Device::Cpu).unwrap();
    let permuted = TargetQuerySet {
        queries: set.queries.index_select(&sel, 0).unwrap(),
        embeddings: set.embeddings.index_select(&sel, 0).unwrap(),
        ..set.clone()
    };
    let a = ok(model.decode(&set, &pyr))?;
    let b = ok(model.decode(&permuted, &pyr))?;
    let inst_sel = Tensor::new(&perm.map(|p| p as u32), &Device::Cpu).unwrap();
    let mut worst: f64 = 0.0;
    for (x, y) in [
        (a.last().instance_masks.as_ref().unwrap(), b.last().instance_masks.as_ref().unwrap()),
        (a.last().class_logits.as_ref().unwrap(), b.last().class_logits.as_ref().unwrap()),
    ] {
        let xp = flat(&x.index_select(&inst_sel, 0).unwrap());
        worst = xp.iter().zip(flat(y)).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    let (sa, sb) = (flat(a.last().semantic_logits.as_ref().unwrap()), flat(b.last().semantic_logits.as_ref().unwrap()));
    worst = sa.iter().zip(&sb).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    ensure!(worst < EQUIVARIANCE_TOL, "permutation equivariance off by {worst:e}");
    Ok(format!("{shapes} random shape configurations; locality exact; equivariance within {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. formula spot values

fn criterion_4() -> Outcome {
    let gt: Vec<bool> = (0..100).map(|i| i < 50).collect();
    let dice = dice_value(&[-1e3; 100], &gt, 1.0);
    let want = 1.0 - 1.0 / 51.0;
    ensure!((dice - want).abs() < SPOT_TOL, "dice {dice} vs {want}");

    let logits = Tensor::zeros((5, 7), DType::F64, &Device::Cpu).unwrap();
    let mce = flat(&ok(mce_loss(&logits, &[0, 1, 2, 3, 4, 0, 1]))?)[0];
    ensure!((mce - 5f64.ln()).abs() < SPOT_TOL, "mce {mce} vs ln 5");

    let cfg = InferenceConfig::default();
    ensure!((cfg.clip_len, cfg.overlap) == (12, 6), "inference defaults {}/{}", cfg.clip_len, cfg.overlap);
    let windows = ok(window_video(24, &cfg))?;
    let spans: Vec<(usize, usize)> = windows.iter().map(|w| (w.start, w.end)).collect();
    ensure!(spans == [(0, 12), (6, 18), (12, 24)], "windows {spans:?}");
    let delay = max_emission_delay(&windows);
    ensure!(delay == 5 && cfg.delay_bound() == 5, "delay {delay}, bound {}", cfg.delay_bound());
    Ok(format!("dice {dice:.12}, mce {mce:.12}, windows {spans:?}, delay {delay}"))
}

// ---------------------------------------------------------------------------
// 5. overfit sanity

fn criterion_5(keep: &mut Option<Model>) -> Outcome {
    let data = overfit_data();
    let model = ok(Model::new(&ModelConfig::small(), DType::F32, 0))?;
    let model = train(model, &data, overfit_train_config(OVERFIT_PRETRAIN, OVERFIT_FINETUNE))?;
    let icfg = overfit_infer_config();
    let vis = aggregate(&model, &data, Task::Vis, &icfg)?;
    let vps = aggregate(&model, &data, Task::Vps, &icfg)?;
    let vos = aggregate(&model, &data, Task::Vos, &icfg)?;
    let pet = aggregate(&model, &data, Task::Pet, &icfg)?;
    let miou = vps.semantic_miou.unwrap_or(0.0);
    let detail = format!(
        "VIS IoU {:.3} switches {}, VPS mIoU {:.3} complete {:?}, VOS J {:.3}, PET J {:.3}",
        vis.mean_iou, vis.id_switches, miou, vps.panoptic_complete, vos.mean_iou, pet.mean_iou
    );
    *keep = Some(model);
    ensure!(
        vis.mean_iou >= OVERFIT_VIS_IOU
            && vis.id_switches == 0
            && miou >= OVERFIT_VPS_MIOU
            && vps.panoptic_complete == Some(true)
            && vos.mean_iou >= OVERFIT_VOS_J
            && pet.mean_iou >= OVERFIT_PET_J,
        "{detail}"
    );
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 6. hot-swap and mixed pass

fn criterion_6(trained: Option<&Model>) -> Outcome {
    let data = overfit_data();
    let model = match trained {
        Some(m) => m.clone(),
        None => train(ok(Model::new(&ModelConfig::small(), DType::F32, 0))?, &data, overfit_train_config(10, 10))?,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("checkpoint.safetensors");
    ok(model.save(&path, &CheckpointMeta::new(&model)))?;
    let (model, _, _) = ok(Model::load(&path))?;
    let icfg = overfit_infer_config();
    let video = &data.videos[0];
    let mut summary = Vec::new();
    for task in Task::ALL {
        let targets = ok(task_targets(task, video, "synth"))?;
        let res = ok(run_video(&model, &video.name, &video.clip, std::slice::from_ref(&targets), &icfg))?;
        check_results(&res, 1)?;
        summary.push(format!("{task} {} tracks", res[0].tracks.len()));
    }
    let groups = [ok(task_targets(Task::Vis, video, "synth"))?, ok(task_targets(Task::Vos, video, "synth"))?];
    let res = ok(run_video(&model, &video.name, &video.clip, &groups, &icfg))?;
    check_results(&res, 2)?;
    ensure!(res[0].task == Task::Vis && res[1].task == Task::Vos, "mixed pass group order");
    let vos_alone = ok(evaluate(&res[1], &ground_truth(&groups[1], video)))?;
    summary.push(format!("mixed VIS {} + VOS {} tracks (VOS J {:.3})", res[0].tracks.len(), res[1].tracks.len(), vos_alone.mean_iou));
    Ok(summary.join(", "))
}

fn check_results(res: &[tarvis_core::results::VideoResult], groups: usize) -> std::result::Result<(), String> {
    ensure!(res.len() == groups, "{} result groups, expected {groups}", res.len());
    for r in res {
        ok(r.validate())?;
    }
    let text = ok(results_to_json(res))?;
    let back = ok(results_from_json(&text))?;
    ensure!(back.as_slice() == res, "result file does not round-trip");
    Ok(())
}

// ---------------------------------------------------------------------------
// 7. ablation reachability

fn criterion_7() -> Outcome {
    let data = overfit_data();
    let icfg = overfit_infer_config();
    let variants: [(&str, fn(&mut ModelConfig)); 5] = [
        ("baseline", |_| {}),
        ("no temporal attention", |c| c.neck.temporal_attention = false),
        ("linear classifier", |c| c.queries.classifier = ClassifierMode::Linear),
        ("q_o=1", |c| c.objects.q_o = 1),
        ("no background queries", |c| c.objects.bg_grid = 0),
    ];
    let mut vos_j = BTreeMap::new();
    let mut out = Vec::new();
    for (name, edit) in variants {
        let mut cfg = ModelConfig::small();
        edit(&mut cfg);
        let model = ok(Model::new(&cfg, DType::F32, 0))?;
        let model = train(model, &data, overfit_train_config(0, ABLATION_STEPS)).map_err(|e| format!("{name}: {e}"))?;
        let j = aggregate(&model, &data, Task::Vos, &icfg)?.mean_iou;
        ensure!(j.is_finite(), "{name}: VOS J is not finite");
        vos_j.insert(name, j);
        out.push(format!("{name} VOS J {j:.3}"));
    }
    let (four, one) = (vos_j["baseline"], vos_j["q_o=1"]);
    out.push(format!("q_o=4 {} q_o=1 (reported)", if four >= one { ">=" } else { "<" }));
    Ok(out.join(", "))
}

// ---------------------------------------------------------------------------
// 8. determinism and persistence

fn criterion_8() -> Outcome {
    let cfg = SynthConfig {
        num_videos: 2,
        scene: SceneConfig {
            image_size: (64, 64),
            num_frames: 4,
            ..SceneConfig::default()
        },
        seed: 5,
    };
    let hash = |dir: &Path| -> std::result::Result<String, String> {
        ok(write_dataset(&ok(generate_dataset(&cfg))?, dir))?;
        ok(dataset_hash(dir))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ha, hb) = (hash(a.path())?, hash(b.path())?);
    ensure!(ha == hb, "dataset hashes differ: {ha} vs {hb}");

    let data = ok(generate_dataset(&cfg))?;
    let losses = || -> std::result::Result<Vec<u64>, String> {
        let model = ok(Model::new(&ModelConfig::small(), DType::F32, 0))?;
        let mut train_cfg = overfit_train_config(3, 2);
        train_cfg.seed = 9;
        let mut tr = ok(Trainer::new(model, data.clone(), train_cfg))?;
        let mut out = Vec::new();
        while !tr.is_done() {
            out.push(ok(tr.step())?.loss.total.to_bits());
        }
        Ok(out)
    };
    let (la, lb) = (losses()?, losses()?);
    ensure!(la.len() == 5 && la == lb, "5-step losses differ between identical runs");

    let model = ok(Model::new(&tiny_config(), DType::F64, 3))?;
    let clip = data.videos[0].clip.clone();
    let forward = |m: &Model| -> std::result::Result<Vec<f64>, String> {
        let pyr = ok(m.features(&clip))?;
        let out = ok(m.decode(&ok(m.class_queries(Task::Vps, "synth"))?, &pyr))?;
        let mut v = flat(&out.last().query_masks);
        v.extend(flat(out.last().class_logits.as_ref().unwrap()));
        v.extend(flat(out.last().semantic_logits.as_ref().unwrap()));
        Ok(v)
    };
    let path = a.path().join("model.safetensors");
    ok(model.save(&path, &CheckpointMeta::new(&model)))?;
    let (loaded, _, _) = ok(Model::load(&path))?;
    ensure!(forward(&model)? == forward(&loaded)?, "forward outputs differ after a checkpoint round-trip");
    Ok(format!("dataset hash {}, 5 losses bitwise equal, checkpoint forward exact", &ha[..12]))
}

// ---------------------------------------------------------------------------

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("TARVIS_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut trained: Option<Model> = None;
    let mut failed = 0;
    let names = [
        "oracle equivalence",
        "gradient suite",
        "structural invariants",
        "formula spot values",
        "overfit sanity",
        "hot-swap and mixed pass",
        "ablation reachability",
        "determinism and persistence",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&mut trained),
            6 => criterion_6(trained.as_ref()),
            7 => criterion_7(),
            _ => criterion_8(),
        }))
        .unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail} [{secs:.1}s]"),
            Err(reason) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {reason} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
