//! Joint multi-task training: a pseudo-video pretraining phase on augmented
//! stills followed by finetuning on video clips, one task drawn per sample.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointMeta, RngState};
use crate::error::{bail, Error, Result};
use crate::losses::{instance_loss, object_loss, LossConfig, LossReport, TaskLoss};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::queries::ObjectCueInput;
use crate::synthgen::{
    augment_still_to_clip, derive_task_targets, sample_task, AugmentConfig, Dataset, ObjectCue, PanopticFrame,
    TargetOptions, Targets, TaskSample, TaskWeights,
};
use crate::types::{Task, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adam with decoupled weight decay (applied to parameters of rank ≥ 2).
/// Parameters without a gradient in a step are left untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    steps: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64, clip_scale: f64) -> Result<()> {
        let c = &self.config;
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * clip_scale)?;
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let bc1 = 1.0 - c.beta1.powi(*t as i32);
            let bc2 = 1.0 - c.beta2.powi(*t as i32);
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor();
            let mut next = (theta - (update * lr)?)?;
            if theta.rank() >= 2 && c.weight_decay > 0.0 {
                next = (next - (theta * (lr * c.weight_decay))?)?;
            }
            var.set(&next.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// State tensors keyed `optim.{m,v,t}.<param>`.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, m) in &self.m {
            out.insert(format!("optim.m.{k}"), m.clone());
            out.insert(format!("optim.v.{k}"), self.v[k].clone());
            let t = Tensor::new(&[self.steps[k] as f64], &candle_core::Device::Cpu)?;
            out.insert(format!("optim.t.{k}"), t);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, params: &ParamStore) -> Result<()> {
        for (k, t) in tensors {
            let Some(rest) = k.strip_prefix("optim.") else {
                continue;
            };
            let (kind, name) = rest.split_at(1);
            let name = &name[1..];
            let var = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            match kind {
                "m" => {
                    self.m.insert(name.to_string(), t.to_dtype(var.dtype())?);
                }
                "v" => {
                    self.v.insert(name.to_string(), t.to_dtype(var.dtype())?);
                }
                "t" => {
                    self.steps.insert(name.to_string(), t.to_vec1::<f64>()?[0] as u64);
                }
                _ => return Err(Error::Checkpoint(format!("unknown optimizer tensor {k}"))),
            }
        }
        if self.m.len() != self.v.len() || self.m.len() != self.steps.len() {
            return Err(Error::Checkpoint("incomplete optimizer state".into()));
        }
        Ok(())
    }
}

/// Global gradient L2 norm over the parameters that received gradients.
pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut s = 0.0;
    for (_, var) in params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            s += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(s.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: usize,
    pub task_weights: TaskWeights,
    pub lr: f64,
    /// Phase-relative steps at which the learning rate drops by 10x.
    #[serde(default)]
    pub lr_decay_steps: Vec<usize>,
    pub clip_len: usize,
}

impl PhaseConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * 0.1f64.powi(self.lr_decay_steps.iter().filter(|&&s| step >= s).count() as i32)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.steps > 0 {
            self.task_weights.validate()?;
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.clip_len == 0 {
            bail!(Config, "{name}: lr must be positive and clip_len at least 1");
        }
        Ok(())
    }
}

/// Finetuning task weights.
pub fn finetune_task_weights() -> TaskWeights {
    TaskWeights(BTreeMap::from([
        (Task::Vps, 0.3),
        (Task::Vis, 0.45),
        (Task::Vos, 0.125),
        (Task::Pet, 0.125),
    ]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Upper bound on guided objects per VOS/PET sample.
    #[serde(default)]
    pub max_objects: Option<usize>,
    /// Class table used for VIS/VPS queries.
    pub dataset: String,
    pub seed: u64,
    /// Checkpoint every this many steps; `0` only at the end.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: PhaseConfig {
                steps: 6000,
                task_weights: TaskWeights::pretrain_default(),
                lr: 1e-4,
                lr_decay_steps: vec![4000, 5500],
                clip_len: 3,
            },
            finetune: PhaseConfig {
                steps: 4000,
                task_weights: finetune_task_weights(),
                lr: 1e-4,
                lr_decay_steps: vec![3000, 3700],
                clip_len: 4,
            },
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            batch_size: 1,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            max_objects: None,
            dataset: "synth".into(),
            seed: 0,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate("pretrain")?;
        self.finetune.validate("finetune")?;
        if self.pretrain.steps + self.finetune.steps == 0 {
            bail!(Config, "training needs at least one step");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            bail!(Config, "grad_clip must be non-negative");
        }
        self.loss.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.pretrain.steps + self.finetune.steps
    }

    /// Phase name, phase settings and phase-relative step of global `step`.
    pub fn phase(&self, step: usize) -> (&'static str, &PhaseConfig, usize) {
        if step < self.pretrain.steps {
            ("pretrain", &self.pretrain, step)
        } else {
            ("finetune", &self.finetune, step - self.pretrain.steps)
        }
    }
}

/// One supervised sample.
pub fn sample_loss(model: &Model, sample: &TaskSample, dataset: &str, cfg: &LossConfig, rng: &mut ChaCha8Rng) -> Result<TaskLoss> {
    let clip = &sample.clip;
    let image = (clip.height, clip.width);
    let pyr = model.features(clip)?;
    match &sample.targets {
        Targets::Instance(t) => {
            let q = model.class_queries(sample.task, dataset)?;
            let out = model.decode(&q, &pyr)?;
            instance_loss(&out.outputs, &Model::class_columns(&q), t, image, cfg, rng)
        }
        Targets::Object(t) => {
            let q = match sample.task {
                Task::Pet => {
                    let pts = t
                        .objects
                        .iter()
                        .map(|o| match o.cue {
                            ObjectCue::Point(y, x) => Ok((o.cue_frame, y, x)),
                            ObjectCue::Mask(_) => bail!(TaskMismatch, "PET sample with a mask cue"),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    model.point_cue_queries(&pyr, &pts, rng)?
                }
                _ => {
                    let cues = t
                        .objects
                        .iter()
                        .map(|o| match &o.cue {
                            ObjectCue::Mask(m) => Ok(ObjectCueInput {
                                frame: o.cue_frame,
                                mask: m.clone(),
                            }),
                            ObjectCue::Point(..) => bail!(TaskMismatch, "VOS sample with a point cue"),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    model.mask_cue_queries(&pyr, &cues, rng)?
                }
            };
            let out = model.decode(&q, &pyr)?;
            object_loss(&out.outputs, t, image, cfg, rng)
        }
    }
}

/// What one optimizer step did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub phase: String,
    pub tasks: Vec<Task>,
    pub lr: f64,
    pub grad_norm: f64,
    /// Mean over the batch.
    pub loss: LossReport,
}

impl StepReport {
    pub const LOG_HEADER: &'static str = "step\tphase\ttasks\tlr\tgrad_norm\ttotal\tcls\tmask_bce\tmask_dice\tsemantic_mce";

    pub fn log_line(&self) -> String {
        let t = &self.loss.terms;
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.as_str()).collect();
        format!(
            "{}\t{}\t{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step,
            self.phase,
            tasks.join(","),
            self.lr,
            self.grad_norm,
            self.loss.total,
            t.cls,
            t.mask_bce,
            t.mask_dice,
            t.semantic_mce
        )
    }
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    data: Dataset,
    rng: ChaCha8Rng,
    step: usize,
}

/// Keys whose values differ between two JSON objects, as dotted paths.
pub fn config_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn rec(a: &serde_json::Value, b: &serde_json::Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => rec(u, v, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    rec(a, b, "", &mut out);
    out
}

/// Settings that may change when resuming (schedule length and output
/// cadence).
const RESUMABLE_KEYS: [&str; 3] = ["pretrain.steps", "finetune.steps", "checkpoint_interval"];

impl Trainer {
    pub fn new(model: Model, data: Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.videos.is_empty() {
            bail!(InvalidInput, "training dataset has no videos");
        }
        model.bank.classes(&config.dataset)?;
        Ok(Self {
            optimizer: AdamW::new(config.optimizer.clone()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            data,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`]. The model
    /// and training settings must match except for [`RESUMABLE_KEYS`].
    pub fn resume(path: &Path, data: Dataset, config: TrainConfig, model_config: &crate::model::ModelConfig) -> Result<Self> {
        let (model, meta, extra) = Model::load(path)?;
        let mut diff: Vec<String> = config_diff(
            &serde_json::to_value(model_config).expect("serializable"),
            &serde_json::to_value(&meta.model).expect("serializable"),
        )
        .into_iter()
        .map(|k| format!("model.{k}"))
        .collect();
        let stored: TrainConfig = serde_json::from_value(meta.run.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: no usable training config: {e}", path.display())))?;
        diff.extend(
            config_diff(&serde_json::to_value(&config).expect("serializable"), &serde_json::to_value(&stored).expect("serializable"))
                .into_iter()
                .filter(|k| !RESUMABLE_KEYS.contains(&k.as_str()))
                .map(|k| format!("train.{k}")),
        );
        if !diff.is_empty() {
            bail!(Config, "checkpoint {} is incompatible: differing keys {}", path.display(), diff.join(", "));
        }
        if meta.step > config.total_steps() {
            bail!(Config, "checkpoint is at step {}, beyond the configured {} steps", meta.step, config.total_steps());
        }
        let mut t = Trainer::new(model, data, config)?;
        t.optimizer.load_state(&extra, &t.model.params)?;
        t.rng = meta
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no rng state".into()))?
            .restore()?;
        t.step = meta.step;
        Ok(t)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    fn draw_clip(&mut self, pretrain: bool, len: usize) -> Result<(VideoClip, Vec<PanopticFrame>)> {
        let v = &self.data.videos[self.rng.random_range(0..self.data.videos.len())];
        let n = v.clip.num_frames();
        if pretrain {
            let f = self.rng.random_range(0..n);
            let seed = self.rng.random();
            augment_still_to_clip(&v.clip.frames[f], &v.annotations[f], len, &self.config.augment, seed)
        } else {
            let len = len.min(n);
            let s = self.rng.random_range(0..=n - len);
            Ok((v.clip.slice(s, s + len), v.annotations[s..s + len].to_vec()))
        }
    }

    /// Draws a task and a clip that supports it (guided tasks need at
    /// least one object).
    pub fn draw_sample(&mut self) -> Result<TaskSample> {
        let (_, phase, _) = self.config.phase(self.step);
        let (weights, len) = (phase.task_weights.clone(), phase.clip_len);
        let pretrain = self.step < self.config.pretrain.steps;
        let task = sample_task(&weights, &mut self.rng)?;
        let options = TargetOptions {
            max_objects: self.config.max_objects,
        };
        for _ in 0..64 {
            let (clip, ann) = self.draw_clip(pretrain, len)?;
            match derive_task_targets(&clip, &ann, task, &options, &mut self.rng) {
                Ok(s) => return Ok(s),
                Err(Error::NoTrackableObjects(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::NoTrackableObjects(format!("no clip with objects found for {task}")))
    }

    /// One optimizer step over `batch_size` freshly drawn samples.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_done() {
            bail!(InvalidInput, "training already finished at step {}", self.step);
        }
        let (phase_name, phase, rel) = self.config.phase(self.step);
        let lr = phase.lr_at(rel);
        let phase_name = phase_name.to_string();
        let mut total: Option<Tensor> = None;
        let mut tasks = Vec::new();
        let mut report = LossReport::default();
        let b = self.config.batch_size as f64;
        for _ in 0..self.config.batch_size {
            let sample = self.draw_sample()?;
            let loss = sample_loss(&self.model, &sample, &self.config.dataset, &self.config.loss, &mut self.rng)?;
            tasks.push(sample.task);
            let terms = &loss.report.terms;
            report.terms.cls += terms.cls / b;
            report.terms.mask_bce += terms.mask_bce / b;
            report.terms.mask_dice += terms.mask_dice / b;
            report.terms.semantic_mce += terms.semantic_mce / b;
            report.total += loss.report.total / b;
            let t = (loss.total / b)?;
            total = Some(match total {
                Some(a) => (a + t)?,
                None => t,
            });
        }
        if !report.total.is_finite() {
            bail!(InvalidInput, "non-finite loss at step {}", self.step);
        }
        let grads = total.expect("batch_size >= 1").backward()?;
        let norm = grad_norm(&self.model.params, &grads)?;
        if !norm.is_finite() {
            bail!(InvalidInput, "non-finite gradient at step {}", self.step);
        }
        let clip = self.config.grad_clip;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.optimizer.step(&self.model.params, &grads, lr, scale)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            phase: phase_name,
            tasks,
            lr,
            grad_norm: norm,
            loss: report,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = CheckpointMeta::new(&self.model);
        meta.step = self.step;
        meta.run = serde_json::to_value(&self.config).expect("serializable");
        meta.rng = Some(RngState::capture(&self.rng));
        let mut tensors = self.model.named_tensors();
        tensors.extend(self.optimizer.state()?);
        crate::checkpoint::save_checkpoint(path, &meta, &tensors)
    }

    /// Trains to the end under an exclusive lock on `run_dir`, appending to
    /// `train.log` and writing `checkpoint.safetensors` at the configured
    /// interval and at the end. `on_step` sees every report.
    pub fn run(&mut self, run_dir: &Path, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let _lock = RunLock::acquire(run_dir)?;
        let log_path = run_dir.join("train.log");
        let fresh = !log_path.exists();
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        if fresh {
            writeln!(log, "{}", StepReport::LOG_HEADER).map_err(|e| Error::io(&log_path, e))?;
        }
        let ck = run_dir.join("checkpoint.safetensors");
        while !self.is_done() {
            let r = self.step()?;
            writeln!(log, "{}", r.log_line()).map_err(|e| Error::io(&log_path, e))?;
            on_step(&r);
            let every = self.config.checkpoint_interval;
            if every > 0 && self.step % every == 0 && !self.is_done() {
                self.save(&ck)?;
                log::info!("step {}: checkpoint {}", self.step, ck.display());
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        self.save(&ck)?;
        log::info!("finished at step {}: checkpoint {}", self.step, ck.display());
        Ok(())
    }
}

/// Exclusive `train.lock` in a run directory, removed on drop.
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("train.lock");
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::InvalidInput(format!("run directory {} is locked by {}", dir.display(), path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
