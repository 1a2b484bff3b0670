//! End-to-end scoring of a model on an annotated video: prompts and ground
//! truth come from the annotations, predictions from [`run_video`].

use crate::decoder::DecoderOutput;
use crate::error::{bail, Result};
use crate::inference::{object_prompts, run_video, window_video, InferenceConfig, TaskTargets};
use crate::metrics::{evaluate, EvalReport, GroundTruth};
use crate::model::Model;
use crate::results::VideoResult;
use crate::queries::ObjectCueInput;
use crate::synthgen::{ObjectCue, Video};
use crate::types::Task;

/// Targets for `task` on `video`: the dataset's class table for VIS/VPS,
/// every annotated track for VOS/PET.
pub fn task_targets(task: Task, video: &Video, dataset: &str) -> Result<TaskTargets> {
    Ok(if task.is_object_guided() {
        TaskTargets::Objects {
            task,
            objects: object_prompts(task, &video.annotations)?,
        }
    } else {
        TaskTargets::Classes {
            task,
            dataset: dataset.to_string(),
        }
    })
}

/// Ground truth matching [`task_targets`].
pub fn ground_truth(targets: &TaskTargets, video: &Video) -> GroundTruth {
    match targets {
        TaskTargets::Classes { task, .. } => GroundTruth::instances(*task, &video.annotations),
        TaskTargets::Objects { task, objects } => {
            let cues: Vec<(u32, usize)> = objects.iter().map(|o| (o.id, o.frame)).collect();
            GroundTruth::objects(*task, &video.annotations, &cues)
        }
    }
}

pub fn run_and_evaluate(
    model: &Model,
    video: &Video,
    task: Task,
    dataset: &str,
    cfg: &InferenceConfig,
) -> Result<(VideoResult, EvalReport)> {
    let targets = task_targets(task, video, dataset)?;
    let result = run_video(model, &video.name, &video.clip, std::slice::from_ref(&targets), cfg)?
        .pop()
        .expect("one group in, one result out");
    let report = evaluate(&result, &ground_truth(&targets, video))?;
    Ok((result, report))
}

/// Decoder pass over the first inference window with `targets`. Guided
/// objects whose cue lies outside that window are skipped.
pub fn first_window_pass(model: &Model, video: &Video, targets: &TaskTargets, cfg: &InferenceConfig) -> Result<DecoderOutput> {
    use rand::SeedableRng;
    let w = window_video(video.clip.num_frames(), cfg)?[0];
    let clip = video.clip.slice(w.start, w.end);
    let pyr = model.features(&clip)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let queries = match targets {
        TaskTargets::Classes { task, dataset } => model.class_queries(*task, dataset)?,
        TaskTargets::Objects { task, objects } => {
            let inside: Vec<_> = objects.iter().filter(|o| o.frame < w.end).collect();
            if inside.is_empty() {
                bail!(InvalidInput, "no {task} cue falls in the first window of {}", video.name);
            }
            match task {
                Task::Pet => {
                    let pts = inside
                        .iter()
                        .map(|o| match o.cue {
                            ObjectCue::Point(y, x) => Ok((o.frame, y, x)),
                            ObjectCue::Mask(_) => bail!(TaskMismatch, "PET prompt with a mask cue"),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    model.point_cue_queries(&pyr, &pts, &mut rng)?
                }
                _ => {
                    let cues = inside
                        .iter()
                        .map(|o| ObjectCueInput {
                            frame: o.frame,
                            mask: o.cue.to_mask(video.clip.height, video.clip.width),
                        })
                        .collect::<Vec<_>>();
                    model.mask_cue_queries(&pyr, &cues, &mut rng)?
                }
            }
        }
    };
    model.decode(&queries, &pyr)
}
