//! `tarvis`: dataset synthesis, training, inference, evaluation and
//! visualization.
//!
//! Failures print one line `error: <reason>: <detail>` to stderr and exit
//! with status 1 (2 for usage errors).

mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use tarvis_core::config::RunConfig;
use tarvis_core::inference::{object_prompts, run_video, TaskTargets};
use tarvis_core::metrics::{evaluate, EvalReport};
use tarvis_core::model::Model;
use tarvis_core::protocol::{ground_truth, task_targets};
use tarvis_core::results::{load_results, save_results, CueFile};
use tarvis_core::synthgen::{dataset_hash, generate_dataset, read_dataset, write_dataset, Dataset, Video};
use tarvis_core::train::Trainer;
use tarvis_core::{Error, Result, Task};

#[derive(Parser)]
#[command(name = "tarvis", version, about = "Unified target-query video segmentation")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for generation, initialization, sampling and inference.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Vis,
    Vps,
    Vos,
    Pet,
    Mixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClassTaskArg {
    Vis,
    Vps,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (default output: `paths.dataset`).
    /// Each video also gets `cues_vos.json` and `cues_pet.json`.
    Synth,
    /// Train jointly on all tasks (default run directory: `paths.run_dir`).
    Train {
        /// Dataset directory, overriding `paths.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from `<run dir>/checkpoint.safetensors`.
        #[arg(long)]
        resume: bool,
    },
    /// Run a checkpoint over videos, writing `<out>/<video>/result.json`.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory holding the videos.
        #[arg(long)]
        videos: PathBuf,
        /// Only this video (default: all).
        #[arg(long)]
        video: Option<String>,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Cue file for vos, pet and mixed; `{video}` expands to the video
        /// name.
        #[arg(long)]
        cues: Option<String>,
        /// Class-driven half of a mixed pass.
        #[arg(long, value_enum, default_value = "vis")]
        mixed_classes: ClassTaskArg,
        /// Class table for vis and vps.
        #[arg(long, default_value = "synth")]
        classes: String,
    },
    /// Score result files against a dataset's annotations.
    Eval {
        /// Directory with `<video>/result.json`.
        #[arg(long)]
        results: PathBuf,
        /// Dataset directory with the ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Cue file used for vos/pet scoring (`{video}` expands); default:
        /// every annotated track from its first visible frame.
        #[arg(long)]
        cues: Option<String>,
    },
    /// Project refined target queries of two tasks to 2D and plot them.
    VizQueries {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        videos: PathBuf,
        #[arg(long)]
        video: String,
        /// Exactly two tasks, comma separated.
        #[arg(long, default_value = "vis,vos", value_delimiter = ',')]
        tasks: Vec<Task>,
        #[arg(long, default_value = "synth")]
        classes: String,
    },
    /// Draw result tracks over the video frames.
    VizOverlay {
        /// A `result.json` or a directory of `<video>/result.json`.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        videos: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Core(_) => ExitCode::FAILURE,
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Worker count from `TARVIS_NUM_WORKERS` (default 1).
fn num_workers() -> CliResult<usize> {
    match std::env::var("TARVIS_NUM_WORKERS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("TARVIS_NUM_WORKERS must be a positive integer, got {v:?}"))),
        },
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let workers = num_workers()?;
    match &cli.command {
        Command::Synth => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
            let data = generate_dataset(&cfg.synth)?;
            write_dataset(&data, &out)?;
            for v in &data.videos {
                for task in [Task::Vos, Task::Pet] {
                    let cues = CueFile {
                        video: v.name.clone(),
                        task,
                        objects: object_prompts(task, &v.annotations)?,
                    };
                    cues.save(&out.join(&v.name).join(format!("cues_{task}.json")))?;
                }
            }
            println!("{}", dataset_hash(&out)?);
            Ok(())
        }
        Command::Train { dataset, resume } => {
            let data_dir = dataset.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
            let run_dir = cli.out.clone().unwrap_or_else(|| cfg.paths.run_dir.clone());
            let data = read_dataset(&data_dir)?;
            let ck = run_dir.join("checkpoint.safetensors");
            let mut trainer = if *resume {
                Trainer::resume(&ck, data, cfg.train.clone(), &cfg.model)?
            } else {
                if ck.exists() {
                    return Err(usage(format!("{} exists; pass --resume or choose another --out", ck.display())));
                }
                let model = Model::new(&cfg.model, candle_core::DType::F32, cfg.train.seed)?;
                Trainer::new(model, data, cfg.train.clone())?
            };
            let total = cfg.train.total_steps();
            info!("training {} -> {} of {total} steps in {}", trainer.step_count(), total, run_dir.display());
            trainer.run(&run_dir, |r| {
                if r.step % 50 == 0 || r.step == total {
                    info!("step {} {} loss {:.4}", r.step, r.phase, r.loss.total);
                }
            })?;
            // Readers of a run directory get the exact settings next to the weights.
            std::fs::write(run_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&run_dir, e))?;
            Ok(())
        }
        Command::Infer {
            checkpoint,
            videos,
            video,
            task,
            cues,
            mixed_classes,
            classes,
        } => {
            if matches!(task, TaskArg::Vos | TaskArg::Pet | TaskArg::Mixed) && cues.is_none() {
                return Err(usage("--cues is required for vos, pet and mixed"));
            }
            let out = cli.out.clone().ok_or_else(|| usage("infer needs --out"))?;
            let (model, _, _) = Model::load(checkpoint)?;
            let data = read_dataset(videos)?;
            let selected = select_videos(&data, video.as_deref())?;
            let build = |v: &Video| -> CliResult<Vec<TaskTargets>> {
                let classes_for = |t: Task| TaskTargets::Classes {
                    task: t,
                    dataset: classes.clone(),
                };
                let objects = || -> CliResult<TaskTargets> {
                    let f = CueFile::load(&expand(cues.as_deref().unwrap(), &v.name))?;
                    let want = match task {
                        TaskArg::Vos => Some(Task::Vos),
                        TaskArg::Pet => Some(Task::Pet),
                        _ => None,
                    };
                    if want.is_some_and(|t| t != f.task) {
                        return Err(Error::TaskMismatch(format!("cue file is for {}", f.task)).into());
                    }
                    Ok(TaskTargets::Objects {
                        task: f.task,
                        objects: f.objects,
                    })
                };
                Ok(match task {
                    TaskArg::Vis => vec![classes_for(Task::Vis)],
                    TaskArg::Vps => vec![classes_for(Task::Vps)],
                    TaskArg::Vos | TaskArg::Pet => vec![objects()?],
                    TaskArg::Mixed => {
                        let c = match mixed_classes {
                            ClassTaskArg::Vis => Task::Vis,
                            ClassTaskArg::Vps => Task::Vps,
                        };
                        vec![classes_for(c), objects()?]
                    }
                })
            };
            let jobs: Vec<(&Video, Vec<TaskTargets>)> =
                selected.iter().map(|v| Ok((*v, build(v)?))).collect::<CliResult<_>>()?;
            let results = parallel_map(&jobs, workers, |(v, t)| run_video(&model, &v.name, &v.clip, t, &cfg.infer));
            for ((v, _), r) in jobs.iter().zip(results) {
                let r = r?;
                let path = out.join(&v.name).join("result.json");
                save_results(&path, &r)?;
                if r.iter().any(|g| g.task == Task::Vps) && r.len() == 1 {
                    r[0].save_panoptic_png(&out.join(&v.name))?;
                }
                info!("{} -> {}", v.name, path.display());
            }
            Ok(())
        }
        Command::Eval { results, gt, cues } => {
            let data = read_dataset(gt)?;
            let mut per_task: std::collections::BTreeMap<Task, Vec<EvalReport>> = Default::default();
            for v in &data.videos {
                let path = results.join(&v.name).join("result.json");
                if !path.exists() {
                    return Err(Error::InvalidInput(format!("missing result file for video {}: {}", v.name, path.display())).into());
                }
                for r in load_results(&path)? {
                    let targets = match (&cues, r.task.is_object_guided()) {
                        (Some(c), true) => {
                            let f = CueFile::load(&expand(c, &v.name))?;
                            TaskTargets::Objects {
                                task: r.task,
                                objects: f.objects,
                            }
                        }
                        _ => task_targets(r.task, v, "synth")?,
                    };
                    let rep = evaluate(&r, &ground_truth(&targets, v))?;
                    if let Some(out) = &cli.out {
                        rep.save(&out.join(&v.name).join(format!("eval_{}.json", r.task)))?;
                    }
                    per_task.entry(r.task).or_default().push(rep);
                }
            }
            let summary: Vec<EvalReport> = per_task
                .values()
                .map(|reps| EvalReport::aggregate(reps))
                .collect::<Result<_>>()?;
            if let Some(out) = &cli.out {
                tarvis_core::synthgen::write_json(&out.join("eval.json"), &summary)?;
            }
            println!("{}", serde_json::to_string_pretty(&summary).expect("reports serialize"));
            Ok(())
        }
        Command::VizQueries {
            checkpoint,
            videos,
            video,
            tasks,
            classes,
        } => {
            if tasks.len() != 2 {
                return Err(usage("--tasks takes exactly two tasks"));
            }
            let out = cli.out.clone().ok_or_else(|| usage("viz-queries needs --out"))?;
            let (model, _, _) = Model::load(checkpoint)?;
            let data = read_dataset(videos)?;
            let v = select_videos(&data, Some(video))?[0];
            let s = viz::query_scatter(&model, v, tasks, classes, &cfg.infer, &out)?;
            info!(
                "{} queries; spread first layer {:.4}, last layer {:.4}",
                s.rows, s.first_spread, s.last_spread
            );
            Ok(())
        }
        Command::VizOverlay { results, videos } => {
            let out = cli.out.clone().ok_or_else(|| usage("viz-overlay needs --out"))?;
            let data = read_dataset(videos)?;
            let files: Vec<PathBuf> = if results.is_file() {
                vec![results.clone()]
            } else {
                data.videos
                    .iter()
                    .map(|v| results.join(&v.name).join("result.json"))
                    .filter(|p| p.exists())
                    .collect()
            };
            for f in files {
                let groups = load_results(&f)?;
                let v = select_videos(&data, Some(&groups[0].video))?[0];
                viz::overlay(v, &groups, &out.join(&v.name))?;
            }
            Ok(())
        }
    }
}

fn expand(pattern: &str, video: &str) -> PathBuf {
    PathBuf::from(pattern.replace("{video}", video))
}

fn select_videos<'a>(data: &'a Dataset, name: Option<&str>) -> CliResult<Vec<&'a Video>> {
    match name {
        None => Ok(data.videos.iter().collect()),
        Some(n) => data
            .videos
            .iter()
            .find(|v| v.name == n)
            .map(|v| vec![v])
            .ok_or_else(|| Error::InvalidInput(format!("no video named {n}")).into()),
    }
}

/// Maps `f` over `items` on up to `workers` threads, keeping order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
