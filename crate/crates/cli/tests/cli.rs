use std::path::Path;
use std::process::{Command, Output};

fn tarvis(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tarvis"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_line_error(o: &Output, prefix: &str) {
    assert!(!o.status.success());
    let e = stderr(o);
    assert_eq!(e.trim_end().lines().count(), 1, "{e}");
    assert!(e.starts_with(prefix), "{e}");
}

/// Small but trainable settings: 64x64 videos of 4 frames, two-frame clips.
fn config() -> tarvis_core::config::RunConfig {
    let mut c = tarvis_core::config::RunConfig::default();
    c.model = tarvis_core::model::ModelConfig::small();
    c.model.neck.num_layers = 1;
    c.model.decoder.num_layers = 2;
    for phase in [&mut c.train.pretrain, &mut c.train.finetune] {
        phase.steps = 1;
        phase.clip_len = 2;
        phase.lr_decay_steps.clear();
    }
    c.train.loss.points.num_points = 64;
    c.train.checkpoint_interval = 0;
    c.infer.clip_len = 2;
    c.infer.overlap = 1;
    c.synth.num_videos = 2;
    c.synth.seed = 3;
    c.synth.scene.image_size = (64, 64);
    c.synth.scene.num_frames = 4;
    c.paths.dataset = "data".into();
    c.paths.run_dir = "run".into();
    c
}

fn write_config(dir: &Path) {
    std::fs::write(dir.join("run.toml"), config().to_toml()).unwrap();
}

#[test]
fn empty_config_is_a_schema_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("empty.toml"), "").unwrap();
    let o = tarvis(&["--config", "empty.toml", "synth"], d.path());
    assert_one_line_error(&o, "error: config:");
    assert!(stderr(&o).contains("schema"));
}

#[test]
fn usage_errors_are_single_lines() {
    let d = tempfile::tempdir().unwrap();
    let o = tarvis(&["frobnicate"], d.path());
    assert_one_line_error(&o, "error: usage:");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    write_config(p);

    // Synthesis is reproducible.
    let a = tarvis(&["--config", "run.toml", "synth"], p);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = tarvis(&["--config", "run.toml", "synth", "--out", "data2"], p);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).trim().len(), 64);
    assert!(p.join("data/video_000/cues_vos.json").exists());

    let t = tarvis(&["--config", "run.toml", "train"], p);
    assert!(t.status.success(), "{}", stderr(&t));
    let log = std::fs::read_to_string(p.join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let again = tarvis(&["--config", "run.toml", "train"], p);
    assert_one_line_error(&again, "error: usage:");

    // Resuming a finished run with a changed loss weight names the key.
    let mut changed = config();
    changed.train.loss.cls_weight = 3.0;
    std::fs::write(p.join("changed.toml"), changed.to_toml()).unwrap();
    let r = tarvis(&["--config", "changed.toml", "train", "--resume"], p);
    assert_one_line_error(&r, "error: config:");
    assert!(stderr(&r).contains("train.loss.cls_weight"), "{}", stderr(&r));

    let ck = "run/checkpoint.safetensors";
    let cue = "data/{video}/cues_vos.json";
    let cases: [(&str, Option<&str>); 5] = [
        ("vis", None),
        ("vps", None),
        ("vos", Some(cue)),
        ("pet", Some("data/{video}/cues_pet.json")),
        ("mixed", Some(cue)),
    ];
    for (task, cues) in cases {
        let out = format!("res_{task}");
        let mut args = vec!["--config", "run.toml", "infer", "--checkpoint", ck, "--videos", "data", "--task", task, "--out", &out];
        if let Some(c) = cues {
            args.extend(["--cues", c]);
        }
        let o = tarvis(&args, p);
        assert!(o.status.success(), "{task}: {}", stderr(&o));
        let text = std::fs::read_to_string(p.join(&out).join("video_001/result.json")).unwrap();
        let groups = tarvis_core::results::results_from_json(&text).unwrap();
        assert_eq!(groups.len(), if task == "mixed" { 2 } else { 1 });

        let e = tarvis(&["eval", "--results", &out, "--gt", "data"], p);
        assert!(e.status.success(), "{task}: {}", stderr(&e));
        let reports: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
        assert_eq!(reports.as_array().unwrap().len(), groups.len());
    }

    let o = tarvis(&["infer", "--checkpoint", ck, "--videos", "data", "--task", "vos", "--out", "x"], p);
    assert_one_line_error(&o, "error: usage:");
    assert!(stderr(&o).contains("--cues"));

    // Missing results name the video.
    std::fs::remove_file(p.join("res_vis/video_001/result.json")).unwrap();
    let e = tarvis(&["eval", "--results", "res_vis", "--gt", "data"], p);
    assert_one_line_error(&e, "error: invalid-input:");
    assert!(stderr(&e).contains("video_001"));

    let v = tarvis(
        &["--config", "run.toml", "viz-queries", "--checkpoint", ck, "--videos", "data", "--video", "video_000", "--out", "viz"],
        p,
    );
    assert!(v.status.success(), "{}", stderr(&v));
    let csv = std::fs::read_to_string(p.join("viz/queries.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x,y,role,id,task");
    assert!(csv.lines().skip(1).any(|l| l.ends_with(",vis")) && csv.lines().skip(1).any(|l| l.ends_with(",vos")));
    assert!(p.join("viz/queries.png").exists());

    let ov = tarvis(&["viz-overlay", "--results", "res_vos", "--videos", "data", "--out", "ov"], p);
    assert!(ov.status.success(), "{}", stderr(&ov));
    assert_eq!(std::fs::read_dir(p.join("ov/video_000")).unwrap().count(), 4);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    use tarvis_core::results::{save_results, TrackResult, VideoResult};
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    write_config(p);
    assert!(tarvis(&["--config", "run.toml", "synth"], p).status.success());
    let data = tarvis_core::synthgen::read_dataset(&p.join("data")).unwrap();
    for v in &data.videos {
        let ids: std::collections::BTreeSet<u32> = v.annotations.iter().flat_map(|a| a.track_ids()).collect();
        let r = VideoResult {
            video: v.name.clone(),
            task: tarvis_core::Task::Vos,
            height: 64,
            width: 64,
            num_frames: 4,
            tracks: ids
                .iter()
                .map(|&id| TrackResult {
                    id,
                    class_id: None,
                    score: 1.0,
                    masks: v.annotations.iter().map(|a| a.track_mask(id)).collect(),
                })
                .collect(),
            stuff: vec![],
        };
        save_results(&p.join("gt").join(&v.name).join("result.json"), &[r]).unwrap();
    }
    let e = tarvis(&["eval", "--results", "gt", "--gt", "data", "--out", "ev"], p);
    assert!(e.status.success(), "{}", stderr(&e));
    let reports: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    let r = &reports[0];
    assert_eq!(r["mean_iou"], 1.0);
    assert_eq!(r["jf"], 1.0);
    assert_eq!(r["id_switches"], 0);
    assert!(p.join("ev/eval.json").exists());
}

#[test]
fn overlay_of_empty_results_copies_frames() {
    use tarvis_core::results::{save_results, VideoResult};
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    write_config(p);
    assert!(tarvis(&["--config", "run.toml", "synth"], p).status.success());
    let r = VideoResult {
        video: "video_000".into(),
        task: tarvis_core::Task::Vis,
        height: 64,
        width: 64,
        num_frames: 4,
        tracks: vec![],
        stuff: vec![],
    };
    save_results(&p.join("empty.json"), &[r]).unwrap();
    let o = tarvis(&["viz-overlay", "--results", "empty.json", "--videos", "data", "--out", "ov"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in 0..4 {
        let name = format!("{f:05}.png");
        let a = image_bytes(&p.join("ov/video_000").join(&name));
        let b = image_bytes(&p.join("data/video_000/frames").join(&name));
        assert_eq!(a, b);
    }
}

fn image_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}
