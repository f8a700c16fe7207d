use std::path::{Path, PathBuf};

use clap::Args;
use epiray::io::{frame_names, read_sfm_model, read_trajectory_json, to_trajectory};
use epiray::metrics::{
    aggregate, evaluate, write_metrics_csv, SampleAggregate, SampleTrials, Trajectory, TrialOutcome,
};
use serde::{Deserialize, Serialize};

use crate::common::*;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground truth: a pose file, or a trajectory `.json`
    /// (`{"frames":[{"R":[9],"T":[3]}]}`, camera-to-world).
    #[arg(long, required_unless_present = "manifest")]
    pub gt: Option<PathBuf>,
    /// SfM output directory of one trial (repeatable); `cameras.txt` and
    /// `images.txt` are looked up directly or under `sparse/0`.
    #[arg(long = "trial")]
    pub trials: Vec<PathBuf>,
    /// JSON list of `{"sample_id", "gt", "trials": [...]}`; relative paths
    /// resolve against the manifest's directory.
    #[arg(long, conflicts_with_all = ["gt", "trials"])]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "sample")]
    pub sample_id: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Image-name template; `{:03}` is replaced by the zero-padded frame index.
    #[arg(long)]
    pub names: Option<String>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub start: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFileConfig {
    names: Option<String>,
    frames: Option<usize>,
    stride: Option<usize>,
    start: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    sample_id: String,
    gt: PathBuf,
    trials: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Effective {
    names: String,
    frames: usize,
    stride: usize,
    start: usize,
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    config: &'a Effective,
    summary: &'a SampleAggregate,
    samples: &'a [SampleTrials],
}

fn load_gt(path: &Path, cfg: &Effective) -> CliResult<Trajectory<f64>> {
    require_file(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let t = read_trajectory_json(path)?;
        if t.len() != cfg.frames {
            return Err(CliError::usage(format!(
                "{}: {} poses, expected {}",
                path.display(),
                t.len(),
                cfg.frames
            )));
        }
        return Ok(t);
    }
    let clip = load_clip(
        path,
        &ClipSelection {
            n_frames: cfg.frames,
            stride: cfg.stride,
            start: cfg.start,
            width: 1,
            height: 1,
        },
    )?;
    let poses: Vec<_> = clip.frames.iter().map(|f| f.pose).collect();
    Ok(Trajectory::from_world_to_camera(&poses)?)
}

fn run_trial(dir: &Path, gt: &Trajectory<f64>, names: &[String]) -> TrialOutcome {
    let result = read_sfm_model(dir)
        .and_then(|model| to_trajectory(&model, names))
        .and_then(|est| evaluate(gt, &est));
    match result {
        Ok(m) => TrialOutcome::Success(m),
        Err(e) => TrialOutcome::failed(e.to_string()),
    }
}

fn evaluate_sample(
    id: &str,
    gt_path: &Path,
    trials: &[PathBuf],
    cfg: &Effective,
) -> CliResult<SampleTrials> {
    if trials.is_empty() {
        return Err(CliError::usage(format!(
            "sample `{id}` has no trial directories"
        )));
    }
    let gt = load_gt(gt_path, cfg)?;
    let names = frame_names(&cfg.names, cfg.frames);
    let outcomes = trials
        .iter()
        .map(|dir| {
            let o = run_trial(dir, &gt, &names);
            if let TrialOutcome::Failed { reason } = &o {
                eprintln!("warning: {id}: trial {} failed: {reason}", dir.display());
            }
            o
        })
        .collect();
    Ok(SampleTrials {
        sample_id: id.to_string(),
        trials: outcomes,
    })
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let file: EvalFileConfig = load_config(args.config.as_ref())?;
    let cfg = Effective {
        names: pick(args.names, file.names, "{:03}.png".to_string()),
        frames: pick(args.frames, file.frames, 16),
        stride: pick(args.stride, file.stride, 8),
        start: pick(args.start, file.start, 0),
    };
    if cfg.frames < 2 {
        return Err(CliError::usage("--frames must be at least 2"));
    }
    let samples = match &args.manifest {
        Some(path) => {
            require_file(path)?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            entries
                .iter()
                .map(|e| {
                    let trials: Vec<PathBuf> = e.trials.iter().map(|t| base.join(t)).collect();
                    evaluate_sample(&e.sample_id, &base.join(&e.gt), &trials, &cfg)
                })
                .collect::<CliResult<Vec<_>>>()?
        }
        None => {
            let gt = args
                .gt
                .as_ref()
                .expect("clap requires --gt without --manifest");
            vec![evaluate_sample(&args.sample_id, gt, &args.trials, &cfg)?]
        }
    };
    let summary = aggregate(&samples)?;

    create_dir(&args.out)?;
    let mut csv = Vec::new();
    write_metrics_csv(&samples, &mut csv)?;
    write_file(&args.out.join("metrics.csv"), csv)?;
    write_json(
        &args.out.join("metrics.json"),
        &EvalReport {
            config: &cfg,
            summary: &summary,
            samples: &samples,
        },
    )?;

    match &summary.dataset_mean {
        Some(m) => println!(
            "samples={} trials={} failed_trials={} rot_err={} trans_err={} cam_mc={}",
            summary.n_samples,
            summary.n_trials,
            summary.n_failed_trials,
            m.rot_err,
            m.trans_err,
            m.cam_mc
        ),
        None => {
            return Err(CliError::runtime(format!(
                "every trial of every sample failed ({} trials); see {}",
                summary.n_trials,
                args.out.join("metrics.json").display()
            )))
        }
    }
    Ok(())
}
