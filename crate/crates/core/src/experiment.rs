//! Experiment directories: running, summarizing, comparing and exporting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::avatar::{deform_gaussians, write_ply, GaussianAvatar};
use crate::config::ExperimentConfig;
use crate::headmodel::{deform_mesh, ActionUnit, CameraPose, Expression, ParametricHead, NUM_BLENDSHAPES};
use crate::metrics::{self, MetricReport};
use crate::optimize::AdamState;
use crate::oracle::OracleWorld;
use crate::render::{render_video, save_sequence, Video};
use crate::symgen::{self, EvalReport, IterationLog, Mode, TrainObserver};
use crate::{Error, Result};

/// Overrides the directory new runs are created under.
pub const OUTPUT_ROOT_ENV: &str = "SPLATGEN_OUTPUT_ROOT";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const AVATAR_FILE: &str = "avatar.json";
pub const FINAL_PLY: &str = "final.ply";
const TURNTABLE_FRAMES: usize = 16;
const FPS_TRIALS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub iterations: u64,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
    pub metrics: MetricReport,
}

/// Directory a run is written to: `out` if given, otherwise
/// `<root>/<mode>-seed<seed>` with the root taken from the environment, the
/// config, or `runs`.
pub fn run_dir(config: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    if let Some(out) = out {
        return out.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .or_else(|| config.output_root.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{}-seed{}", config.mode.name(), config.seed))
}

pub fn is_completed(dir: &Path) -> bool {
    dir.join(SUMMARY_FILE).is_file()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    head: ParametricHead,
}

impl TrainObserver for RunWriter {
    fn on_iteration(&mut self, log: &IterationLog) -> Result<()> {
        let line = serde_json::to_string(log).expect("serializable");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(self.dir.join(METRICS_FILE), e))?;
        if let Some(e) = &log.eval {
            log::info!(
                "iteration {}: loss {:.5}, held-out PSNR {:.2} dB, frontal {:.2} dB",
                log.iteration,
                log.loss.total,
                e.held_out_psnr,
                e.frontal_psnr
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, iteration: u64, avatar: &GaussianAvatar, adam: &AdamState) -> Result<()> {
        let dir = self.dir.join("checkpoints");
        create_dir(&dir)?;
        let world = deform_gaussians(avatar, &self.head.neutral_mesh());
        write_ply(&dir.join(format!("avatar-{iteration:06}.ply")), &world)?;
        write_json(&dir.join(format!("avatar-{iteration:06}.json")), avatar)?;
        write_json(&dir.join(format!("adam-{iteration:06}.json")), adam)
    }
}

/// Neutral frontal-distance sweep of azimuths from 30 to 150 degrees.
pub fn turntable_cameras(frames: usize) -> Vec<CameraPose> {
    (0..frames)
        .map(|i| {
            let t = i as f64 / (frames.max(2) - 1) as f64;
            CameraPose::new(9.5, 55.0, 0.0, 30.0 + 120.0 * t)
        })
        .collect()
}

/// Frontal clip cycling through every action unit, each rising and falling.
pub fn expression_sweep(frames: usize) -> Vec<Expression> {
    (0..frames)
        .map(|i| {
            let t = i as f64 / frames as f64 * NUM_BLENDSHAPES as f64;
            let unit = (t.floor() as usize).min(NUM_BLENDSHAPES - 1);
            let mut c = [0.0; NUM_BLENDSHAPES];
            c[unit] = (std::f64::consts::PI * t.fract()).sin();
            Expression::new(c, [0.0; 3])
        })
        .collect()
}

/// Trains according to `config` and fills `dir`. Refuses a completed directory.
pub fn run(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    if is_completed(dir) {
        return Err(Error::Config {
            path: dir.display().to_string(),
            message: "experiment directory is already complete; choose another --out".into(),
        });
    }
    config.validate()?;
    create_dir(dir)?;
    let resolved = config.resolved();
    std::fs::write(dir.join(CONFIG_FILE), resolved.to_toml()).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    let world = OracleWorld::new(&config.head, config.corruption, config.seed);
    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut writer = RunWriter {
        dir: dir.to_path_buf(),
        metrics: BufWriter::new(file),
        head: world.gt_head.clone(),
    };
    let settings = resolved.train_settings();
    let outcome = symgen::train(&settings, &world, &mut writer)?;
    writer.metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let head = &world.gt_head;
    write_json(&dir.join(AVATAR_FILE), &outcome.avatar)?;
    write_ply(&dir.join(FINAL_PLY), &deform_gaussians(&outcome.avatar, &head.neutral_mesh()))?;

    let r = config.resolution;
    let cams = turntable_cameras(TURNTABLE_FRAMES);
    let turntable = render_video(&outcome.avatar, head, &cams, &vec![Expression::neutral(); cams.len()], r, r, world.background);
    let exprs = expression_sweep(TURNTABLE_FRAMES);
    let frontal = CameraPose::new(9.5, 55.0, 0.0, 90.0);
    let sweep = render_video(&outcome.avatar, head, &vec![frontal; exprs.len()], &exprs, r, r, world.background);
    save_sequence(&turntable, &dir.join("renders/turntable"), "frame")?;
    save_sequence(&sweep, &dir.join("renders/expressions"), "frame")?;

    let reference = world.gt_render(&frontal, &Expression::neutral(), r, r);
    let report = MetricReport {
        psnr_db: outcome.final_eval.held_out_psnr,
        id_consistency: metrics::id_consistency(&turntable, &reference)?,
        motion_stability: metrics::motion_stability(&sweep)?,
        render_fps: Some(metrics::render_fps(&outcome.avatar, head, &frontal, r, r, FPS_TRIALS)?),
    };
    let summary = RunSummary {
        mode: config.mode,
        seed: config.seed,
        iterations: config.iterations,
        initial_eval: outcome.initial_eval,
        final_eval: outcome.final_eval,
        metrics: report,
    };
    // Written last: its presence marks the directory complete.
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Metrics of a directory of PNG frames against a reference frame and,
/// optionally, a ground-truth frame directory.
pub fn evaluate_frames(frames_dir: &Path, reference: &Path, ground_truth: Option<&Path>) -> Result<MetricReport> {
    let frames = crate::render::load_sequence(frames_dir)?;
    let reference = crate::render::Image::load_png(reference)?;
    let psnr_db = match ground_truth {
        Some(dir) => metrics::video_psnr(&frames, &crate::render::load_sequence(dir)?)?,
        None => {
            let refs: Video = vec![reference.clone(); frames.len()];
            metrics::video_psnr(&frames, &refs)?
        }
    };
    Ok(MetricReport {
        psnr_db,
        id_consistency: metrics::id_consistency(&frames, &reference)?,
        motion_stability: metrics::motion_stability(&frames)?,
        render_fps: None,
    })
}

/// A completed run's resolved config and final avatar.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, GaussianAvatar)> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let avatar: GaussianAvatar = read_json(&dir.join(AVATAR_FILE))?;
    let head = ParametricHead::new(&config.head);
    if !avatar.is_valid(head.triangles.len()) {
        return Err(Error::Format {
            path: dir.join(AVATAR_FILE),
            message: "avatar does not fit the configured head".into(),
        });
    }
    Ok((config, avatar))
}

fn refuse_inside_completed(target: &Path) -> Result<()> {
    let mut cur = target.parent();
    while let Some(dir) = cur {
        if !dir.as_os_str().is_empty() && is_completed(dir) {
            return Err(Error::InvalidArgument(format!(
                "{} lies inside completed experiment {}",
                target.display(),
                dir.display()
            )));
        }
        cur = dir.parent();
    }
    Ok(())
}

/// Writes the run's avatar, posed with `expression`, as a PLY file.
pub fn export_ply(run: &Path, out: &Path, expression: &Expression) -> Result<usize> {
    refuse_inside_completed(out)?;
    let (config, avatar) = load_run(run)?;
    let head = ParametricHead::new(&config.head);
    let world = deform_gaussians(&avatar, &deform_mesh(&head, expression));
    write_ply(out, &world)?;
    Ok(world.len())
}

/// Renders a neutral turntable of the run's avatar into `out`.
pub fn render_turntable(run: &Path, out: &Path, frames: usize, resolution: Option<usize>) -> Result<usize> {
    if frames == 0 {
        return Err(Error::InvalidArgument("need at least one frame".into()));
    }
    refuse_inside_completed(&out.join("frame"))?;
    let (config, avatar) = load_run(run)?;
    let head = ParametricHead::new(&config.head);
    let r = resolution.unwrap_or(config.resolution);
    let cams = turntable_cameras(frames);
    let video = render_video(&avatar, &head, &cams, &vec![Expression::neutral(); frames], r, r, crate::render::DEFAULT_BACKGROUND);
    save_sequence(&video, out, "frame")?;
    Ok(frames)
}

/// Parses `unit:amplitude[,unit:amplitude...]`, units by snake-case name.
pub fn parse_expression(text: &str) -> Result<Expression> {
    let mut c = [0.0; NUM_BLENDSHAPES];
    for part in text.split(',').filter(|p| !p.trim().is_empty()) {
        let (name, amp) = part
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("expected unit:amplitude, got `{part}`")))?;
        let unit = ActionUnit::ALL
            .into_iter()
            .find(|u| u.name() == name.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown action unit `{name}`")))?;
        c[unit.index()] = amp
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad amplitude `{amp}`")))?;
    }
    Ok(Expression::new(c, [0.0; 3]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub dir: String,
    pub mode: Mode,
    pub seed: u64,
    pub held_out_psnr: f64,
    pub frontal_psnr: f64,
    pub id_consistency: f64,
    pub motion_stability: f64,
    pub render_fps: Option<f64>,
    /// Held-out PSNR minus that of the progressive run with the same seed.
    pub delta_vs_progressive: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub mode: Mode,
    /// Per seed: progressive scored strictly higher.
    pub per_seed: BTreeMap<u64, bool>,
    pub mean_delta: f64,
    /// "holds" when progressive wins on every shared seed, else "fails".
    pub ordering: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub verdicts: Vec<Verdict>,
    pub excluded: Vec<String>,
}

pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    let mut out = Comparison::default();
    for dir in dirs {
        let summary: Result<RunSummary> = if is_completed(dir) {
            read_json(&dir.join(SUMMARY_FILE))
        } else {
            Err(Error::InvalidArgument("no summary.json".into()))
        };
        match summary {
            Ok(s) => out.rows.push(CompareRow {
                dir: dir.display().to_string(),
                mode: s.mode,
                seed: s.seed,
                held_out_psnr: s.final_eval.held_out_psnr,
                frontal_psnr: s.final_eval.frontal_psnr,
                id_consistency: s.metrics.id_consistency,
                motion_stability: s.metrics.motion_stability,
                render_fps: s.metrics.render_fps,
                delta_vs_progressive: None,
            }),
            Err(e) => {
                log::warn!("excluding {}: {e}", dir.display());
                out.excluded.push(dir.display().to_string());
            }
        }
    }
    if out.rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two completed experiments, found {}",
            out.rows.len()
        )));
    }
    let baseline: BTreeMap<u64, f64> = out
        .rows
        .iter()
        .filter(|r| r.mode == Mode::Progressive)
        .map(|r| (r.seed, r.held_out_psnr))
        .collect();
    for row in &mut out.rows {
        row.delta_vs_progressive = baseline.get(&row.seed).map(|b| row.held_out_psnr - b);
    }
    for mode in Mode::ALL.into_iter().filter(|m| *m != Mode::Progressive) {
        let shared: Vec<&CompareRow> = out
            .rows
            .iter()
            .filter(|r| r.mode == mode && baseline.contains_key(&r.seed))
            .collect();
        if shared.is_empty() {
            continue;
        }
        let per_seed: BTreeMap<u64, bool> = shared
            .iter()
            .map(|r| (r.seed, baseline[&r.seed] > r.held_out_psnr))
            .collect();
        let mean_delta = shared.iter().map(|r| r.delta_vs_progressive.unwrap()).sum::<f64>() / shared.len() as f64;
        let holds = per_seed.values().all(|&v| v);
        out.verdicts.push(Verdict {
            mode,
            per_seed,
            mean_delta,
            ordering: if holds { "holds" } else { "fails" }.into(),
        });
    }
    Ok(out)
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:>5} {:>9} {:>9} {:>7} {:>7} {:>8} {:>8}  dir\n",
            "mode", "seed", "held-out", "frontal", "id", "motion", "fps", "delta"
        );
        for r in &self.rows {
            let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
            s += &format!(
                "{:<12} {:>5} {:>9.3} {:>9.3} {:>7.4} {:>7.4} {:>8} {:>8}  {}\n",
                r.mode.name(),
                r.seed,
                r.held_out_psnr,
                r.frontal_psnr,
                r.id_consistency,
                r.motion_stability,
                opt(r.render_fps, 1),
                opt(r.delta_vs_progressive, 3),
                r.dir
            );
        }
        for v in &self.verdicts {
            let seeds: Vec<String> = v.per_seed.iter().map(|(s, ok)| format!("{s}:{}", if *ok { "yes" } else { "no" })).collect();
            s += &format!(
                "progressive > {:<12} {}  (mean delta {:+.3} dB; {})\n",
                v.mode.name(),
                v.ordering,
                v.mean_delta,
                seeds.join(" ")
            );
        }
        for e in &self.excluded {
            s += &format!("excluded (incomplete): {e}\n");
        }
        s
    }
}
