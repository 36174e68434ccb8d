//! Symbiotic generation: the avatar guides the oracle's dataset refreshes and
//! the refreshed dataset supervises the avatar.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::{deform_with_frames, init_avatar, triangle_frames, AvatarGrads, GaussianAvatar, TriangleFrame};
use crate::curriculum::{self, clamp_trajectory, stage, CurriculumConfig, StageSet, Subset};
use crate::headmodel::{deform_mesh, landmark_map, ActionUnit, CameraPose, Expression, ParametricHead, NUM_BLENDSHAPES};
use crate::metrics;
use crate::optimize::{adam_step, loss_total, AdamState, LearningRates, LossBreakdown, LossWeights, RegularizerConfig};
use crate::oracle::{GuidedRequest, OracleWorld};
use crate::render::{render_backward, render_pinhole, render_video, Video};
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Progressive,
    Random,
    OneTime,
    NoSpatial,
    NoTemporal,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Progressive, Mode::Random, Mode::OneTime, Mode::NoSpatial, Mode::NoTemporal];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Progressive => "progressive",
            Mode::Random => "random",
            Mode::OneTime => "one-time",
            Mode::NoSpatial => "no-spatial",
            Mode::NoTemporal => "no-temporal",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    fn uses_subset(self, subset: Subset) -> bool {
        match self {
            Mode::NoSpatial => subset != Subset::Spatial,
            Mode::NoTemporal => subset == Subset::Spatial,
            _ => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymGenConfig {
    /// Dataset refresh interval.
    pub d: u64,
    pub iterations: u64,
}

impl Default for SymGenConfig {
    fn default() -> Self {
        SymGenConfig { d: 30, iterations: 2000 }
    }
}

pub fn should_update(iteration: u64, config: &SymGenConfig) -> bool {
    iteration % config.d == 0
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub video: Video,
    /// Cameras the stored video was generated with.
    pub cameras: Vec<CameraPose>,
    pub expressions: Vec<Expression>,
    pub subset: Subset,
    pub unit_id: Option<usize>,
    pub sample_seed: u64,
    pub last_refreshed_iter: Option<u64>,
    /// Full pre-defined trajectory of a spatial sample; clamped at refresh time.
    pub trajectory: Vec<CameraPose>,
    pub clamped: bool,
}

impl DatasetSample {
    /// Cameras a refresh at `iteration` uses.
    pub fn cameras_at(&self, iteration: u64, d_s: u64) -> Vec<CameraPose> {
        if self.clamped {
            clamp_trajectory(&self.trajectory, iteration, d_s)
        } else {
            self.trajectory.clone()
        }
    }
}

/// Uniform draw among samples whose subset is active.
pub fn select_sample(dataset: &[DatasetSample], active: &StageSet, rng: &mut impl Rng) -> Result<usize> {
    let candidates: Vec<usize> = (0..dataset.len())
        .filter(|&i| active.contains(dataset[i].subset))
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidRequest("no active dataset sample to select".into()));
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// Regenerates a sample's video with the avatar's renders and landmark maps
/// as guidance.
#[allow(clippy::too_many_arguments)]
pub fn update_sample(
    sample: &mut DatasetSample,
    index: usize,
    avatar: &GaussianAvatar,
    head: &ParametricHead,
    oracle: &OracleWorld,
    iteration: u64,
    curriculum: &CurriculumConfig,
    width: usize,
    height: usize,
) -> Result<()> {
    let cameras = sample.cameras_at(iteration, curriculum.d_s);
    let guidance = render_video(avatar, head, &cameras, &sample.expressions, width, height, oracle.background);
    let landmarks: Video = cameras
        .iter()
        .zip(&sample.expressions)
        .map(|(c, e)| landmark_map(head, e, c, width, height))
        .collect();
    let request = GuidedRequest {
        cameras: cameras.clone(),
        expressions: sample.expressions.clone(),
        guidance_frames: Some(guidance),
        landmark_frames: Some(landmarks),
        sample_seed: sample.sample_seed,
    };
    let video = oracle
        .generate(&request, width, height)
        .map_err(|e| Error::Refresh {
            sample: index,
            source: Box::new(e),
        })?;
    sample.video = video;
    sample.cameras = cameras;
    sample.last_refreshed_iter = Some(iteration);
    Ok(())
}

/// Everything one training run needs besides the oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
    pub gaussians_per_triangle: usize,
    pub symgen: SymGenConfig,
    /// Effective (already rescaled) schedule.
    pub curriculum: CurriculumConfig,
    pub weights: LossWeights,
    pub regularizer: RegularizerConfig,
    pub learning_rates: LearningRates,
    /// Held-out evaluation cadence in iterations; 0 evaluates only at the ends.
    pub eval_every: u64,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

/// Fixed evaluation views never used for supervision.
pub fn held_out_views() -> Vec<(String, CameraPose, Expression)> {
    let cam = |az: f64| CameraPose::new(9.5, 55.0, 0.0, az);
    let mut views = vec![("frontal".to_string(), cam(90.0), Expression::neutral())];
    for az in [30.0, 60.0, 120.0, 150.0] {
        views.push((format!("azimuth-{az}"), cam(az), Expression::neutral()));
    }
    for unit in ActionUnit::ALL {
        views.push((unit.name().to_string(), cam(90.0), Expression::unit(unit, 0.9)));
    }
    let combo = |units: &[(ActionUnit, f64)], pose: [f64; 3]| {
        let mut c = [0.0; NUM_BLENDSHAPES];
        for &(u, a) in units {
            c[u.index()] = a;
        }
        Expression::new(c, pose)
    };
    views.push((
        "talk".into(),
        cam(75.0),
        combo(&[(ActionUnit::JawOpen, 0.7), (ActionUnit::BrowRaiseLeft, 0.6), (ActionUnit::BrowRaiseRight, 0.6)], [0.0; 3]),
    ));
    views.push((
        "grin-turn".into(),
        cam(110.0),
        combo(&[(ActionUnit::Smile, 0.9), (ActionUnit::CheekPuff, 0.5)], [0.0, 8.0, 0.0]),
    ));
    views.push((
        "blink-pucker".into(),
        cam(90.0),
        combo(&[(ActionUnit::EyeCloseLeft, 1.0), (ActionUnit::EyeCloseRight, 1.0), (ActionUnit::Pucker, 0.8)], [5.0, 0.0, 0.0]),
    ));
    views
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frontal_psnr: f64,
    /// Mean over all held-out views.
    pub held_out_psnr: f64,
}

pub fn evaluate(avatar: &GaussianAvatar, head: &ParametricHead, world: &OracleWorld, width: usize, height: usize) -> EvalReport {
    let views: Vec<(CameraPose, Expression)> = held_out_views().into_iter().map(|(_, c, e)| (c, e)).collect();
    let psnr = metrics::held_out_psnr(avatar, head, world, &views, width, height);
    EvalReport {
        frontal_psnr: psnr[0],
        held_out_psnr: psnr.iter().sum::<f64>() / psnr.len() as f64,
    }
}

/// One line of the metrics log. Contains no timings so that logs of
/// identical runs compare equal byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub sample: usize,
    pub subset: Subset,
    pub dataset_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refreshed: Option<usize>,
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub skipped_groups: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

/// Hooks called while training.
pub trait TrainObserver {
    fn on_iteration(&mut self, _log: &IterationLog) -> Result<()> {
        Ok(())
    }

    /// `iteration` is the number of completed optimizer steps.
    fn on_checkpoint(&mut self, _iteration: u64, _avatar: &GaussianAvatar, _adam: &AdamState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub avatar: GaussianAvatar,
    pub adam: AdamState,
    pub log: Vec<IterationLog>,
    pub dataset: Vec<DatasetSample>,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
}

fn new_sample(
    subset: Subset,
    index: usize,
    settings: &TrainSettings,
    trajectory: Vec<CameraPose>,
    expressions: Vec<Expression>,
    unit_id: Option<usize>,
    clamped: bool,
) -> DatasetSample {
    DatasetSample {
        video: Vec::new(),
        cameras: Vec::new(),
        expressions,
        subset,
        unit_id,
        sample_seed: seed::derive(settings.seed, "sample-seed", index as u64),
        last_refreshed_iter: None,
        trajectory,
        clamped,
    }
}

/// Builds the samples of `subset` the way `settings.mode` prescribes.
fn build_subset(subset: Subset, count: usize, first_index: usize, settings: &TrainSettings) -> Vec<DatasetSample> {
    let cur = &settings.curriculum;
    (0..count)
        .map(|j| {
            let index = first_index + j;
            let mut rng = seed::rng(settings.seed, "dataset-sample", index as u64);
            let (expressions, unit_id) = match subset {
                Subset::Spatial => (
                    vec![curriculum::spatial_expression(j, cur); cur.n_f],
                    Some(j % NUM_BLENDSHAPES),
                ),
                _ => (curriculum::temporal_expressions(subset, &mut rng, cur), None),
            };
            let (trajectory, clamped) = match subset {
                Subset::Spatial => (
                    curriculum::spatial_trajectory(&mut rng, cur),
                    !matches!(settings.mode, Mode::Random | Mode::OneTime),
                ),
                _ => (vec![curriculum::sample_camera(subset, &mut rng, cur); cur.n_f], false),
            };
            new_sample(subset, index, settings, trajectory, expressions, unit_id, clamped)
        })
        .collect()
}

fn subset_count(subset: Subset, cur: &CurriculumConfig) -> usize {
    match subset {
        Subset::Spatial => cur.n_s,
        Subset::TemporalSyn => cur.n_syn,
        Subset::TemporalReal => cur.n_real,
    }
}

/// Subsets selectable at iteration `k` under `mode`.
pub fn active_subsets(k: u64, mode: Mode, cur: &CurriculumConfig) -> StageSet {
    let s = match mode {
        Mode::Random => StageSet::all(),
        // Without the spatial subset, temporal-syn has to carry the first stage.
        Mode::NoSpatial => StageSet {
            spatial: false,
            temporal_syn: true,
            temporal_real: k >= cur.k_t,
        },
        _ => stage(k, cur),
    };
    StageSet {
        spatial: s.spatial && mode.uses_subset(Subset::Spatial),
        temporal_syn: s.temporal_syn && mode.uses_subset(Subset::TemporalSyn),
        temporal_real: s.temporal_real && mode.uses_subset(Subset::TemporalReal),
    }
}

/// Whether `subset` is built at iteration `k` (true exactly once per used subset).
fn built_at(subset: Subset, k: u64, mode: Mode, cur: &CurriculumConfig) -> bool {
    if !mode.uses_subset(subset) {
        return false;
    }
    if matches!(mode, Mode::Random | Mode::OneTime) {
        return k == 0;
    }
    let start = active_subsets(0, mode, cur);
    if start.contains(subset) {
        return k == 0;
    }
    !active_subsets(k.saturating_sub(1), mode, cur).contains(subset) && active_subsets(k, mode, cur).contains(subset)
}

/// Loss and summed gradients of the avatar on one sample.
fn sample_gradients(
    avatar: &GaussianAvatar,
    head: &ParametricHead,
    fallback: &[TriangleFrame],
    sample: &DatasetSample,
    settings: &TrainSettings,
    background: [f64; 3],
) -> Result<(LossBreakdown, AvatarGrads)> {
    let (w, h) = (settings.width, settings.height);
    let passes: Vec<_> = sample
        .cameras
        .par_iter()
        .zip(sample.expressions.par_iter())
        .map(|(c, e)| {
            let frames = triangle_frames(&deform_mesh(head, e), Some(fallback));
            let world = deform_with_frames(avatar, &frames);
            let pin = c.pinhole(w, h);
            let image = render_pinhole(&world, &pin, background);
            (frames, world, pin, image)
        })
        .collect();
    let rendered: Video = passes.iter().map(|p| p.3.clone()).collect();
    let out = loss_total(&rendered, &sample.video, avatar, &settings.weights, &settings.regularizer)?;
    let per_frame: Vec<Result<AvatarGrads>> = passes
        .par_iter()
        .zip(out.pixel_grads.par_iter())
        .map(|((frames, world, pin, _), g)| render_backward(avatar, frames, world, pin, background, g))
        .collect();
    let mut grads = out.regularizer_grads;
    for g in per_frame {
        grads.add_assign(&g?);
    }
    Ok((out.breakdown, grads))
}

/// Runs the full symbiotic loop.
pub fn train(settings: &TrainSettings, world: &OracleWorld, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let cur = &settings.curriculum;
    let total = settings.symgen.iterations;
    let (w, h) = (settings.width, settings.height);
    let head = &world.gt_head;
    let fallback = triangle_frames(&head.neutral_mesh(), None);
    let mut avatar = init_avatar(head, settings.gaussians_per_triangle);
    let mut adam = AdamState::new(avatar.len());
    let mut select_rng: ChaCha8Rng = seed::rng(settings.seed, "select", 0);
    let mut dataset: Vec<DatasetSample> = Vec::new();
    let mut cursor = 0usize;
    let mut log = Vec::with_capacity(total as usize);

    let initial_eval = evaluate(&avatar, head, world, w, h);
    for k in 0..total {
        for subset in Subset::ALL {
            if built_at(subset, k, settings.mode, cur) {
                let first = dataset.len();
                let fresh = build_subset(subset, subset_count(subset, cur), first, settings);
                for (j, mut s) in fresh.into_iter().enumerate() {
                    update_sample(&mut s, first + j, &avatar, head, world, k, cur, w, h)?;
                    dataset.push(s);
                }
            }
        }
        let active = active_subsets(k, settings.mode, cur);
        let mut refreshed = None;
        if k > 0 && settings.mode != Mode::OneTime && should_update(k, &settings.symgen) {
            let candidates: Vec<usize> = (0..dataset.len())
                .filter(|&i| active.contains(dataset[i].subset))
                .collect();
            if !candidates.is_empty() {
                let i = candidates[cursor % candidates.len()];
                cursor += 1;
                update_sample(&mut dataset[i], i, &avatar, head, world, k, cur, w, h)?;
                refreshed = Some(i);
            }
        }
        let index = select_sample(&dataset, &active, &mut select_rng)?;
        let sample = &dataset[index];
        let (loss, grads) = sample_gradients(&avatar, head, &fallback, sample, settings, world.background)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: k,
                detail: format!("sample {index} ({}): {loss:?}", sample.subset.name()),
            });
        }
        let skipped = adam_step(&mut avatar, &grads, &mut adam, &settings.learning_rates, k, total)?;
        let done = k + 1;
        let eval = (done == total || (settings.eval_every > 0 && done % settings.eval_every == 0))
            .then(|| evaluate(&avatar, head, world, w, h));
        let entry = IterationLog {
            iteration: k,
            sample: index,
            subset: sample.subset,
            dataset_size: dataset.len(),
            refreshed,
            loss,
            skipped_groups: skipped.iter().map(|s| s.to_string()).collect(),
            eval,
        };
        observer.on_iteration(&entry)?;
        log.push(entry);
        if settings.checkpoint_every > 0 && done % settings.checkpoint_every == 0 {
            observer.on_checkpoint(done, &avatar, &adam)?;
        }
    }
    let final_eval = match log.last().and_then(|l| l.eval.clone()) {
        Some(e) => e,
        None => evaluate(&avatar, head, world, w, h),
    };
    Ok(TrainOutcome {
        avatar,
        adam,
        log,
        dataset,
        initial_eval,
        final_eval,
    })
}
