//! Simple-to-complex training schedule: front-to-side camera trajectories
//! that unlock one frame per `d_s` iterations, then relaxed and exaggerated
//! expression sequences added at `k_s` and `k_t`.

use std::f64::consts::PI;

use nalgebra::{Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::headmodel::{ActionUnit, CameraPose, Expression, NUM_BLENDSHAPES};

/// Iteration budget the default schedule constants are expressed in.
pub const REFERENCE_ITERATIONS: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    Spatial,
    TemporalSyn,
    TemporalReal,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Spatial, Subset::TemporalSyn, Subset::TemporalReal];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Spatial => "spatial",
            Subset::TemporalSyn => "temporal-syn",
            Subset::TemporalReal => "temporal-real",
        }
    }
}

/// Closed parameter interval `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn mid(&self) -> f64 {
        0.5 * (self.0 + self.1)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.0 <= v && v <= self.1
    }

    pub fn is_valid(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRanges {
    pub distance: Range,
    pub fovy: Range,
    pub elevation: Range,
    pub azimuth: Range,
}

impl CameraRanges {
    pub fn spatial() -> Self {
        CameraRanges {
            distance: Range(8.0, 11.0),
            fovy: Range(40.0, 70.0),
            elevation: Range(-10.0, 10.0),
            azimuth: Range(20.0, 160.0),
        }
    }

    pub fn temporal() -> Self {
        CameraRanges {
            distance: Range(8.5, 9.5),
            fovy: Range(50.0, 60.0),
            elevation: Range(-10.0, 10.0),
            azimuth: Range(60.0, 120.0),
        }
    }

    pub fn contains(&self, c: &CameraPose) -> bool {
        self.distance.contains(c.distance)
            && self.fovy.contains(c.fovy)
            && self.elevation.contains(c.elevation)
            && self.azimuth.contains(c.azimuth)
    }

    pub fn is_valid(&self) -> bool {
        [self.distance, self.fovy, self.elevation, self.azimuth]
            .iter()
            .all(Range::is_valid)
            && self.distance.0 > 0.0
            && self.fovy.0 > 0.0
            && self.fovy.1 < 180.0
    }

    pub fn sample(&self, rng: &mut impl Rng) -> CameraPose {
        let distance = self.distance.sample(rng);
        let fovy = self.fovy.sample(rng);
        let elevation = self.elevation.sample(rng);
        let azimuth = self.azimuth.sample(rng);
        CameraPose::new(distance, fovy, elevation, azimuth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub n_s: usize,
    pub d_s: u64,
    pub k_s: u64,
    pub k_t: u64,
    pub n_syn: usize,
    pub n_real: usize,
    pub n_f: usize,
    /// Blendshape amplitude of each spatial sample's fixed expression.
    pub spatial_amplitude: f64,
    /// Final amplitude of the relaxed (temporal-syn) ramp.
    pub syn_peak: f64,
    pub spatial_cameras: CameraRanges,
    pub temporal_cameras: CameraRanges,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            n_s: 20,
            d_s: 1000,
            k_s: 5000,
            k_t: 8000,
            n_syn: 10,
            n_real: 10,
            n_f: 8,
            spatial_amplitude: 0.6,
            syn_peak: 0.5,
            spatial_cameras: CameraRanges::spatial(),
            temporal_cameras: CameraRanges::temporal(),
        }
    }
}

impl CurriculumConfig {
    /// Scales `(k_s, k_t, d_s)` from the reference budget to `total` iterations.
    pub fn rescaled(&self, total: u64) -> Self {
        let f = total as f64 / REFERENCE_ITERATIONS as f64;
        let scale = |v: u64| ((v as f64 * f).round() as u64).max(1);
        CurriculumConfig {
            d_s: scale(self.d_s),
            k_s: scale(self.k_s),
            k_t: scale(self.k_t),
            ..*self
        }
    }

    pub fn cameras(&self, subset: Subset) -> &CameraRanges {
        match subset {
            Subset::Spatial => &self.spatial_cameras,
            Subset::TemporalSyn | Subset::TemporalReal => &self.temporal_cameras,
        }
    }

    /// Reason the configuration is unusable for a run of `total` iterations.
    pub fn validate(&self, total: u64) -> Result<(), String> {
        if self.d_s == 0 {
            return Err("d_s must be at least 1".into());
        }
        if self.n_f < 2 {
            return Err("n_f must be at least 2".into());
        }
        if !(0 < self.k_s && self.k_s < self.k_t && self.k_t < total) {
            return Err(format!(
                "need 0 < k_s < k_t < iterations, got k_s = {}, k_t = {}, iterations = {total}",
                self.k_s, self.k_t
            ));
        }
        if !self.spatial_cameras.is_valid() || !self.temporal_cameras.is_valid() {
            return Err("camera ranges must be non-empty with distance > 0 and 0 < fovy < 180".into());
        }
        Ok(())
    }
}

/// Subsets active at one point of the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSet {
    pub spatial: bool,
    pub temporal_syn: bool,
    pub temporal_real: bool,
}

impl StageSet {
    pub fn contains(&self, subset: Subset) -> bool {
        match subset {
            Subset::Spatial => self.spatial,
            Subset::TemporalSyn => self.temporal_syn,
            Subset::TemporalReal => self.temporal_real,
        }
    }

    pub fn all() -> Self {
        StageSet {
            spatial: true,
            temporal_syn: true,
            temporal_real: true,
        }
    }

    pub fn subsets(&self) -> Vec<Subset> {
        Subset::ALL.into_iter().filter(|s| self.contains(*s)).collect()
    }
}

pub fn stage(k: u64, config: &CurriculumConfig) -> StageSet {
    StageSet {
        spatial: true,
        temporal_syn: k >= config.k_s,
        temporal_real: k >= config.k_t,
    }
}

/// Number of unlocked trajectory frames at iteration `k`.
pub fn unlocked_frames(k: u64, d_s: u64, n_f: usize) -> usize {
    ((k / d_s) as usize + 1).min(n_f)
}

/// Frames past the unlocked prefix repeat its last pose.
pub fn clamp_trajectory(full: &[CameraPose], k: u64, d_s: u64) -> Vec<CameraPose> {
    let j = unlocked_frames(k, d_s, full.len());
    (1..=full.len()).map(|i| full[i.min(j) - 1]).collect()
}

fn direction(elevation: f64, azimuth: f64) -> Vector3<f64> {
    CameraPose::new(1.0, 60.0, elevation, azimuth).direction()
}

/// Front-to-side trajectory: frontal first frame, sampled last frame, and a
/// great-circle sweep of the viewing direction in between.
pub fn spatial_trajectory(rng: &mut impl Rng, config: &CurriculumConfig) -> Vec<CameraPose> {
    let ranges = &config.spatial_cameras;
    let start = CameraPose::new(ranges.distance.mid(), ranges.fovy.mid(), 0.0, 90.0);
    let end = ranges.sample(rng);
    let n = config.n_f;
    let a = Unit::new_normalize(direction(start.elevation, start.azimuth));
    let b = Unit::new_normalize(direction(end.elevation, end.azimuth));
    (0..n)
        .map(|i| {
            if i == 0 {
                return start;
            }
            if i == n - 1 {
                return end;
            }
            let t = i as f64 / (n - 1) as f64;
            let d = a.slerp(&b, t);
            let lerp = |x: f64, y: f64| x + (y - x) * t;
            CameraPose::new(
                lerp(start.distance, end.distance),
                lerp(start.fovy, end.fovy),
                d.y.clamp(-1.0, 1.0).asin().to_degrees(),
                d.z.atan2(d.x).to_degrees(),
            )
        })
        .collect()
}

pub fn sample_camera(subset: Subset, rng: &mut impl Rng, config: &CurriculumConfig) -> CameraPose {
    config.cameras(subset).sample(rng)
}

/// Fixed expression of the `index`-th spatial sample.
pub fn spatial_expression(index: usize, config: &CurriculumConfig) -> Expression {
    Expression::unit(ActionUnit::ALL[index % NUM_BLENDSHAPES], config.spatial_amplitude)
}

/// Expression sequence for a temporal sample.
///
/// `TemporalSyn` ramps one random unit from 0 to `syn_peak` with a cosine
/// ease. `TemporalReal` mixes two or three units, amplitudes 0.7 to 1.0,
/// oscillating one or two times over the clip, with a small head sway.
pub fn temporal_expressions(subset: Subset, rng: &mut impl Rng, config: &CurriculumConfig) -> Vec<Expression> {
    let n = config.n_f;
    match subset {
        Subset::Spatial | Subset::TemporalSyn => {
            let unit = rng.random_range(0..NUM_BLENDSHAPES);
            (0..n)
                .map(|i| {
                    let t = i as f64 / (n - 1) as f64;
                    let mut c = [0.0; NUM_BLENDSHAPES];
                    c[unit] = config.syn_peak * 0.5 * (1.0 - (PI * t).cos());
                    Expression::new(c, [0.0; 3])
                })
                .collect()
        }
        Subset::TemporalReal => {
            let count = rng.random_range(2..=3);
            let mut units: Vec<usize> = (0..NUM_BLENDSHAPES).collect();
            for i in 0..count {
                let j = rng.random_range(i..NUM_BLENDSHAPES);
                units.swap(i, j);
            }
            let tracks: Vec<(usize, f64, f64, f64)> = (0..count)
                .map(|u| {
                    let amplitude = rng.random_range(0.7..=1.0);
                    let periods = rng.random_range(1..=2) as f64;
                    // The first unit peaks exactly on a frame.
                    let phase = if u == 0 {
                        let peak = rng.random_range(0..n) as f64;
                        PI - 2.0 * PI * periods * peak / n as f64
                    } else {
                        rng.random_range(0.0..2.0 * PI)
                    };
                    (units[u], amplitude, periods, phase)
                })
                .collect();
            let sway = rng.random_range(0.0..=5.0);
            let sway_phase = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let mut c = [0.0; NUM_BLENDSHAPES];
                    for &(unit, amplitude, periods, phase) in &tracks {
                        let arg = 2.0 * PI * periods * i as f64 / n as f64 + phase;
                        c[unit] = amplitude * 0.5 * (1.0 - arg.cos());
                    }
                    let yaw = sway * (2.0 * PI * i as f64 / n as f64 + sway_phase).sin();
                    Expression::new(c, [0.0, yaw, 0.0])
                })
                .collect()
        }
    }
}
