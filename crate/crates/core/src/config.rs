//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumConfig;
use crate::headmodel::HeadConfig;
use crate::optimize::{LearningRates, LossWeights, RegularizerConfig};
use crate::oracle::CorruptionConfig;
use crate::symgen::{Mode, SymGenConfig, TrainSettings};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymGenSection {
    /// Dataset refresh interval in iterations.
    pub d: u64,
}

impl Default for SymGenSection {
    fn default() -> Self {
        SymGenSection { d: SymGenConfig::default().d }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: Mode,
    pub iterations: u64,
    /// Square render resolution in pixels.
    pub resolution: usize,
    #[serde(default = "default_gaussians_per_triangle")]
    pub gaussians_per_triangle: usize,
    /// When true, `[curriculum]` holds reference-budget values that are scaled
    /// to `iterations`. Resolved configs store the scaled values and `false`.
    #[serde(default = "default_true")]
    pub rescale_schedule: bool,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_root: Option<PathBuf>,
    #[serde(default)]
    pub symgen: SymGenSection,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    #[serde(default)]
    pub learning_rates: LearningRates,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

fn default_gaussians_per_triangle() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_eval_every() -> u64 {
    250
}

fn default_checkpoint_every() -> u64 {
    500
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn desk(seed: u64, mode: Mode) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            mode,
            iterations: SymGenConfig::default().iterations,
            resolution: 64,
            gaussians_per_triangle: default_gaussians_per_triangle(),
            rescale_schedule: true,
            eval_every: default_eval_every(),
            checkpoint_every: default_checkpoint_every(),
            output_root: None,
            symgen: SymGenSection::default(),
            curriculum: CurriculumConfig::default(),
            loss: LossWeights::default(),
            regularizer: RegularizerConfig::default(),
            learning_rates: LearningRates::default(),
            corruption: CorruptionConfig::default(),
            head: HeadConfig::default(),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: origin.to_string(),
            message: e.to_string().trim().to_string(),
        })?;
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { origin.to_string() } else { path },
                message: e.into_inner().message().trim().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Effective schedule for this run.
    pub fn effective_curriculum(&self) -> CurriculumConfig {
        if self.rescale_schedule {
            self.curriculum.rescaled(self.iterations)
        } else {
            self.curriculum
        }
    }

    /// Copy with the schedule already applied; reproduces the run on its own.
    pub fn resolved(&self) -> Self {
        ExperimentConfig {
            curriculum: self.effective_curriculum(),
            rescale_schedule: false,
            output_root: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: String| {
            Err(Error::Config {
                path: path.to_string(),
                message,
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            return fail(
                "schema_version",
                format!("unsupported schema version {}, expected {SCHEMA_VERSION}", self.schema_version),
            );
        }
        if self.iterations == 0 {
            return fail("iterations", "must be at least 1".into());
        }
        if !(8..=1024).contains(&self.resolution) {
            return fail("resolution", format!("{} is outside 8..=1024", self.resolution));
        }
        if self.gaussians_per_triangle == 0 {
            return fail("gaussians_per_triangle", "must be at least 1".into());
        }
        if self.symgen.d == 0 {
            return fail("symgen.d", "must be at least 1".into());
        }
        if let Err(m) = self.effective_curriculum().validate(self.iterations) {
            return fail("curriculum", m);
        }
        if !self.loss.is_valid() {
            return fail("loss", "weights must be finite and non-negative".into());
        }
        if !self.learning_rates.is_valid() {
            return fail("learning_rates", "rates must be finite and non-negative".into());
        }
        if let Err(m) = self.corruption.validate() {
            return fail("corruption", m);
        }
        if self.head.subdivisions > 5 || self.head.radius <= 0.0 {
            return fail("head", "need subdivisions <= 5 and radius > 0".into());
        }
        Ok(())
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            seed: self.seed,
            mode: self.mode,
            width: self.resolution,
            height: self.resolution,
            gaussians_per_triangle: self.gaussians_per_triangle,
            symgen: SymGenConfig {
                d: self.symgen.d,
                iterations: self.iterations,
            },
            curriculum: self.effective_curriculum(),
            weights: self.loss,
            regularizer: self.regularizer,
            learning_rates: self.learning_rates,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\nseed = 3\nmode = \"one-time\"\niterations = 200\nresolution = 32\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::parse(MINIMAL, "test").unwrap();
        assert_eq!(c.mode, Mode::OneTime);
        assert_eq!(c.gaussians_per_triangle, 2);
        assert_eq!(c.effective_curriculum().k_s, 100);
        assert_eq!(c.symgen.d, 30);
    }

    #[test]
    fn missing_required_key_is_named() {
        for key in ["schema_version", "seed", "mode", "iterations", "resolution"] {
            let text: String = MINIMAL.lines().filter(|l| !l.starts_with(key)).map(|l| format!("{l}\n")).collect();
            let err = ExperimentConfig::parse(&text, "test").unwrap_err().to_string();
            assert!(err.contains(key), "{key}: {err}");
        }
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = ExperimentConfig::parse(&format!("{MINIMAL}[curriculum]\nn_x = 3\n"), "test")
            .unwrap_err()
            .to_string();
        assert!(err.contains("curriculum") && err.contains("n_x"), "{err}");
        let err = ExperimentConfig::parse(&format!("{MINIMAL}bogus = 1\n"), "test")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let err = ExperimentConfig::parse(&format!("{MINIMAL}rescale_schedule = false\n"), "test").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("curriculum"));
        assert!(ExperimentConfig::parse(&MINIMAL.replace("mode = \"one-time\"", "mode = \"fast\""), "t").is_err());
    }

    #[test]
    fn resolved_config_round_trips_and_isolates_mode() {
        let c = ExperimentConfig::parse(MINIMAL, "test").unwrap();
        let r = c.resolved();
        let back = ExperimentConfig::parse(&r.to_toml(), "resolved").unwrap();
        assert_eq!(back, r);
        assert_eq!(back.train_settings(), c.train_settings());

        let other = ExperimentConfig { mode: Mode::Progressive, ..c.clone() }.resolved().to_toml();
        let a: Vec<&str> = r.to_toml().leak().lines().collect();
        let b: Vec<&str> = other.leak().lines().collect();
        let diff: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x != y).collect();
        assert_eq!(a.len(), b.len());
        assert_eq!(diff.len(), 1);
        assert!(diff[0].0.starts_with("mode"));
    }
}
