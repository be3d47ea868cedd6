use std::path::{Path, PathBuf};

use dare_core::adapt::AdaptConfig;
use dare_core::rewards::{RewardConfig, RewardMode, Shaping};
use dare_core::simulator::{presets, LatentWorld};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Estimate,
    Simulate,
    Theory,
    Adapt,
    Sweep,
    Ablate,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Estimate => "estimate",
            Kind::Simulate => "simulate",
            Kind::Theory => "theory",
            Kind::Adapt => "adapt",
            Kind::Sweep => "sweep",
            Kind::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    InformationCollapse,
    Bias,
    Consistency,
}

impl Check {
    pub const ALL: [Check; 3] = [Check::InformationCollapse, Check::Bias, Check::Consistency];

    pub fn name(self) -> &'static str {
        match self {
            Check::InformationCollapse => "information_collapse",
            Check::Bias => "bias",
            Check::Consistency => "consistency",
        }
    }

    /// World used when none is configured.
    pub fn default_world(self) -> &'static str {
        match self {
            Check::InformationCollapse => "three_outcome",
            Check::Bias | Check::Consistency => "two_mode_bias",
        }
    }
}

/// A world given inline, by preset name, or by path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldSource {
    Named(String),
    Inline(Box<LatentWorld>),
}

impl WorldSource {
    pub fn resolve(&self, base: &Path) -> Result<LatentWorld, CliError> {
        match self {
            WorldSource::Inline(w) => w
                .as_ref()
                .clone()
                .finalize()
                .map_err(|e| CliError::from_core("world", e)),
            WorldSource::Named(name) => {
                if let Some(w) = presets::by_name(name) {
                    return Ok(w);
                }
                let path = base.join(name);
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    CliError::Invalid(format!(
                        "invalid world: '{name}' is neither a preset ({}) nor a readable file: {e}",
                        presets::NAMES.join(", ")
                    ))
                })?;
                LatentWorld::from_json(&text)
                    .map_err(|e| CliError::from_core(&format!("world file {}", path.display()), e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSettings {
    pub steps: usize,
    pub rollouts: usize,
    pub learning_rate: f64,
    pub eval_samples: usize,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_logits: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_ratio: Option<f64>,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        Self {
            steps: 300,
            rollouts: 16,
            learning_rate: 0.002,
            eval_samples: 0,
            threshold: 0.6,
            initial_logits: None,
            clip_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySettings {
    pub checks: Vec<Check>,
    /// Overrides each check's own default when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rollouts: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub populations: Option<usize>,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_bias: Option<f64>,
    pub assert_asymptotic: bool,
    /// Shaping whose averaged distribution the consistency check studies.
    pub consistency_shaping: Shaping,
    /// Assert the consistency deviation. Only meaningful for frequency-only
    /// shaping; requesting it for any other shaping is refused.
    pub assert_consistency: bool,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            checks: Check::ALL.to_vec(),
            rollouts: None,
            populations: None,
            tolerance: 0.01,
            min_bias: None,
            assert_asymptotic: false,
            consistency_shaping: Shaping::FrequencyOnly,
            assert_consistency: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub rollouts: usize,
    pub populations: usize,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            rollouts: 16,
            populations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<Kind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<WorldSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population: Option<PathBuf>,
    pub reward: RewardConfig,
    /// Reward modes compared by `sweep` and `ablate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<RewardMode>>,
    pub adapt: AdaptSettings,
    pub theory: TheorySettings,
    pub simulate: SimulateSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    /// Explicit per-run seeds for `ablate`; derived from `seed` otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Not echoed into outputs so reruns into different directories match.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Directory relative paths are resolved against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            world: None,
            population: None,
            reward: RewardConfig::default(),
            modes: None,
            adapt: AdaptSettings::default(),
            theory: TheorySettings::default(),
            simulate: SimulateSettings::default(),
            kappa_grid: None,
            repeats: None,
            seeds: None,
            out: None,
            seed: 0,
            base_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Invalid(format!(
                "invalid config: cannot read {}: {e}",
                path.display()
            ))
        })?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("invalid config {}: {e}", path.display())))?;
        cfg.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn world_or(&self, default: &str) -> Result<LatentWorld, CliError> {
        match &self.world {
            Some(src) => src.resolve(&self.base_dir),
            None => WorldSource::Named(default.to_owned()).resolve(&self.base_dir),
        }
    }

    pub fn adapt_config(&self, world: LatentWorld) -> AdaptConfig {
        let mut cfg = AdaptConfig::new(world, self.reward, self.adapt.steps);
        cfg.rollouts = self.adapt.rollouts;
        cfg.learning_rate = self.adapt.learning_rate;
        cfg.eval_samples = self.adapt.eval_samples;
        cfg.threshold = self.adapt.threshold;
        cfg.initial_logits = self.adapt.initial_logits.clone();
        cfg.clip_ratio = self.adapt.clip_ratio;
        cfg.seed = self.seed;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn world_accepts_preset_and_inline() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"world": "collapse"}"#).unwrap();
        assert_eq!(cfg.world_or("x").unwrap(), presets::collapse());

        let inline = format!(
            r#"{{"world": {}}}"#,
            presets::three_outcome().to_json().unwrap()
        );
        let cfg: ExperimentConfig = serde_json::from_str(&inline).unwrap();
        assert_eq!(cfg.world_or("x").unwrap(), presets::three_outcome());
    }

    #[test]
    fn unknown_world_name_is_invalid() {
        let cfg = ExperimentConfig {
            world: Some(WorldSource::Named("nope".into())),
            ..Default::default()
        };
        assert!(matches!(cfg.world_or("x"), Err(CliError::Invalid(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"adapt": {"step": 1}}"#).is_err());
    }
}
