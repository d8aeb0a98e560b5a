use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diversity::DiversityConfig;
use crate::envs::{BehaviorPolicy, Env, EnvId, Grid2dConfig, SurrogateConfig};
use crate::error::{io_err, Error, Result};
use crate::ibrl::{EvalConfig, IbrlConfig, ModelFitConfig, PolicySearchConfig};
use crate::safety::SafetySpec;

/// How the first batch of a run is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialBatchConfig {
    /// Scripted policy; the environment's default when absent.
    pub policy: Option<BehaviorPolicy>,
    pub episodes: usize,
    /// Steps per episode; the environment's episode length when absent.
    pub horizon: Option<usize>,
    /// Keep the steered state columns inside this range while collecting.
    pub bound: Option<[f64; 2]>,
    /// Load this batch file instead of collecting. Relative paths resolve
    /// against the config file's directory.
    pub batch: Option<PathBuf>,
}

impl Default for InitialBatchConfig {
    fn default() -> Self {
        InitialBatchConfig {
            policy: None,
            episodes: 5,
            horizon: None,
            bound: None,
            batch: None,
        }
    }
}

/// Every setting of an experiment. Absent keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvId,
    #[serde(default)]
    pub grid2d: Grid2dConfig,
    #[serde(default)]
    pub ib_surrogate: SurrogateConfig,
    /// Observations per history state; 1 for grid2d and 15 for the
    /// surrogate when absent.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub safety: SafetySpec,
    #[serde(default)]
    pub diversity: DiversityConfig,
    #[serde(default)]
    pub search: PolicySearchConfig,
    #[serde(default)]
    pub models: ModelFitConfig,
    #[serde(default)]
    pub initial: InitialBatchConfig,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_deploy_steps")]
    pub deploy_steps: usize,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Base seed; the command-line `--seed` takes precedence.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_iterations() -> usize {
    4
}

fn default_repetitions() -> usize {
    3
}

fn default_deploy_steps() -> usize {
    200
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Config with every default for `env`.
    pub fn new(env: EnvId) -> Self {
        ExperimentConfig {
            env,
            grid2d: Grid2dConfig::default(),
            ib_surrogate: SurrogateConfig::default(),
            window: None,
            safety: SafetySpec::default(),
            diversity: DiversityConfig::default(),
            search: PolicySearchConfig::default(),
            models: ModelFitConfig::default(),
            initial: InitialBatchConfig::default(),
            iterations: default_iterations(),
            repetitions: default_repetitions(),
            deploy_steps: default_deploy_steps(),
            eval: EvalConfig::default(),
            seed: None,
            output_dir: default_output_dir(),
        }
    }

    pub fn environment(&self) -> Env {
        match self.env {
            EnvId::Grid2d => Env::Grid2d(self.grid2d.clone()),
            EnvId::IbSurrogate => Env::IbSurrogate(self.ib_surrogate.clone()),
        }
    }

    pub fn window(&self) -> usize {
        self.window.unwrap_or_else(|| self.environment().default_window())
    }

    pub fn ibrl(&self) -> IbrlConfig {
        IbrlConfig {
            env: self.environment(),
            window: self.window(),
            safety: self.safety.clone(),
            diversity: self.diversity.clone(),
            search: self.search.clone(),
            models: self.models.clone(),
            deploy_steps: self.deploy_steps,
            eval: self.eval.clone(),
        }
    }

    pub fn initial_policy(&self) -> BehaviorPolicy {
        self.initial.policy.unwrap_or_else(|| BehaviorPolicy::default_for(self.env))
    }

    /// Every range violation found.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(self.safety.violations());
        v.extend(self.diversity.violations());
        v.extend(self.search.violations());
        if self.window == Some(0) {
            v.push("window must be at least 1".to_string());
        }
        if self.models.hidden.contains(&0) {
            v.push("models.hidden sizes must be positive".to_string());
        }
        let split = self.models.fit.validation_split;
        if !(0.0..1.0).contains(&split) {
            v.push(format!("models.fit.validation_split = {split} must lie in [0, 1)"));
        }
        if self.models.fit.batch_size == 0 {
            v.push("models.fit.batch_size must be at least 1".to_string());
        }
        if self.iterations == 0 {
            v.push("iterations must be at least 1".to_string());
        }
        if self.repetitions == 0 {
            v.push("repetitions must be at least 1".to_string());
        }
        if self.deploy_steps == 0 {
            v.push("deploy_steps must be at least 1".to_string());
        }
        if self.eval.episodes == 0 {
            v.push("eval.episodes must be at least 1".to_string());
        }
        if self.eval.horizon == Some(0) {
            v.push("eval.horizon must be at least 1".to_string());
        }
        if self.initial.episodes == 0 || self.initial.horizon == Some(0) {
            v.push("initial.episodes and initial.horizon must be at least 1".to_string());
        }
        if let Some(b) = self.initial.bound {
            if !(b[0] < b[1]) {
                v.push(format!("initial.bound {b:?} must satisfy low < high"));
            }
        }
        let g = &self.grid2d;
        if !(g.max_step > 0.0) {
            v.push(format!("grid2d.max_step = {} must be positive", g.max_step));
        }
        if !(0.0..=1.0).contains(&g.random_fraction) {
            v.push(format!("grid2d.random_fraction = {} must lie in [0, 1]", g.random_fraction));
        }
        if g.reward_std.iter().any(|s| !(*s > 0.0)) {
            v.push("grid2d.reward_std entries must be positive".to_string());
        }
        let s = &self.ib_surrogate;
        if s.steering.iter().any(|c| *c == 0.0 || !c.is_finite()) {
            v.push("ib_surrogate.steering entries must be finite and non-zero".to_string());
        }
        if !(s.noise_std >= 0.0) {
            v.push(format!("ib_surrogate.noise_std = {} must be >= 0", s.noise_std));
        }
        if !(0.0 <= s.start_low && s.start_low <= s.start_high && s.start_high <= 100.0) {
            v.push("ib_surrogate start range must satisfy 0 <= start_low <= start_high <= 100".to_string());
        }
        if !(0.0..=1.0).contains(&s.medium_random_fraction) {
            v.push(format!(
                "ib_surrogate.medium_random_fraction = {} must lie in [0, 1]",
                s.medium_random_fraction
            ));
        }
        if s.fatigue_divisor <= 0.0 || s.consumption_divisor <= 0.0 {
            v.push("ib_surrogate divisors must be positive".to_string());
        }
        for (name, scale) in [("grid2d", g.reward_scale), ("ib_surrogate", s.reward_scale)] {
            if !(scale > 0.0 && scale.is_finite()) {
                v.push(format!("{name}.reward_scale = {scale} must be positive"));
            }
        }
        v
    }
}

/// Parses and validates a TOML document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(v))
    }
}

/// Reads, parses and validates a config file. A referenced initial batch
/// must exist; its path is made absolute.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg = parse_config_str(&text)?;
    if let Some(b) = &cfg.initial.batch {
        let full = if b.is_relative() {
            path.parent().unwrap_or(Path::new(".")).join(b)
        } else {
            b.clone()
        };
        if !full.exists() {
            return Err(Error::Config(vec![format!(
                "initial.batch {} does not exist",
                full.display()
            )]));
        }
        cfg.initial.batch = Some(full);
    }
    Ok(cfg)
}
