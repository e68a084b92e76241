//! Run configuration: one TOML file, one section per stage, unknown keys
//! rejected. Any key can be overridden from the environment as
//! `CTP_<SECTION>__<KEY>` (or `CTP_<KEY>` for top-level keys), with the value
//! parsed as a TOML literal and falling back to a string.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctm::DistillConfig;
use crate::data::CollectConfig;
use crate::dynamics::RegressionConfig;
use crate::envs::{EnvKind, EnvSpec, PolicyKind};
use crate::error::{CtpError, Result};
use crate::planner::CandidateMode;
use crate::schedule::GridKind;
use crate::teacher::TeacherConfig;
use crate::NoiseSchedule;

pub const ENV_PREFIX: &str = "CTP_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub num_candidates: usize,
    pub denoise_steps: usize,
    pub grid: GridKind,
    /// Evaluation episodes use seeds `0..eval_seeds`.
    pub eval_seeds: usize,
    pub mode: CandidateMode,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            num_candidates: 16,
            denoise_steps: 2,
            grid: GridKind::Uniform,
            eval_seeds: 30,
            mode: CandidateMode::Batched,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub steps: Vec<usize>,
    pub seeds: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            steps: vec![1, 2, 4, 8, 16, 20],
            seeds: 5,
            warmup: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvKind,
    pub horizon: usize,
    pub stride: usize,
    pub gamma: f64,
    /// Last value given to [`RunConfig::reseeded`]; stages read their own seeds.
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub data: CollectConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub invdyn: RegressionConfig,
    pub critic: RegressionConfig,
    pub plan: PlanConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::maze()
    }
}

impl RunConfig {
    /// Point-mass maze on mixture data.
    pub fn maze() -> Self {
        Self {
            env: EnvKind::Maze,
            horizon: 8,
            stride: 2,
            gamma: 0.99,
            seed: 0,
            schedule: NoiseSchedule::default(),
            data: CollectConfig {
                policy: PolicyKind::Mixture,
                n_episodes: 1000,
                ..Default::default()
            },
            teacher: TeacherConfig {
                steps: 15_000,
                ..Default::default()
            },
            // Tuned on the maze: the stock rate barely moves the student off
            // the teacher copy in this many steps.
            distill: DistillConfig {
                steps: 10_000,
                lr: 3e-4,
                mu_ema: 0.99,
                ..Default::default()
            },
            invdyn: RegressionConfig::default(),
            critic: RegressionConfig::default(),
            plan: PlanConfig {
                num_candidates: 64,
                denoise_steps: 1,
                ..Default::default()
            },
            bench: BenchConfig::default(),
        }
    }

    /// Double integrator on noisy-expert data.
    pub fn integrator() -> Self {
        Self {
            env: EnvKind::Integrator,
            horizon: 4,
            stride: 1,
            data: CollectConfig {
                policy: PolicyKind::Mixture,
                n_episodes: 400,
                ..Default::default()
            },
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            plan: PlanConfig::default(),
            ..Self::maze()
        }
    }

    /// Sets the top-level seed and every per-stage seed to `seed`.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.teacher.seed = seed;
        self.distill.seed = seed;
        self.invdyn.seed = seed;
        self.critic.seed = seed;
        self
    }

    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec::for_kind(self.env)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CtpError::Config(m.to_string()));
        if self.horizon < 2 {
            return bad("horizon must be at least 2");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        self.schedule.validate().map_err(|e| CtpError::Config(e.to_string()))?;
        self.env_spec().validate()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        self.invdyn.validate()?;
        self.critic.validate()?;
        if self.plan.num_candidates == 0 || self.plan.denoise_steps == 0 || self.plan.eval_seeds == 0 {
            return bad("plan.num_candidates, plan.denoise_steps and plan.eval_seeds must be positive");
        }
        if self.bench.steps.is_empty() || self.bench.steps.contains(&0) {
            return bad("bench.steps must be a nonempty list of positive counts");
        }
        if self.bench.seeds < 5 {
            return bad("bench.seeds must be at least 5");
        }
        if self.data.n_episodes == 0 {
            return bad("data.n_episodes must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CtpError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CtpError::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `CTP_*` overrides from `vars`, then validates.
    pub fn with_overrides<I: IntoIterator<Item = (String, String)>>(self, vars: I) -> Result<Self> {
        let mut value = toml::Value::try_from(&self).map_err(|e| CtpError::Config(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|p| p.to_ascii_lowercase())
                .collect();
            let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(raw.clone()));
            let mut slot = &mut value;
            for (i, part) in path.iter().enumerate() {
                let table = slot
                    .as_table_mut()
                    .ok_or_else(|| CtpError::Config(format!("{key}: {part} is not a section")))?;
                if !table.contains_key(part) {
                    return Err(CtpError::Config(format!("{key}: unknown key {part}")));
                }
                slot = table.get_mut(part).expect("checked");
                if i + 1 == path.len() {
                    *slot = parsed.clone();
                }
            }
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| CtpError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
