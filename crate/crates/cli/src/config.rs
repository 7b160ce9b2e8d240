use std::path::Path;

use serde::{Deserialize, Serialize};
use sip_reward::grpo::{GrpoConfig, TemplateFamily, TrainSetup};
use sip_reward::judge::{HeuristicJudge, HttpJudge, JudgeBackend, JudgeClient, JudgeSettings, MockJudge};
use sip_reward::pairs::PairConfig;
use sip_reward::rewards::{ComponentMask, CurriculumConfig, LengthRewardConfig};
use sip_reward::trajectory::DEFAULT_NGRAM_ORDER;

use crate::error::CliError;
use crate::GlobalArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Mock,
    Heuristic,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    pub backend: Option<BackendChoice>,
    /// Base URL of an OpenAI-compatible chat-completions server.
    pub endpoint: Option<String>,
    pub client: JudgeSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub length: LengthRewardConfig,
    pub curriculum: CurriculumConfig,
    pub mask: ComponentMask,
    pub ngram_order: usize,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            length: LengthRewardConfig::default(),
            curriculum: CurriculumConfig::default(),
            mask: ComponentMask::FULL,
            ngram_order: DEFAULT_NGRAM_ORDER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub grpo: GrpoConfig,
    pub families: Vec<TemplateFamily>,
    /// Size of the generated dataset when no `--dataset` is given.
    pub synthetic_instances: usize,
    pub synthetic_options: usize,
    /// Write a checkpoint every this many steps (0 writes only the last).
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            grpo: GrpoConfig::default(),
            families: TemplateFamily::defaults(),
            synthetic_instances: 20,
            synthetic_options: 4,
            checkpoint_every: 50,
        }
    }
}

/// Fully resolved settings for one invocation. The judge API key is read
/// from the environment at backend construction and is never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub judge: JudgeSection,
    pub rewards: RewardSection,
    pub train: TrainSection,
    pub pairs: PairConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            judge: JudgeSection::default(),
            rewards: RewardSection::default(),
            train: TrainSection::default(),
            pairs: PairConfig::default(),
        }
    }
}

pub const API_KEY_ENV: &str = "JUDGE_API_KEY";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the config file, then environment and flags. Clap
    /// already folds `JUDGE_BASE_URL` into `--judge-endpoint`, with the flag
    /// taking precedence.
    pub fn resolve(args: &GlobalArgs) -> Result<Self, CliError> {
        let mut cfg = match &args.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(jobs) = args.jobs {
            cfg.jobs = Some(jobs);
        }
        if let Some(endpoint) = &args.judge_endpoint {
            cfg.judge.endpoint = Some(endpoint.clone());
            if cfg.judge.backend.is_none() {
                cfg.judge.backend = Some(BackendChoice::Http);
            }
        }
        if let Some(model) = &args.judge_model {
            cfg.judge.client.model = model.clone();
        }
        if args.mock_judge {
            cfg.judge.backend = Some(BackendChoice::Mock);
        }
        if let Some(dir) = &args.cache_dir {
            cfg.judge.client.cache_dir = Some(dir.clone());
        }
        cfg.train.grpo.seed = cfg.seed;
        cfg.pairs.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage(format!("invalid config: {e}"));
        self.rewards.length.validate().map_err(|e| usage(&e))?;
        self.rewards.curriculum.validate().map_err(|e| usage(&e))?;
        self.train.grpo.validate().map_err(|e| usage(&e))?;
        if self.rewards.ngram_order == 0 {
            return Err(CliError::Usage("invalid config: rewards.ngram_order must be at least 1".into()));
        }
        if self.jobs == Some(0) {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        if self.judge.backend == Some(BackendChoice::Http) && self.judge.endpoint.is_none() {
            return Err(CliError::Usage("judge.backend = \"http\" needs an endpoint".into()));
        }
        Ok(())
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            grpo: self.train.grpo.clone(),
            curriculum: self.rewards.curriculum,
            length: self.rewards.length,
            mask: self.rewards.mask,
            families: self.train.families.clone(),
            ngram_order: self.rewards.ngram_order,
        }
    }

    /// The configured judge client, or `None` when no backend was chosen.
    pub fn judge_client(&self) -> Result<Option<JudgeClient>, CliError> {
        let backend: Box<dyn JudgeBackend> = match self.judge.backend {
            None => return Ok(None),
            Some(BackendChoice::Mock) => Box::new(MockJudge::new(self.seed)),
            Some(BackendChoice::Heuristic) => Box::new(HeuristicJudge),
            Some(BackendChoice::Http) => {
                let endpoint = self.judge.endpoint.clone().ok_or_else(|| CliError::Usage("no judge endpoint".into()))?;
                let key = std::env::var(API_KEY_ENV).ok();
                Box::new(HttpJudge::new(endpoint, key, self.judge.client.request_timeout))
            }
        };
        JudgeClient::new(backend, self.judge.client.clone())
            .map(Some)
            .map_err(|e| CliError::Data(format!("cannot open judge cache: {e}")))
    }

    pub fn require_judge(&self) -> Result<JudgeClient, CliError> {
        self.judge_client()?.ok_or_else(|| {
            CliError::Usage("this command needs a judge: pass --mock-judge, --judge-endpoint or set judge.backend".into())
        })
    }
}

pub fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}
