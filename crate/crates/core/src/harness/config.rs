//! Flat `key: value` run configuration.
//!
//! One setting per line, `#` starts a comment. A key with an empty value
//! followed by an indented `{...}` block takes that inline map; any other
//! indented block is a named preset and is skipped. Keys carried over from
//! the reference configuration that have no effect here are accepted and
//! ignored; anything else is rejected by name.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::envs::{make_diagnostic_env, AnyEnv, DiagnosticKind, Maze, MazeSpec};
use crate::metaplanner::{MetaConfig, P_GRID};
use crate::planner::{Aggregate, PlannerConfig};
use crate::worldmodel::WorldModelConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {line}: cannot parse `{text}`")]
    Syntax { line: usize, text: String },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    None,
    /// Replan at every step; the meta-policy is bypassed.
    Mpc,
    EntropyOnly,
    RewardOnly,
    Mixed,
}

impl AblationMode {
    /// `(reward weight, entropy weight)` for plan scores and meta rewards.
    pub fn weights(self) -> Option<(f64, f64)> {
        match self {
            AblationMode::None | AblationMode::Mpc => None,
            AblationMode::EntropyOnly => Some((0.0, 1.0)),
            AblationMode::RewardOnly => Some((1.0, 0.0)),
            AblationMode::Mixed => Some((0.5, 0.5)),
        }
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "mpc" => Ok(Self::Mpc),
            "entropy_only" => Ok(Self::EntropyOnly),
            "reward_only" => Ok(Self::RewardOnly),
            "mixed" => Ok(Self::Mixed),
            _ => Err("expected none, mpc, entropy_only, reward_only or mixed".into()),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Mpc => "mpc",
            Self::EntropyOnly => "entropy_only",
            Self::RewardOnly => "reward_only",
            Self::Mixed => "mixed",
        })
    }
}

/// A scalar config value: parsed from and rendered to text.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse::<f64>().map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

/// Integers also accept exponent notation such as `1e6`.
fn parse_integral(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let f = s.parse::<f64>().map_err(|e| e.to_string())?;
    if f >= 0.0 && f.fract() == 0.0 && f < u64::MAX as f64 {
        Ok(f as u64)
    } else {
        Err("expected a non-negative integer".into())
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        parse_integral(s)
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> Result<Self, String> {
        parse_integral(s).map(|v| v as usize)
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" | "True" => Ok(true),
            "false" | "False" => Ok(false),
            _ => Err("expected true or false".into()),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        format!("'{self}'")
    }
}

impl ConfigValue for Aggregate {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(Aggregate::Sum),
            "mean" => Ok(Aggregate::Mean),
            _ => Err("expected sum or mean".into()),
        }
    }
    fn render(&self) -> String {
        match self {
            Aggregate::Sum => "sum".into(),
            Aggregate::Mean => "mean".into(),
        }
    }
}

impl ConfigValue for AblationMode {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! config_fields {
    ($($field:ident : $ty:ty = $default:expr => $key:literal),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct Config {
            $(pub $field: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set_known(&mut self, key: &str, value: &str) -> Option<Result<(), ConfigError>> {
                match key {
                    $($key => Some(
                        <$ty as ConfigValue>::parse_value(value)
                            .map(|v| self.$field = v)
                            .map_err(|reason| ConfigError::InvalidValue { key: key.into(), value: value.into(), reason })
                    ),)*
                    _ => None,
                }
            }

            /// Every setting as `(key, rendered value)`, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$field.render())),*]
            }
        }
    };
}

config_fields! {
    // Run.
    seed: u64 = 0 => "seed",
    steps: usize = 50_000 => "steps",
    prefill: usize = 1000 => "prefill",
    train_ratio: f64 = 64.0 => "train_ratio",
    batch_size: usize = 16 => "batch_size",
    batch_length: usize = 64 => "batch_length",
    dataset_size: usize = 1_000_000 => "dataset_size",
    use_plan: bool = true => "use_plan",
    log_every: usize = 1 => "log_every",
    checkpoint_every: usize = 0 => "checkpoint_every",
    run_id: String = String::new() => "run_id",
    ablation: AblationMode = AblationMode::None => "ablation",
    // Environment.
    task: String = "maze".into() => "task",
    time_limit: usize = 512 => "time_limit",
    maze_width: usize = 8 => "maze_width",
    maze_height: usize = 8 => "maze_height",
    porosity: f64 = 0.2 => "porosity",
    blur: usize = 1 => "blur",
    reward_scale: f64 = 0.1 => "reward_scale",
    prox_radius: f64 = 10.0 => "prox_radius",
    prox_mul: f64 = 0.03 => "prox_mul",
    // World model.
    dyn_hidden: usize = 128 => "dyn_hidden",
    dyn_deter: usize = 128 => "dyn_deter",
    dyn_stoch: usize = 8 => "dyn_stoch",
    dyn_discrete: usize = 8 => "dyn_discrete",
    units: usize = 128 => "units",
    unimix_ratio: f64 = 0.01 => "unimix_ratio",
    dyn_scale: f64 = 0.5 => "dyn_scale",
    rep_scale: f64 = 0.1 => "rep_scale",
    kl_free: f64 = 1.0 => "kl_free",
    model_lr: f64 = 1e-4 => "model_lr",
    opt_eps: f64 = 1e-8 => "opt_eps",
    grad_clip: f64 = 1000.0 => "grad_clip",
    // Actor-critic.
    actor_entropy: f64 = 3e-4 => "actor.entropy",
    actor_unimix_ratio: f64 = 0.01 => "actor.unimix_ratio",
    actor_lr: f64 = 3e-5 => "actor.lr",
    actor_eps: f64 = 1e-5 => "actor.eps",
    actor_grad_clip: f64 = 100.0 => "actor.grad_clip",
    critic_lr: f64 = 3e-5 => "critic.lr",
    critic_eps: f64 = 1e-5 => "critic.eps",
    critic_grad_clip: f64 = 100.0 => "critic.grad_clip",
    critic_slow_target_fraction: f64 = 0.02 => "critic.slow_target_fraction",
    discount: f64 = 0.997 => "discount",
    discount_lambda: f64 = 0.95 => "discount_lambda",
    imag_horizon: usize = 15 => "imag_horizon",
    expl_epsilon: f64 = 0.0 => "expl_epsilon",
    // Planner.
    plan_max_horizon: usize = 16 => "plan_max_horizon",
    plan_choices: usize = 256 => "plan_choices",
    plan_aggregate: Aggregate = Aggregate::Sum => "plan_aggregate",
    plan_reward_weight: f64 = 1.0 => "plan_reward_weight",
    plan_entropy_weight: f64 = 1.0 => "plan_entropy_weight",
    // Meta-planner.
    plan_train_every: usize = 32 => "plan_train_every",
    sub_batch_size: usize = 64 => "sub_batch_size",
    num_epochs: usize = 30 => "num_epochs",
    buffer_size: usize = 32768 => "buffer_size",
    clip_epsilon: f64 = 0.2 => "clip_epsilon",
    gamma: f64 = 0.99 => "gamma",
    lmbda: f64 = 0.95 => "lmbda",
    entropy_eps: f64 = 0.1 => "entropy_eps",
    num_cells: usize = 256 => "num_cells",
    lr: f64 = 0.003 => "lr",
    seq_length: usize = 8 => "seq_length",
    buffer_minimum: usize = 512 => "buffer_minimum",
    meta_action_quant: usize = 5 => "meta_action_quant",
    ent_multiplier: f64 = 1.0 => "ent_multiplier",
    rew_multiplier: f64 = 1.0 => "rew_multiplier",
}

/// Reference-configuration keys accepted without effect.
const INERT_KEYS: &[&str] = &[
    "logdir", "traindir", "evaldir", "offline_traindir", "offline_evaldir", "deterministic_run", "parallel", "eval_every",
    "eval_episode_num", "reset_every", "device", "compile", "precision", "debug", "size", "grayscale", "reward_EMA", "envs",
    "action_repeat", "dyn_rec_depth", "dyn_mean_act", "dyn_std_act", "dyn_min_std", "grad_heads", "act", "norm", "encoder",
    "decoder", "Q", "reward_head", "entropy_head", "cont_head", "weight_decay", "initial", "pretrain", "opt", "imag_gradient",
    "imag_gradient_mix", "eval_state_mean", "expl_behavior", "expl_until", "expl_extr_scale", "expl_intr_scale", "disag_target",
    "disag_log", "disag_models", "disag_offset", "disag_layers", "disag_units", "disag_action_cond", "num_meta_action_lwr",
    "video_pred_log",
];

/// Inline-map sub-keys accepted without effect, per map.
const INERT_SUBKEYS: &[(&str, &[&str])] = &[
    ("actor", &["layers", "dist", "std", "min_std", "max_std", "temp", "outscale"]),
    ("critic", &["layers", "dist", "slow_target", "slow_target_update", "outscale"]),
];

fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, ch) in line.char_indices() {
        match (ch, quote) {
            ('\'' | '"', None) => quote = Some(ch),
            (q, Some(open)) if q == open => quote = None,
            ('#', None) => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for q in ['\'', '"'] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

/// Splits `{a: 1, b: 'x'}` into pairs, respecting quotes and brackets.
fn parse_inline_map(text: &str) -> Option<Vec<(String, String)>> {
    let inner = text.trim().strip_prefix('{')?.strip_suffix('}')?;
    let mut parts = Vec::new();
    let (mut depth, mut quote, mut start) = (0i32, None, 0);
    for (i, ch) in inner.char_indices() {
        match (ch, quote) {
            ('\'' | '"', None) => quote = Some(ch),
            (q, Some(open)) if q == open => quote = None,
            ('[' | '{', None) => depth += 1,
            (']' | '}', None) => depth -= 1,
            (',', None) if depth == 0 => {
                parts.push(&inner[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&inner[start..]);
    parts
        .into_iter()
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p.split_once(':')?;
            Some((k.trim().to_string(), unquote(v).to_string()))
        })
        .collect()
}

impl Config {
    /// Sets one key. Dotted keys (`actor.lr`) address inline-map entries;
    /// a bare map key takes a whole `{...}` value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = unquote(value);
        if let Some(result) = self.set_known(key, value) {
            return result;
        }
        if let Some((_, inert)) = INERT_SUBKEYS.iter().find(|(map, _)| *map == key) {
            let pairs = parse_inline_map(value).ok_or_else(|| ConfigError::InvalidValue {
                key: key.into(),
                value: value.into(),
                reason: "expected an inline map".into(),
            })?;
            for (k, v) in pairs {
                let full = format!("{key}.{k}");
                if inert.contains(&k.as_str()) {
                    continue;
                }
                if self.set_known(&full, &v).transpose()?.is_none() {
                    return Err(ConfigError::UnknownKey(full));
                }
            }
            return Ok(());
        }
        if let Some((map, sub)) = key.split_once('.') {
            if INERT_SUBKEYS.iter().any(|(m, inert)| *m == map && inert.contains(&sub)) {
                return Ok(());
            }
        }
        if INERT_KEYS.contains(&key) {
            return Ok(());
        }
        Err(ConfigError::UnknownKey(key.into()))
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: spec.into() })?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    /// Applies every top-level setting in `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let lines: Vec<&str> = text.lines().collect();
        let mut i = 0;
        while i < lines.len() {
            let raw = strip_comment(lines[i]);
            i += 1;
            if raw.trim().is_empty() {
                continue;
            }
            if raw.starts_with(char::is_whitespace) {
                return Err(ConfigError::Syntax { line: i, text: raw.trim().into() });
            }
            let (key, value) = raw.split_once(':').ok_or_else(|| ConfigError::Syntax { line: i, text: raw.trim().into() })?;
            let (key, value) = (key.trim(), value.trim());
            if !value.is_empty() {
                self.set(key, value)?;
                continue;
            }
            let mut block = Vec::new();
            while i < lines.len() {
                let next = strip_comment(lines[i]);
                if !next.trim().is_empty() && !next.starts_with(char::is_whitespace) {
                    break;
                }
                if !next.trim().is_empty() {
                    block.push(next.trim());
                }
                i += 1;
            }
            let joined = block.join(" ");
            if joined.starts_with('{') {
                self.set(key, &joined)?;
            } else if block.is_empty() {
                return Err(ConfigError::InvalidValue { key: key.into(), value: String::new(), reason: "missing value".into() });
            }
            // Otherwise a named preset: skipped.
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        let cfg = Config::parse(&text)?;
        Ok(cfg)
    }

    /// Renders every setting so that [`Config::parse`] reproduces `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.meta_action_quant != P_GRID.len() {
            return fail("meta_action_quant must be 5");
        }
        if self.maze_width < 2 || self.maze_height < 2 {
            return fail("maze_width and maze_height must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.porosity) {
            return fail("porosity must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.batch_length == 0 {
            return fail("batch_size and batch_length must be positive");
        }
        if self.imag_horizon == 0 || self.plan_max_horizon == 0 || self.plan_choices == 0 {
            return fail("horizons and plan_choices must be positive");
        }
        if self.dataset_size < self.batch_length {
            return fail("dataset_size must hold at least one sequence");
        }
        if self.seq_length == 0 || self.buffer_minimum == 0 || self.buffer_minimum > self.buffer_size {
            return fail("need 0 < buffer_minimum <= buffer_size and seq_length > 0");
        }
        if self.time_limit == 0 {
            return fail("time_limit must be positive");
        }
        if !self.train_ratio.is_finite() || self.train_ratio < 0.0 {
            return fail("train_ratio must be non-negative");
        }
        self.env_kind()?;
        Ok(())
    }

    fn env_kind(&self) -> Result<Option<DiagnosticKind>, ConfigError> {
        match self.task.as_str() {
            "maze" => Ok(None),
            other => other
                .parse::<DiagnosticKind>()
                .map(Some)
                .map_err(|_| ConfigError::InvalidValue { key: "task".into(), value: other.into(), reason: "expected maze, noisy_tv or rare_transition".into() }),
        }
    }

    pub fn maze_spec(&self) -> MazeSpec {
        MazeSpec {
            width: self.maze_width,
            height: self.maze_height,
            porosity: self.porosity,
            time_limit: self.time_limit,
            blur: self.blur,
            prox_radius: self.prox_radius,
            prox_mul: self.prox_mul,
            reward_scale: self.reward_scale,
            ..MazeSpec::default()
        }
    }

    pub fn make_env(&self, seed: u64) -> Result<AnyEnv, ConfigError> {
        Ok(match self.env_kind()? {
            None => AnyEnv::Maze(Maze::new(self.maze_spec(), seed)),
            Some(kind) => make_diagnostic_env(kind, seed),
        })
    }

    pub fn world_model(&self, obs_dim: usize, num_actions: usize) -> WorldModelConfig {
        WorldModelConfig {
            obs_dim,
            num_actions,
            deter: self.dyn_deter,
            hidden: self.dyn_hidden,
            embed: self.units,
            groups: self.dyn_stoch,
            classes: self.dyn_discrete,
            unimix_ratio: self.unimix_ratio,
            dyn_scale: self.dyn_scale,
            rep_scale: self.rep_scale,
            kl_free: self.kl_free,
            lr: self.model_lr,
            opt_eps: self.opt_eps,
            grad_clip: self.grad_clip,
            relaxed_latents: false,
        }
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig {
            hidden: self.units,
            unimix_ratio: self.actor_unimix_ratio,
            entropy_coef: self.actor_entropy,
            actor_lr: self.actor_lr,
            actor_eps: self.actor_eps,
            actor_grad_clip: self.actor_grad_clip,
            critic_lr: self.critic_lr,
            critic_eps: self.critic_eps,
            critic_grad_clip: self.critic_grad_clip,
            slow_fraction: self.critic_slow_target_fraction,
            discount: self.discount,
            lambda: self.discount_lambda,
            horizon: self.imag_horizon,
            epsilon: self.expl_epsilon,
            return_norm_decay: 0.99,
        }
    }

    /// Plan-score weights, overridden by the ablation mode.
    pub fn planner(&self) -> PlannerConfig {
        let (reward_weight, entropy_weight) = self.ablation.weights().unwrap_or((self.plan_reward_weight, self.plan_entropy_weight));
        PlannerConfig { num_candidates: self.plan_choices, horizon: self.plan_max_horizon, reward_weight, entropy_weight, aggregate: self.plan_aggregate }
    }

    /// Meta-reward multipliers, overridden by the ablation mode.
    pub fn meta(&self) -> MetaConfig {
        let (reward_multiplier, entropy_multiplier) = self.ablation.weights().unwrap_or((self.rew_multiplier, self.ent_multiplier));
        MetaConfig {
            hidden: self.num_cells,
            lr: self.lr,
            clip_epsilon: self.clip_epsilon,
            entropy_coef: self.entropy_eps,
            num_epochs: self.num_epochs,
            sub_batch_size: self.sub_batch_size,
            gamma: self.gamma,
            lambda: self.lmbda,
            buffer_size: self.buffer_size,
            buffer_minimum: self.buffer_minimum,
            train_every: self.plan_train_every,
            seq_length: self.seq_length,
            reward_multiplier,
            entropy_multiplier,
            ..MetaConfig::default()
        }
    }

    /// The run id recorded on every metric, derived when not set.
    pub fn resolved_run_id(&self) -> String {
        if !self.run_id.is_empty() {
            return self.run_id.clone();
        }
        let agent = if self.use_plan { "plan" } else { "base" };
        format!("{}-{}-{}-s{}", self.task, agent, self.ablation, self.seed)
    }
}
