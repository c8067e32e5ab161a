//! Flat `key = value` configuration: every hyperparameter and ablation
//! switch, loaded once and threaded to all modules.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid `{field}`: {reason}")]
    Invariant { field: String, reason: String },
}

/// The complete hyperparameter record. Defaults are the published full-scale
/// values; desk-scale runs override capacity fields, never algorithm ones.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub master_seed: u64,
    pub env: String,
    pub total_frames: u64,

    pub learning_rate: f64,
    pub discount: f64,
    pub n_step: usize,
    pub iqn_taus: usize,
    pub iqn_cos_embedding: usize,
    pub huber_kappa: f64,
    pub grad_clip_max_norm: f64,
    pub num_envs: usize,
    pub batch_size: usize,
    pub target_update_period: u64,

    pub impala_width: usize,
    pub maxpool_out: usize,
    pub dueling_hidden: usize,
    pub noisy_sigma0: f64,

    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_frames: u64,
    pub eps_disable_frame: u64,
    pub eval_epsilon: f64,
    pub eval_eps_disable_frame: u64,
    pub eval_episodes: usize,
    pub eval_interval: u64,

    pub replay_capacity: usize,
    pub min_replay_size: usize,
    pub per_alpha: f64,
    pub per_beta_start: f64,
    pub per_beta_end: f64,
    pub per_priority_epsilon: f64,

    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,

    pub munchausen_tau: f64,
    pub munchausen_alpha: f64,
    pub munchausen_l0: f64,

    pub use_munchausen: bool,
    pub use_iqn: bool,
    pub use_spectral_norm: bool,
    pub use_impala: bool,
    pub use_maxpool: bool,
    pub use_vectorization: bool,
    pub use_noisy: bool,
    pub use_dueling: bool,
    pub use_per: bool,
    pub use_layer_norm: bool,

    pub render_height: usize,
    pub render_width: usize,
    pub max_episode_steps: usize,
    pub sticky_action_prob: f64,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub hazard_reward: f64,
    pub brightness_jitter: f64,
    pub clip_rewards: bool,
}

/// Schedule milestones are stated relative to this run length and rescaled
/// proportionally when total_frames differs.
pub const REFERENCE_FRAMES: u64 = 200_000_000;

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            env: "empty8".to_string(),
            total_frames: REFERENCE_FRAMES,

            learning_rate: 1e-4,
            discount: 0.997,
            n_step: 3,
            iqn_taus: 8,
            iqn_cos_embedding: 64,
            huber_kappa: 1.0,
            grad_clip_max_norm: 10.0,
            num_envs: 64,
            batch_size: 256,
            target_update_period: 500,

            impala_width: 2,
            maxpool_out: 6,
            dueling_hidden: 512,
            noisy_sigma0: 0.5,

            eps_start: 1.0,
            eps_end: 0.01,
            eps_decay_frames: 8_000_000,
            eps_disable_frame: 100_000_000,
            eval_epsilon: 0.01,
            eval_eps_disable_frame: 125_000_000,
            eval_episodes: 100,
            eval_interval: 50_000,

            replay_capacity: 1 << 20,
            min_replay_size: 200_000,
            per_alpha: 0.2,
            per_beta_start: 0.4,
            per_beta_end: 1.0,
            per_priority_epsilon: 1e-6,

            adam_eps: 1.95e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,

            munchausen_tau: 0.03,
            munchausen_alpha: 0.9,
            munchausen_l0: -1.0,

            use_munchausen: true,
            use_iqn: true,
            use_spectral_norm: true,
            use_impala: true,
            use_maxpool: true,
            use_vectorization: true,
            use_noisy: true,
            use_dueling: true,
            use_per: true,
            use_layer_norm: false,

            render_height: 84,
            render_width: 84,
            max_episode_steps: 27_000,
            sticky_action_prob: 0.25,
            step_penalty: -0.01,
            goal_reward: 1.0,
            hazard_reward: -1.0,
            brightness_jitter: 0.0,
            clip_rewards: true,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),+ $(,)?) => {
        /// Canonical key order for serialization.
        pub const KEYS: &[&str] = &[$(stringify!($key)),+];

        impl AgentConfig {
            /// Assign one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($key) => {
                        self.$key = parse_value!($kind, key, value)?;
                        Ok(())
                    })+
                    _ => Err(ConfigError::UnknownKey { line: 0, key: key.to_string() }),
                }
            }

            /// Text form of one key, as serialized by to_text.
            pub fn get_text(&self, key: &str) -> String {
                match key {
                    $(stringify!($key) => self.$key.to_string(),)+
                    _ => unreachable!("key list is exhaustive"),
                }
            }
        }
    };
}

macro_rules! parse_value {
    (string, $key:ident, $value:ident) => {
        Ok::<String, ConfigError>($value.to_string())
    };
    ($ty:ident, $key:ident, $value:ident) => {
        $value.parse::<$ty>().map_err(|e| ConfigError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            reason: e.to_string(),
        })
    };
}

config_keys! {
    master_seed: u64,
    env: string,
    total_frames: u64,
    learning_rate: f64,
    discount: f64,
    n_step: usize,
    iqn_taus: usize,
    iqn_cos_embedding: usize,
    huber_kappa: f64,
    grad_clip_max_norm: f64,
    num_envs: usize,
    batch_size: usize,
    target_update_period: u64,
    impala_width: usize,
    maxpool_out: usize,
    dueling_hidden: usize,
    noisy_sigma0: f64,
    eps_start: f64,
    eps_end: f64,
    eps_decay_frames: u64,
    eps_disable_frame: u64,
    eval_epsilon: f64,
    eval_eps_disable_frame: u64,
    eval_episodes: usize,
    eval_interval: u64,
    replay_capacity: usize,
    min_replay_size: usize,
    per_alpha: f64,
    per_beta_start: f64,
    per_beta_end: f64,
    per_priority_epsilon: f64,
    adam_eps: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    munchausen_tau: f64,
    munchausen_alpha: f64,
    munchausen_l0: f64,
    use_munchausen: bool,
    use_iqn: bool,
    use_spectral_norm: bool,
    use_impala: bool,
    use_maxpool: bool,
    use_vectorization: bool,
    use_noisy: bool,
    use_dueling: bool,
    use_per: bool,
    use_layer_norm: bool,
    render_height: usize,
    render_width: usize,
    max_episode_steps: usize,
    sticky_action_prob: f64,
    step_penalty: f64,
    goal_reward: f64,
    hazard_reward: f64,
    brightness_jitter: f64,
    clip_rewards: bool,
}

impl AgentConfig {
    /// Parse flat `key = value` text; `#` starts a comment, blank lines skip.
    /// Unspecified keys keep their defaults; unknown or repeated keys error.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or(ConfigError::Syntax {
                line,
                text: stripped.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if let Some(&k) = seen.iter().find(|&&k| k == key) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: k.to_string(),
                });
            }
            seen.push(KEYS.iter().find(|&&k| k == key).unwrap());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_text(&text)
    }

    /// Canonical serialization; parses back to an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get_text(key));
        }
        out
    }

    /// Hex sha256 of the canonical serialization; prefix names run dirs.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(field: &str, reason: impl Into<String>) -> Result<(), ConfigError> {
            Err(ConfigError::Invariant {
                field: field.to_string(),
                reason: reason.into(),
            })
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount", "must lie in [0, 1)");
        }
        if self.n_step < 1 {
            return bad("n_step", "must be >= 1");
        }
        if self.learning_rate <= 0.0 {
            return bad("learning_rate", "must be > 0");
        }
        if self.huber_kappa <= 0.0 {
            return bad("huber_kappa", "must be > 0");
        }
        if self.grad_clip_max_norm <= 0.0 {
            return bad("grad_clip_max_norm", "must be > 0");
        }
        if self.iqn_taus < 1 {
            return bad("iqn_taus", "must be >= 1");
        }
        if self.iqn_cos_embedding < 1 {
            return bad("iqn_cos_embedding", "must be >= 1");
        }
        if self.num_envs < 1 {
            return bad("num_envs", "must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1");
        }
        if self.batch_size > self.replay_capacity {
            return bad("batch_size", "must not exceed replay_capacity");
        }
        if self.min_replay_size < self.batch_size {
            return bad("min_replay_size", "must be >= batch_size");
        }
        if self.target_update_period < 1 {
            return bad("target_update_period", "must be >= 1");
        }
        if self.impala_width < 1 {
            return bad("impala_width", "must be >= 1");
        }
        if self.maxpool_out < 1 {
            return bad("maxpool_out", "must be >= 1");
        }
        if self.dueling_hidden < 1 {
            return bad("dueling_hidden", "must be >= 1");
        }
        if self.noisy_sigma0 < 0.0 {
            return bad("noisy_sigma0", "must be >= 0");
        }
        for (name, v) in [
            ("eps_start", self.eps_start),
            ("eps_end", self.eps_end),
            ("eval_epsilon", self.eval_epsilon),
        ] {
            if !unit(v) {
                return bad(name, "must lie in [0, 1]");
            }
        }
        if self.per_alpha < 0.0 {
            return bad("per_alpha", "must be >= 0");
        }
        if !unit(self.per_beta_start) || !unit(self.per_beta_end) {
            return bad("per_beta_start", "beta must lie in [0, 1]");
        }
        if self.per_beta_end < self.per_beta_start {
            return bad("per_beta_end", "must be >= per_beta_start");
        }
        if self.per_priority_epsilon <= 0.0 {
            return bad("per_priority_epsilon", "must be > 0");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1", "betas must lie in [0, 1)");
        }
        if self.munchausen_tau <= 0.0 {
            return bad("munchausen_tau", "must be > 0");
        }
        if !unit(self.munchausen_alpha) {
            return bad("munchausen_alpha", "must lie in [0, 1]");
        }
        if self.munchausen_l0 >= 0.0 {
            return bad("munchausen_l0", "must be < 0");
        }
        if self.total_frames < 1 {
            return bad("total_frames", "must be >= 1");
        }
        if self.eval_interval < 1 {
            return bad("eval_interval", "must be >= 1");
        }
        if self.eval_episodes < 1 {
            return bad("eval_episodes", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.sticky_action_prob) {
            return bad("sticky_action_prob", "must lie in [0, 1)");
        }
        if self.brightness_jitter < 0.0 {
            return bad("brightness_jitter", "must be >= 0");
        }
        if self.max_episode_steps < 1 {
            return bad("max_episode_steps", "must be >= 1");
        }
        if self.render_height < 1 || self.render_width < 1 {
            return bad("render_height", "render resolution must be >= 1");
        }
        Ok(())
    }

    /// Replay ratio implied by one gradient step per vector step.
    pub fn replay_ratio(&self) -> f64 {
        if self.use_vectorization {
            1.0 / self.num_envs as f64
        } else {
            // classic cadence: one batch-32 step per 4 env steps
            0.25
        }
    }
}
