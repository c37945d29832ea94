//! Pipeline configuration: typed defaults, a plain-text key=value file
//! format, and layered overrides (flags > file > defaults).

use crate::nn::TrainConfig;
use crate::search::SearchConfig;
use serde::Serialize;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    UnknownKey { line: usize, key: String },
    BadValue { line: usize, key: String, value: String },
    Malformed { line: usize, text: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config io error: {e}"),
            ConfigError::UnknownKey { line, key } => {
                write!(f, "config line {line}: unknown key '{key}'")
            }
            ConfigError::BadValue { line, key, value } => {
                write!(f, "config line {line}: invalid value '{value}' for key '{key}'")
            }
            ConfigError::Malformed { line, text } => {
                write!(f, "config line {line}: expected key=value, got '{text}'")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

/// Declares the config struct once; key names, parsing, and echoing are all
/// generated from the same field list so they cannot drift apart.
macro_rules! pipeline_config {
    ($($field:ident : $ty:ty = $default:expr),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Serialize)]
        pub struct PipelineConfig {
            $(pub $field: $ty),*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                PipelineConfig { $($field: $default),* }
            }
        }

        impl PipelineConfig {
            pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|_| ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            value: value.to_string(),
                        })?;
                    })*
                    _ => {
                        return Err(ConfigError::UnknownKey { line, key: key.to_string() });
                    }
                }
                Ok(())
            }

            /// The effective config as key=value lines, echoed into artifacts.
            pub fn echo(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{}={}\n", stringify!($field), self.$field));)*
                s
            }
        }
    };
}

pipeline_config! {
    // Dataset generation.
    dataset_n: usize = 2000,
    dataset_seed: u64 = 7,
    // Shared training loop. The decay schedule is calibrated for the
    // imitator (three learning-rate plateaus plus a short cool-down); the
    // recognizer and segmenter run fewer epochs than one decay period, so
    // they train at their base rate throughout.
    batch_size: usize = 16,
    momentum: f32 = 0.9,
    lr_decay: f32 = 0.35,
    decay_every: usize = 60,
    train_seed: u64 = 0,
    // Imitator. Epoch counts are desk-scale defaults sized for CPU budgets;
    // the loop accepts any value.
    imitator_lr: f32 = 0.06,
    imitator_epochs: usize = 190,
    // Recognizer identity corpus and schedule.
    recognizer_lr: f32 = 0.01,
    recognizer_epochs: usize = 10,
    identities: usize = 200,
    views_per_identity: usize = 20,
    identity_seed: u64 = 11,
    // Segmenter.
    segmenter_lr: f32 = 0.001,
    segmenter_epochs: usize = 12,
    // Stage II search.
    alpha: f32 = 0.01,
    beta: f32 = 100.0,
    search_iters: usize = 50,
    search_lr: f32 = 10.0,
    search_lr_decay: f32 = 0.8,
    search_decay_every: usize = 5,
    lr_scale: f32 = 1.0,
    // Worker pool size for eval suites (1 keeps runs reproducible).
    threads: usize = 1,
}

impl PipelineConfig {
    /// Applies key=value lines from `text`. Blank lines and `#` comments are
    /// skipped; unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { line, text: trimmed.to_string() })?;
            self.set(key.trim(), value.trim(), line)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn imitator_train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.imitator_lr,
            momentum: self.momentum,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            epochs: self.imitator_epochs,
            seed: self.train_seed,
        }
    }

    pub fn recognizer_train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.recognizer_lr,
            epochs: self.recognizer_epochs,
            ..self.imitator_train()
        }
    }

    pub fn segmenter_train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.segmenter_lr,
            epochs: self.segmenter_epochs,
            ..self.imitator_train()
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            alpha: self.alpha,
            beta: self.beta,
            max_iters: self.search_iters,
            learning_rate: self.search_lr,
            lr_decay: self.search_lr_decay,
            decay_every: self.search_decay_every,
            lr_scale: self.lr_scale,
            content_weight: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let c = PipelineConfig::default();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.imitator_lr, 0.06);
        assert_eq!(c.lr_decay, 0.35);
        assert_eq!(c.decay_every, 60);
        assert_eq!(c.segmenter_lr, 0.001);
        assert_eq!(c.alpha, 0.01);
        assert_eq!(c.beta, 100.0);
        assert_eq!(c.search_iters, 50);
        assert_eq!(c.search_lr, 10.0);
        assert_eq!(c.search_lr_decay, 0.8);
        assert_eq!(c.search_decay_every, 5);
        assert_eq!(c.dataset_n, 2000);
        assert_eq!(c.threads, 1);
    }

    #[test]
    fn file_overrides_defaults() {
        let mut c = PipelineConfig::default();
        c.apply_text("# comment\n\nalpha = 0.5\n dataset_n=10 \n").unwrap();
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.dataset_n, 10);
        assert_eq!(c.beta, 100.0); // untouched key keeps its default
    }

    #[test]
    fn unknown_key_rejected_with_line_number() {
        let mut c = PipelineConfig::default();
        let err = c.apply_text("alpha=0.5\nbogus_key=1\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "bogus_key");
            }
            other => panic!("expected UnknownKey, got {other}"),
        }
    }

    #[test]
    fn bad_value_and_malformed_line_rejected() {
        let mut c = PipelineConfig::default();
        assert!(matches!(
            c.apply_text("alpha=notanumber").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
        assert!(matches!(
            c.apply_text("justtext").unwrap_err(),
            ConfigError::Malformed { .. }
        ));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = PipelineConfig::default();
        c.apply_text("alpha=0.25\nimitator_epochs=3\nthreads=2").unwrap();
        let mut back = PipelineConfig::default();
        back.apply_text(&c.echo()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn training_and_search_views() {
        let mut c = PipelineConfig::default();
        c.apply_text("segmenter_lr=0.002\nsearch_iters=7").unwrap();
        assert_eq!(c.segmenter_train().learning_rate, 0.002);
        assert_eq!(c.segmenter_train().batch_size, 16);
        assert_eq!(c.search().max_iters, 7);
        assert_eq!(c.search().learning_rate, 10.0);
    }
}
