//! Run configuration: defaults, a key=value config file, and command-line
//! overrides, merged in that order. Every run echoes the fully resolved
//! config so results can be reproduced from the log alone.

use crate::corpus::Truncation;
use crate::error::{Error, Result};
use crate::model::{BankSpan, EsmReading, ForwardSettings, Mode, ModelDims};
use crate::retrieval::Reranker;
use std::fmt::Write as _;
use std::path::Path;

/// Optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Usage(format!(
                "unknown optimizer {other:?} (expected adam or sgd)"
            ))),
        }
    }
}

/// Every tunable of the pipeline. Paths are not configuration; they are
/// command arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub word_dim: usize,
    pub role_dim: usize,
    pub hidden: usize,
    pub keep_prob: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// How many retrieved similar conversations feed the memory (0-3).
    pub top_k: usize,
    pub mode: Mode,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    pub esm_reading: EsmReading,
    pub bank_span: BankSpan,
    /// Role whose turns are generation targets.
    pub target_role: String,
    pub max_utt_tokens: usize,
    pub max_context_turns: usize,
    /// Worker threads for batch evaluation; 0 means all cores.
    pub threads: usize,
    /// Vocabulary build settings.
    pub min_freq: u64,
    pub max_vocab: usize,
    /// Retrieval settings.
    pub pool: usize,
    pub reranker: Reranker,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            word_dim: 300,
            role_dim: 100,
            hidden: 300,
            keep_prob: 0.8,
            learning_rate: 5e-4,
            batch_size: 32,
            top_k: 1,
            mode: Mode::Drmn,
            optimizer: OptimizerKind::Adam,
            seed: 7,
            max_epochs: 50,
            patience: 5,
            clip: 5.0,
            esm_reading: EsmReading::WordMatrix,
            bank_span: BankSpan::TargetAndSimilar,
            target_role: "agent".to_string(),
            max_utt_tokens: 30,
            max_context_turns: 20,
            threads: 0,
            min_freq: 2,
            max_vocab: 50_000,
            pool: 50,
            reranker: Reranker::TfidfCosine,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Applies one key=value setting. Unknown keys are usage errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "word_dim" => self.word_dim = parse_num(key, value)?,
            "role_dim" => self.role_dim = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "keep_prob" => self.keep_prob = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "top_k" => self.top_k = parse_num(key, value)?,
            "mode" => self.mode = Mode::parse(value)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "clip" => self.clip = parse_num(key, value)?,
            "esm_reading" => self.esm_reading = EsmReading::parse(value)?,
            "bank_span" => self.bank_span = BankSpan::parse(value)?,
            "target_role" => self.target_role = value.to_string(),
            "max_utt_tokens" => self.max_utt_tokens = parse_num(key, value)?,
            "max_context_turns" => self.max_context_turns = parse_num(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            "min_freq" => self.min_freq = parse_num(key, value)?,
            "max_vocab" => self.max_vocab = parse_num(key, value)?,
            "pool" => self.pool = parse_num(key, value)?,
            "reranker" => self.reranker = Reranker::parse(value)?,
            other => return Err(Error::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn apply_lines(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("{origin}:{}: expected key=value", lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| Error::Usage(format!("{origin}:{}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))?;
        self.apply_lines(&text, &path.display().to_string())
    }

    /// The fully resolved configuration, one key=value per line in fixed
    /// order. Feeding this back through `apply_lines` reproduces the config
    /// exactly; it is also the checkpoint's config snapshot.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("word_dim", self.word_dim.to_string());
        put("role_dim", self.role_dim.to_string());
        put("hidden", self.hidden.to_string());
        put("keep_prob", self.keep_prob.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("batch_size", self.batch_size.to_string());
        put("top_k", self.top_k.to_string());
        put("mode", self.mode.name().to_string());
        put("optimizer", self.optimizer.name().to_string());
        put("seed", self.seed.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("patience", self.patience.to_string());
        put("clip", self.clip.to_string());
        put("esm_reading", self.esm_reading.name().to_string());
        put("bank_span", self.bank_span.name().to_string());
        put("target_role", self.target_role.clone());
        put("max_utt_tokens", self.max_utt_tokens.to_string());
        put("max_context_turns", self.max_context_turns.to_string());
        put("threads", self.threads.to_string());
        put("min_freq", self.min_freq.to_string());
        put("max_vocab", self.max_vocab.to_string());
        put("pool", self.pool.to_string());
        put("reranker", self.reranker.name().to_string());
        s
    }

    pub fn from_blob(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_lines(text, "checkpoint config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |msg: String| Err(Error::Usage(msg));
        if self.word_dim == 0 || self.role_dim == 0 || self.hidden == 0 {
            return usage("dimensions must be positive".into());
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return usage(format!("keep_prob {} outside (0, 1]", self.keep_prob));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return usage(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return usage("batch_size must be positive".into());
        }
        if self.top_k > 3 {
            return usage(format!("top_k {} outside 0-3", self.top_k));
        }
        if (self.top_k == 0) != (self.mode == Mode::EsmOff) {
            return usage(format!(
                "top_k {} conflicts with mode {}: top_k=0 exactly when mode=esm_off",
                self.top_k,
                self.mode.name()
            ));
        }
        if self.max_epochs == 0 {
            return usage("max_epochs must be positive".into());
        }
        if self.patience == 0 {
            return usage("patience must be positive".into());
        }
        if !(self.clip > 0.0) {
            return usage(format!("clip {} must be positive", self.clip));
        }
        if self.target_role.is_empty() {
            return usage("target_role must be set".into());
        }
        if self.max_utt_tokens == 0 || self.max_context_turns == 0 {
            return usage("truncation limits must be positive".into());
        }
        if self.min_freq == 0 {
            return usage("min_freq must be positive".into());
        }
        if self.max_vocab < 5 {
            return usage("max_vocab too small for the reserved tokens".into());
        }
        if self.pool == 0 {
            return usage("pool must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self, vocab_size: usize, role_count: usize) -> ModelDims {
        ModelDims {
            vocab: vocab_size,
            roles: role_count,
            word: self.word_dim,
            role: self.role_dim,
            hidden: self.hidden,
        }
    }

    pub fn truncation(&self) -> Truncation {
        Truncation {
            max_utt_tokens: self.max_utt_tokens,
            max_context_turns: self.max_context_turns,
        }
    }

    pub fn forward_settings(&self, training: bool) -> ForwardSettings {
        ForwardSettings {
            mode: self.mode,
            esm_reading: self.esm_reading,
            bank_span: self.bank_span,
            keep_prob: self.keep_prob,
            training,
        }
    }

    /// Effective worker count.
    pub fn worker_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_echo_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let echoed = cfg.echo();
        let back = TrainConfig::from_blob(&echoed).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn non_default_values_round_trip_exactly() {
        let mut cfg = TrainConfig::default();
        cfg.apply("learning_rate", "0.0030000000000000001").unwrap();
        cfg.apply("mode", "esm_off").unwrap();
        cfg.apply("top_k", "0").unwrap();
        cfg.apply("keep_prob", "0.95").unwrap();
        cfg.apply("optimizer", "sgd").unwrap();
        cfg.apply("esm_reading", "pooled").unwrap();
        cfg.apply("bank_span", "target_only").unwrap();
        cfg.validate().unwrap();
        let back = TrainConfig::from_blob(&cfg.echo()).unwrap();
        assert_eq!(back.learning_rate.to_bits(), cfg.learning_rate.to_bits());
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let mut cfg = TrainConfig::default();
        let err = cfg
            .apply_lines("seed=3\nlearning_rte=0.1\n", "run.conf")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.conf:2"), "{msg}");
        assert!(msg.contains("learning_rte"), "{msg}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = TrainConfig::default();
        cfg.apply_lines("# run settings\n\nseed = 42 # chosen by dice\n", "c")
            .unwrap();
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn top_k_and_mode_must_agree() {
        let mut cfg = TrainConfig::default();
        cfg.apply("top_k", "0").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply("mode", "esm_off").unwrap();
        cfg.validate().unwrap();
        cfg.apply("top_k", "2").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply("mode", "drmn").unwrap();
        cfg.validate().unwrap();
        cfg.apply("top_k", "4").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn out_of_range_scalars_are_rejected() {
        for (key, value) in [
            ("keep_prob", "0"),
            ("keep_prob", "1.5"),
            ("learning_rate", "0"),
            ("batch_size", "0"),
            ("hidden", "0"),
            ("clip", "0"),
            ("patience", "0"),
            ("pool", "0"),
        ] {
            let mut cfg = TrainConfig::default();
            cfg.apply(key, value).unwrap();
            assert!(cfg.validate().is_err(), "{key}={value} accepted");
        }
    }

    #[test]
    fn command_line_overrides_beat_file_values() {
        let mut cfg = TrainConfig::default();
        cfg.apply_lines("seed=1\nbatch_size=8\n", "file").unwrap();
        // command line applied second wins
        cfg.apply("seed", "2").unwrap();
        assert_eq!(cfg.seed, 2);
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn optimizer_names_round_trip() {
        for k in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            assert_eq!(OptimizerKind::parse(k.name()).unwrap(), k);
        }
        assert!(OptimizerKind::parse("adagrad").is_err());
    }
}
