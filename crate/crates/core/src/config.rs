//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! total_steps = 2000
//! explore_end_step = auto
//! ```
//!
//! Every key has a default, so an empty file is a valid config. Unknown
//! keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::SyntheticGrammar;
use crate::encoder::{EncoderConfig, Reduction};
use crate::error::{Error, Result};
use crate::trainer::{LossForm, TrainConfig};

/// Keys that belong to the training loop rather than the model or data.
pub const TRAIN_KEYS: &[&str] = &[
    "seed",
    "batch_size",
    "total_steps",
    "peak_lr",
    "warmup_steps",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "dropout",
    "lambda",
    "eps_clip",
    "mask_rate",
    "explore_start",
    "explore_end",
    "explore_end_step",
    "eval_interval",
    "checkpoint_interval",
    "baseline_uniform",
    "loss_form",
    "reduction",
    "off_policy_mapnet",
    "freeze_shared_embedding",
    "sample_with_replacement",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// `None` ties the end of the exploration schedule to `total_steps`.
    pub explore_end_step: Option<u64>,
    /// `None` takes the size of the vocabulary in use.
    pub vocab_size: Option<usize>,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_multiplier: usize,
    pub grammar: SyntheticGrammar,
    pub train_sentences: usize,
    pub eval_sentences: usize,
    pub data_seed: u64,
    pub eval_seed: u64,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::toy(0);
        Self {
            train: TrainConfig::toy(),
            explore_end_step: None,
            vocab_size: None,
            max_seq_len: enc.max_seq_len,
            num_layers: enc.num_layers,
            hidden_size: enc.hidden_size,
            num_heads: enc.num_heads,
            ffn_multiplier: enc.ffn_multiplier,
            grammar: SyntheticGrammar::default(),
            train_sentences: 4096,
            eval_sentences: 256,
            data_seed: 1,
            eval_seed: 2,
            corpus: None,
            vocab: None,
            eval_corpus: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn field(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: key.into(),
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| field(key, format!("cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(field(key, format!("expected true or false, got `{v}`"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value`.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| field(kv, "override must look like key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "total_steps" => t.total_steps = num(key, v)?,
            "peak_lr" => t.peak_lr = num(key, v)?,
            "warmup_steps" => t.warmup_steps = num(key, v)?,
            "adam_beta1" => t.adam_betas.0 = num(key, v)?,
            "adam_beta2" => t.adam_betas.1 = num(key, v)?,
            "adam_eps" => t.adam_eps = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "dropout" => t.dropout = num(key, v)?,
            "lambda" => t.lambda = num(key, v)?,
            "eps_clip" => t.eps_clip = num(key, v)?,
            "mask_rate" => t.mask_rate = num(key, v)?,
            "explore_start" => t.schedule.start_p = num(key, v)?,
            "explore_end" => t.schedule.end_p = num(key, v)?,
            "explore_end_step" => {
                self.explore_end_step = if v == "auto" { None } else { Some(num(key, v)?) }
            }
            "eval_interval" => t.eval_interval = num(key, v)?,
            "checkpoint_interval" => t.checkpoint_interval = num(key, v)?,
            "baseline_uniform" => t.baseline_uniform = boolean(key, v)?,
            "loss_form" => {
                t.loss_form = match v {
                    "lambda_on_mapnet" => LossForm::LambdaOnMapnet,
                    "lambda_on_encoder" => LossForm::LambdaOnEncoder,
                    _ => return Err(field(key, "expected lambda_on_mapnet or lambda_on_encoder")),
                }
            }
            "reduction" => {
                t.reduction = match v {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(field(key, "expected mean or sum")),
                }
            }
            "off_policy_mapnet" => t.off_policy_mapnet = boolean(key, v)?,
            "freeze_shared_embedding" => t.freeze_shared_embedding = boolean(key, v)?,
            "sample_with_replacement" => t.sample_with_replacement = boolean(key, v)?,
            "vocab_size" => self.vocab_size = if v == "auto" { None } else { Some(num(key, v)?) },
            "max_seq_len" => self.max_seq_len = num(key, v)?,
            "num_layers" => self.num_layers = num(key, v)?,
            "hidden_size" => self.hidden_size = num(key, v)?,
            "num_heads" => self.num_heads = num(key, v)?,
            "ffn_multiplier" => self.ffn_multiplier = num(key, v)?,
            "grammar_topics" => self.grammar.num_topics = num(key, v)?,
            "grammar_words_per_topic" => self.grammar.words_per_topic = num(key, v)?,
            "grammar_noise_tokens" => self.grammar.num_noise = num(key, v)?,
            "grammar_weight_function" => self.grammar.weights[0] = num(key, v)?,
            "grammar_weight_content" => self.grammar.weights[1] = num(key, v)?,
            "grammar_weight_noise" => self.grammar.weights[2] = num(key, v)?,
            "grammar_min_len" => self.grammar.min_len = num(key, v)?,
            "grammar_max_len" => self.grammar.max_len = num(key, v)?,
            "train_sentences" => self.train_sentences = num(key, v)?,
            "eval_sentences" => self.eval_sentences = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "eval_seed" => self.eval_seed = num(key, v)?,
            "corpus" => self.corpus = opt_path(v),
            "vocab" => self.vocab = opt_path(v),
            "eval_corpus" => self.eval_corpus = opt_path(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(field(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let g = &self.grammar;
        let opt = |o: Option<String>| o.unwrap_or_else(|| "auto".into());
        vec![
            ("seed", t.seed.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("total_steps", t.total_steps.to_string()),
            ("peak_lr", t.peak_lr.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("adam_beta1", t.adam_betas.0.to_string()),
            ("adam_beta2", t.adam_betas.1.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("dropout", t.dropout.to_string()),
            ("lambda", t.lambda.to_string()),
            ("eps_clip", t.eps_clip.to_string()),
            ("mask_rate", t.mask_rate.to_string()),
            ("explore_start", t.schedule.start_p.to_string()),
            ("explore_end", t.schedule.end_p.to_string()),
            ("explore_end_step", opt(self.explore_end_step.map(|s| s.to_string()))),
            ("eval_interval", t.eval_interval.to_string()),
            ("checkpoint_interval", t.checkpoint_interval.to_string()),
            ("baseline_uniform", t.baseline_uniform.to_string()),
            (
                "loss_form",
                match t.loss_form {
                    LossForm::LambdaOnMapnet => "lambda_on_mapnet",
                    LossForm::LambdaOnEncoder => "lambda_on_encoder",
                }
                .into(),
            ),
            (
                "reduction",
                match t.reduction {
                    Reduction::Mean => "mean",
                    Reduction::Sum => "sum",
                }
                .into(),
            ),
            ("off_policy_mapnet", t.off_policy_mapnet.to_string()),
            ("freeze_shared_embedding", t.freeze_shared_embedding.to_string()),
            ("sample_with_replacement", t.sample_with_replacement.to_string()),
            ("vocab_size", opt(self.vocab_size.map(|v| v.to_string()))),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("hidden_size", self.hidden_size.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("ffn_multiplier", self.ffn_multiplier.to_string()),
            ("grammar_topics", g.num_topics.to_string()),
            ("grammar_words_per_topic", g.words_per_topic.to_string()),
            ("grammar_noise_tokens", g.num_noise.to_string()),
            ("grammar_weight_function", g.weights[0].to_string()),
            ("grammar_weight_content", g.weights[1].to_string()),
            ("grammar_weight_noise", g.weights[2].to_string()),
            ("grammar_min_len", g.min_len.to_string()),
            ("grammar_max_len", g.max_len.to_string()),
            ("train_sentences", self.train_sentences.to_string()),
            ("eval_sentences", self.eval_sentences.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("corpus", show_path(&self.corpus)),
            ("vocab", show_path(&self.vocab)),
            ("eval_corpus", show_path(&self.eval_corpus)),
            ("output_dir", self.output_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Wraps a resolved training config.
    pub fn from_train(train: &TrainConfig) -> Self {
        Self {
            train: train.clone(),
            explore_end_step: Some(train.schedule.end_step),
            ..Self::default()
        }
    }

    /// Training config with the exploration schedule resolved.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.schedule.end_step = self.explore_end_step.unwrap_or(t.total_steps);
        t
    }

    pub fn encoder_config(&self, vocab_len: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size.unwrap_or(vocab_len),
            max_seq_len: self.max_seq_len,
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            ffn_multiplier: self.ffn_multiplier,
        }
    }

    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        self.train_config().validate()?;
        let enc = self.encoder_config(vocab_len);
        enc.validate()?;
        if enc.vocab_size < vocab_len {
            return Err(field("vocab_size", format!("smaller than the vocabulary ({vocab_len})")));
        }
        if self.corpus.is_none() {
            self.grammar.validate().map_err(|e| field("grammar", e.to_string()))?;
            if self.grammar.max_len > self.max_seq_len {
                return Err(field("grammar_max_len", "exceeds max_seq_len"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut c = RunConfig::default();
        c.apply_override("total_steps=123").unwrap();
        c.apply_override("explore_end_step = 50").unwrap();
        c.apply_override("loss_form=lambda_on_encoder").unwrap();
        c.apply_override("corpus=data/x.txt").unwrap();
        c.apply_override("peak_lr=0.000123").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_name_the_field_or_line() {
        assert!(matches!(
            RunConfig::parse("seed = 1\nnot a pair\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        match RunConfig::parse("batch_size = many") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "batch_size"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config { .. })));
    }

    #[test]
    fn schedule_follows_total_steps() {
        let c = RunConfig::parse("total_steps = 800\nwarmup_steps = 10").unwrap();
        assert_eq!(c.train_config().schedule.end_step, 800);
        c.validate(131).unwrap();
        let bad = RunConfig::parse("total_steps = 10\nwarmup_steps = 10").unwrap();
        assert!(bad.validate(131).is_err());
    }
}
