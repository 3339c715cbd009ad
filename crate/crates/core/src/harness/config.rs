//! Run configuration files.
//!
//! A config is TOML with four optional sections; every key has a default, so
//! an empty file describes a complete desk-scale run. Defaults shrink the
//! 125M setup (12 layers, width 768, 12 heads, lr 6e-4) to 4 layers, width
//! 128 and 4 heads with the same optimizer settings.
//!
//! ```toml
//! [model]
//! layers = 4
//! hidden = 128
//! heads = 4
//!
//! [mixer]
//! variant = "krr"      # nw | krr | krr-share | krr-nolrr | llr
//!
//! [task]
//! kind = "copy"        # copy | assoc_recall | char_lm
//! seq_len = 128
//!
//! [train]
//! steps = 2000
//! batch = 16
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixers::{MixerConfig, Variant};
use crate::model::{AdamConfig, ModelConfig};

use super::tasks::{TaskKind, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub init_std: f64,
    pub tied_head: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            layers: m.layers,
            hidden: m.hidden,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            init_std: m.init_std,
            tied_head: m.tied_head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds both parameter initialization and the data streams.
    pub seed: u64,
    /// Steps between metric rows.
    pub eval_interval: usize,
    /// Held-out batches per evaluation.
    pub eval_batches: usize,
    /// Write measured times to the CSV. Off by default so that repeated runs
    /// produce byte-identical files; stdout always shows real times.
    pub record_wall_ms: bool,
    /// Linear ramp from `lr / warmup_steps` to `lr`; 0 disables it.
    pub warmup_steps: usize,
    pub decay: LrDecay,
    /// Stop after the first evaluation whose token accuracy reaches this.
    pub target_accuracy: Option<f64>,
}

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    None,
    /// Half-cosine from `lr` at the end of warmup to 0 at the final step.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 2000,
            batch: 16,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            eval_interval: 100,
            eval_batches: 4,
            record_wall_ms: false,
            warmup_steps: 0,
            decay: LrDecay::None,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.decay {
            LrDecay::None => self.lr,
            LrDecay::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub mixer: MixerConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.task.vocab,
            layers: self.model.layers,
            hidden: self.model.hidden,
            heads: self.model.heads,
            ffn_mult: self.model.ffn_mult,
            max_seq_len: self.task.seq_len,
            init_std: self.model.init_std,
            seed: self.train.seed,
            tied_head: self.model.tied_head,
            mixer: MixerConfig {
                hidden: self.model.hidden,
                heads: self.model.heads,
                ..self.mixer.clone()
            },
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.mixer.variant = variant;
        c
    }

    /// Semantic checks; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.validate_located("")
    }

    fn validate_located(&self, text: &str) -> Result<()> {
        let fail = |section: &str, key: &str, message: String| {
            Err(Error::Config {
                line: locate(text, section, key),
                key: Some(format!("{section}.{key}")),
                message,
            })
        };
        let m = &self.model;
        if m.layers == 0 {
            return fail("model", "layers", "must be at least 1".into());
        }
        if m.heads == 0 || m.hidden == 0 || !m.hidden.is_multiple_of(m.heads) {
            return fail("model", "heads", format!("must divide hidden ({})", m.hidden));
        }
        if !(m.hidden / m.heads).is_multiple_of(2) {
            return fail("model", "heads", format!("head dimension {} must be even", m.hidden / m.heads));
        }
        if !(m.init_std > 0.0) {
            return fail("model", "init_std", "must be positive".into());
        }
        let x = &self.mixer;
        if !(x.lrr_lower > 0.0) {
            return fail("mixer", "lrr_lower", "must be positive".into());
        }
        if !(x.lrr_upper > x.lrr_lower) {
            return fail("mixer", "lrr_upper", "must exceed lrr_lower".into());
        }
        if !(x.lambda_init > 0.0) {
            return fail("mixer", "lambda_init", "must be positive".into());
        }
        if !(x.llr_reg >= 0.0) {
            return fail("mixer", "llr_reg", "must be ≥ 0".into());
        }
        if let Err(Error::InvalidConfig(msg)) = self.task.validate() {
            let key = match self.task.kind {
                TaskKind::CharLm if self.task.corpus.is_none() => "corpus",
                TaskKind::CharLm if self.task.vocab != 256 => "vocab",
                TaskKind::AssocRecall if self.task.vocab / 2 < self.task.num_pairs => "vocab",
                _ => "seq_len",
            };
            return fail("task", key, msg);
        }
        let t = &self.train;
        if t.batch == 0 {
            return fail("train", "batch", "must be at least 1".into());
        }
        if t.eval_interval == 0 {
            return fail("train", "eval_interval", "must be at least 1".into());
        }
        if !(t.lr > 0.0) {
            return fail("train", "lr", "must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) {
            return fail("train", "beta1", "must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&t.beta2) {
            return fail("train", "beta2", "must be in [0, 1)".into());
        }
        if !(t.eps > 0.0) {
            return fail("train", "eps", "must be positive".into());
        }
        if t.target_accuracy.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return fail("train", "target_accuracy", "must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Parses config text. Relative corpus paths are left as written.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| syntax_error(text, &e))?;
    if let Some(toml::Value::Table(mixer)) = table.get("mixer") {
        for key in ["hidden", "heads"] {
            if mixer.contains_key(key) {
                return Err(Error::Config {
                    line: locate(text, "mixer", key),
                    key: Some(format!("mixer.{key}")),
                    message: "set width and head count under [model]".into(),
                });
            }
        }
    }
    fill_task_defaults(&mut table);
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| {
        let key = unknown_key(e.message());
        let line = key
            .as_ref()
            .and_then(|k| ["model", "mixer", "task", "train", ""].iter().find_map(|s| locate(text, s, k)));
        Error::Config {
            line,
            key,
            message: e.message().trim().to_string(),
        }
    })?;
    cfg.validate_located(text)?;
    Ok(cfg)
}

/// Reads a config file; a relative corpus path is resolved against the
/// file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    if let Some(corpus) = &cfg.task.corpus {
        if corpus.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.task.corpus = Some(base.join(corpus));
        }
    }
    Ok(cfg)
}

/// Kind-dependent defaults: bytes for char_lm, `2P + 1` tokens for recall.
fn fill_task_defaults(table: &mut toml::Table) {
    let Some(toml::Value::Table(task)) = table.get_mut("task") else {
        return;
    };
    let kind = task.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    match kind {
        "char_lm" if !task.contains_key("vocab") => {
            task.insert("vocab".into(), toml::Value::Integer(256));
        }
        "assoc_recall" if !task.contains_key("seq_len") => {
            let pairs = task
                .get("num_pairs")
                .and_then(|v| v.as_integer())
                .unwrap_or(TaskSpec::default().num_pairs as i64);
            task.insert("seq_len".into(), toml::Value::Integer(2 * pairs + 1));
        }
        _ => {}
    }
}

fn syntax_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    let key = e.span().and_then(|s| {
        let snippet = text.get(s.clone())?.trim();
        let name = snippet.split('=').next()?.trim();
        (!name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
            .then(|| name.to_string())
    });
    Error::Config {
        line,
        key,
        message: e.message().trim().to_string(),
    }
}

fn unknown_key(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let end = start + message[start..].find('`')?;
    Some(message[start..end].to_string())
}

/// 1-based line of `key = …` inside `[section]` (top level when `section` is empty).
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        let lhs = t.split('=').next().unwrap_or("").trim();
        if t.contains('=') && lhs == key && current == section {
            return Some(i + 1);
        }
    }
    None
}
