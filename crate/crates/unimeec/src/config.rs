//! Runtime configuration: model shape, context graph, prompt, training,
//! ablation switches, and the synthetic-corpus generator.
//!
//! Config files are JSON with the same nesting as the structs here; every
//! field has a default, so a file only states what it overrides. The
//! `UNIMEEC_SEED` environment variable overrides both training and
//! generator seeds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

/// How the context-graph window picks neighbours of utterance `i`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Closed interval `[i-w, i+w]`, self included.
    Interval,
    /// Exactly the two offsets `i-w` and `i+w`; self only when `w = 0`.
    Literal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_text_layers: usize,
    pub n_audio_layers: usize,
    pub n_vision_layers: usize,
    pub dropout: f64,
    /// Cause-head class count: causes are addressed by absolute utterance
    /// index, so this caps conversation length.
    pub max_conv_len: usize,
    pub n_emotions: usize,
    pub neutral_index: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            n_text_layers: 2,
            n_audio_layers: 1,
            n_vision_layers: 1,
            dropout: 0.0,
            max_conv_len: 64,
            n_emotions: 4,
            neutral_index: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThcConfig {
    pub layers: usize,
    pub window: usize,
    /// Attention heads per graph layer; length must equal `layers`.
    pub heads: Vec<usize>,
    pub attention: Switch,
    pub window_mode: WindowMode,
}

impl Default for ThcConfig {
    fn default() -> Self {
        ThcConfig {
            layers: 2,
            window: 2,
            heads: vec![1, 4],
            attention: Switch::On,
            window_mode: WindowMode::Interval,
        }
    }
}

pub const DEFAULT_TEMPLATE: &str =
    "for conversation , the emotion category of [X] is [M1] , the reason for this emotion is [M2]";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub template: String,
    /// Token positions reserved for the utterance span `[X]`.
    pub x_capacity: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            template: DEFAULT_TEMPLATE.to_string(),
            x_capacity: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for parameters under the `encoder.` prefix.
    pub lr_encoder: f64,
    /// Learning rate for all other parameters.
    pub lr_rest: f64,
    /// Fraction of the planned optimizer steps spent in linear warmup
    /// before the linear decay to zero.
    pub warmup_fraction: f64,
    /// Early stop after this many epochs without a new best validation
    /// weighted F1; `0` disables early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            lr_encoder: 3e-4,
            lr_rest: 1e-4,
            warmup_fraction: 0.1,
            patience: 0,
            seed: 17,
        }
    }
}

/// Component switches. Everything defaults to on; turning a switch off
/// removes that component while keeping the parameter layout fixed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Train the cause objective alongside the emotion objective.
    pub use_mecpe: bool,
    pub use_text: bool,
    pub use_audio: bool,
    pub use_vision: bool,
    /// Run the hierarchical context graph between fusion and the heads.
    pub use_thc: bool,
    /// Keep the three graph levels typed; off flattens them into one level
    /// with a single edge type.
    pub use_hierarchy: bool,
    /// Apply the locality window; off connects the whole conversation.
    pub use_window: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_mecpe: true,
            use_text: true,
            use_audio: true,
            use_vision: true,
            use_thc: true,
            use_hierarchy: true,
            use_window: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub conversations: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub tokens_per_utterance: usize,
    pub vocab_size: usize,
    pub n_emotions: usize,
    pub neutral_index: usize,
    pub audio_dim: usize,
    pub vision_dim: usize,
    pub audio_len: usize,
    pub vision_len: usize,
    /// A cause sits at most this many utterances before its emotion;
    /// `0` makes every emotion its own cause.
    pub cause_offset_range: usize,
    /// Probability that a neutral-or-run-boundary utterance opens a new
    /// emotional run.
    pub emotion_density: f64,
    /// Probability that an emotional run continues onto the next
    /// utterance while its event stays inside the offset range.
    pub emotion_inertia: f64,
    pub noise_std: f64,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            conversations: 64,
            min_utterances: 3,
            max_utterances: 6,
            tokens_per_utterance: 6,
            vocab_size: 32,
            n_emotions: 4,
            neutral_index: 0,
            audio_dim: 12,
            vision_dim: 10,
            audio_len: 8,
            vision_len: 5,
            cause_offset_range: 2,
            emotion_density: 0.65,
            emotion_inertia: 0.85,
            noise_std: 0.3,
            train_fraction: 1.0,
            valid_fraction: 0.0,
            seed: 23,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub thc: ThcConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn from_path(path: &str) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{path}: {e}")))?;
        cfg.apply_env_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a configuration file, or fall back to the defaults when no
    /// path is given. Either way `UNIMEEC_SEED` takes effect.
    pub fn load_or_default(path: Option<&str>) -> Result<Config> {
        match path {
            Some(p) => Config::from_path(p),
            None => {
                let mut cfg = Config::default();
                cfg.apply_env_seed()?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    /// `UNIMEEC_SEED` overrides both the training and generator seeds.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        match std::env::var("UNIMEEC_SEED") {
            Ok(v) => match v.trim().parse::<u64>() {
                Ok(seed) => {
                    self.train.seed = seed;
                    self.synth.seed = seed;
                    Ok(())
                }
                Err(_) => Err(Error::Config(format!(
                    "UNIMEEC_SEED must be an unsigned integer, got {v:?}"
                ))),
            },
            Err(_) => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: String| Err(Error::Config(msg));
        if m.d_model == 0 || m.n_heads == 0 || m.d_ffn == 0 {
            return fail("model dims must be positive".into());
        }
        if m.d_model % m.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                m.d_model, m.n_heads
            ));
        }
        if m.n_text_layers == 0 {
            return fail("need at least one text layer".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return fail(format!("dropout {} outside [0,1)", m.dropout));
        }
        if m.n_emotions < 2 {
            return fail("need at least two emotion classes".into());
        }
        if m.neutral_index >= m.n_emotions {
            return fail(format!(
                "neutral_index {} outside emotion range {}",
                m.neutral_index, m.n_emotions
            ));
        }
        if m.max_conv_len == 0 {
            return fail("max_conv_len must be positive".into());
        }
        let t = &self.thc;
        if t.layers == 0 {
            return fail("context graph needs at least one layer".into());
        }
        if t.heads.len() != t.layers {
            return fail(format!(
                "thc.heads has {} entries for {} layers",
                t.heads.len(),
                t.layers
            ));
        }
        for &h in &t.heads {
            if h == 0 || m.d_model % h != 0 {
                return fail(format!(
                    "graph head count {} must divide d_model {}",
                    h, m.d_model
                ));
            }
        }
        if self.prompt.x_capacity == 0 {
            return fail("x_capacity must be positive".into());
        }
        if self.prompt.template.split_whitespace().count() == 0 {
            return fail("prompt template is empty".into());
        }
        let tr = &self.train;
        if tr.epochs == 0 || tr.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if tr.lr_encoder <= 0.0 || tr.lr_rest <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&tr.warmup_fraction) {
            return fail(format!(
                "warmup_fraction {} outside [0, 1)",
                tr.warmup_fraction
            ));
        }
        let s = &self.synth;
        if s.min_utterances == 0 || s.min_utterances > s.max_utterances {
            return fail("bad utterance range".into());
        }
        if s.max_utterances > m.max_conv_len {
            return fail(format!(
                "max_utterances {} exceeds max_conv_len {}",
                s.max_utterances, m.max_conv_len
            ));
        }
        if s.n_emotions < 2 || s.neutral_index >= s.n_emotions {
            return fail("bad generator emotion layout".into());
        }
        // the generator reserves one marker and one event token per
        // non-neutral class and needs filler vocabulary besides
        let reserved = 2 * (s.n_emotions - 1);
        if s.vocab_size < reserved + 4 {
            return fail(format!(
                "vocab_size {} too small for {} reserved tokens",
                s.vocab_size, reserved
            ));
        }
        if s.tokens_per_utterance < 2 {
            return fail("tokens_per_utterance must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&s.emotion_density) {
            return fail("emotion_density outside [0,1]".into());
        }
        if !(0.0..=1.0).contains(&s.emotion_inertia) {
            return fail("emotion_inertia outside [0,1]".into());
        }
        if s.train_fraction < 0.0
            || s.valid_fraction < 0.0
            || s.train_fraction + s.valid_fraction > 1.0 + 1e-12
        {
            return fail("split fractions must be non-negative and sum to at most 1".into());
        }
        if s.audio_dim == 0 || s.vision_dim == 0 || s.audio_len == 0 || s.vision_len == 0 {
            return fail("modality shapes must be positive".into());
        }
        Ok(())
    }
}
