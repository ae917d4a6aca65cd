//! Flat `key = value` run configuration.
//!
//! One text format serves config files, command-line overrides, and the
//! config snapshot embedded in checkpoints. Lines are `key = value`; `#`
//! starts a comment; unknown keys are rejected. `vocab_size`, `visual_dim`,
//! and `audio_dim` default to 0 meaning "derive from the dataset".

use std::path::PathBuf;

use crate::decoder::ModelVariant;
use crate::encoder::HierEncoderConfig;
use crate::error::{Error, Result};
use crate::model::HacaConfig;
use crate::train::TrainConfig;

/// Merged model + training + path configuration for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: HacaConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: HacaConfig {
                visual: HierEncoderConfig {
                    name: "visual".into(),
                    feature_dim: 0,
                    low_hidden: 12,
                    high_hidden: 12,
                    chunk_size: 4,
                    max_len: 50,
                },
                audio: HierEncoderConfig {
                    name: "audio".into(),
                    feature_dim: 0,
                    low_hidden: 8,
                    high_hidden: 8,
                    chunk_size: 2,
                    max_len: 20,
                },
                global_hidden: 12,
                local_hidden: 24,
                embed_dim: 12,
                max_decode_steps: 16,
                vocab_size: 0,
                variant: ModelVariant::Haca,
                init_range: 0.08,
                dropout: 0.2,
                seed: 7,
            },
            train: TrainConfig::default(),
            data_dir: None,
            out_dir: None,
        }
    }
}

/// Every recognized key, in the order `to_text` emits them.
pub const KEYS: [&str; 33] = [
    "variant",
    "seed",
    "visual_dim",
    "visual_low_hidden",
    "visual_high_hidden",
    "visual_chunk",
    "visual_max_len",
    "audio_dim",
    "audio_low_hidden",
    "audio_high_hidden",
    "audio_chunk",
    "audio_max_len",
    "global_hidden",
    "local_hidden",
    "embed_dim",
    "max_decode_steps",
    "vocab_size",
    "init_range",
    "dropout",
    "batch_size",
    "epochs",
    "lr",
    "plateau_factor",
    "plateau_patience",
    "clip_min",
    "clip_max",
    "teacher_forcing_start",
    "teacher_forcing_end",
    "adadelta_rho",
    "adadelta_eps",
    "shuffle",
    "val_beam",
    "data_dir",
];

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    /// Applies `key = value` lines to this config.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Sets one key; the entry point for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "variant" => self.model.variant = value.parse()?,
            "seed" => {
                let seed: u64 = parse(key, value)?;
                self.model.seed = seed;
                self.train.seed = seed;
            }
            "visual_dim" => self.model.visual.feature_dim = parse(key, value)?,
            "visual_low_hidden" => self.model.visual.low_hidden = parse(key, value)?,
            "visual_high_hidden" => self.model.visual.high_hidden = parse(key, value)?,
            "visual_chunk" => self.model.visual.chunk_size = parse(key, value)?,
            "visual_max_len" => self.model.visual.max_len = parse(key, value)?,
            "audio_dim" => self.model.audio.feature_dim = parse(key, value)?,
            "audio_low_hidden" => self.model.audio.low_hidden = parse(key, value)?,
            "audio_high_hidden" => self.model.audio.high_hidden = parse(key, value)?,
            "audio_chunk" => self.model.audio.chunk_size = parse(key, value)?,
            "audio_max_len" => self.model.audio.max_len = parse(key, value)?,
            "global_hidden" => self.model.global_hidden = parse(key, value)?,
            "local_hidden" => self.model.local_hidden = parse(key, value)?,
            "embed_dim" => self.model.embed_dim = parse(key, value)?,
            "max_decode_steps" => self.model.max_decode_steps = parse(key, value)?,
            "vocab_size" => self.model.vocab_size = parse(key, value)?,
            "init_range" => self.model.init_range = parse(key, value)?,
            "dropout" => self.model.dropout = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "epochs" => self.train.max_epochs = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "plateau_factor" => self.train.plateau_factor = parse(key, value)?,
            "plateau_patience" => self.train.plateau_patience = parse(key, value)?,
            "clip_min" => self.train.clip_min = parse(key, value)?,
            "clip_max" => self.train.clip_max = parse(key, value)?,
            "teacher_forcing_start" => self.train.teacher_forcing_start = parse(key, value)?,
            "teacher_forcing_end" => self.train.teacher_forcing_end = parse(key, value)?,
            "adadelta_rho" => self.train.adadelta_rho = parse(key, value)?,
            "adadelta_eps" => self.train.adadelta_eps = parse(key, value)?,
            "shuffle" => self.train.shuffle = parse(key, value)?,
            "val_beam" => self.train.val_beam = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Serializes every effective value; `parse(to_text())` reproduces the
    /// config exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("variant", self.model.variant.to_string());
        push("seed", self.model.seed.to_string());
        push("visual_dim", self.model.visual.feature_dim.to_string());
        push("visual_low_hidden", self.model.visual.low_hidden.to_string());
        push("visual_high_hidden", self.model.visual.high_hidden.to_string());
        push("visual_chunk", self.model.visual.chunk_size.to_string());
        push("visual_max_len", self.model.visual.max_len.to_string());
        push("audio_dim", self.model.audio.feature_dim.to_string());
        push("audio_low_hidden", self.model.audio.low_hidden.to_string());
        push("audio_high_hidden", self.model.audio.high_hidden.to_string());
        push("audio_chunk", self.model.audio.chunk_size.to_string());
        push("audio_max_len", self.model.audio.max_len.to_string());
        push("global_hidden", self.model.global_hidden.to_string());
        push("local_hidden", self.model.local_hidden.to_string());
        push("embed_dim", self.model.embed_dim.to_string());
        push("max_decode_steps", self.model.max_decode_steps.to_string());
        push("vocab_size", self.model.vocab_size.to_string());
        push("init_range", self.model.init_range.to_string());
        push("dropout", self.model.dropout.to_string());
        push("batch_size", self.train.batch_size.to_string());
        push("epochs", self.train.max_epochs.to_string());
        push("lr", self.train.lr.to_string());
        push("plateau_factor", self.train.plateau_factor.to_string());
        push("plateau_patience", self.train.plateau_patience.to_string());
        push("clip_min", self.train.clip_min.to_string());
        push("clip_max", self.train.clip_max.to_string());
        push("teacher_forcing_start", self.train.teacher_forcing_start.to_string());
        push("teacher_forcing_end", self.train.teacher_forcing_end.to_string());
        push("adadelta_rho", self.train.adadelta_rho.to_string());
        push("adadelta_eps", self.train.adadelta_eps.to_string());
        push("shuffle", self.train.shuffle.to_string());
        push("val_beam", self.train.val_beam.to_string());
        if let Some(d) = &self.data_dir {
            push("data_dir", d.display().to_string());
        }
        if let Some(d) = &self.out_dir {
            push("out_dir", d.display().to_string());
        }
        out
    }

    /// Fills corpus-derived sizes that were left at 0.
    pub fn adopt_dataset(&mut self, vocab_size: usize, visual_dim: usize, audio_dim: usize) {
        if self.model.vocab_size == 0 {
            self.model.vocab_size = vocab_size;
        }
        if self.model.visual.feature_dim == 0 {
            self.model.visual.feature_dim = visual_dim;
        }
        if self.model.audio.feature_dim == 0 {
            self.model.audio.feature_dim = audio_dim;
        }
    }
}
