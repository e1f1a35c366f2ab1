//! Flat `key = value` run configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Command-line
//! flags are applied afterwards through the same [`RunConfig::set`] entry
//! point, so a flag always overrides the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::DatasetOptions;
use crate::decoder::{AttendMode, DecoderConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{EdgeMode, FEATURE_DIM};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub feature_dim: usize,
    pub inter_modal_fusion: bool,
    pub fully_connected_grounding: bool,
    pub unified_parameters: bool,
    pub decoder_attend: AttendMode,
    pub zero_object: bool,
    pub train: TrainConfig,
    pub train_data: Option<PathBuf>,
    pub valid_data: Option<PathBuf>,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        RunConfig {
            d_model: enc.d_model,
            d_ff: enc.d_ff,
            n_heads: enc.n_heads,
            enc_layers: enc.n_layers,
            dec_layers: dec.n_layers,
            dropout: enc.dropout,
            feature_dim: FEATURE_DIM,
            inter_modal_fusion: true,
            fully_connected_grounding: false,
            unified_parameters: false,
            decoder_attend: AttendMode::Textual,
            zero_object: false,
            train: TrainConfig::default(),
            train_data: None,
            valid_data: None,
            src_vocab: None,
            tgt_vocab: None,
            checkpoint_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

/// Splits `key = value` lines, skipping blanks and comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "d_model",
        "d_ff",
        "n_heads",
        "enc_layers",
        "dec_layers",
        "dropout",
        "feature_dim",
        "inter_modal_fusion",
        "fully_connected_grounding",
        "unified_parameters",
        "decoder_attend",
        "zero_object",
        "batch_tokens",
        "warmup_steps",
        "lr_factor",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "seed",
        "max_steps",
        "checkpoint_every",
        "clip_norm",
        "train",
        "valid",
        "src_vocab",
        "tgt_vocab",
        "checkpoint_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "enc_layers" => self.enc_layers = parse(key, value)?,
            "dec_layers" => self.dec_layers = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "inter_modal_fusion" => self.inter_modal_fusion = parse_bool(key, value)?,
            "fully_connected_grounding" => self.fully_connected_grounding = parse_bool(key, value)?,
            "unified_parameters" => self.unified_parameters = parse_bool(key, value)?,
            "decoder_attend" => self.decoder_attend = value.parse()?,
            "zero_object" => self.zero_object = parse_bool(key, value)?,
            "batch_tokens" => self.train.batch_tokens = parse(key, value)?,
            "warmup_steps" => self.train.warmup_steps = parse(key, value)?,
            "lr_factor" => self.train.lr_factor = parse(key, value)?,
            "adam_beta1" => self.train.adam.beta1 = parse(key, value)?,
            "adam_beta2" => self.train.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.train.adam.eps = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "max_steps" => self.train.max_steps = parse(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "clip_norm" => {
                self.train.clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train" => self.train_data = path(),
            "valid" => self.valid_data = path(),
            "src_vocab" => self.src_vocab = path(),
            "tgt_vocab" => self.tgt_vocab = path(),
            "checkpoint_dir" => self.checkpoint_dir = path(),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            n_layers: self.enc_layers,
            dropout: self.dropout,
            visual_feat_dim: self.feature_dim,
            unified_parameters: self.unified_parameters,
            inter_modal_fusion: self.inter_modal_fusion,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            n_layers: self.dec_layers,
            dropout: self.dropout,
            attend: self.decoder_attend,
        }
    }

    pub fn model(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(),
            decoder: self.decoder(),
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            feature_dim: self.feature_dim,
            edge_mode: if self.fully_connected_grounding {
                EdgeMode::FullyConnected
            } else {
                EdgeMode::Grounded
            },
            zero_object: self.zero_object,
        }
    }

    /// Architecture settings taken from an existing model; everything else
    /// keeps its default.
    pub fn from_model_config(m: &ModelConfig) -> Self {
        RunConfig {
            d_model: m.encoder.d_model,
            d_ff: m.encoder.d_ff,
            n_heads: m.encoder.n_heads,
            enc_layers: m.encoder.n_layers,
            dec_layers: m.decoder.n_layers,
            dropout: m.encoder.dropout,
            feature_dim: m.encoder.visual_feat_dim,
            inter_modal_fusion: m.encoder.inter_modal_fusion,
            unified_parameters: m.encoder.unified_parameters,
            decoder_attend: m.decoder.attend,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model(4, 4).validate()?;
        self.train.validate()
    }
}

impl RunConfig {
    /// Rejects settings that cannot work with the given examples.
    pub fn check_examples(&self, examples: &[crate::graph::Example]) -> Result<()> {
        if self.decoder_attend == AttendMode::VisualOnly {
            if let Some(i) = examples.iter().position(|e| e.graph.num_visual() == 0) {
                return Err(Error::Config(format!(
                    "decoder_attend = visual but example {} has no objects (enable zero_object?)",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Serializes the architecture part of a model configuration.
pub fn model_config_to_text(cfg: &ModelConfig) -> String {
    let (e, d) = (&cfg.encoder, &cfg.decoder);
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
    kv("d_model", e.d_model.to_string());
    kv("d_ff", e.d_ff.to_string());
    kv("n_heads", e.n_heads.to_string());
    kv("enc_layers", e.n_layers.to_string());
    kv("enc_dropout", format!("{:?}", e.dropout));
    kv("feature_dim", e.visual_feat_dim.to_string());
    kv("unified_parameters", e.unified_parameters.to_string());
    kv("inter_modal_fusion", e.inter_modal_fusion.to_string());
    kv("dec_d_model", d.d_model.to_string());
    kv("dec_d_ff", d.d_ff.to_string());
    kv("dec_heads", d.n_heads.to_string());
    kv("dec_layers", d.n_layers.to_string());
    kv("dec_dropout", format!("{:?}", d.dropout));
    kv("decoder_attend", d.attend.to_string());
    kv("src_vocab_size", cfg.src_vocab.to_string());
    kv("tgt_vocab_size", cfg.tgt_vocab.to_string());
    s
}

pub fn model_config_from_text(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig {
        encoder: EncoderConfig::default(),
        decoder: DecoderConfig::default(),
        src_vocab: 0,
        tgt_vocab: 0,
    };
    for (k, v) in parse_kv(text)? {
        let (e, d) = (&mut cfg.encoder, &mut cfg.decoder);
        match k.as_str() {
            "d_model" => e.d_model = parse(&k, &v)?,
            "d_ff" => e.d_ff = parse(&k, &v)?,
            "n_heads" => e.n_heads = parse(&k, &v)?,
            "enc_layers" => e.n_layers = parse(&k, &v)?,
            "enc_dropout" => e.dropout = parse(&k, &v)?,
            "feature_dim" => e.visual_feat_dim = parse(&k, &v)?,
            "unified_parameters" => e.unified_parameters = parse_bool(&k, &v)?,
            "inter_modal_fusion" => e.inter_modal_fusion = parse_bool(&k, &v)?,
            "dec_d_model" => d.d_model = parse(&k, &v)?,
            "dec_d_ff" => d.d_ff = parse(&k, &v)?,
            "dec_heads" => d.n_heads = parse(&k, &v)?,
            "dec_layers" => d.n_layers = parse(&k, &v)?,
            "dec_dropout" => d.dropout = parse(&k, &v)?,
            "decoder_attend" => d.attend = v.parse()?,
            "src_vocab_size" => cfg.src_vocab = parse(&k, &v)?,
            "tgt_vocab_size" => cfg.tgt_vocab = parse(&k, &v)?,
            _ => return Err(Error::Config(format!("unknown model key `{k}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::default();
        c.apply_text("d_model = 32 # narrow\n\nseed=7\ndecoder_attend = both\n").unwrap();
        c.set("seed", "9").unwrap();
        assert_eq!(c.d_model, 32);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.decoder_attend, AttendMode::Both);
    }

    #[test]
    fn bad_lines_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("d_model 32"), Err(Error::Parse { line: 1, .. })));
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("unified_parameters", "maybe").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let sample = |k: &str| match k {
            "inter_modal_fusion" | "fully_connected_grounding" | "unified_parameters" | "zero_object" => "true",
            "decoder_attend" => "visual",
            "train" | "valid" | "src_vocab" | "tgt_vocab" | "checkpoint_dir" => "x",
            "dropout" | "lr_factor" | "adam_beta1" | "adam_beta2" | "adam_eps" | "clip_norm" => "0.5",
            _ => "4",
        };
        let mut c = RunConfig::default();
        for k in RunConfig::KEYS {
            c.set(k, sample(k)).unwrap();
        }
    }

    #[test]
    fn model_config_round_trip() {
        let mut c = RunConfig::default();
        c.set("dropout", "0.1").unwrap();
        c.set("unified_parameters", "true").unwrap();
        c.set("decoder_attend", "both").unwrap();
        let m = c.model(17, 23);
        let text = model_config_to_text(&m);
        assert_eq!(model_config_from_text(&text).unwrap(), m);
    }
}
