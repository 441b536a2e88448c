//! Flat `key = value` configuration with command-line overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use ccfrec::corpus::DEFAULT_FIELDS;
use ccfrec::model::ModelConfig;
use ccfrec::quantizer::QuantMethod;
use ccfrec::synth::SyntheticSpec;
use ccfrec::trainer::{AblationSet, TrainConfig};

use crate::CliError;

/// Every tunable of the pipeline. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub workdir: PathBuf,
    /// Raw item metadata (JSON lines); defaults to `<workdir>/raw/items.jsonl`.
    pub items: Option<PathBuf>,
    /// Raw interactions (`user \t item \t timestamp`); defaults to
    /// `<workdir>/raw/interactions.tsv`.
    pub interactions: Option<PathBuf>,
    pub fields: Vec<String>,
    pub kcore: usize,
    pub max_len: usize,

    pub encoder_dim: usize,
    pub encoder_seed: u64,

    pub method: QuantMethod,
    pub levels: usize,
    pub codebook_size: usize,
    pub quant_seed: u64,

    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub fusion_layers: usize,
    pub backbone_layers: usize,
    pub dropout: f64,

    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub exclude_seen: bool,
    pub ablation: String,
    pub finetune_epochs: usize,

    pub synth_topics: usize,
    pub synth_items_per_topic: usize,
    pub synth_subtopics: usize,
    pub synth_users: usize,
    pub synth_mean_len: f64,
    pub synth_p_stay: f64,
    pub synth_seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let synth = SyntheticSpec::default();
        Self {
            workdir: PathBuf::from("ccfrec-work"),
            items: None,
            interactions: None,
            fields: DEFAULT_FIELDS.iter().map(|s| s.to_string()).collect(),
            kcore: 5,
            max_len: model.max_len,
            encoder_dim: 64,
            encoder_seed: 0,
            method: QuantMethod::Pq,
            levels: 4,
            codebook_size: model.codebook_size,
            quant_seed: 0,
            dim: model.dim,
            heads: model.heads,
            ffn_hidden: model.ffn_hidden,
            fusion_layers: model.fusion_layers,
            backbone_layers: model.backbone_layers,
            dropout: model.dropout,
            lr: train.lr,
            alpha: train.alpha,
            beta: train.beta,
            temperature: train.temperature,
            mask_ratio: train.mask_ratio,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            seed: train.seed,
            exclude_seen: train.exclude_seen,
            ablation: String::new(),
            finetune_epochs: 20,
            synth_topics: synth.topics,
            synth_items_per_topic: synth.items_per_topic,
            synth_subtopics: synth.subtopics_per_topic,
            synth_users: synth.users,
            synth_mean_len: synth.mean_len,
            synth_p_stay: synth.p_stay,
            synth_seed: synth.seed,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{key} expects true or false, got {value:?}"))),
    }
}

pub fn parse_method(value: &str) -> Result<QuantMethod, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "pq" => Ok(QuantMethod::Pq),
        "rq" => Ok(QuantMethod::Rq),
        _ => Err(CliError::Config(format!("method must be pq or rq, got {value:?}"))),
    }
}

impl Settings {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "workdir" => self.workdir = PathBuf::from(value),
            "items" => self.items = Some(PathBuf::from(value)),
            "interactions" => self.interactions = Some(PathBuf::from(value)),
            "fields" => {
                self.fields = value
                    .split(',')
                    .map(|f| f.trim().to_string())
                    .filter(|f| !f.is_empty())
                    .collect()
            }
            "kcore" => self.kcore = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "encoder_dim" => self.encoder_dim = parse(key, value)?,
            "encoder_seed" => self.encoder_seed = parse(key, value)?,
            "method" => self.method = parse_method(value)?,
            "levels" => self.levels = parse(key, value)?,
            "codebook_size" => self.codebook_size = parse(key, value)?,
            "quant_seed" => self.quant_seed = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, value)?,
            "fusion_layers" => self.fusion_layers = parse(key, value)?,
            "backbone_layers" => self.backbone_layers = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "exclude_seen" => self.exclude_seen = parse_bool(key, value)?,
            "ablation" => self.ablation = value.to_string(),
            "finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "synth_topics" => self.synth_topics = parse(key, value)?,
            "synth_items_per_topic" => self.synth_items_per_topic = parse(key, value)?,
            "synth_subtopics" => self.synth_subtopics = parse(key, value)?,
            "synth_users" => self.synth_users = parse(key, value)?,
            "synth_mean_len" => self.synth_mean_len = parse(key, value)?,
            "synth_p_stay" => self.synth_p_stay = parse(key, value)?,
            "synth_seed" => self.synth_seed = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file: one `key = value` per line, `#` comments.
    /// Relative paths in the file resolve against the file's directory.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected key = value", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value)?;
            if let (Some(base), "workdir" | "items" | "interactions") = (base, key) {
                let p = PathBuf::from(value);
                if p.is_relative() {
                    self.set(key, &base.join(p).to_string_lossy())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut s = Self::default();
        s.apply_text(&text, path.parent())?;
        Ok(s)
    }

    pub fn raw_items(&self) -> PathBuf {
        self.items.clone().unwrap_or_else(|| self.workdir.join("raw").join("items.jsonl"))
    }

    pub fn raw_interactions(&self) -> PathBuf {
        self.interactions
            .clone()
            .unwrap_or_else(|| self.workdir.join("raw").join("interactions.tsv"))
    }

    pub fn ablations(&self) -> Result<AblationSet, CliError> {
        self.ablation.parse().map_err(CliError::Core)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            topics: self.synth_topics,
            items_per_topic: self.synth_items_per_topic,
            subtopics_per_topic: self.synth_subtopics,
            users: self.synth_users,
            mean_len: self.synth_mean_len,
            p_stay: self.synth_p_stay,
            seed: self.synth_seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            fusion_layers: self.fusion_layers,
            backbone_layers: self.backbone_layers,
            max_len: self.max_len,
            dropout: self.dropout,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            lr: self.lr,
            alpha: self.alpha,
            beta: self.beta,
            temperature: self.temperature,
            mask_ratio: self.mask_ratio,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            exclude_seen: self.exclude_seen,
            ablations: self.ablations()?,
            ..TrainConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_comments() {
        let mut s = Settings::default();
        s.apply_text("# comment\nalpha = 0.5  # trailing\nmethod = rq\nfields = title, brand\n\n", None)
            .unwrap();
        assert_eq!(s.alpha, 0.5);
        assert_eq!(s.method, QuantMethod::Rq);
        assert_eq!(s.fields, vec!["title", "brand"]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut s = Settings::default();
        assert!(s.apply_text("bogus = 1", None).is_err());
        assert!(s.apply_text("alpha = lots", None).is_err());
        assert!(s.apply_text("alpha 0.5", None).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut s = Settings::default();
        s.apply_text("workdir = work\nitems = /abs/items.jsonl", Some(Path::new("/tmp/cfg")))
            .unwrap();
        assert_eq!(s.workdir, PathBuf::from("/tmp/cfg/work"));
        assert_eq!(s.raw_items(), PathBuf::from("/abs/items.jsonl"));
    }
}
