//! `key = value` run configuration files.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MpadConfig;
use crate::train::TrainConfig;

/// Everything a training run needs besides its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub model: MpadConfig,
    pub train: TrainConfig,
    pub min_count: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: MpadConfig::default(),
            train: TrainConfig::default(),
            min_count: 1,
        }
    }
}

/// Keys accepted in configuration files.
pub const KEYS: &[&str] = &[
    "iterations",
    "hidden_dim",
    "embedding_dim",
    "mlp_layers",
    "variant",
    "window",
    "directed",
    "master_node",
    "renormalize",
    "gru_combine",
    "master_skip",
    "multi_readout",
    "dropout",
    "batch_norm",
    "level2_iterations",
    "level2_multi_readout",
    "train_embeddings",
    "epochs",
    "batch_size",
    "learning_rate",
    "val_fraction",
    "stratified",
    "seed",
    "min_count",
];

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("invalid value {value:?}: {e}"))
}

impl Settings {
    /// Sets one key. Errors are plain messages; callers add location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "iterations" => m.iterations = parse(value)?,
            "hidden_dim" => m.hidden_dim = parse(value)?,
            "embedding_dim" => m.embedding_dim = parse(value)?,
            "mlp_layers" => m.mlp_layers = parse(value)?,
            "variant" => m.variant = parse(value)?,
            "window" => m.window = parse(value)?,
            "directed" => m.directed = parse(value)?,
            "master_node" => m.master_node = parse(value)?,
            "renormalize" => m.renormalize = parse(value)?,
            "gru_combine" => m.gru_combine = parse(value)?,
            "master_skip" => m.master_skip = parse(value)?,
            "multi_readout" => m.multi_readout = parse(value)?,
            "dropout" => m.dropout = parse(value)?,
            "batch_norm" => m.batch_norm = parse(value)?,
            "level2_iterations" => m.level2_iterations = parse(value)?,
            "level2_multi_readout" => m.level2_multi_readout = parse(value)?,
            "train_embeddings" => m.train_embeddings = parse(value)?,
            "epochs" => t.epochs = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "learning_rate" => t.learning_rate = parse(value)?,
            "val_fraction" => t.val_fraction = parse(value)?,
            "stratified" => t.stratified = parse(value)?,
            "seed" => t.seed = parse(value)?,
            "min_count" => self.min_count = parse(value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Applies a configuration file. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.min_count == 0 {
            return Err(Error::InvalidArgument(
                "min_count must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `key = value` lines for every key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let values: Vec<String> = vec![
            m.iterations.to_string(),
            m.hidden_dim.to_string(),
            m.embedding_dim.to_string(),
            m.mlp_layers.to_string(),
            m.variant.to_string(),
            m.window.to_string(),
            m.directed.to_string(),
            m.master_node.to_string(),
            m.renormalize.to_string(),
            m.gru_combine.to_string(),
            m.master_skip.to_string(),
            m.multi_readout.to_string(),
            m.dropout.to_string(),
            m.batch_norm.to_string(),
            m.level2_iterations.to_string(),
            m.level2_multi_readout.to_string(),
            m.train_embeddings.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.val_fraction.to_string(),
            t.stratified.to_string(),
            t.seed.to_string(),
            self.min_count.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
