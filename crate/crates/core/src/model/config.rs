use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One co-occurrence network per document.
    Flat,
    /// Sentence encodings combined by self-attention.
    SentenceAtt,
    /// Sentence encodings as node features of a complete graph.
    Clique,
    /// Sentence encodings as node features of a directed path.
    Path,
}

impl Variant {
    pub fn is_hierarchical(self) -> bool {
        self != Variant::Flat
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Variant::Flat),
            "sentence-att" => Ok(Variant::SentenceAtt),
            "clique" => Ok(Variant::Clique),
            "path" => Ok(Variant::Path),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?} (expected flat, sentence-att, clique or path)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Flat => "flat",
            Variant::SentenceAtt => "sentence-att",
            Variant::Clique => "clique",
            Variant::Path => "path",
        })
    }
}

/// Where batch normalization sits relative to the multi-step readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    /// On each step's readout vector, before concatenation.
    PerStep,
    /// Once, on the concatenated representation.
    Final,
    Off,
}

impl FromStr for NormPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(NormPlacement::PerStep),
            "final" => Ok(NormPlacement::Final),
            "off" => Ok(NormPlacement::Off),
            other => Err(Error::InvalidArgument(format!(
                "unknown batch norm placement {other:?} (expected per-step, final or off)"
            ))),
        }
    }
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::PerStep => "per-step",
            NormPlacement::Final => "final",
            NormPlacement::Off => "off",
        })
    }
}

/// Architecture hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpadConfig {
    /// Message passing iterations `T`.
    pub iterations: usize,
    /// Hidden size `d`.
    pub hidden_dim: usize,
    /// Input embedding size `d0`.
    pub embedding_dim: usize,
    pub mlp_layers: usize,
    pub num_classes: usize,
    pub variant: Variant,
    pub window: usize,
    pub directed: bool,
    pub master_node: bool,
    pub renormalize: bool,
    /// `false` is the neighbors-only ablation: `H <- M`.
    pub gru_combine: bool,
    pub master_skip: bool,
    pub multi_readout: bool,
    pub dropout: f64,
    pub batch_norm: NormPlacement,
    /// Iterations of the sentence-level network (clique/path variants).
    pub level2_iterations: usize,
    pub level2_multi_readout: bool,
    pub train_embeddings: bool,
}

impl Default for MpadConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            hidden_dim: 64,
            embedding_dim: 300,
            mlp_layers: 2,
            num_classes: 2,
            variant: Variant::Flat,
            window: 2,
            directed: true,
            master_node: true,
            renormalize: true,
            gru_combine: true,
            master_skip: true,
            multi_readout: true,
            dropout: 0.5,
            batch_norm: NormPlacement::PerStep,
            level2_iterations: 2,
            level2_multi_readout: true,
            train_embeddings: false,
        }
    }
}

impl MpadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.iterations == 0 || self.level2_iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.embedding_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.mlp_layers == 0 {
            return bad("mlp_layers must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.window < 2 {
            return bad(format!("window must be at least 2, got {}", self.window));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Width of one readout vector: `2d` with the master skip connection,
    /// `d` otherwise.
    pub fn readout_width(&self) -> usize {
        if self.master_node && self.master_skip {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }

    /// Length of the document representation `h_G`.
    pub fn representation_len(&self) -> usize {
        let steps = if self.multi_readout {
            self.iterations
        } else {
            1
        };
        steps * self.readout_width()
    }

    /// Length of the sentence-level representation for clique/path.
    pub fn level2_representation_len(&self) -> usize {
        let steps = if self.level2_multi_readout {
            self.level2_iterations
        } else {
            1
        };
        steps * self.hidden_dim
    }
}
