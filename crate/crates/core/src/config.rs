//! Model and training configuration.
//!
//! The on-disk form is a flat TOML table whose keys are the field names below.
//! Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-bag adjacency used by graph propagation is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    /// Row softmax over cosine similarity of patch-description similarity rows.
    Sim,
    /// k nearest neighbours by grid coordinate.
    KnnCoord,
    /// k nearest neighbours by embedding cosine similarity.
    KnnFeat,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::Sim => "sim",
            GraphKind::KnnCoord => "knn-coord",
            GraphKind::KnnFeat => "knn-feat",
        })
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(GraphKind::Sim),
            "knn-coord" => Ok(GraphKind::KnnCoord),
            "knn-feat" => Ok(GraphKind::KnnFeat),
            other => Err(Error::UnknownToggle(format!("graph={other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the joint image-text embedding space.
    pub d_joint: usize,
    /// Hidden width of the toy transformer towers.
    pub d_model: usize,
    /// Feed-forward width inside each transformer block.
    pub d_ffn: usize,
    /// Number of categories.
    pub num_classes: usize,
    pub c_low: usize,
    pub c_high: usize,
    /// Low-scale patches kept per category by zero-shot selection.
    pub n_select: usize,
    pub tau: f64,
    /// Pool size of the top-K operator.
    pub k_top: usize,
    pub l_text: usize,
    pub l_img: usize,
    pub len_glob: usize,
    pub len_vis: usize,
    pub gcn_layers: usize,
    /// Maximum token count of any text encoder input, prompts included.
    pub context_len: usize,
    /// Neighbour count for the KNN graph variants.
    pub knn_k: usize,
    pub graph: GraphKind,
    pub mhpt: bool,
    pub isgpt: bool,
    pub npcgp: bool,
    pub cross_guidance: bool,
    pub loss_weight_overall: f64,
    pub loss_weight_high: f64,
    pub loss_weight_low: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Seed of the frozen toy towers; independent of the run seed so every run
    /// sees the same "pretrained" weights.
    pub vlm_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_joint: 32,
            d_model: 32,
            d_ffn: 64,
            num_classes: 2,
            c_low: 10,
            c_high: 30,
            n_select: 30,
            tau: 0.07,
            k_top: 5,
            l_text: 2,
            l_img: 2,
            len_glob: 2,
            len_vis: 2,
            gcn_layers: 1,
            context_len: 77,
            knn_k: 8,
            graph: GraphKind::Sim,
            mhpt: true,
            isgpt: true,
            npcgp: true,
            cross_guidance: true,
            loss_weight_overall: 1.0,
            loss_weight_high: 1.0,
            loss_weight_low: 1.0,
            lr: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            vlm_seed: 7,
        }
    }
}

impl ModelConfig {
    /// Returns the config unchanged when every invariant holds, otherwise an
    /// error listing each violated field.
    pub fn validate(self) -> Result<Self> {
        let mut bad = Vec::new();
        let counts = [
            ("d_joint", self.d_joint),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("num_classes", self.num_classes),
            ("c_low", self.c_low),
            ("c_high", self.c_high),
            ("n_select", self.n_select),
            ("k_top", self.k_top),
            ("l_text", self.l_text),
            ("l_img", self.l_img),
            ("gcn_layers", self.gcn_layers),
            ("context_len", self.context_len),
            ("knn_k", self.knn_k),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bad.push(format!("tau must be a finite positive number, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be a finite positive number, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, w) in [
            ("loss_weight_overall", self.loss_weight_overall),
            ("loss_weight_high", self.loss_weight_high),
            ("loss_weight_low", self.loss_weight_low),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                bad.push(format!("{name} must be >= 0, got {w}"));
            }
        }
        if self.patience > self.max_epochs {
            bad.push(format!(
                "patience ({}) must not exceed max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if bad.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }

    /// Inverse softmax temperature used to scale cosine logits.
    pub fn logit_scale(&self) -> f64 {
        1.0 / self.tau
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("<config>", e.message()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.message()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies one `key=value` override using the same key names as the file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml_string())
            .map_err(|e| Error::parse("<config>", e.message()))?;
        if !table.contains_key(key) {
            return Err(Error::InvalidConfig(vec![format!("unknown key `{key}`")]));
        }
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = toml::from_str(&toml::to_string(&table).expect("table serializes"))
            .map_err(|e| Error::parse("<override>", e.message()))?;
        Ok(())
    }
}
