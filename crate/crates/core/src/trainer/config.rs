use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Ablations {
    /// Random (Xavier) initialization of the collaborative embeddings.
    pub no_text_init: bool,
    /// Drop both user-side contrastive terms.
    pub no_user_cl: bool,
    /// Drop both item-side contrastive terms.
    pub no_item_cl: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the review view-agreement losses.
    pub lambda1: f64,
    /// Weight of the alignment losses.
    pub lambda2: f64,
    /// L2 weight on the rows touched by a batch.
    pub lambda3: f64,
    pub tau: f64,
    pub backbone: BackboneKind,
    /// Layer count applied when the backbone is LightGCN.
    pub lightgcn_layers: usize,
    pub ablations: Ablations,
    /// Normalize contrastive losses over every entity instead of the batch.
    pub full_normalization: bool,
    /// Epochs without validation NDCG@5 improvement before stopping.
    pub patience: usize,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            lr: 0.01,
            batch_size: 1024,
            epochs: 100,
            seed: 0,
            lambda1: 10.0,
            lambda2: 0.4,
            lambda3: 0.1,
            tau: 0.2,
            backbone: BackboneKind::Mf,
            lightgcn_layers: 2,
            ablations: Ablations::default(),
            full_normalization: false,
            patience: 10,
            adam: AdamParams::default(),
        }
    }
}

pub const CONFIG_KEYS: [&str; 16] = [
    "dim",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "lambda1",
    "lambda2",
    "lambda3",
    "tau",
    "backbone",
    "lightgcn_layers",
    "no_text_init",
    "no_user_cl",
    "no_item_cl",
    "full_normalization",
    "patience",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "dim" => self.dim = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "lambda1" => self.lambda1 = parse_num(key, value)?,
            "lambda2" => self.lambda2 = parse_num(key, value)?,
            "lambda3" => self.lambda3 = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "backbone" => {
                self.backbone = match value.to_ascii_lowercase().as_str() {
                    "mf" | "bpr" => BackboneKind::Mf,
                    "lightgcn" => BackboneKind::LightGcn {
                        layers: self.lightgcn_layers,
                    },
                    other => return Err(Error::Config(format!("backbone: unknown variant {other:?}"))),
                }
            }
            "lightgcn_layers" => {
                self.lightgcn_layers = parse_num(key, value)?;
                if let BackboneKind::LightGcn { layers } = &mut self.backbone {
                    *layers = self.lightgcn_layers;
                }
            }
            "no_text_init" => self.ablations.no_text_init = parse_bool(key, value)?,
            "no_user_cl" => self.ablations.no_user_cl = parse_bool(key, value)?,
            "no_item_cl" => self.ablations.no_item_cl = parse_bool(key, value)?,
            "full_normalization" => self.full_normalization = parse_bool(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", idx + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if let BackboneKind::LightGcn { layers: 0 } = self.backbone {
            return bad("lightgcn_layers must be >= 1".into());
        }
        Ok(())
    }

    /// Renders every key in the `key = value` file format.
    pub fn to_text(&self) -> String {
        let backbone = match self.backbone {
            BackboneKind::Mf => "mf",
            BackboneKind::LightGcn { .. } => "lightgcn",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dim", self.dim.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("lambda1", format!("{:?}", self.lambda1));
        kv("lambda2", format!("{:?}", self.lambda2));
        kv("lambda3", format!("{:?}", self.lambda3));
        kv("tau", format!("{:?}", self.tau));
        kv("backbone", backbone.to_string());
        kv("lightgcn_layers", self.lightgcn_layers.to_string());
        kv("no_text_init", self.ablations.no_text_init.to_string());
        kv("no_user_cl", self.ablations.no_user_cl.to_string());
        kv("no_item_cl", self.ablations.no_item_cl.to_string());
        kv("full_normalization", self.full_normalization.to_string());
        kv("patience", self.patience.to_string());
        s
    }
}
