//! Architecture hyperparameters and the four pruned variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the encoder, head and cost model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    /// MLP hidden width is `mlp_ratio · embed_dim`.
    pub mlp_ratio: usize,
    pub patch_size: usize,
    /// `(height, width)` in pixels.
    pub template_size: (usize, usize),
    pub search_size: (usize, usize),
    /// Layers in which search tokens only attend to themselves.
    pub fe_layers: usize,
    /// Layers in which search queries also attend to the cached template.
    pub ai_layers: usize,
}

impl ModelConfig {
    /// ViT-B dimensions with 128 px templates and 256 px search regions.
    pub fn vit_base(fe_layers: usize, ai_layers: usize) -> Self {
        ModelConfig {
            embed_dim: 768,
            num_heads: 12,
            mlp_ratio: 4,
            patch_size: 16,
            template_size: (128, 128),
            search_size: (256, 256),
            fe_layers,
            ai_layers,
        }
    }

    /// Desk-test dimensions: C=64, 4 heads, 4 template and 16 search tokens.
    pub fn toy(fe_layers: usize, ai_layers: usize) -> Self {
        ModelConfig {
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            patch_size: 16,
            template_size: (32, 32),
            search_size: (64, 64),
            fe_layers,
            ai_layers,
        }
    }

    pub fn with_layers(&self, fe_layers: usize, ai_layers: usize) -> Self {
        ModelConfig {
            fe_layers,
            ai_layers,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.num_heads == 0 || self.mlp_ratio == 0 || self.patch_size == 0 {
            return err("embed_dim, num_heads, mlp_ratio and patch_size must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim % 8 != 0 {
            return err(format!(
                "embed_dim {} must be divisible by 8 for the head's channel halving",
                self.embed_dim
            ));
        }
        let p = self.patch_size;
        for (name, (h, w)) in [("template", self.template_size), ("search", self.search_size)] {
            if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
                return err(format!("{name} size {h}x{w} is not a positive multiple of patch size {p}"));
            }
        }
        if self.search_size.0 != self.search_size.1 {
            return err(format!(
                "search size {}x{} must be square for the score map",
                self.search_size.0, self.search_size.1
            ));
        }
        if self.num_layers() == 0 {
            return err("fe_layers + ai_layers must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn num_layers(&self) -> usize {
        self.fe_layers + self.ai_layers
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size.0 / self.patch_size) * (self.template_size.1 / self.patch_size)
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_size.0 / self.patch_size) * (self.search_size.1 / self.patch_size)
    }

    /// Side length of the square score map.
    pub fn score_size(&self) -> usize {
        self.search_size.0 / self.patch_size
    }

    /// Flat `key=value` text, one field per line.
    pub fn to_kv_string(&self) -> String {
        format!(
            "embed_dim={}\nnum_heads={}\nmlp_ratio={}\npatch_size={}\ntemplate_size={}x{}\nsearch_size={}x{}\nfe_layers={}\nai_layers={}\n",
            self.embed_dim,
            self.num_heads,
            self.mlp_ratio,
            self.patch_size,
            self.template_size.0,
            self.template_size.1,
            self.search_size.0,
            self.search_size.1,
            self.fe_layers,
            self.ai_layers
        )
    }

    /// Parses the `key=value` format. Missing keys fall back to ViT-B values;
    /// blank lines and `#` comments are ignored.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::vit_base(0, 0);
        let mut saw_fe = false;
        let mut saw_ai = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("line {}: {key} must be an integer, got {v:?}", lineno + 1)))
            };
            let pair = |v: &str| -> Result<(usize, usize)> {
                match v.split_once(['x', 'X', ',']) {
                    Some((h, w)) => Ok((int(h.trim())?, int(w.trim())?)),
                    None => int(v).map(|s| (s, s)),
                }
            };
            match key {
                "embed_dim" => cfg.embed_dim = int(value)?,
                "num_heads" => cfg.num_heads = int(value)?,
                "mlp_ratio" => cfg.mlp_ratio = int(value)?,
                "patch_size" => cfg.patch_size = int(value)?,
                "template_size" => cfg.template_size = pair(value)?,
                "search_size" => cfg.search_size = pair(value)?,
                "fe_layers" => {
                    cfg.fe_layers = int(value)?;
                    saw_fe = true;
                }
                "ai_layers" => {
                    cfg.ai_layers = int(value)?;
                    saw_ai = true;
                }
                other => {
                    return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1)))
                }
            }
        }
        if !(saw_fe && saw_ai) {
            return Err(Error::Config("config must set both fe_layers and ai_layers".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The four published layer-pruned variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    B4,
    B6,
    B8,
    B9,
}

/// Values listed for a variant in the original model table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedFigures {
    pub macs_g: f64,
    pub params_m: f64,
    /// 2080Ti PyTorch frames per second.
    pub fps: f64,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::B9, Variant::B8, Variant::B6, Variant::B4];

    /// `(fe_layers, ai_layers)`.
    pub fn layers(self) -> (usize, usize) {
        match self {
            Variant::B9 => (6, 3),
            Variant::B8 => (6, 2),
            Variant::B6 => (3, 3),
            Variant::B4 => (2, 2),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::B4 => "B4",
            Variant::B6 => "B6",
            Variant::B8 => "B8",
            Variant::B9 => "B9",
        }
    }

    pub fn config(self) -> ModelConfig {
        let (fe, ai) = self.layers();
        ModelConfig::vit_base(fe, ai)
    }

    pub fn toy_config(self) -> ModelConfig {
        let (fe, ai) = self.layers();
        ModelConfig::toy(fe, ai)
    }

    pub fn published(self) -> PublishedFigures {
        let (macs_g, params_m, fps) = match self {
            Variant::B9 => (14.17, 54.92, 171.0),
            Variant::B8 => (12.77, 49.60, 190.0),
            Variant::B6 => (10.09, 38.97, 237.0),
            Variant::B4 => (6.78, 26.18, 315.0),
        };
        PublishedFigures {
            macs_g,
            params_m,
            fps,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B4" => Ok(Variant::B4),
            "B6" => Ok(Variant::B6),
            "B8" => Ok(Variant::B8),
            "B9" => Ok(Variant::B9),
            _ => Err(Error::Input(format!("unknown variant {s:?} (expected B4, B6, B8 or B9)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_layer_counts() {
        assert_eq!(Variant::B9.layers(), (6, 3));
        assert_eq!(Variant::B8.layers(), (6, 2));
        assert_eq!(Variant::B6.layers(), (3, 3));
        assert_eq!(Variant::B4.layers(), (2, 2));
        for v in Variant::ALL {
            v.config().validate().unwrap();
            v.toy_config().validate().unwrap();
        }
    }

    #[test]
    fn derived_sizes() {
        let c = Variant::B9.config();
        assert_eq!(c.head_dim(), 64);
        assert_eq!(c.template_tokens(), 64);
        assert_eq!(c.search_tokens(), 256);
        assert_eq!(c.score_size(), 16);
        let t = Variant::B9.toy_config();
        assert_eq!((t.template_tokens(), t.search_tokens()), (4, 16));
    }

    #[test]
    fn kv_round_trip() {
        let c = ModelConfig::toy(3, 1);
        assert_eq!(ModelConfig::parse_kv(&c.to_kv_string()).unwrap(), c);
    }

    #[test]
    fn kv_rejects_bad_input() {
        assert!(ModelConfig::parse_kv("fe_layers=2\n").is_err());
        assert!(ModelConfig::parse_kv("fe_layers=2\nai_layers=x\n").is_err());
        assert!(ModelConfig::parse_kv("fe_layers=2\nai_layers=2\ncolour=red\n").is_err());
        assert!(ModelConfig::parse_kv("fe_layers=0\nai_layers=0\n").is_err());
        assert!(ModelConfig::parse_kv("fe_layers=1\nai_layers=1\nnum_heads=5\n").is_err());
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let mut c = ModelConfig::toy(1, 1);
        c.template_size = (30, 32);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(1, 1);
        c.search_size = (64, 32);
        assert!(c.validate().is_err());
    }
}
