use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::{BinSpec, DEFAULT_CODEBOOK_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Mlp,
    Bin,
    VqVae,
    LfqVae,
    LipVqVae,
}

impl TokenizerKind {
    pub const ALL: [TokenizerKind; 5] = [
        TokenizerKind::Mlp,
        TokenizerKind::Bin,
        TokenizerKind::VqVae,
        TokenizerKind::LfqVae,
        TokenizerKind::LipVqVae,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerKind::Mlp => "mlp",
            TokenizerKind::Bin => "bin",
            TokenizerKind::VqVae => "vqvae",
            TokenizerKind::LfqVae => "lfqvae",
            TokenizerKind::LipVqVae => "lipvqvae",
        }
    }

    pub fn has_encoder(self) -> bool {
        self != TokenizerKind::Bin
    }

    pub fn is_vq(self) -> bool {
        matches!(self, TokenizerKind::VqVae | TokenizerKind::LipVqVae)
    }
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TokenizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown tokenizer kind `{s}`")))
    }
}

/// Architecture and loss weights of one tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Codebook loss weight.
    pub alpha: f64,
    /// Commitment loss weight.
    pub beta: f64,
    /// Lipschitz bound-product weight.
    pub gamma: f64,
    /// Constrain every encoder layer with row normalization.
    pub lipschitz: bool,
    pub bins_per_dim: usize,
}

impl TokenizerConfig {
    pub fn new(kind: TokenizerKind, action_dim: usize) -> Self {
        TokenizerConfig {
            kind,
            action_dim,
            latent_dim: 8,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            encoder_hidden: vec![256, 256],
            decoder_hidden: vec![256, 256],
            alpha: 1.0,
            beta: 0.25,
            gamma: 1e-6,
            lipschitz: kind == TokenizerKind::LipVqVae,
            bins_per_dim: BinSpec::DEFAULT_BINS,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.encoder_hidden = hidden.clone();
        self.decoder_hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("action and latent dims must be positive".into()));
        }
        if self.kind == TokenizerKind::LipVqVae && !self.lipschitz {
            return Err(Error::Config("lipvqvae requires lipschitz = true".into()));
        }
        if self.kind.is_vq() && self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least two entries".into()));
        }
        if self.kind == TokenizerKind::LfqVae && self.latent_dim > crate::quantize::LFQ_MAX_DIM {
            return Err(Error::IndexOverflow {
                dim: self.latent_dim,
                max: crate::quantize::LFQ_MAX_DIM,
            });
        }
        if self.kind == TokenizerKind::Bin && self.bins_per_dim < 2 {
            return Err(Error::Config("at least two bins".into()));
        }
        for w in [self.alpha, self.beta, self.gamma] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config("loss weights must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    fn to_map(&self) -> BTreeMap<&'static str, String> {
        let list = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        BTreeMap::from([
            ("action_dim", self.action_dim.to_string()),
            ("alpha", format!("{:e}", self.alpha)),
            ("beta", format!("{:e}", self.beta)),
            ("bins_per_dim", self.bins_per_dim.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("decoder_hidden", list(&self.decoder_hidden)),
            ("encoder_hidden", list(&self.encoder_hidden)),
            ("gamma", format!("{:e}", self.gamma)),
            ("kind", self.kind.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("lipschitz", self.lipschitz.to_string()),
        ])
    }

    /// `key=value` lines in key order, newline-terminated. Floats use
    /// Rust's shortest round-trip exponent form, so parsing is lossless.
    pub fn to_canonical(&self) -> String {
        self.to_map()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line `{line}`")))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{k}`")));
            }
        }
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| Error::Config(format!("missing key `{k}`")))
        };
        let num = |k: &str, v: String| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{k}` is not an integer: {v}")))
        };
        let real = |k: &str, v: String| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{k}` is not a number: {v}")))
        };
        let list = |k: &str, v: String| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|p| num(k, p.to_string())).collect()
        };
        let cfg = TokenizerConfig {
            kind: take("kind")?.parse()?,
            action_dim: num("action_dim", take("action_dim")?)?,
            latent_dim: num("latent_dim", take("latent_dim")?)?,
            codebook_size: num("codebook_size", take("codebook_size")?)?,
            encoder_hidden: list("encoder_hidden", take("encoder_hidden")?)?,
            decoder_hidden: list("decoder_hidden", take("decoder_hidden")?)?,
            alpha: real("alpha", take("alpha")?)?,
            beta: real("beta", take("beta")?)?,
            gamma: real("gamma", take("gamma")?)?,
            lipschitz: take("lipschitz")?
                .parse()
                .map_err(|_| Error::Config("`lipschitz` must be true or false".into()))?,
            bins_per_dim: num("bins_per_dim", take("bins_per_dim")?)?,
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_loss_weights() {
        let c = TokenizerConfig::new(TokenizerKind::LipVqVae, 7);
        assert_eq!((c.alpha, c.beta, c.gamma), (1.0, 0.25, 1e-6));
        assert!(c.lipschitz);
        assert_eq!(c.codebook_size, 1024);
        assert!(!TokenizerConfig::new(TokenizerKind::VqVae, 7).lipschitz);
    }

    #[test]
    fn canonical_text_is_sorted_and_round_trips() {
        let mut c = TokenizerConfig::new(TokenizerKind::VqVae, 3);
        c.codebook_size = 256;
        c.gamma = 0.1 + 0.2;
        let text = c.to_canonical();
        let keys: Vec<_> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(TokenizerConfig::from_canonical(&text).unwrap(), c);
    }

    #[test]
    fn unknown_and_inconsistent_configs_are_rejected() {
        let c = TokenizerConfig::new(TokenizerKind::Mlp, 3);
        let text = c.to_canonical() + "colour=blue\n";
        assert!(TokenizerConfig::from_canonical(&text).is_err());
        let mut bad = TokenizerConfig::new(TokenizerKind::LipVqVae, 3);
        bad.lipschitz = false;
        assert!(bad.validate().is_err());
    }
}
