use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positional {
    Sinusoidal,
    Learned,
}

impl Positional {
    pub fn as_str(self) -> &'static str {
        match self {
            Positional::Sinusoidal => "sinusoidal",
            Positional::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sinusoidal" => Some(Positional::Sinusoidal),
            "learned" => Some(Positional::Learned),
            _ => None,
        }
    }
}

/// Architecture hyperparameters. Pre-norm encoder-decoder transformer with
/// ReLU feed-forward blocks and no linear biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub max_source_len: usize,
    /// Decoder positions, including the end-of-sequence step.
    pub max_target_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub positional: Positional,
    pub label_smoothing: f64,
    /// Reuse the token embedding as the output projection.
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            width: 128,
            ff_width: 512,
            max_source_len: 512,
            max_target_len: 32,
            dropout: 0.0,
            vocab_size: 4000,
            positional: Positional::Sinusoidal,
            label_smoothing: 0.0,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.vocab_size < crate::tokenizer::MIN_VOCAB {
            return bad(format!("vocab size {} too small", self.vocab_size));
        }
        if self.max_source_len == 0 || self.max_target_len == 0 || self.ff_width == 0 {
            return bad("lengths and ff width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let f = self.ff_width;
        let v = self.vocab_size;
        let enc_layer = 2 * 2 * d + 4 * d * d + 2 * d * f;
        let dec_layer = 3 * 2 * d + 8 * d * d + 2 * d * f;
        let pos = match self.positional {
            Positional::Sinusoidal => 0,
            Positional::Learned => (self.max_source_len + self.max_target_len) * d,
        };
        v * d + pos + self.encoder_layers * enc_layer + self.decoder_layers * dec_layer + 2 * 2 * d
            + if self.tie_embeddings { 0 } else { d * v }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "encoder_layers = {}", self.encoder_layers);
        let _ = writeln!(s, "decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "ff_width = {}", self.ff_width);
        let _ = writeln!(s, "max_source_len = {}", self.max_source_len);
        let _ = writeln!(s, "max_target_len = {}", self.max_target_len);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "positional = {}", self.positional.as_str());
        let _ = writeln!(s, "label_smoothing = {}", self.label_smoothing);
        let _ = writeln!(s, "tie_embeddings = {}", self.tie_embeddings);
        s
    }

    /// Applies one `key = value` setting. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value for {k}: {v}")))
        }
        match key {
            "encoder_layers" => self.encoder_layers = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "ff_width" => self.ff_width = num(key, value)?,
            "max_source_len" => self.max_source_len = num(key, value)?,
            "max_target_len" => self.max_target_len = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "tie_embeddings" => self.tie_embeddings = num(key, value)?,
            "positional" => {
                self.positional = Positional::parse(value)
                    .ok_or_else(|| Error::Config(format!("unknown positional encoding {value}")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in crate::config::parse_kv(text)? {
            if !c.set(&k, &v)? {
                return Err(Error::Config(format!("unknown model key {k}")));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let c = ModelConfig {
            width: 32,
            positional: Positional::Learned,
            dropout: 0.1,
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_indivisible_width() {
        let c = ModelConfig {
            width: 30,
            heads: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
