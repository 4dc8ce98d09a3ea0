use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Single,
    Dual,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "dual" => Ok(Self::Dual),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

/// One decoder feature-map stage: `[channels, side, side]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderStage {
    pub channels: usize,
    pub side: usize,
}

impl DecoderStage {
    pub const fn new(channels: usize, side: usize) -> Self {
        Self { channels, side }
    }
}

/// Architecture hyperparameters.
///
/// `decoder_schedule` lists the feature-map stages from the reshaped
/// encoder vector `[embed_dim, 1, 1]` to the last full-resolution stage; it
/// always has five entries (four decoder blocks).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_schedule: Vec<DecoderStage>,
    pub head_kind: HeadKind,
    pub seed: u64,
}

/// Channels entering the image encoder: RGB plus the visible mask.
pub const INPUT_CHANNELS: usize = 4;

impl ModelConfig {
    /// ViT-B/16 at 224 px with the full-size decoder.
    pub fn paper(head_kind: HeadKind) -> Self {
        Self {
            image_side: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            decoder_schedule: vec![
                DecoderStage::new(768, 1),
                DecoderStage::new(512, 28),
                DecoderStage::new(256, 56),
                DecoderStage::new(128, 112),
                DecoderStage::new(64, 224),
            ],
            head_kind,
            seed: 0,
        }
    }

    /// Desk-scale variant: 64 px input, 8 px patches, width 96.
    pub fn toy(head_kind: HeadKind) -> Self {
        Self {
            image_side: 64,
            patch_size: 8,
            embed_dim: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            decoder_schedule: vec![
                DecoderStage::new(96, 1),
                DecoderStage::new(64, 8),
                DecoderStage::new(48, 16),
                DecoderStage::new(32, 32),
                DecoderStage::new(16, 64),
            ],
            head_kind,
            seed: 0,
        }
    }

    pub fn preset(name: &str, head_kind: HeadKind) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(head_kind)),
            "toy" => Ok(Self::toy(head_kind)),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_side / self.patch_size;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return bad(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive".into());
        }
        let s = &self.decoder_schedule;
        if s.len() != 5 {
            return bad(format!("decoder schedule needs 5 stages, got {}", s.len()));
        }
        if s[0] != DecoderStage::new(self.embed_dim, 1) {
            return bad(format!(
                "first decoder stage must be [{}, 1, 1], got [{}, {}, {}]",
                self.embed_dim, s[0].channels, s[0].side, s[0].side
            ));
        }
        if s[4].side != self.image_side {
            return bad(format!(
                "final decoder side {} differs from image side {}",
                s[4].side, self.image_side
            ));
        }
        for w in s.windows(2) {
            if w[1].side <= w[0].side || w[1].side % w[0].side != 0 {
                return bad(format!(
                    "decoder sides must grow by integer factors ({} -> {})",
                    w[0].side, w[1].side
                ));
            }
        }
        if s.iter().skip(1).any(|st| st.channels < 2 || st.channels % 2 != 0) {
            return bad("decoder stage channels must be even and at least 2".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for kind in [HeadKind::Single, HeadKind::Dual] {
            ModelConfig::paper(kind).validate().unwrap();
            ModelConfig::toy(kind).validate().unwrap();
        }
        assert_eq!(ModelConfig::toy(HeadKind::Single).tokens(), 64);
        assert_eq!(ModelConfig::paper(HeadKind::Single).tokens(), 196);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::toy(HeadKind::Dual);
        c.patch_size = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy(HeadKind::Dual);
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(HeadKind::Dual);
        c.decoder_schedule[4].side = 32;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(HeadKind::Dual);
        c.decoder_schedule[0].channels = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_fingerprint() {
        let c = ModelConfig::toy(HeadKind::Dual).with_seed(9);
        let back: ModelConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.fingerprint(), back.fingerprint());
        assert_ne!(c.fingerprint(), c.clone().with_seed(10).fingerprint());
        assert!(c.to_json().contains("\"head_kind\":\"dual\""));
    }
}
