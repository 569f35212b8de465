//! Model hyperparameters and the ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

/// How the initial queries are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    /// Learnable region embeddings used directly.
    Learned,
    /// Region embeddings cross-attend to the word features first.
    Generated,
}

/// Decoder block topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Visual-only masked cross-attention, a separate query-to-language
    /// cross-attention, then query-only self-attention.
    Separate,
    /// Language rows concatenated into the cross-attention keys and into the
    /// self-attention sequence.
    Mixed,
}

/// Mask head topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// All mask embeddings averaged into one prototype applied to the whole
    /// map.
    Global,
    /// One prototype per region window.
    Regional,
}

/// The four architecture rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Naive,
    Rsh,
    RshMmd,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [Self::Naive, Self::Rsh, Self::RshMmd, Self::Full];

    pub fn switches(self) -> (QueryInit, DecoderKind, HeadKind) {
        match self {
            Self::Naive => (QueryInit::Learned, DecoderKind::Separate, HeadKind::Global),
            Self::Rsh => (QueryInit::Learned, DecoderKind::Separate, HeadKind::Regional),
            Self::RshMmd => (QueryInit::Learned, DecoderKind::Mixed, HeadKind::Regional),
            Self::Full => (QueryInit::Generated, DecoderKind::Mixed, HeadKind::Regional),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::Rsh => "rsh",
            Self::RshMmd => "rsh_mmd",
            Self::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "rsh" => Ok(Self::Rsh),
            "rsh_mmd" => Ok(Self::RshMmd),
            "full" => Ok(Self::Full),
            other => Err(invalid_arg!("unknown variant {:?}", other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side in pixels; must be divisible by 32.
    pub image_size: usize,
    /// Shared decoder width C.
    pub channels: usize,
    /// Language encoder width C_L.
    pub lang_channels: usize,
    /// Regions at the first decoded level; a perfect square.
    pub initial_regions: usize,
    /// Decoder layers (one per pyramid level, finest levels last), 1..=3.
    pub decoder_layers: usize,
    /// Decoder blocks per layer.
    pub blocks_per_layer: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `channels`.
    pub ffn_mult: usize,
    /// Hidden width of the two-hidden-layer no-target MLP.
    pub nt_hidden: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    /// Learned positional embeddings in the text encoder.
    pub text_positions: bool,
    pub query_init: QueryInit,
    pub decoder: DecoderKind,
    pub head: HeadKind,
    /// Mask-loss supervision depth (last X layers), >= 1.
    pub main_depth: usize,
    /// No-target branch supervision depth (last X layers); 0 removes it.
    pub nt_depth: usize,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_eps: f64,
    pub nt_weight: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            channels: 64,
            lang_channels: 64,
            initial_regions: 4,
            decoder_layers: 3,
            blocks_per_layer: 3,
            heads: 1,
            ffn_mult: 2,
            nt_hidden: 32,
            vocab_size: crate::synth::VOCAB.len(),
            max_tokens: 16,
            text_positions: true,
            query_init: QueryInit::Generated,
            decoder: DecoderKind::Mixed,
            head: HeadKind::Regional,
            main_depth: 3,
            nt_depth: 3,
            ce_weight: 1.0,
            dice_weight: 1.0,
            dice_eps: 1.0,
            nt_weight: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Applies the switches of an ablation row.
    pub fn with_variant(mut self, variant: AblationVariant) -> Self {
        let (q, d, h) = variant.switches();
        self.query_init = q;
        self.decoder = d;
        self.head = h;
        self
    }

    pub fn variant(&self) -> Option<AblationVariant> {
        AblationVariant::ALL.into_iter().find(|v| v.switches() == (self.query_init, self.decoder, self.head))
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(invalid_arg!("image_size {} is not a positive multiple of 32", self.image_size));
        }
        if crate::geometry::exact_sqrt(self.initial_regions).is_none() || self.initial_regions == 0 {
            return Err(invalid_arg!("initial_regions {} is not a perfect square", self.initial_regions));
        }
        if !(1..=3).contains(&self.decoder_layers) {
            return Err(invalid_arg!("decoder_layers must be 1..=3, got {}", self.decoder_layers));
        }
        if self.blocks_per_layer == 0 {
            return Err(invalid_arg!("blocks_per_layer must be >= 1"));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(invalid_arg!("heads {} must divide channels {}", self.heads, self.channels));
        }
        if self.channels < 2 || self.lang_channels == 0 || self.ffn_mult == 0 || self.nt_hidden == 0 {
            return Err(invalid_arg!("layer widths must be positive (channels >= 2)"));
        }
        if self.vocab_size < 2 || self.max_tokens == 0 {
            return Err(invalid_arg!("vocabulary and token limit must be positive"));
        }
        if self.main_depth == 0 || self.main_depth > self.decoder_layers {
            return Err(invalid_arg!("main_depth must be 1..={}", self.decoder_layers));
        }
        if self.nt_depth > self.decoder_layers {
            return Err(invalid_arg!("nt_depth must be 0..={}", self.decoder_layers));
        }
        for (name, w) in [
            ("ce_weight", self.ce_weight),
            ("dice_weight", self.dice_weight),
            ("nt_weight", self.nt_weight),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(invalid_arg!("{} must be a finite non-negative weight", name));
            }
        }
        if !(self.dice_eps > 0.0) {
            return Err(invalid_arg!("dice_eps must be positive"));
        }
        Ok(())
    }

    /// Spatial side of pyramid level `k` (0 = stride 32, 2 = stride 8).
    pub fn level_side(&self, level: usize) -> usize {
        self.image_size / (32 >> level)
    }

    /// Pyramid level decoded by decoder layer `layer`: the finest
    /// `decoder_layers` levels, coarse to fine.
    pub fn layer_level(&self, layer: usize) -> usize {
        3 - self.decoder_layers + layer
    }

    /// Region count at decoder layer `layer`.
    pub fn layer_regions(&self, layer: usize) -> usize {
        self.initial_regions * 4usize.pow(layer as u32)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.channels * self.ffn_mult
    }

    /// Whether layer `layer` receives mask supervision.
    pub fn main_supervised(&self, layer: usize) -> bool {
        layer + self.main_depth >= self.decoder_layers
    }

    /// Whether layer `layer` carries a no-target head.
    pub fn nt_supervised(&self, layer: usize) -> bool {
        layer + self.nt_depth >= self.decoder_layers
    }
}
