use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where channel attention is applied inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CaMode {
    /// No channel attention.
    None,
    /// One gate on the last layer output, statistics from the block input.
    Single,
    /// One shared gate per pair of layers.
    PerPair,
    /// One shared gate after every layer.
    PerLayer,
}

impl CaMode {
    pub const ALL: [CaMode; 4] = [CaMode::None, CaMode::Single, CaMode::PerPair, CaMode::PerLayer];

    pub fn as_str(self) -> &'static str {
        match self {
            CaMode::None => "none",
            CaMode::Single => "single",
            CaMode::PerPair => "perPair",
            CaMode::PerLayer => "perLayer",
        }
    }

    /// Number of gate applications in a block of `depth` layers.
    pub fn applications(self, depth: usize) -> usize {
        match self {
            CaMode::None => 0,
            CaMode::Single => 1,
            CaMode::PerPair => depth / 2,
            CaMode::PerLayer => depth,
        }
    }
}

impl fmt::Display for CaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(CaMode::None),
            "single" => Ok(CaMode::Single),
            "perpair" | "per_pair" | "pair" => Ok(CaMode::PerPair),
            "perlayer" | "per_layer" | "layer" => Ok(CaMode::PerLayer),
            _ => Err(Error::Config(format!("unknown CA mode `{s}` (none, single, perPair, perLayer)"))),
        }
    }
}

/// Complete hyperparameter set of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub depth: usize,
    pub window: usize,
    pub ca_mode: CaMode,
    pub short_skip: bool,
    pub conv_in_block: usize,
    pub conv_in_dfe: usize,
    pub reduction: usize,
    pub unshuffle: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::variant_b()
    }
}

impl ModelConfig {
    fn base(channels: usize, blocks: usize, heads: usize, depth: usize) -> Self {
        ModelConfig {
            channels,
            blocks,
            heads,
            depth,
            window: 8,
            ca_mode: CaMode::PerPair,
            short_skip: false,
            conv_in_block: 1,
            conv_in_dfe: 1,
            reduction: 16,
            unshuffle: 2,
            mlp_ratio: 4,
        }
    }

    pub fn variant_b() -> Self {
        Self::base(72, 2, 6, 6)
    }

    pub fn variant_s() -> Self {
        Self::base(96, 4, 6, 6)
    }

    pub fn variant_l() -> Self {
        Self::base(128, 4, 8, 8)
    }

    /// Small preset for fast local runs.
    pub fn tiny() -> Self {
        ModelConfig {
            window: 4,
            ..Self::base(16, 1, 2, 2)
        }
    }

    /// Preset by name: `B`, `S`, `L` or `tiny` (case-insensitive).
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "b" => Ok(Self::variant_b()),
            "s" => Ok(Self::variant_s()),
            "l" => Ok(Self::variant_l()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown variant `{name}` (B, S, L, tiny)"))),
        }
    }

    /// Halving period of the learning rate for a named preset.
    pub fn preset_halving_period(name: &str) -> Option<u64> {
        match name.to_ascii_lowercase().as_str() {
            "b" | "tiny" => Some(40_000),
            "s" => Some(100_000),
            "l" => Some(200_000),
            _ => None,
        }
    }

    /// Hidden width of the channel-attention squeeze, `floor(C / r)`.
    pub fn ca_hidden(&self) -> usize {
        self.channels / self.reduction
    }

    /// Spatial multiple the input image is padded to.
    pub fn pad_multiple(&self) -> usize {
        self.window * self.unshuffle
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.blocks == 0 || self.depth == 0 {
            return fail(format!(
                "channels, blocks and depth must be positive (C={}, K={}, N={})",
                self.channels, self.blocks, self.depth
            ));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.window == 0 {
            return fail("window size must be at least 1".into());
        }
        if self.ca_mode == CaMode::PerPair && self.depth % 2 != 0 {
            return fail(format!("perPair channel attention needs an even layer count, got N={}", self.depth));
        }
        if self.ca_mode != CaMode::None && (self.reduction == 0 || self.ca_hidden() == 0) {
            return fail(format!(
                "reduction {} leaves no hidden channels for C={}",
                self.reduction, self.channels
            ));
        }
        if self.conv_in_block > 2 {
            return fail(format!("conv_in_block must be 0, 1 or 2, got {}", self.conv_in_block));
        }
        if !(1..=2).contains(&self.conv_in_dfe) {
            return fail(format!("conv_in_dfe must be 1 or 2, got {}", self.conv_in_dfe));
        }
        if self.unshuffle != 2 {
            return fail(format!("only a 2x2 Bayer unshuffle is supported, got {}", self.unshuffle));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines understood by [`ModelConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("channels", self.channels.to_string()),
            ("blocks", self.blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("depth", self.depth.to_string()),
            ("window", self.window.to_string()),
            ("ca_mode", self.ca_mode.to_string()),
            ("short_skip", self.short_skip.to_string()),
            ("conv_in_block", self.conv_in_block.to_string()),
            ("conv_in_dfe", self.conv_in_dfe.to_string()),
            ("reduction", self.reduction.to_string()),
            ("unshuffle", self.unshuffle.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("`{key}` expects a non-negative integer, got `{v}`")))
        };
        match key {
            "channels" => self.channels = num(value)?,
            "blocks" => self.blocks = num(value)?,
            "heads" => self.heads = num(value)?,
            "depth" => self.depth = num(value)?,
            "window" => self.window = num(value)?,
            "ca_mode" => self.ca_mode = value.trim().parse()?,
            "short_skip" => {
                self.short_skip = match value.trim() {
                    "true" | "1" | "on" => true,
                    "false" | "0" | "off" => false,
                    v => return Err(Error::Config(format!("`short_skip` expects a boolean, got `{v}`"))),
                }
            }
            "conv_in_block" => self.conv_in_block = num(value)?,
            "conv_in_dfe" => self.conv_in_dfe = num(value)?,
            "reduction" => self.reduction = num(value)?,
            "unshuffle" => self.unshuffle = num(value)?,
            "mlp_ratio" => self.mlp_ratio = num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
