use std::fmt;
use std::str::FromStr;

use super::{CaMode, ModelConfig};
use crate::error::{Error, Result};

/// Families of architecture variants compared against one reference network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationGrid {
    /// Where channel attention is applied.
    Ca,
    /// Short skip around every layer pair.
    Ssc,
    /// Convolutions at the end of each block and of deep feature extraction.
    Conv,
    /// Attention head count.
    Heads,
}

impl AblationGrid {
    pub const ALL: [AblationGrid; 4] = [AblationGrid::Ca, AblationGrid::Ssc, AblationGrid::Conv, AblationGrid::Heads];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationGrid::Ca => "ca",
            AblationGrid::Ssc => "ssc",
            AblationGrid::Conv => "conv",
            AblationGrid::Heads => "heads",
        }
    }
}

impl fmt::Display for AblationGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationGrid::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation grid `{s}` (ca, ssc, conv, heads)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub config: ModelConfig,
}

/// Reference network of the attention, skip and head studies:
/// C=64, two blocks of six layers, four heads.
pub fn ablation_reference() -> ModelConfig {
    ModelConfig {
        channels: 64,
        heads: 4,
        ..ModelConfig::variant_b()
    }
}

/// Variants of a grid, reference first. The convolution study varies the B preset.
pub fn ablation_variants(grid: AblationGrid) -> Vec<AblationVariant> {
    let r = ablation_reference();
    let v = |name, config| AblationVariant { name, config };
    match grid {
        AblationGrid::Ca => vec![
            v("RSTCANet", r.clone()),
            v("RSTCANet-CA0", ModelConfig { ca_mode: CaMode::None, ..r.clone() }),
            v("RSTCANet-CA1", ModelConfig { ca_mode: CaMode::Single, ..r.clone() }),
            v("RSTCANet-CA6", ModelConfig { ca_mode: CaMode::PerLayer, ..r }),
        ],
        AblationGrid::Ssc => vec![
            v("RSTCANet", r.clone()),
            v("RSTCANet-SSC", ModelConfig { short_skip: true, ..r }),
        ],
        AblationGrid::Heads => vec![
            v("RSTCANet", r.clone()),
            v("RSTCANet-h2", ModelConfig { heads: 2, ..r }),
        ],
        AblationGrid::Conv => {
            let b = ModelConfig::variant_b();
            vec![
                v("RSTCANet-B", b.clone()),
                v("RSTCANet-1", ModelConfig { conv_in_dfe: 2, ..b.clone() }),
                v("RSTCANet-2", ModelConfig { conv_in_block: 2, ..b.clone() }),
                v("RSTCANet-3", ModelConfig { conv_in_block: 0, ..b }),
            ]
        }
    }
}
