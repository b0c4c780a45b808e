use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Which decoder branches are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    UnetOnly,
    AdtdOnly,
    Dual,
}

impl DecoderMode {
    pub fn has_unet(self) -> bool {
        matches!(self, DecoderMode::UnetOnly | DecoderMode::Dual)
    }

    pub fn has_adtd(self) -> bool {
        matches!(self, DecoderMode::AdtdOnly | DecoderMode::Dual)
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderMode::UnetOnly => "unet_only",
            DecoderMode::AdtdOnly => "adtd_only",
            DecoderMode::Dual => "dual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet_only" => Ok(DecoderMode::UnetOnly),
            "adtd_only" => Ok(DecoderMode::AdtdOnly),
            "dual" => Ok(DecoderMode::Dual),
            other => Err(config_err(format!("unknown decoder mode `{other}` (expected unet_only, adtd_only or dual)"))),
        }
    }
}

/// Architecture of the conditional noise predictor and its LR encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnpConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub middle_res_blocks: usize,
    pub kernel_size: usize,
    pub time_embed_dim: usize,
    pub adtb_heads: usize,
    pub adtb_per_level: usize,
    pub ff_expansion: usize,
    pub fi_reduction: usize,
    pub norm_groups: usize,
    pub decoder: DecoderMode,
    pub fi_enabled: bool,
    /// Token count above which ADTB attention is restricted to windows.
    pub attn_full_max_tokens: usize,
    pub attn_window: usize,
    pub lr_depth: usize,
    pub lr_growth: usize,
}

impl Default for CnpConfig {
    fn default() -> Self {
        Self::with_base(64)
    }
}

impl CnpConfig {
    /// Default layout at the given base width.
    pub fn with_base(base: usize) -> Self {
        Self {
            image_channels: 3,
            base_channels: base,
            channel_mults: vec![1, 2, 4, 8],
            res_blocks_per_level: 2,
            middle_res_blocks: 2,
            kernel_size: 3,
            time_embed_dim: 4 * base,
            adtb_heads: 4,
            adtb_per_level: 1,
            ff_expansion: 4,
            fi_reduction: 4,
            norm_groups: 8,
            decoder: DecoderMode::Dual,
            fi_enabled: true,
            attn_full_max_tokens: 32 * 32,
            attn_window: 8,
            lr_depth: 2,
            lr_growth: (base / 2).max(1),
        }
    }

    pub fn dual_decoder(&self) -> bool {
        self.decoder == DecoderMode::Dual
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    /// Channel width of encoder level `i`.
    pub fn level_channels(&self, i: usize) -> usize {
        self.base_channels * self.channel_mults[i]
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channel_mults.last().map_or(self.base_channels, |m| m * self.base_channels)
    }

    /// Spatial divisor every input side must be a multiple of.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels()
    }

    /// Whether any block consumes the time embedding.
    pub fn uses_time(&self) -> bool {
        let level_blocks = self.res_blocks_per_level > 0 || (self.decoder.has_adtd() && self.adtb_per_level > 0);
        self.middle_res_blocks > 0 || (self.levels() > 0 && level_blocks)
    }

    /// Groups for a group norm over `c` channels.
    pub fn groups_for(&self, c: usize) -> usize {
        gcd(self.norm_groups.max(1), c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_channels == 0 {
            return Err(config_err("image_channels and base_channels must be positive"));
        }
        if self.channel_mults.len() > 4 {
            return Err(config_err(format!("at most 4 contracting levels, got {}", self.channel_mults.len())));
        }
        if self.channel_mults.iter().any(|&m| m == 0) {
            return Err(config_err("channel multipliers must be positive"));
        }
        if self.channel_mults.first().is_some_and(|&m| m != 1) {
            return Err(config_err("the first level must keep base_channels so LR features can be fused"));
        }
        if self.levels() > 0 && self.res_blocks_per_level == 0 {
            return Err(config_err("each contracting level needs at least one residual block"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(config_err(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.base_channels % 2 != 0 {
            return Err(config_err(format!("time embedding needs an even dim, base_channels is {}", self.base_channels)));
        }
        if self.time_embed_dim == 0 {
            return Err(config_err("time_embed_dim must be positive"));
        }
        if self.adtb_heads == 0 || self.base_channels % self.adtb_heads != 0 {
            return Err(config_err(format!("base_channels {} not divisible by adtb_heads {}", self.base_channels, self.adtb_heads)));
        }
        if !self.dual_decoder() && self.fi_enabled {
            return Err(config_err("feature integration requires the dual decoder"));
        }
        if self.ff_expansion == 0 || self.fi_reduction == 0 || self.norm_groups == 0 {
            return Err(config_err("ff_expansion, fi_reduction and norm_groups must be positive"));
        }
        if self.attn_window == 0 {
            return Err(config_err("attn_window must be positive"));
        }
        if self.lr_growth == 0 {
            return Err(config_err("lr_growth must be positive"));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = CnpConfig::default();
        c.validate().unwrap();
        assert_eq!(c.time_embed_dim, 256);
        assert_eq!(c.spatial_divisor(), 16);
        assert_eq!(c.bottleneck_channels(), 512);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = CnpConfig::with_base(8);
        c.adtb_heads = 3;
        assert!(c.validate().is_err());
        let mut c = CnpConfig::with_base(8);
        c.decoder = DecoderMode::UnetOnly;
        assert!(c.validate().is_err());
        c.fi_enabled = false;
        c.validate().unwrap();
        let mut c = CnpConfig::with_base(8);
        c.kernel_size = 2;
        assert!(c.validate().is_err());
        let mut c = CnpConfig::with_base(8);
        c.channel_mults = vec![2, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn decoder_mode_names_round_trip() {
        for m in [DecoderMode::UnetOnly, DecoderMode::AdtdOnly, DecoderMode::Dual] {
            assert_eq!(DecoderMode::parse(m.name()).unwrap(), m);
        }
        assert!(DecoderMode::parse("both").is_err());
    }
}
