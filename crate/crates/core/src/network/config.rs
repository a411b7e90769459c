use serde::{Deserialize, Serialize};

use crate::error::{HfnError, Result};

/// Architecture schedule shared by all three encoder branches and the decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of encoder stages (and decoder integration modules).
    pub stages: usize,
    pub blocks_per_stage: Vec<usize>,
    /// Image-branch channels per stage; hint branches use half.
    pub channels_per_stage: Vec<usize>,
    /// Stem downsampling factor: 1 (stride-1 conv), 2 (stride-2 conv) or 4
    /// (stride-2 conv followed by stride-2 max pool).
    pub stem_downsample: usize,
    /// Bottleneck ratio of the guidance unit's fully connected pair.
    pub gcu_reduction: usize,
    #[serde(default = "default_crpu_chain")]
    pub crpu_chain_length: usize,
    /// Inputs are reflect-padded to a multiple of this before the forward pass.
    pub input_pad_multiple: usize,
    /// Decoder built from full integration modules (guidance, fusion and
    /// chained pooling); `false` keeps only the fusion skips.
    #[serde(default = "default_true")]
    pub use_him: bool,
}

fn default_crpu_chain() -> usize {
    4
}

fn default_true() -> bool {
    true
}

/// Kernel of the guidance unit's spatial-attention convolution.
pub const GCU_SPATIAL_KERNEL: usize = 7;
/// Window of the stride-1 pooling in the chained residual pooling unit.
pub const CRPU_POOL: usize = 5;

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::tiny()
    }
}

impl NetworkConfig {
    /// Desk-scale default: four single-block stages, 8/16/32/64 channels.
    pub fn tiny() -> Self {
        NetworkConfig {
            stages: 4,
            blocks_per_stage: vec![1, 1, 1, 1],
            channels_per_stage: vec![8, 16, 32, 64],
            stem_downsample: 4,
            gcu_reduction: 4,
            crpu_chain_length: 4,
            input_pad_multiple: 32,
            use_him: true,
        }
    }

    /// Full-scale stage schedule (3, 4, 23, 3 blocks).
    pub fn full_scale() -> Self {
        NetworkConfig {
            stages: 4,
            blocks_per_stage: vec![3, 4, 23, 3],
            channels_per_stage: vec![256, 512, 1024, 2048],
            stem_downsample: 4,
            gcu_reduction: 16,
            crpu_chain_length: 4,
            input_pad_multiple: 32,
            use_him: true,
        }
    }

    /// Two stages of four channels; small enough for exhaustive finite differences.
    pub fn gradient_check() -> Self {
        NetworkConfig {
            stages: 2,
            blocks_per_stage: vec![1, 1],
            channels_per_stage: vec![4, 4],
            stem_downsample: 4,
            gcu_reduction: 4,
            crpu_chain_length: 4,
            input_pad_multiple: 8,
            use_him: true,
        }
    }

    pub fn without_him(mut self) -> Self {
        self.use_him = false;
        self
    }

    /// Total downsampling between the input and the deepest stage.
    pub fn total_stride(&self) -> usize {
        self.stem_downsample << self.stages.saturating_sub(1)
    }

    pub fn hint_channels(&self, stage: usize) -> usize {
        self.channels_per_stage[stage].div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HfnError::InvalidConfig(m));
        if self.stages == 0 {
            return bad("stages must be at least 1".into());
        }
        if self.blocks_per_stage.len() != self.stages || self.channels_per_stage.len() != self.stages {
            return bad(format!(
                "stages = {} but {} block counts and {} channel counts given",
                self.stages,
                self.blocks_per_stage.len(),
                self.channels_per_stage.len()
            ));
        }
        if self.channels_per_stage.contains(&0) {
            return bad("channels must be strictly positive".into());
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if ![1, 2, 4].contains(&self.stem_downsample) {
            return bad(format!("stem_downsample must be 1, 2 or 4, got {}", self.stem_downsample));
        }
        if self.gcu_reduction == 0 {
            return bad("gcu_reduction must be at least 1".into());
        }
        if self.crpu_chain_length == 0 {
            return bad("crpu_chain_length must be at least 1".into());
        }
        if self.input_pad_multiple == 0 || !self.input_pad_multiple.is_multiple_of(self.total_stride()) {
            return bad(format!(
                "input_pad_multiple {} must be a positive multiple of the total stride {}",
                self.input_pad_multiple,
                self.total_stride()
            ));
        }
        Ok(())
    }

    /// Spatial size of stage `t` (0-based) for a padded input dimension.
    pub fn stage_dim(&self, padded: usize, stage: usize) -> usize {
        padded / (self.stem_downsample << stage)
    }

    pub fn padded_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let m = self.input_pad_multiple;
        (height.div_ceil(m) * m, width.div_ceil(m) * m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        NetworkConfig::tiny().validate().unwrap();
        NetworkConfig::full_scale().validate().unwrap();
        NetworkConfig::gradient_check().validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_lists() {
        let mut c = NetworkConfig::tiny();
        c.channels_per_stage.pop();
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.crpu_chain_length = 0;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.input_pad_multiple = 16;
        assert!(c.validate().is_err());
    }

    #[test]
    fn halving_arithmetic() {
        let c = NetworkConfig::tiny();
        let sizes: Vec<usize> = (0..4).map(|t| c.stage_dim(64, t)).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        assert_eq!(c.padded_dims(70, 90), (96, 96));
    }

    #[test]
    fn json_field_names() {
        let v = serde_json::to_value(NetworkConfig::tiny()).unwrap();
        for k in ["stages", "blocks_per_stage", "channels_per_stage", "stem_downsample", "gcu_reduction", "crpu_chain_length", "input_pad_multiple"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
