#![allow(dead_code)]

pub mod oracle;

use mapnet::backbone::BackboneConfig;
use mapnet::data::SyntheticSequenceConfig;
use mapnet::model::{MatcherConfig, ModelConfig};

/// 32px template (4x4 grid), 64px search (8x8 grid).
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        d_ff: 32,
        channel_reduction: 4,
        spatial_kernel: 3,
        head_hidden: 16,
        dropout: 0.0,
        template_size: 32,
        search_size: 64,
        matcher: MatcherConfig {
            depth: 1,
            ..MatcherConfig::default()
        },
        backbone: BackboneConfig {
            stage_channels: vec![4, 8, 8],
            output_dim: 16,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn small_sequences(length: usize) -> SyntheticSequenceConfig {
    SyntheticSequenceConfig {
        frame_width: 96,
        frame_height: 96,
        length,
        object_size: [12, 20],
        max_speed: 1.5,
        jitter: 0.3,
        ..SyntheticSequenceConfig::default()
    }
}
