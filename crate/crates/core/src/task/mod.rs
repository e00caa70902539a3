//! The synthetic few-shot manipulation world.

mod codec;
mod episode;
mod image;
mod instruction;
mod rules;
mod split;

pub use codec::{decode_image, encode_image, Codec};
pub use episode::{
    sample_episode, sample_record, Episode, EpisodeRecord, ImageRef, Setting, MAX_DIVERSE_SHOTS,
};
pub use image::{sample_image, ContentFamily, Image, CHANNELS};
pub use instruction::{descriptor, embed_instruction, InstructionDetail, InstructionEmbedder, DESCRIPTOR_DIM};
pub use rules::{all_bins, apply_rule, BinId, Rule, RuleFamily, PALETTE, PERMUTATIONS};
pub use split::{default_holdout, make_split, Split, SplitSide};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Which guidance modalities the model receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    #[default]
    Both,
    /// Exemplar image tokens are zeroed at the input.
    TextOnly,
    /// The instruction descriptor is zeroed at the input.
    VisualOnly,
}

impl Guidance {
    pub fn name(self) -> &'static str {
        match self {
            Guidance::Both => "both",
            Guidance::TextOnly => "text_only",
            Guidance::VisualOnly => "visual_only",
        }
    }
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Guidance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Guidance::Both, Guidance::TextOnly, Guidance::VisualOnly]
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown guidance `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub grid: usize,
    pub patch: usize,
    pub codec_seed: u64,
    pub embedder_seed: u64,
    pub phi_dim: usize,
    pub holdout: Vec<BinId>,
    /// Settings training episodes are drawn from, uniformly per episode.
    pub train_settings: Vec<Setting>,
    pub guidance: Guidance,
    /// How much of the rule the instruction states.
    pub instruction: InstructionDetail,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            grid: 8,
            patch: 2,
            codec_seed: 7,
            embedder_seed: 11,
            phi_dim: 16,
            holdout: default_holdout().into_iter().collect(),
            train_settings: vec![Setting::InDist, Setting::OutDist],
            guidance: Guidance::Both,
            instruction: InstructionDetail::Full,
        }
    }
}

/// The frozen components derived from a [`TaskConfig`].
#[derive(Clone, Debug)]
pub struct TaskWorld {
    pub config: TaskConfig,
    pub codec: Codec,
    pub embedder: InstructionEmbedder,
    pub split: Split,
}

impl TaskWorld {
    pub fn new(config: &TaskConfig) -> Result<Self> {
        Ok(TaskWorld {
            codec: Codec::new(config.grid, config.patch, config.codec_seed)?,
            embedder: InstructionEmbedder::new(config.phi_dim, config.embedder_seed).with_detail(config.instruction),
            split: make_split(&config.holdout.iter().copied().collect())?,
            config: config.clone(),
        })
    }

    pub fn episode(&self, side: SplitSide, setting: Setting, k: usize, seed: u64) -> Result<Episode> {
        sample_episode(&self.split, side, setting, k, seed, self.config.grid)
    }
}
