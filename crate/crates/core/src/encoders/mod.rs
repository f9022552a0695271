//! Toy text and image towers with deep prompt injection.
//!
//! Both towers are frozen. Trainable state lives in [`PromptState`]: global
//! text prompts, low-scale visual prompts and the prompt generator.

mod image;
mod prompts;
mod text;
pub mod transformer;
mod vlm;

pub use image::{BoundImage, ImageEncoder};
pub use prompts::{generate_low_prompts, stack_traces, GeneratorKeys, PromptGenerator, PromptState};
pub use text::{BoundText, FrozenText, PromptedText, SlotLayout, TextEncoder};
pub use transformer::{block_forward, BlockWeights, BoundTower, Tower};
pub use vlm::{Lexicon, ToyVlm};

pub use crate::cache::{load_cached_embeddings, EmbeddingProvider};

use crate::tape::Mat;

/// [EOT] vector after each text layer of a frozen pass: `L × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTokenTrace(pub Mat);

impl LayerTokenTrace {
    pub fn depth(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }
}
