use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};

/// Switches for the transformer plumbing around each attention layer. With
/// everything off a block is the bare attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockOptions {
    pub residual: bool,
    pub layer_norm: bool,
    pub feed_forward: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            residual: true,
            layer_norm: true,
            feed_forward: true,
        }
    }
}

impl BlockOptions {
    pub fn bare() -> Self {
        Self {
            residual: false,
            layer_norm: false,
            feed_forward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width; the attention width equals it.
    pub d: usize,
    /// Knowledge-bank rows (Z).
    pub bank_size: usize,
    pub num_heads: usize,
    pub generator_blocks: usize,
    pub guidance_blocks: usize,
    pub task: Task,
    /// Class count for classification; ignored for regression.
    pub num_classes: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ffn_mult: usize,
    pub generator: BlockOptions,
    pub guidance: BlockOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            bank_size: 5,
            num_heads: 8,
            generator_blocks: 2,
            guidance_blocks: 2,
            task: Task::Classification,
            num_classes: 5,
            ffn_mult: 2,
            generator: BlockOptions::default(),
            guidance: BlockOptions::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.bank_size == 0 {
            return Err(Error::config("d and bank_size must be at least 1"));
        }
        if self.num_heads == 0 || !self.d.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "attention width {} is not divisible by {} heads",
                self.d, self.num_heads
            )));
        }
        if self.generator_blocks == 0 {
            return Err(Error::config("the prompt generator needs at least one block"));
        }
        if self.task == Task::Classification && self.num_classes < 2 {
            return Err(Error::config("classification needs at least two classes"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be at least 1"));
        }
        Ok(())
    }

    /// Width of the prediction head's output.
    pub fn num_outputs(&self) -> usize {
        match self.task {
            Task::Classification => self.num_classes,
            Task::Regression => 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.num_heads
    }
}
