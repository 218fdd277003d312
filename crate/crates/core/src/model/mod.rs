//! The adaptation model: knowledge bank, conditional prompt generator,
//! two-way guidance module and prediction head.

mod checkpoint;
mod config;
mod forward;
mod params;
mod prompt;

pub use checkpoint::{
    check_shapes, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for,
    save_checkpoint, CheckpointMeta,
};
pub use config::{BlockOptions, ModelConfig};
pub use forward::{Forward, GeneratorCache, PreparedPrompt};
pub use params::{parameter_shapes, ModelParameters, BANK, CLS};
pub use prompt::{
    decode_prompt, encode_prompt, export_prompt, generate_prompt, generate_prompt_single,
    guide_and_predict, guide_and_predict_batch, import_prompt, DomainPrompt, Provenance,
};
