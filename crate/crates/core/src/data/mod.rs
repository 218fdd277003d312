//! Embedding datasets: the on-disk format, the synthetic benchmark and the
//! episode samplers.

mod format;
mod import;
mod record;
mod sampler;
mod synth;

pub use format::{
    decode_dataset, decode_header, encode_dataset, read_dataset, record_len, write_dataset,
    HEADER_LEN, MAGIC,
};
pub use import::import_manifest;
pub use record::{
    Dataset, DatasetHeader, EmbeddingRecord, Label, Storage, Task, UnlabeledView, FORMAT_VERSION,
};
pub use sampler::{
    build_contrastive_batch, fit_split, pick_domain, sample_episode, Domain, DomainPool,
    DomainSampling, Episode, RecordRef,
};
pub use synth::{
    bayes_oracle, oracle_accuracy, synth_generate, DomainTransform, GenerativeParams,
    SyntheticBenchmark, SyntheticConfig,
};

pub(crate) use format::checksum4;
