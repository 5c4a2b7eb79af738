//! Templated agreement corpus, toy training and accuracy evaluation.

mod template;
mod train;

pub use template::{
    read_corpus, sample_instances, write_corpus, CaseTag, Inflected, Instance, Number, Slot,
    Template, Vocab, CLS, MASK, PAD, SEP, SPECIALS,
};
pub use train::{
    credit, evaluate, qoi_spec, summarize, train, EpochStats, Evaluation, TrainConfig, TrainReport,
};
