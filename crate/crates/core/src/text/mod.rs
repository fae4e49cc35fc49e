//! Vocabulary, corpus ingestion and splitting, and padded batching.

mod batch;
mod corpus;
mod vocab;

pub use batch::{
    batch_order, encode_lines, encode_pairs, frame_source, frame_target, make_monolingual_batches,
    make_parallel_batches, monolingual_batch, parallel_batch, Batch, ParallelExample, TokenMatrix,
    TokenSequence,
};
pub use corpus::{
    load_monolingual, load_parallel, read_lines, MonolingualCorpus, ParallelCorpus, Split, SplitIndices,
    SplitSizes, TextPair,
};
pub(crate) use vocab::validate_language;
pub use vocab::{
    language_token, normalize, TokenId, TokenizeMode, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID,
    UNK, UNK_ID,
};
