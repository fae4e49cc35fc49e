//! Method-4 smoothed BLEU and the baseline-vs-multitask comparison table.

mod bleu;
mod report;

pub use bleu::{
    brevity_penalty, corpus_bleu, ngram_precisions, score_corpus, sentence_bleu, smooth_method4, BleuConfig,
    BleuReport, CorpusMode, NgramPrecisionSet,
};
pub use report::{compare_report, relative_improvement, ComparisonReport, ComparisonRow};
