//! Synthetic recall tasks, byte-level corpora and their evaluation.

mod corpus;
mod eval;
mod instance;
mod recall;
mod vocab;

pub use corpus::{corpus_windows, synthetic_corpus, CorpusWindows, BYTE_VOCAB};
pub use eval::{
    count_query_hits, eval_nll_at_length, eval_query_accuracy, token_nll, AccuracyCount, Predictor,
    UniformPredictor,
};
pub use instance::{read_jsonl, write_jsonl, TaskInstance, TaskMeta};
pub use recall::{gen_mqar, gen_mqrar, mqrar_from_pairs, pad_with_filler, RecallTask};
pub use vocab::Vocab;
