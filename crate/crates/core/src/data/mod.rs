//! Synthetic shapes corpus, caption vocabulary and TSV corpus loading.

mod corpus;
pub mod scene;
pub mod vocab;

pub use corpus::{
    load_corpus, parse_captions_tsv, resize_center_crop, Corpus, CorpusManifest, CAPTIONS_FILE, IMAGE_DIR,
    MANIFEST_FILE, VOCAB_FILE,
};
pub use scene::{gen_sample, grammar_words, SceneSpec};
pub use vocab::Vocab;

/// Vocabulary of the built-in caption grammar.
pub fn build_vocab() -> Vocab {
    Vocab::from_words(grammar_words())
}
