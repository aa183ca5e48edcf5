//! Corpus and embedding file I/O.

pub mod corpus;
pub mod emb;
pub mod store;

pub use corpus::{load_corpus, parse_corpus, write_corpus, LoadedCorpus};
pub use emb::{read_embeddings, write_embeddings};
pub use store::{default_emb_dir, EmbeddingStore};
