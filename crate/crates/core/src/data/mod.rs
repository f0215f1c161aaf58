//! Vocabulary, corpora, batching and the synthetic restaurant domain.

pub mod batch;
pub mod corpus;
pub mod embeddings;
pub mod toy;
pub mod vocab;

pub use batch::{build_examples, make_batches, shift_right, Batch, Example, Padded};
pub use corpus::{build_vocab, load_corpus, Corpus, Dialogue, Turn};
pub use embeddings::{load_embeddings, parse_embeddings, PretrainedEmbeddings};
pub use toy::{generate_copy_ablation, generate_toy_corpus, CopyAblationSplit, ToyDomain};
pub use vocab::{TokenId, Vocab};
