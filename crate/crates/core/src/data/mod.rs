//! Synthetic corpus generation, vocabulary, file formats and batching.

pub mod batch;
pub mod io;
pub mod vocab;
pub mod world;

pub use batch::{encode_examples, hardest_mismatch, make_batches, Batch, BatchMode, BatchStream, Example, StreamState};
pub use io::{read_corpus, write_corpus};
pub use vocab::Vocab;
pub use world::{caption_slots, generate_world, Corpus, Qa, RegionRecord, Scene, WorldConfig};
