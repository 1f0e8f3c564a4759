//! Iterative retrieval-augmented line completion over a repository.
//!
//! The pipeline per task: chunk the repository into a token-set index, build a
//! retrieval target from the unfinished code, rank chunks by Jaccard
//! similarity, prompt an actor model to complete the line, score the result
//! (exact match and edit similarity), have a reflector model critique it, and
//! stack its suggested code lines onto the next retrieval target. Iteration
//! history lives in an experience cache that the final answer is chosen from.
//!
//! Everything except the HTTP backend is deterministic and offline: scripted
//! and oracle mock backends make the whole loop testable without a model.

pub mod actor;
pub mod bench;
pub mod corpus_index;
pub mod experience;
pub mod gateway;
pub mod loop_controller;
pub mod metrics;
pub mod reflector;
pub mod retriever;

pub use bench::CompletionTask;
pub use corpus_index::{Chunk, CorpusIndex, IndexParams, SourceFile};
pub use experience::{ExperienceCache, IterationRecord};
pub use gateway::{Backend, BackendConfig, GenRequest, GenResponse};
pub use loop_controller::{LoopConfig, LoopMode, LoopResult, StopReason};
pub use metrics::EvalResult;
pub use reflector::Feedback;
pub use retriever::{RetrievalTarget, RetrievedSnippet};
