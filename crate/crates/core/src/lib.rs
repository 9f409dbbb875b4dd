//! Knowledge-graph link prediction: an embedding retriever ranks every
//! entity, then a chat model re-ranks the leading candidates after reading
//! demonstrations drawn from the graph itself.

pub mod demo;
pub mod eval;
pub mod gateway;
pub mod kg;
pub mod prompt;
pub mod retriever;
pub mod seed;
pub mod verbalize;

pub use kg::{load_dataset, Direction, EntityId, KnowledgeGraph, Query, RelationId, Split, Triple};
