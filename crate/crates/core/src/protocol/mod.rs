//! The client/server boundary: serialized messages, the data-owning
//! client, the platform server running the online loop, and a privacy
//! audit over transcripts.

mod audit;
mod client;
mod message;
mod server;

pub use audit::{audit_privacy, AuditReport, Violation};
pub use client::{Client, ExtractionHandle};
pub use message::{
    arrays_to_params, params_to_arrays, ArraySchema, Message, NamedArray, Payload, TaggedArray, Transcript,
    TrialResult, UploadPurpose,
};
pub use server::{
    expected_kinds, ranking_ndcg, sample_pool, select_top_b, MethodFlags, ServerSettings, ServerState, TaskOutcome,
};
