//! Streaming screening for signs of cognitive decline in dialogue.
//!
//! A closed dialogue session is turned into 22 base features, expanded
//! against the user's history into 110 slots, filtered by a streaming
//! selector and fed to an incremental classifier under prequential
//! evaluation. Predictions come with a short deviation-based explanation.

pub mod explain;
pub mod extraction;
pub mod features;
pub mod learners;
pub mod pipeline;
pub mod selection;
pub mod stats;
pub mod synthdata;
