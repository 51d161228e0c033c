//! HTTP service around the screening pipeline: session capture, an
//! event-sourced log and the endpoints the dashboard reads.

pub mod config;
pub mod engine;
pub mod events;
pub mod http;
pub mod live;
pub mod transport;
