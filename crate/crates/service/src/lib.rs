//! HTTP/JSON service for live annotation sessions.
//!
//! Each session holds a dataset, its neighbor graph and a spreading state
//! that changes only through logged annotation events. Reads see the state
//! between annotations; one annotation per session is applied at a time and
//! a concurrent one is refused with 409 so the client can retry.

pub mod api;
pub mod config;
pub mod error;
pub mod store;

pub use api::{router, AppState};
pub use config::ServiceConfig;
pub use store::SessionStore;
