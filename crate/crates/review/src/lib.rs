//! Backend for blinded review of generated findings: case bundles with
//! per-reviewer report order, server-rendered slices, and assessment storage.

pub mod assessment;
pub mod auth;
pub mod blinding;
pub mod persist;
pub mod server;
pub mod store;

pub use server::{router, serve, AppState, ReviewConfig};
