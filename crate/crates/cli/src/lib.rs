//! Shared pieces of the `spiralscreen` binary: the prediction response
//! builder and the HTTP router.

pub mod api;
pub mod server;
