//! Double-blind annotation service.

pub mod api;
pub mod model;
pub mod store;

pub use api::{router, serve, AppState};
pub use store::Store;
