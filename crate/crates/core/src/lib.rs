//! Split a single-screen HTML application into a master/slave pair and keep
//! the two halves consistent at runtime.

pub mod annotation;
pub mod dom;
pub mod mapping;
pub mod protocol;
pub mod splitter;
pub mod sync_hub;
