//! Persistence and dataset ingestion.

pub(crate) mod bytes;
pub mod camera;
pub mod checkpoint;
pub mod dataset;
pub mod obj;
pub mod toy;
