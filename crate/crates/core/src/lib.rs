//! Multi-resolution origin-destination flow cube.
//!
//! The pipeline turns per-user geolocated events into movements, aggregates
//! them over a hierarchy of uniform grids, keeps locally significant nodes,
//! filters edges through per-level Bloom filters and packs the result into a
//! snapshot that answers bounding-box queries.

pub mod aggregate;
pub mod cube;
pub mod error;
pub mod filter;
pub mod ingest;
pub mod model;
pub mod mr;
pub mod partition;
pub mod pipeline;
pub mod querygen;
pub mod records;
pub mod registry;
pub mod routing;
pub mod summarize;
pub mod synth;

pub use error::{Error, Result};
pub use model::{great_circle_km, CellId, GeoPoint, GridConfig, GridHierarchy, MovementRecord, Region};
