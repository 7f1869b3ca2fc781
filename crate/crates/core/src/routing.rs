//! Shuffle routing: which reducer receives a grid cell's records.

use std::sync::Arc;

use crate::model::{CellId, GridHierarchy};
use crate::partition::RectIndex;
use crate::registry::Registry;

pub trait CellRouter: Send + Sync {
    fn name(&self) -> &'static str;

    fn partitions(&self) -> usize;

    fn route(&self, cell: CellId) -> usize;
}

#[derive(Clone)]
pub struct RoutingContext {
    pub grid: Arc<GridHierarchy>,
    pub index: Arc<RectIndex>,
}

/// Sends a cell to the partition rectangle containing its center.
pub struct SpatialRouter {
    ctx: RoutingContext,
}

impl SpatialRouter {
    pub fn new(ctx: RoutingContext) -> Self {
        SpatialRouter { ctx }
    }
}

impl CellRouter for SpatialRouter {
    fn name(&self) -> &'static str {
        "spatial"
    }

    fn partitions(&self) -> usize {
        self.ctx.index.len()
    }

    fn route(&self, cell: CellId) -> usize {
        // cell ids and centers produced by the grid are always in-region
        let center = self.ctx.grid.cell_center(cell).expect("valid cell");
        self.ctx.index.locate(center).expect("cell center inside region")
    }
}

/// Hash-mod routing, the stock MapReduce default. Ignores geography.
pub struct HashRouter {
    partitions: usize,
}

impl HashRouter {
    pub fn new(partitions: usize) -> Self {
        HashRouter { partitions: partitions.max(1) }
    }
}

impl CellRouter for HashRouter {
    fn name(&self) -> &'static str {
        "hash"
    }

    fn partitions(&self) -> usize {
        self.partitions
    }

    fn route(&self, cell: CellId) -> usize {
        let mut bytes = [0u8; 12];
        bytes[..4].copy_from_slice(&cell.level.to_le_bytes());
        bytes[4..].copy_from_slice(&cell.index.to_le_bytes());
        (xxhash_rust::xxh3::xxh3_64(&bytes) % self.partitions as u64) as usize
    }
}

pub static CELL_ROUTERS: Registry<dyn CellRouter, RoutingContext> = Registry::new(
    "routing",
    &[
        ("spatial", |ctx| Box::new(SpatialRouter::new(ctx.clone()))),
        ("hash", |ctx| Box::new(HashRouter::new(ctx.index.len()))),
    ],
);
