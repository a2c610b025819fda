//! Platform description, node inventory, resource sets and scheduling.
//!
//! The flow is: [`detect_platform`] and [`detect_nodes`] describe the
//! machine, [`build_resource_sets`] partitions it into equal per-worker
//! slots, and a [`ResourcePool`] hands out [`Assignment`]s for individual
//! CPU/GPU requests.

mod nodes;
mod platform;
mod pool;

use thiserror::Error;

pub use nodes::{
    detect_nodes, parse_inventory, parse_nodelist, read_inventory_file, Node, NodeInventory,
};
pub use platform::{
    detect_platform, known_platform, GpuSettingType, MpiRunner, PlatformOverrides, PlatformSpec,
    KNOWN_PLATFORMS, PLATFORM_ENV_VAR,
};
pub use pool::{
    build_resource_sets, Assignment, NodeAssignment, ResourcePool, ResourceRequest,
    ResourceSet, ScheduleOptions, SetsOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResourceError {
    #[error("invalid platform settings: {0}")]
    InvalidPlatform(String),
    #[error("unknown platform {name:?} (known: {known})")]
    UnknownPlatform { name: String, known: String },
    #[error("malformed node list {input:?}: {msg}")]
    NodeList { input: String, msg: String },
    #[error("inventory line {line}: {msg}")]
    Inventory { line: usize, msg: String },
    #[error("cannot partition resources evenly: {0}")]
    UnevenPartition(String),
    #[error("invalid resource request: {0}")]
    InvalidRequest(String),
    /// Not enough free resource sets right now. `ever` tells whether the
    /// request could fit on an idle machine.
    #[error("insufficient free resources (satisfiable when idle: {ever})")]
    Insufficient { ever: bool },
    #[error("assignment {0} is not live (double release?)")]
    NotLive(u64),
    #[error("io error: {0}")]
    Io(String),
}
