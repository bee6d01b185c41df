//! Fault-tolerant allreduce on 2-D meshes.
//!
//! Builds ring schedules for healthy meshes and for meshes with one
//! rectangular block of failed chips, executes them step by step against a
//! brute-force oracle, and prices them with an alpha-beta link model.
//!
//! ```
//! use meshreduce::{collective_engine, ring_builder, topology};
//!
//! let region = topology::FailedRegion::new(topology::Coord::new(2, 2), 2, 2);
//! let mesh = topology::build_mesh(topology::MeshConfig::new(8, 8), vec![region]).unwrap();
//! let schedule = ring_builder::build_row_pair_ft(&mesh).unwrap();
//! let payloads = vec![vec![1i64; 16]; mesh.alive_count()];
//! let (out, _trace) = collective_engine::execute(&mesh, &schedule, &payloads, 4).unwrap();
//! assert!(out.iter().all(|p| p.iter().all(|&v| v == 60)));
//! ```

pub mod cli;
pub mod collective_engine;
pub mod cost_model;
pub mod ring_builder;
pub mod routing;
pub mod topology;

pub use collective_engine::{execute, oracle_allreduce, ExecutionTrace};
pub use cost_model::{account_traffic, compare_overhead, estimate_time, CostParams};
pub use ring_builder::{Schedule, Scheme};
pub use routing::{check_cycle_free, route_around, Route};
pub use topology::{build_mesh, Coord, FailedRegion, Mesh, MeshConfig};
