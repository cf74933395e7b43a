//! Simulation of a DC microgrid with consensus-based current sharing,
//! watermarked neighbour-to-neighbour links, replay attacks on those links,
//! and unknown-input-observer attack detection.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`). The
//! `*64`/`*32` aliases below pin the common types to a concrete scalar.
//! Scenario files, run artifacts and the [`analysis`] module work in `f64`.
//!
//! ```no_run
//! use dcmg::{engine, scenario::{bundled, Scenario}};
//!
//! let sc = Scenario::from_json(bundled::PAPER_FIG2).unwrap();
//! let run = engine::run::<f64>(&sc).unwrap();
//! for alarm in &run.summary.alarms {
//!     println!("{} -> {} at {:.4} s", alarm.from, alarm.to, alarm.t);
//! }
//! ```

// `!(x > 0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod comm;
pub mod control;
pub mod engine;
pub mod error;
pub mod export;
pub mod grid;
pub mod num;
pub mod scenario;
pub mod stability;
pub mod uio;

pub use error::{Error, Result};
pub use num::Real;

pub type DguParams64 = grid::DguParams<f64>;
pub type DguState64 = grid::DguState<f64>;
pub type Topology64 = grid::MicrogridTopology<f64>;
pub type NoiseBounds64 = grid::NoiseBounds<f64>;
pub type Watermark64 = comm::WatermarkConfig<f64>;
pub type UioBundle64 = uio::UioBundle<f64>;
pub type Detector64 = uio::Detector<f64>;
pub type Model64 = scenario::Model<f64>;

pub type DguParams32 = grid::DguParams<f32>;
pub type DguState32 = grid::DguState<f32>;
pub type Topology32 = grid::MicrogridTopology<f32>;
pub type NoiseBounds32 = grid::NoiseBounds<f32>;
pub type Watermark32 = comm::WatermarkConfig<f32>;
pub type UioBundle32 = uio::UioBundle<f32>;
pub type Detector32 = uio::Detector<f32>;
pub type Model32 = scenario::Model<f32>;
