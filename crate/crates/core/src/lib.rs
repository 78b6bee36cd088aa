//! Power-minimal UAV base-station deployment planning.
//!
//! The pipeline predicts next-day hourly traffic per base station with a
//! small backpropagation network ([`predictor`]), partitions stations into
//! aerial cells with K-means-seeded EM on a Gaussian mixture ([`clustering`]),
//! puts one UAV above the demand-weighted centroid of each cell
//! ([`placement`]) and computes the minimum total uplink transmit power under
//! RSMA, FDMA and TDMA ([`access`]) over the air-to-ground link model in
//! [`channel`]. [`data`] handles CSV ingestion and synthetic scenarios;
//! [`cli`] wires everything into the `skyplan` binary.

pub mod access;
pub mod channel;
pub mod cli;
pub mod clustering;
pub mod data;
pub mod error;
pub mod placement;
pub mod predictor;

pub use error::{Error, Result};
