//! File formats, dataset ingestion and the `hpn` command line for the
//! hybrid patch-matching network in [`hybridnet_core`].
//!
//! - [`checkpoint`]: versioned network files (`HYBN`).
//! - [`container`]: patch pair containers (`HPMD`).
//! - [`descriptors`]: descriptor matrices (`HDSC`).
//! - [`images`]: PGM decoding, image-pair manifests and lattice extraction.
//! - [`config`]: layered `key = value` run configuration.
//! - [`logs`]: JSON-lines training logs and text evaluation reports.
//! - [`commands`]: the work behind each subcommand.

mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod container;
pub mod descriptors;
pub mod error;
pub mod images;
pub mod logs;

pub use bytes::sha256_hex;
pub use error::{HpnError, Result};
