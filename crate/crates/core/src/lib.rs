//! Locally differentially private frequency estimation over large domains.
//!
//! The two-phase protocol first lets a sample of clients report through the
//! count-mean sketch mechanism; the server trains a gradient-boosted model on
//! the resulting estimates and publishes it with a frequency boundary. The
//! remaining clients classify their own item with the model: high-frequent
//! items are sent as perturbed all-`-1` dummies, low-frequent items as
//! perturbed one-hot vectors. High-frequent items are then answered by the
//! model and low-frequent ones by the sketch, with a correction for the dummy
//! mass.
//!
//! Modules, bottom-up: [`hashing`], [`sketch`], [`client`], [`model`],
//! [`server`], [`protocol`].

pub mod client;
pub mod error;
pub mod hashing;
pub mod model;
pub mod protocol;
pub mod server;
pub mod sketch;

pub use client::{derive_privacy, PrivacyParams, Report, SignVector};
pub use error::{Error, ErrorKind, Result};
pub use hashing::{HashFamily, ItemKey};
pub use model::{Boundary, FrequencyModel, FrequencyOracle, Hyperparams};
pub use server::{estimate_cms, estimate_ldplcm, Branch, Estimate};
pub use sketch::{AggregateSketch, CountMinSketch, CountSketch};
